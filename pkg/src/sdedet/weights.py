"""
Named-tensor weight container and its binary file format.

File layout (all integers little-endian)::

    b"SDEW"                      magic
    u32                          format version (1)
    u64                          spec hash
    u32                          tensor count
    per tensor:
        u16 + bytes              UTF-8 name
        u8                       rank
        rank x u32               extents
        prod(extents) x f32      row-major data
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import WeightFormatError

MAGIC = b"SDEW"
VERSION = 1


@dataclass(eq=False)
class WeightStore(Mapping):
    """Ordered ``name -> float32 array`` map plus provenance metadata."""

    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    spec_hash: int = 0
    seed: Optional[int] = None

    def __post_init__(self):
        self.tensors = OrderedDict(
            (name, np.ascontiguousarray(arr, dtype="<f4")) for name, arr in self.tensors.items()
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def num_elements(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def dumps(store: WeightStore) -> bytes:
    parts = [MAGIC, struct.pack("<IQI", VERSION, store.spec_hash, len(store))]
    for name, arr in store.tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise WeightFormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise WeightFormatError(f"tensor {name} has rank {arr.ndim} > 255")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> WeightStore:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError(f"truncated file while reading {what}: need {n} bytes, "
                                    f"{len(view) - pos} left", offset=pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version, spec_hash, count = struct.unpack("<IQI", take(16, "header"))
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}", offset=4)
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"tensor name is not UTF-8: {exc}", offset=start) from None
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        n = int(np.prod(shape, dtype=np.int64))
        raw = take(4 * n, f"data of {name}")
        if name in tensors:
            raise WeightFormatError(f"duplicate tensor name {name!r}", offset=start)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes after last tensor", offset=pos)
    return WeightStore(tensors, spec_hash=spec_hash)


def save_weights(store: WeightStore, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps(store))


def load_weights(path: Union[str, Path]) -> WeightStore:
    return loads(Path(path).read_bytes())
