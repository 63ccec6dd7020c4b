"""
Image/label datasets, the seeded train/test split, and the six augmentations.

Images are float32 ``[3, H, W]`` arrays in [0, 1]. Labels are YOLO rows
``(class, cx, cy, w, h)`` with normalized coordinates. Coordinates are kept
on a 1e-9 grid so the flips ``cx -> 1 - cx`` and ``cy -> 1 - cy`` are exact
involutions in floating point.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import DatasetError

Label = Tuple[int, float, float, float, float]
PathLike = Union[str, Path]

KINDS = ("original", "brightness", "contrast", "denoise", "grayscale", "hflip", "vflip")
PHOTOMETRIC = ("brightness", "contrast", "denoise", "grayscale")
IMAGE_SUFFIXES = (".ppm", ".png")
LABEL_DECIMALS = 9


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------
_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path: PathLike) -> np.ndarray:
    """Binary P6 with maxval 255 to float32 ``[3, H, W]``."""
    path = Path(path)
    buf = path.read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _PPM_TOKEN.match(buf, pos)
        if m is None:
            raise DatasetError(f"{path}: truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (magic {fields[0][:8]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PPM supported, maxval is {maxval}")
    pos += 1  # single whitespace byte before the raster
    need = w * h * 3
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise DatasetError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return (img.transpose(2, 0, 1).astype(np.float32) / 255.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` floats in [0, 1] to ``[H, W, 3]`` bytes."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    px = to_uint8(np.asarray(image))
    h, w, _ = px.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())


def read_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:
        raise DatasetError(f"{path}: PNG support needs Pillow") from None
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise DatasetError(f"{path}: unreadable image ({exc})") from None
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def write_image(path: PathLike, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return write_ppm(path, image)
    from PIL import Image
    Image.fromarray(to_uint8(image)).save(path)


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------
def _q(v: float) -> float:
    return round(float(v), LABEL_DECIMALS)


def validate_label(label: Sequence[float]) -> Label:
    """Quantize and check one ``(class, cx, cy, w, h)`` row; raises ValueError."""
    if len(label) != 5:
        raise ValueError(f"expected 5 fields, got {len(label)}")
    cls = label[0]
    if int(cls) != cls or cls < 0:
        raise ValueError(f"class id {cls} is not a non-negative integer")
    cx, cy, w, h = (_q(v) for v in label[1:])
    for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")
    if w <= 0.0 or h <= 0.0:
        raise ValueError(f"box size must be positive, got w={w} h={h}")
    return (int(cls), cx, cy, w, h)


def read_labels(path: PathLike) -> List[Label]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(validate_label([float(v) for v in line.split()]))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: invalid label {line.strip()!r}: {exc}") from None
    return out


def format_labels(labels: Sequence[Label]) -> str:
    return "".join(f"{c} {cx!r} {cy!r} {w!r} {h!r}\n" for c, cx, cy, w, h in labels)


def write_labels(path: PathLike, labels: Sequence[Label]) -> None:
    Path(path).write_text(format_labels(labels))


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    labels: Tuple[Label, ...]
    name: str

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"{self.name}: image must be [3, H, W], got {img.shape}")
        object.__setattr__(self, "labels", tuple(validate_label(l) for l in self.labels))


@dataclass(frozen=True)
class AugmentedSample:
    sample: Sample
    kind: str = "original"

    @property
    def image(self) -> np.ndarray:
        return self.sample.image

    @property
    def labels(self) -> Tuple[Label, ...]:
        return self.sample.labels

    @property
    def name(self) -> str:
        return f"{self.sample.name}_{self.kind}"


def _dataset_dirs(root: Path) -> Tuple[Path, Path]:
    if (root / "images").is_dir() and (root / "labels").is_dir():
        return root / "images", root / "labels"
    return root, root


def load_dataset(root: PathLike) -> List[Sample]:
    """Pair every image with its same-stem ``.txt`` label file, sorted by stem.

    Images and labels may share one directory or live in ``images/`` and
    ``labels/`` subdirectories.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    img_dir, lbl_dir = _dataset_dirs(root)
    images = {p.stem: p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    labels = {p.stem: p for p in lbl_dir.glob("*.txt")}
    for stem in sorted(set(images) ^ set(labels)):
        what = "image has no label file" if stem in images else "label has no image"
        raise DatasetError(f"orphan {stem!r}: {what}")
    out = []
    for stem in sorted(images):
        try:
            image = read_image(images[stem])
        except DatasetError:
            raise
        except Exception as exc:
            raise DatasetError(f"{images[stem]}: unreadable image ({exc})") from None
        out.append(Sample(image, tuple(read_labels(labels[stem])), stem))
    return out


def save_samples(samples: Sequence, out_dir: PathLike, suffix: str = ".ppm") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(out_dir / f"{s.name}{suffix}", s.image)
        write_labels(out_dir / f"{s.name}.txt", s.labels)


# ---------------------------------------------------------------------------
# Seeded split
# ---------------------------------------------------------------------------
_MASK64 = (1 << 64) - 1


def splitmix64(seed: int) -> Iterator[int]:
    """The splitmix64 generator (Steele, Lea and Flood), one u64 per step."""
    state = seed & _MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def shuffled_indices(n: int, seed: int) -> List[int]:
    """Fisher-Yates from the top: for i = n-1..1 swap i with ``u64 % (i + 1)``."""
    idx = list(range(n))
    rng = splitmix64(seed)
    for i in range(n - 1, 0, -1):
        j = next(rng) % (i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def split_dataset(samples: Sequence, ratio: float = 0.6, seed: int = 0):
    """Shuffle by ``seed``; the first ``floor(n * ratio)`` go to train, the rest to test."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    order = shuffled_indices(len(samples), seed)
    k = int(np.floor(len(samples) * ratio + 1e-9))
    return [samples[i] for i in order[:k]], [samples[i] for i in order[k:]]


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentConfig:
    brightness: float = 1.3
    contrast: float = 1.3
    denoise_size: int = 3
    luma: Tuple[float, float, float] = (0.299, 0.587, 0.114)


def adjust_brightness(image, factor: float) -> np.ndarray:
    return np.clip(image * np.float32(factor), 0.0, 1.0).astype(np.float32)


def adjust_contrast(image, factor: float) -> np.ndarray:
    return np.clip((image - np.float32(0.5)) * np.float32(factor) + np.float32(0.5), 0.0, 1.0).astype(np.float32)


def box_blur(image, size: int = 3) -> np.ndarray:
    """Per-channel mean over a ``size x size`` window, edges replicated."""
    return ndimage.uniform_filter(np.asarray(image, np.float32), size=(1, size, size), mode="nearest")


def grayscale(image, luma=(0.299, 0.587, 0.114)) -> np.ndarray:
    y = np.tensordot(np.asarray(luma, np.float32), image, axes=1)
    return np.clip(np.repeat(y[None], 3, axis=0), 0.0, 1.0).astype(np.float32)


def hflip_labels(labels: Sequence[Label]) -> Tuple[Label, ...]:
    return tuple((c, _q(1.0 - cx), cy, w, h) for c, cx, cy, w, h in labels)


def vflip_labels(labels: Sequence[Label]) -> Tuple[Label, ...]:
    return tuple((c, cx, _q(1.0 - cy), w, h) for c, cx, cy, w, h in labels)


def augment(sample: Sample, kind: str, config: AugmentConfig = AugmentConfig()) -> AugmentedSample:
    img, labels = sample.image, sample.labels
    if kind == "original":
        pass
    elif kind == "brightness":
        img = adjust_brightness(img, config.brightness)
    elif kind == "contrast":
        img = adjust_contrast(img, config.contrast)
    elif kind == "denoise":
        img = box_blur(img, config.denoise_size)
    elif kind == "grayscale":
        img = grayscale(img, config.luma)
    elif kind == "hflip":
        img, labels = np.ascontiguousarray(img[:, :, ::-1]), hflip_labels(labels)
    elif kind == "vflip":
        img, labels = np.ascontiguousarray(img[:, ::-1, :]), vflip_labels(labels)
    else:
        raise ValueError(f"unknown augmentation {kind!r}; choose from {', '.join(KINDS)}")
    return AugmentedSample(replace(sample, image=img, labels=labels), kind)


def augment_dataset(samples: Sequence[Sample], config: AugmentConfig = AugmentConfig()) -> List[AugmentedSample]:
    """Original plus the six augmentations of every sample, seven outputs each."""
    return [augment(s, kind, config) for s in samples for kind in KINDS]


# ---------------------------------------------------------------------------
# Letterbox
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Letterbox:
    scale: float
    pad_x: int
    pad_y: int
    size: int

    def to_source(self, bbox):
        """Map an xyxy box in letterboxed pixels back to source pixels."""
        x0, y0, x1, y1 = bbox
        s = self.scale
        return ((x0 - self.pad_x) / s, (y0 - self.pad_y) / s, (x1 - self.pad_x) / s, (y1 - self.pad_y) / s)


def letterbox(image: np.ndarray, size: int = 640, fill: float = 114 / 255) -> Tuple[np.ndarray, Letterbox]:
    """Aspect-preserving bilinear resize into a ``size x size`` canvas, centred."""
    _, h, w = image.shape
    s = size / max(h, w)
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    if (nh, nw) != (h, w):
        resized = ndimage.zoom(image, (1, nh / h, nw / w), order=1, mode="nearest", grid_mode=True)
        resized = np.clip(resized[:, :nh, :nw], 0.0, 1.0)
    else:
        resized = image
    canvas = np.full((3, size, size), fill, dtype=np.float32)
    py, px = (size - nh) // 2, (size - nw) // 2
    canvas[:, py:py + nh, px:px + nw] = resized
    return canvas, Letterbox(s, px, py, size)
