"""
Detector assembly: backbone, PAN neck with EMA, anchor-free head.

The backbone follows the published layer table row for row, with one
addition: a stride-1 1x1 ConvModule lifts the Star Block's 8 channels to the
32 channels the next table row consumes.

Typical use::

    spec = NetworkSpec()
    model = build_model(spec, init_weights(spec, seed=0))
    dets = detect(model, image)          # image: float32 [3, 640, 640] in [0, 1]
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import blocks as B
from . import ops
from .boxes import Detection, nms
from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, backward, concat, reshape
from .weights import WeightStore

Hook = Callable[[str, Tensor], Tensor]


# ---------------------------------------------------------------------------
# Specification
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    c_in: int
    c_out: int
    stride: int = 1
    kernel: int = 1


@dataclass(frozen=True)
class TableRow:
    """One row of the published layer table, shapes as (H, W, C)."""

    operation: str
    source: str  # backbone layer name or feat1/feat2/feat3
    input: Optional[Tuple[int, int, int]]
    output: Tuple[int, int, int]
    step: Optional[int] = None
    kernel: Optional[Tuple[int, int]] = None


LAYER_TABLE: Tuple[TableRow, ...] = (
    TableRow("ConvModule", "conv0", (640, 640, 3), (320, 320, 8), 2, (3, 3)),
    TableRow("Star Block", "star", (320, 320, 8), (320, 320, 8)),
    TableRow("ConvModule", "conv1", (320, 320, 32), (160, 160, 32), 2, (3, 3)),
    TableRow("ConvModule", "conv2", (160, 160, 32), (80, 80, 64), 2, (3, 3)),
    TableRow("CSPLayer_2Conv", "c2f1", (80, 80, 64), (80, 80, 64), 1, (1, 1)),
    TableRow("Feat1", "feat1", None, (80, 80, 64)),
    TableRow("ConvModule", "conv3", (80, 80, 64), (40, 40, 128), 2, (3, 3)),
    TableRow("Feat2", "feat2", None, (40, 40, 128)),
    TableRow("ConvModule", "conv4", (40, 40, 128), (20, 20, 256), 2, (3, 3)),
    TableRow("CSPLayer_2Conv", "c2f2", (20, 20, 256), (20, 20, 256), 1, (1, 1)),
    TableRow("SPPF", "sppf", (20, 20, 256), (20, 20, 256)),
    TableRow("Deformable Attention", "deform", (20, 20, 256), (20, 20, 256)),
    TableRow("Feat3", "feat3", None, (20, 20, 256)),
)

DEFAULT_BACKBONE: Tuple[LayerSpec, ...] = (
    LayerSpec("conv0", "ConvModule", 3, 8, 2, 3),
    LayerSpec("star", "StarBlock", 8, 8),
    LayerSpec("proj", "ConvModule", 8, 32, 1, 1),
    LayerSpec("conv1", "ConvModule", 32, 32, 2, 3),
    LayerSpec("conv2", "ConvModule", 32, 64, 2, 3),
    LayerSpec("c2f1", "C2f", 64, 64),
    LayerSpec("conv3", "ConvModule", 64, 128, 2, 3),
    LayerSpec("conv4", "ConvModule", 128, 256, 2, 3),
    LayerSpec("c2f2", "C2f", 256, 256),
    LayerSpec("sppf", "SPPF", 256, 256),
    LayerSpec("deform", "DeformableAttention", 256, 256),
)


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[LayerSpec, ...] = DEFAULT_BACKBONE
    feat_layers: Tuple[str, str, str] = ("c2f1", "conv3", "deform")
    input_size: int = 640
    class_names: Tuple[str, ...] = ("pomelo",)
    star_expansion: int = 4
    c2f_depth: int = 1
    deform_heads: int = 8
    offset_scale: float = 2.0
    ema_groups: int = 8
    neck_ema: bool = True
    head_width: int = 64
    strides: Tuple[int, int, int] = (8, 16, 32)

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {names}")
        for feat in self.feat_layers:
            if feat not in names:
                raise ConfigError(f"feature tap {feat!r} is not a backbone layer")
        for prev, layer in zip(self.layers, self.layers[1:]):
            if prev.c_out != layer.c_in:
                raise ConfigError(f"layer {layer.name} expects {layer.c_in} channels "
                                  f"but {prev.name} produces {prev.c_out}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def feat_channels(self) -> Tuple[int, int, int]:
        return tuple(self.layer(n).c_out for n in self.feat_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(layer) for layer in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**layer) for layer in d.get("layers", [asdict(x) for x in DEFAULT_BACKBONE]))
        for key in ("feat_layers", "class_names", "strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))

    def hash(self) -> int:
        """First 8 bytes of SHA-256 over the canonical JSON, as an unsigned int."""
        digest = hashlib.sha256(self.to_json().encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NeckParams:
    top4: B.C2fParams
    out3: B.C2fParams
    down3: B.ConvParams
    out4: B.C2fParams
    down4: B.ConvParams
    out5: B.C2fParams
    ema3: Optional[B.EMAParams] = None
    ema4: Optional[B.EMAParams] = None
    ema5: Optional[B.EMAParams] = None


@dataclass(frozen=True)
class LevelHeadParams:
    box1: B.ConvParams
    box2: B.ConvParams
    box_weight: B.Array
    box_bias: B.Array
    cls1: B.ConvParams
    cls2: B.ConvParams
    cls_weight: B.Array
    cls_bias: B.Array


@dataclass(frozen=True)
class NetworkParams:
    backbone: Dict[str, object]
    neck: NeckParams
    head: Tuple[LevelHeadParams, ...]


def _init_layer(rng, spec: NetworkSpec, layer: LayerSpec):
    if layer.kind == "ConvModule":
        return B.ConvParams.init(rng, layer.c_in, layer.c_out, layer.kernel, layer.stride)
    if layer.kind == "StarBlock":
        if layer.c_in != layer.c_out:
            raise ConfigError(f"star block {layer.name} must keep its channel count")
        return B.StarParams.init(rng, layer.c_in, spec.star_expansion)
    if layer.kind == "C2f":
        return B.C2fParams.init(rng, layer.c_in, layer.c_out, spec.c2f_depth, shortcut=True)
    if layer.kind == "SPPF":
        return B.SPPFParams.init(rng, layer.c_in, layer.c_out)
    if layer.kind == "DeformableAttention":
        return B.DeformAttnParams.init(rng, layer.c_in, spec.deform_heads, offset_scale=spec.offset_scale)
    raise ConfigError(f"unknown layer kind {layer.kind!r} for {layer.name}")


def init_params(spec: NetworkSpec, seed: int = 0) -> NetworkParams:
    """Fixed-seed fan-in-scaled uniform weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(int(seed) & (2 ** 64 - 1))
    backbone = {layer.name: _init_layer(rng, spec, layer) for layer in spec.layers}
    c3, c4, c5 = spec.feat_channels
    n = spec.c2f_depth
    ema = (lambda c: B.EMAParams.init(rng, c, spec.ema_groups)) if spec.neck_ema else (lambda c: None)
    neck = NeckParams(
        top4=B.C2fParams.init(rng, c5 + c4, c4, n, shortcut=False),
        out3=B.C2fParams.init(rng, c4 + c3, c3, n, shortcut=False),
        down3=B.ConvParams.init(rng, c3, c3, 3, 2),
        out4=B.C2fParams.init(rng, c3 + c4, c4, n, shortcut=False),
        down4=B.ConvParams.init(rng, c4, c4, 3, 2),
        out5=B.C2fParams.init(rng, c4 + c5, c5, n, shortcut=False),
        ema3=ema(c3), ema4=ema(c4), ema5=ema(c5),
    )
    w, nc = spec.head_width, spec.num_classes
    head = tuple(
        LevelHeadParams(
            B.ConvParams.init(rng, c, w, 3), B.ConvParams.init(rng, w, w, 3),
            B._uniform(rng, (4, w), w), np.zeros(4, np.float32),
            B.ConvParams.init(rng, c, w, 3), B.ConvParams.init(rng, w, w, 3),
            B._uniform(rng, (nc, w), w), np.zeros(nc, np.float32),
        )
        for c in (c3, c4, c5)
    )
    return NetworkParams(backbone, neck, head)


def init_weights(spec: NetworkSpec, seed: int = 0) -> WeightStore:
    params = init_params(spec, seed)
    return WeightStore(B.flatten_params(params), spec_hash=spec.hash(), seed=seed)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Model:
    spec: NetworkSpec
    params: NetworkParams
    store: WeightStore = field(repr=False)


def build_model(spec: NetworkSpec, weights: WeightStore) -> Model:
    """Validate ``weights`` against ``spec`` and freeze them into a model."""
    if weights.spec_hash != spec.hash():
        raise ConfigError(f"weights were made for spec hash {weights.spec_hash:#018x}, "
                          f"this spec hashes to {spec.hash():#018x}")
    template = B.flatten_params(init_params(spec, seed=0))
    missing = [k for k in template if k not in weights]
    if missing:
        k = missing[0]
        raise ConfigError(f"missing weight {k!r} (expected shape {template[k].shape}); "
                          f"{len(missing)} missing in total")
    extra = [k for k in weights if k not in template]
    if extra:
        raise ConfigError(f"unexpected weight {extra[0]!r}; {len(extra)} not used by this network")
    frozen = {}
    for name, ref in template.items():
        arr = weights[name]
        if arr.shape != ref.shape:
            raise ConfigError(f"weight {name!r} has shape {arr.shape}, spec requires {ref.shape}")
        arr = np.array(arr, dtype=np.float32)
        arr.setflags(write=False)
        frozen[name] = arr
    params = B.replace_params(init_params(spec, seed=0), frozen)
    return Model(spec, params, WeightStore(frozen, spec_hash=weights.spec_hash, seed=weights.seed))


def param_count(model) -> int:
    """Total element count over a model's weights (or any name -> array mapping)."""
    store = model.store if isinstance(model, Model) else model
    return int(sum(np.size(v) for v in store.values()))


_FORWARDS = {
    "ConvModule": B.conv_module_forward,
    "StarBlock": B.star_block_forward,
    "C2f": B.c2f_forward,
    "SPPF": B.sppf_forward,
    "DeformableAttention": B.deformable_attention_forward,
}


def _identity_hook(name: str, t: Tensor) -> Tensor:
    return t


def backbone_forward(model: Model, image, hook: Optional[Hook] = None) -> Tuple[Tensor, Tensor, Tensor]:
    """Image ``[3, S, S]`` to the three pyramid features (stride 8, 16, 32)."""
    hook = hook or _identity_hook
    spec = model.spec
    x = as_tensor(image)
    expected = (3, spec.input_size, spec.input_size)
    if x.shape != expected:
        raise ShapeError(f"backbone expects an image of shape {expected}, got {x.shape}")
    feats = {}
    for layer in spec.layers:
        x = hook(f"backbone.{layer.name}", _FORWARDS[layer.kind](x, model.params.backbone[layer.name]))
        feats[layer.name] = x
    return tuple(feats[name] for name in spec.feat_layers)


def neck_forward(model: Model, feats, use_ema: bool = True, hook: Optional[Hook] = None):
    """PAN fusion (top-down then bottom-up) with an EMA on each fused output."""
    hook = hook or _identity_hook
    p = model.params.neck
    f3, f4, f5 = feats

    def ema(x, params):
        return B.ema_forward(x, params) if use_ema and params is not None else x

    t4 = hook("neck.top4", B.c2f_forward(concat([ops.upsample_nearest(f5), f4]), p.top4))
    o3 = hook("neck.out3", ema(B.c2f_forward(concat([ops.upsample_nearest(t4), f3]), p.out3), p.ema3))
    o4 = hook("neck.out4", ema(B.c2f_forward(concat([B.conv_module_forward(o3, p.down3), t4]), p.out4), p.ema4))
    o5 = hook("neck.out5", ema(B.c2f_forward(concat([B.conv_module_forward(o4, p.down4), f5]), p.out5), p.ema5))
    return o3, o4, o5


def head_forward(model: Model, pyramid) -> List[Tuple[Tensor, Tensor]]:
    """Raw per-level outputs: box distances ``[4,H,W]`` and class logits ``[nc,H,W]``."""
    outs = []
    for x, p in zip(pyramid, model.params.head):
        box = B.conv_module_forward(B.conv_module_forward(x, p.box1), p.box2)
        cls = B.conv_module_forward(B.conv_module_forward(x, p.cls1), p.cls2)
        outs.append((ops.pointwise_conv(box, p.box_weight, p.box_bias),
                     ops.pointwise_conv(cls, p.cls_weight, p.cls_bias)))
    return outs


def decode_outputs(outputs, strides: Sequence[int], image_size: int,
                   conf: float = 0.25) -> List[Detection]:
    """Turn raw head outputs into clipped detections scoring strictly above ``conf``.

    Each cell's anchor is its centre; the four box channels pass through
    softplus and are read as (left, top, right, bottom) distances in units
    of the level stride.
    """
    dets: List[Detection] = []
    for (box, cls), stride in zip(outputs, strides):
        box = as_tensor(box).data.astype(np.float64)
        scores = ops.sigmoid(as_tensor(cls).data.astype(np.float64)).data
        nc, h, w = scores.shape
        dist = np.logaddexp(0.0, box) * stride
        cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
        x0 = np.clip(cx - dist[0], 0, image_size)
        y0 = np.clip(cy - dist[1], 0, image_size)
        x1 = np.clip(cx + dist[2], 0, image_size)
        y1 = np.clip(cy + dist[3], 0, image_size)
        for c, i, j in zip(*np.nonzero(scores > conf)):
            dets.append(Detection((float(x0[i, j]), float(y0[i, j]), float(x1[i, j]), float(y1[i, j])),
                                  float(scores[c, i, j]), int(c)))
    return dets


def head_decode(model: Model, pyramid, conf: float = 0.25) -> List[Detection]:
    return decode_outputs(head_forward(model, pyramid), model.spec.strides, model.spec.input_size, conf)


def class_nms(dets: Sequence[Detection], iou_thresh: float) -> List[Detection]:
    kept: List[Detection] = []
    for c in sorted({d.class_id for d in dets}):
        kept.extend(nms([d for d in dets if d.class_id == c], iou_thresh))
    return sorted(kept, key=lambda d: -d.score)


def detect(model: Model, image, conf: float = 0.25, nms_iou: float = 0.7) -> List[Detection]:
    feats = backbone_forward(model, image)
    pyramid = neck_forward(model, feats)
    return class_nms(head_decode(model, pyramid, conf), nms_iou)


# ---------------------------------------------------------------------------
# Shape conformance
# ---------------------------------------------------------------------------
def _hwc(shape) -> Tuple[int, int, int]:
    c, h, w = shape
    return (h, w, c)


@dataclass(frozen=True)
class ShapeRow:
    row: TableRow
    actual_input: Optional[Tuple[int, int, int]]
    actual_output: Optional[Tuple[int, int, int]]

    @property
    def ok(self) -> bool:
        return self.actual_output == self.row.output and (
            self.row.input is None or self.actual_input == self.row.input)


def trace_shapes(model: Model, image=None) -> Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    """``layer name -> (input shape, output shape)`` in ``[C,H,W]`` from one forward."""
    size = model.spec.input_size
    if image is None:
        image = np.random.default_rng(0).random((3, size, size), dtype=np.float32)
    shapes = {}
    prev = [as_tensor(image).shape]

    def hook(name, t):
        shapes[name.split(".", 1)[1]] = (prev[0], t.shape)
        prev[0] = t.shape
        return t

    feats = backbone_forward(model, image, hook)
    for i, f in enumerate(feats, 1):
        shapes[f"feat{i}"] = (None, f.shape)
    return shapes


def check_table_shapes(model: Model, image=None) -> List[ShapeRow]:
    traced = trace_shapes(model, image)
    rows = []
    for row in LAYER_TABLE:
        got = traced.get(row.source)
        if got is None:
            rows.append(ShapeRow(row, None, None))
            continue
        rows.append(ShapeRow(row, None if got[0] is None else _hwc(got[0]), _hwc(got[1])))
    return rows


def estimate_flops(model: Model) -> int:
    """2 x multiply-accumulates of conv and matmul ops for one image through backbone, neck and head."""
    size = model.spec.input_size
    image = np.zeros((3, size, size), dtype=np.float32)
    with ops.count_flops() as box:
        head_forward(model, neck_forward(model, backbone_forward(model, image)))
    return box[0]


def benchmark(model: Model, reps: int = 3, seed: int = 0) -> Tuple[float, float]:
    """Mean and standard deviation (seconds) of full forward latency."""
    size = model.spec.input_size
    image = np.random.default_rng(seed).random((3, size, size), dtype=np.float32)
    times = []
    for _ in range(max(1, reps)):
        t0 = time.perf_counter()
        head_forward(model, neck_forward(model, backbone_forward(model, image)))
        times.append(time.perf_counter() - t0)
    return float(np.mean(times)), float(np.std(times))


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------
def layer_names(model: Model) -> List[str]:
    names = [f"backbone.{layer.name}" for layer in model.spec.layers]
    return names + ["neck.top4", "neck.out3", "neck.out4", "neck.out5"]


def gradcam_map(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Channel weights from spatially averaged gradients, ReLU, then min-max to [0, 1]."""
    weights = gradients.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activations, axes=1), 0.0)
    lo, hi = float(cam.min()), float(cam.max())
    if hi <= 0.0:
        return np.zeros_like(cam)
    if hi - lo <= 0.0:
        return np.ones_like(cam)
    return (cam - lo) / (hi - lo)


def gradcam(model: Model, image, layer: str) -> np.ndarray:
    """Heatmap over ``layer``'s spatial grid for the highest-scoring cell of the head."""
    valid = layer_names(model)
    if layer not in valid:
        raise KeyError(f"unknown layer {layer!r}; valid layers: {', '.join(valid)}")
    captured: Dict[str, Tensor] = {}

    def hook(name, t):
        if name == layer:
            leaf = Tensor(t.data, requires_grad=True)
            captured["act"] = leaf
            return leaf
        return t

    feats = backbone_forward(model, image, hook)
    outputs = head_forward(model, neck_forward(model, feats, hook=hook))
    scores = concat([reshape(ops.sigmoid(cls), (-1,)) for _, cls in outputs])
    best = int(np.argmax(scores.data))
    backward(scores[best])
    act = captured["act"]
    grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    return gradcam_map(act.data.astype(np.float64), grad.astype(np.float64))
