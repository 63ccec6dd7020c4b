"""
Network building blocks: Star Block, deformable attention, efficient
multi-scale attention (EMA), and the YOLOv8-style ConvModule / C2f / SPPF.

Every block is a pure function of an input tensor and a frozen parameter
dataclass. Array fields of those dataclasses may be numpy arrays (constants)
or ``Tensor`` objects with ``requires_grad=True`` when a caller wants
parameter gradients.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, concat, reshape, split, transpose

Array = Union[np.ndarray, Tensor]


# ---------------------------------------------------------------------------
# Parameter trees
# ---------------------------------------------------------------------------
def _is_leaf(value) -> bool:
    return isinstance(value, (np.ndarray, Tensor))


def flatten_params(obj, prefix: str = "") -> Dict[str, Array]:
    """Map dotted names to every array leaf of a (nested) parameter dataclass."""
    out: Dict[str, Array] = {}

    def visit(value, name):
        if _is_leaf(value):
            out[name] = value
        elif dataclasses.is_dataclass(value):
            for f in dataclasses.fields(value):
                visit(getattr(value, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(value, dict):
            for key, item in value.items():
                visit(item, f"{name}.{key}" if name else key)
        elif isinstance(value, (tuple, list)):
            for i, item in enumerate(value):
                visit(item, f"{name}.{i}")

    visit(obj, prefix)
    return out


def replace_params(obj, leaves: Dict[str, Array], prefix: str = ""):
    """Rebuild ``obj`` with each array leaf swapped for ``leaves[name]``."""

    def visit(value, name):
        if _is_leaf(value):
            return leaves[name]
        if dataclasses.is_dataclass(value):
            changes = {}
            for f in dataclasses.fields(value):
                child = getattr(value, f.name)
                new = visit(child, f"{name}.{f.name}" if name else f.name)
                if new is not child:
                    changes[f.name] = new
            return dataclasses.replace(value, **changes) if changes else value
        if isinstance(value, dict):
            return {key: visit(item, f"{name}.{key}" if name else key) for key, item in value.items()}
        if isinstance(value, (tuple, list)):
            return type(value)(visit(item, f"{name}.{i}") for i, item in enumerate(value))
        return value

    return visit(obj, prefix)


def map_params(obj, fn):
    """Apply ``fn`` to every array leaf."""
    flat = flatten_params(obj)
    return replace_params(obj, {k: fn(v) for k, v in flat.items()})


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _zeros(n) -> np.ndarray:
    return np.zeros(n, dtype=np.float32)


def _ones(n) -> np.ndarray:
    return np.ones(n, dtype=np.float32)


def _affine(x: Tensor, scale: Array, shift: Array) -> Tensor:
    """Inference-form batch norm: per-channel ``x * scale + shift``."""
    return x * reshape(scale, (-1, 1, 1)) + reshape(shift, (-1, 1, 1))


# ---------------------------------------------------------------------------
# ConvModule, C2f, SPPF
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ConvParams:
    """conv (no bias) -> folded batch norm -> SiLU."""

    weight: Array
    bn_scale: Array
    bn_shift: Array
    stride: int = 1

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, k: int = 1, stride: int = 1) -> "ConvParams":
        return cls(_uniform(rng, (c_out, c_in, k, k), c_in * k * k), _ones(c_out), _zeros(c_out), stride)

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]


def conv_module_forward(x, p: ConvParams) -> Tensor:
    k = p.weight.shape[-1]
    y = ops.conv2d(x, p.weight, stride=p.stride, pad=k // 2)
    return ops.silu(_affine(y, p.bn_scale, p.bn_shift))


@dataclass(frozen=True)
class BottleneckParams:
    cv1: ConvParams
    cv2: ConvParams
    shortcut: bool = True


def bottleneck_forward(x, p: BottleneckParams) -> Tensor:
    y = conv_module_forward(conv_module_forward(x, p.cv1), p.cv2)
    return x + y if p.shortcut else y


@dataclass(frozen=True)
class C2fParams:
    """CSPLayer_2Conv: 1x1 in, split in halves, ``n`` chained bottlenecks, concat, 1x1 out."""

    cv1: ConvParams
    cv2: ConvParams
    blocks: Tuple[BottleneckParams, ...]

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, n: int = 1, shortcut: bool = True) -> "C2fParams":
        hidden = c_out // 2
        blocks = tuple(
            BottleneckParams(ConvParams.init(rng, hidden, hidden, 3), ConvParams.init(rng, hidden, hidden, 3), shortcut)
            for _ in range(n)
        )
        return cls(ConvParams.init(rng, c_in, 2 * hidden, 1), ConvParams.init(rng, (2 + n) * hidden, c_out, 1), blocks)


def c2f_forward(x, p: C2fParams) -> Tensor:
    y = conv_module_forward(x, p.cv1)
    half = y.shape[0] // 2
    parts = split(y, [half, half], axis=0)
    for block in p.blocks:
        parts.append(bottleneck_forward(parts[-1], block))
    return conv_module_forward(concat(parts, axis=0), p.cv2)


@dataclass(frozen=True)
class SPPFParams:
    cv1: ConvParams
    cv2: ConvParams
    pool: int = 5

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, pool: int = 5) -> "SPPFParams":
        hidden = c_in // 2
        return cls(ConvParams.init(rng, c_in, hidden, 1), ConvParams.init(rng, 4 * hidden, c_out, 1), pool)


def sppf_forward(x, p: SPPFParams) -> Tensor:
    y = conv_module_forward(x, p.cv1)
    maps = [y]
    for _ in range(3):
        maps.append(ops.max_pool2d(maps[-1], p.pool, 1, p.pool // 2))
    return conv_module_forward(concat(maps, axis=0), p.cv2)


# ---------------------------------------------------------------------------
# Star Block
# ---------------------------------------------------------------------------
def star_op(y, w1, w2) -> float:
    """``(w1 . y) * (w2 . y)`` for augmented vectors of length d+1 (bias slot last)."""
    y, w1, w2 = (np.asarray(v, dtype=np.float64).reshape(-1) for v in (y, w1, w2))
    if not (y.size == w1.size == w2.size):
        raise ShapeError(f"star_op: length mismatch y={y.size}, w1={w1.size}, w2={w2.size}")
    return float(np.dot(w1, y) * np.dot(w2, y))


def star_pair_weights(w1, w2) -> np.ndarray:
    """Upper-triangular coefficients of the implicit pairwise feature expansion.

    Entry ``[i, j]`` (i <= j) multiplies ``y[i] * y[j]``; the diagonal is
    ``w1[i] w2[i]`` and off-diagonal entries are ``w1[i] w2[j] + w1[j] w2[i]``.
    There are ``(d+1)(d+2)/2`` such terms for ``d`` input channels.
    """
    w1 = np.asarray(w1, dtype=np.float64).reshape(-1)
    w2 = np.asarray(w2, dtype=np.float64).reshape(-1)
    outer = np.outer(w1, w2)
    gamma = np.triu(outer + outer.T, k=1)
    gamma[np.diag_indices_from(gamma)] = np.diag(outer)
    return gamma


_ACTIVATIONS = {
    "relu6": ops.relu6,
    "relu": ops.relu,
    "gelu": ops.gelu,
    None: lambda t: t,
}


@dataclass(frozen=True)
class StarParams:
    """StarNet block: dw7x7+BN -> (f1, f2) 1x1 expand -> act(f1) * f2 -> 1x1+BN -> dw7x7 -> +x."""

    dw1_weight: Array
    dw1_bias: Array
    bn1_scale: Array
    bn1_shift: Array
    f1_weight: Array
    f1_bias: Array
    f2_weight: Array
    f2_bias: Array
    g_weight: Array
    g_bias: Array
    bn2_scale: Array
    bn2_shift: Array
    dw2_weight: Array
    dw2_bias: Array

    @classmethod
    def init(cls, rng, channels: int, expansion: int = 4, kernel: int = 7) -> "StarParams":
        c, h = channels, expansion * channels
        return cls(
            _uniform(rng, (c, kernel, kernel), kernel * kernel), _zeros(c), _ones(c), _zeros(c),
            _uniform(rng, (h, c), c), _zeros(h),
            _uniform(rng, (h, c), c), _zeros(h),
            _uniform(rng, (c, h), h), _zeros(c), _ones(c), _zeros(c),
            _uniform(rng, (c, kernel, kernel), kernel * kernel), _zeros(c),
        )

    @property
    def d(self) -> int:
        return self.f1_weight.shape[1]

    @staticmethod
    def _augment(w, b) -> np.ndarray:
        w, b = as_tensor(w).data, as_tensor(b).data
        return np.concatenate([w, b[:, None]], axis=1)

    @property
    def w1(self) -> np.ndarray:
        """Augmented first-branch weights, one length-(d+1) row per hidden channel."""
        return self._augment(self.f1_weight, self.f1_bias)

    @property
    def w2(self) -> np.ndarray:
        return self._augment(self.f2_weight, self.f2_bias)


def star_term(y, p: StarParams, activation: Optional[str] = "relu6") -> Tensor:
    """The elementwise product ``act(f1(y)) * f2(y)`` over a ``[d,H,W]`` map."""
    a = ops.pointwise_conv(y, p.f1_weight, p.f1_bias)
    b = ops.pointwise_conv(y, p.f2_weight, p.f2_bias)
    return _ACTIVATIONS[activation](a) * b


def star_block_forward(x, p: StarParams, activation: Optional[str] = "relu6") -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] != p.d:
        raise ShapeError(f"star block built for {p.d} channels, got input {x.shape}")
    k = p.dw1_weight.shape[-1]
    y = _affine(ops.depthwise_conv2d(x, p.dw1_weight, p.dw1_bias, pad=k // 2), p.bn1_scale, p.bn1_shift)
    s = star_term(y, p, activation)
    z = _affine(ops.pointwise_conv(s, p.g_weight, p.g_bias), p.bn2_scale, p.bn2_shift)
    z = ops.depthwise_conv2d(z, p.dw2_weight, p.dw2_bias, pad=k // 2)
    return x + z


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DeformAttnParams:
    """Projections for M-head attention plus the offset subnetwork.

    All projection matrices are ``[C_out, C_in]`` and act on row tokens as
    ``tokens @ W.T + b``. The offset network is a depthwise conv, GELU, then a
    1x1 conv to two channels (du along W, dv along H), bounded by tanh and
    scaled to ``offset_scale`` cells.
    """

    wq: Array
    bq: Array
    wk: Array
    bk: Array
    wv: Array
    bv: Array
    wo: Array
    bo: Array
    off_dw_weight: Array
    off_dw_bias: Array
    off_pw_weight: Array
    heads: int = 8
    offset_scale: float = 2.0

    def __post_init__(self):
        c = self.wq.shape[0]
        if self.heads < 1 or c % self.heads:
            raise ConfigError(f"embedding dim {c} is not divisible by head count {self.heads}")
        if self.off_pw_weight.shape[0] != 2:
            raise ConfigError(f"offset network must emit 2 channels, got {self.off_pw_weight.shape[0]}")

    @classmethod
    def init(cls, rng, dim: int, heads: int = 8, offset_kernel: int = 5, offset_scale: float = 2.0):
        if heads < 1 or dim % heads:
            raise ConfigError(f"embedding dim {dim} is not divisible by head count {heads}")
        proj = []
        for _ in range(4):
            proj += [_uniform(rng, (dim, dim), dim), _zeros(dim)]
        return cls(
            *proj,
            _uniform(rng, (dim, offset_kernel, offset_kernel), offset_kernel ** 2), _zeros(dim),
            _uniform(rng, (2, dim), dim),
            heads=heads, offset_scale=offset_scale,
        )

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def _linear(tokens, w, b) -> Tensor:
    return ops.matmul(tokens, transpose(w)) + b


def attention_weights(q, k, heads: int) -> Tensor:
    """Softmax-normalised scores ``[M, N_q, N_k]`` with scale ``1/sqrt(head_dim)``."""
    q, k = as_tensor(q), as_tensor(k)
    nq, c = q.shape
    d = c // heads
    qh = transpose(reshape(q, (nq, heads, d)), (1, 0, 2))
    kh = transpose(reshape(k, (k.shape[0], heads, d)), (1, 2, 0))
    return ops.softmax(ops.matmul(qh, kh) * float(1.0 / np.sqrt(d)), axis=-1)


def multi_head_attend(q, k, v, p: DeformAttnParams) -> Tensor:
    """Per-head softmax attention, heads concatenated then projected by ``wo``."""
    q, v = as_tensor(q), as_tensor(v)
    n, c = q.shape
    d = p.head_dim
    attn = attention_weights(q, k, p.heads)
    vh = transpose(reshape(v, (v.shape[0], p.heads, d)), (1, 0, 2))
    heads = ops.matmul(attn, vh)
    merged = reshape(transpose(heads, (1, 0, 2)), (n, c))
    return _linear(merged, p.wo, p.bo)


def mhsa_forward(tokens, p: DeformAttnParams) -> Tensor:
    """Plain multi-head self-attention over ``[N, C]`` tokens."""
    tokens = as_tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != p.dim:
        raise ShapeError(f"mhsa expects [N,{p.dim}] tokens, got {tokens.shape}")
    q = _linear(tokens, p.wq, p.bq)
    k = _linear(tokens, p.wk, p.bk)
    v = _linear(tokens, p.wv, p.bv)
    return multi_head_attend(q, k, v, p)


def reference_grid(h: int, w: int) -> np.ndarray:
    """Cell-centre reference points ``[(u, v)]`` in [-1, 1]^2, row-major over (row, col)."""
    u = (2.0 * np.arange(w) + 1.0) / w - 1.0
    v = (2.0 * np.arange(h) + 1.0) / h - 1.0
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)


def offset_net_forward(q_map, p: DeformAttnParams) -> Tensor:
    """Per-position offsets ``[2, H, W]`` in cells, each bounded by ``offset_scale``."""
    k = p.off_dw_weight.shape[-1]
    y = ops.gelu(ops.depthwise_conv2d(q_map, p.off_dw_weight, p.off_dw_bias, pad=k // 2))
    return ops.tanh(ops.pointwise_conv(y, p.off_pw_weight)) * p.offset_scale


def _deformed_positions(x: Tensor, p: DeformAttnParams):
    c, h, w = x.shape
    tokens = transpose(reshape(x, (c, h * w)))
    q = _linear(tokens, p.wq, p.bq)
    offsets = offset_net_forward(reshape(transpose(q), (c, h, w)), p)
    step = np.array([[2.0 / w, 2.0 / h]])
    pos = transpose(reshape(offsets, (2, h * w))) * step + reference_grid(h, w)
    return q, pos


def deformable_sampling_points(x, p: DeformAttnParams) -> np.ndarray:
    """Normalised ``(u, v)`` sampling location for every query position."""
    return _deformed_positions(as_tensor(x), p)[1].data


def deformable_attention_forward(x, p: DeformAttnParams, residual: bool = True) -> Tensor:
    """Attention whose keys/values are bilinearly sampled at offset reference points.

    Queries come from the feature map itself; the offset network reads the
    query map; keys and values are projections of the raw features sampled at
    ``reference + offset``. One sampling point per query, shared by all heads.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"deformable attention expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if c != p.dim:
        raise ConfigError(f"input has {c} channels but attention was built for {p.dim}")
    q, pos = _deformed_positions(x, p)
    sampled = ops.grid_sample(x, pos)
    k = _linear(sampled, p.wk, p.bk)
    v = _linear(sampled, p.wv, p.bv)
    out = reshape(transpose(multi_head_attend(q, k, v, p)), (c, h, w))
    return x + out if residual else out


# ---------------------------------------------------------------------------
# Efficient multi-scale attention
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class EMAParams:
    """Weights shared by all ``groups`` sub-features of ``C // groups`` channels."""

    conv1_weight: Array
    conv1_bias: Array
    conv3_weight: Array
    conv3_bias: Array
    gn_scale: Array
    gn_shift: Array
    groups: int = 8
    eps: float = 1e-5
    pad_mode: str = "zeros"

    @classmethod
    def init(cls, rng, channels: int, groups: int = 8, pad_mode: str = "zeros") -> "EMAParams":
        if groups < 1 or channels % groups:
            raise ConfigError(f"group count {groups} does not divide {channels} channels")
        c = channels // groups
        return cls(
            _uniform(rng, (c, c), c), _zeros(c),
            _uniform(rng, (c, c, 3, 3), 9 * c), _zeros(c),
            _ones(c), _zeros(c),
            groups=groups, pad_mode=pad_mode,
        )

    @property
    def group_channels(self) -> int:
        return self.conv1_weight.shape[0]


def _pad_replicate(x: Tensor, pad: int) -> Tensor:
    _, h, w = x.shape
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    return x[:, rows[:, None], cols[None, :]]


def _channel_standardize(x: Tensor, scale, shift, eps: float) -> Tensor:
    mu = x.mean(axis=(1, 2), keepdims=True)
    centred = x - mu
    var = (centred * centred).mean(axis=(1, 2), keepdims=True)
    return _affine(centred * ((var + eps) ** -0.5), scale, shift)


def _ema_group(xg: Tensor, p: EMAParams) -> Tensor:
    c, h, w = xg.shape
    x_h = ops.avg_pool_axis(xg, "W")                       # [c, H, 1]
    x_w = transpose(ops.avg_pool_axis(xg, "H"), (0, 2, 1))  # [c, W, 1]
    hw = ops.pointwise_conv(concat([x_h, x_w], axis=1), p.conv1_weight, p.conv1_bias)
    a_h, a_w = split(hw, [h, w], axis=1)
    gated = xg * ops.sigmoid(a_h) * ops.sigmoid(transpose(a_w, (0, 2, 1)))
    x1 = _channel_standardize(gated, p.gn_scale, p.gn_shift, p.eps)
    if p.pad_mode == "replicate":
        x2 = ops.conv2d(_pad_replicate(xg, 1), p.conv3_weight, p.conv3_bias)
    else:
        x2 = ops.conv2d(xg, p.conv3_weight, p.conv3_bias, pad=1)

    def cross(pooled_from, spread):
        wts = ops.softmax(reshape(ops.global_avg_pool(pooled_from), (1, c)), axis=-1)
        return ops.matmul(wts, reshape(spread, (c, h * w)))

    weights = ops.sigmoid(cross(x1, x2) + cross(x2, x1))
    return xg * reshape(weights, (1, h, w))


def ema_forward(x, p: EMAParams) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"EMA expects [C,H,W], got {x.shape}")
    c = x.shape[0]
    if c % p.groups or c // p.groups != p.group_channels:
        raise ConfigError(f"EMA with {p.groups} groups of {p.group_channels} channels cannot take {c} channels")
    g = p.group_channels
    return concat([_ema_group(x[i * g:(i + 1) * g], p) for i in range(p.groups)], axis=0)
