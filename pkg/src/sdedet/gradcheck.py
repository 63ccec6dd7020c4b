"""
Analytic versus central-difference gradients for the four trainable blocks.

Checks run in float64 on a 4x6x6 input with a 1e-6 step, small enough that
probes rarely straddle the kinks of ReLU6 or bilinear sampling. Each block's
error is ``max|analytic - numeric| / max|numeric|`` over the input and all
parameters.
"""
from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from . import blocks as B
from .tensor import Tensor, backward, finite_diff_grad, tsum

TOLERANCE = 1e-3


def _blocks(rng: np.random.Generator, channels: int, groups: int) -> Dict[str, tuple]:
    return {
        "star": (B.star_block_forward, B.StarParams.init(rng, channels, expansion=4)),
        "deform-attn": (B.deformable_attention_forward, B.DeformAttnParams.init(rng, channels, heads=2)),
        "ema": (B.ema_forward, B.EMAParams.init(rng, channels, groups=groups)),
        "conv": (B.conv_module_forward, B.ConvParams.init(rng, channels, channels, 3, 1)),
    }


def block_gradient_error(forward: Callable, x: np.ndarray, params, probe: np.ndarray, h: float = 1e-3) -> float:
    """Relative error of the taped gradient of ``sum(forward(x) * probe)``."""
    leaves = {k: np.asarray(v, np.float64) for k, v in B.flatten_params(params).items()}

    def loss(x_val, leaf_vals):
        return tsum(forward(x_val, B.replace_params(params, leaf_vals)) * probe)

    xt = Tensor(x, requires_grad=True)
    lt = {k: Tensor(v, requires_grad=True) for k, v in leaves.items()}
    backward(loss(xt, lt))

    analytic = [xt.grad.ravel()]
    numeric = [finite_diff_grad(lambda t: loss(t, leaves), x, h).ravel()]
    for name, val in leaves.items():
        analytic.append(lt[name].grad.ravel())
        numeric.append(finite_diff_grad(lambda t, n=name: loss(x, {**leaves, n: t}), val, h).ravel())
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    scale = np.abs(n).max()
    return float(np.abs(a - n).max() / scale) if scale > 0 else float(np.abs(a).max())


def run_gradcheck(seed: int = 0, channels: int = 4, size: int = 6, groups: int = 2,
                  h: float = 1e-6) -> Dict[str, float]:
    """Max relative gradient error per block, keyed star/deform-attn/ema/conv."""
    rng = np.random.default_rng(seed & (2 ** 64 - 1))
    errors = {}
    for name, (forward, params) in _blocks(rng, channels, groups).items():
        x = rng.standard_normal((channels, size, size))
        out_shape = forward(Tensor(x), params).shape
        probe = rng.standard_normal(out_shape)
        errors[name] = block_gradient_error(forward, x, params, probe, h)
    return errors
