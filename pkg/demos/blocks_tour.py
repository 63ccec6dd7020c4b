"""
A tour of the building blocks
=============================

Star operation, deformable attention and EMA on small random inputs.
"""

import dataclasses

import numpy as np

from sdedet import blocks as B

rng = np.random.default_rng(0)

# The star operation multiplies two linear maps of the same vector.
# Expanding the product gives a weighted sum over all feature pairs.
d = 5
y = np.append(rng.standard_normal(d), 1.0)
w1, w2 = rng.standard_normal(d + 1), rng.standard_normal(d + 1)
gamma = B.star_pair_weights(w1, w2)
print("product form   ", B.star_op(y, w1, w2))
print("pairwise form  ", y @ gamma @ y)
print("implicit pairs ", np.count_nonzero(gamma))

# A star block keeps the channel count and spatial size.
x = rng.standard_normal((8, 12, 12)).astype(np.float32)
star = B.StarParams.init(rng, 8, expansion=4)
print("star block     ", B.star_block_forward(x, star).shape)

# Deformable attention samples keys and values at shifted grid points.
# With a zeroed offset network the shifts vanish and it is plain attention.
x = rng.standard_normal((16, 6, 6)).astype(np.float32)
attn = B.DeformAttnParams.init(rng, 16, heads=8)
still = dataclasses.replace(attn, off_pw_weight=np.zeros_like(attn.off_pw_weight))
deform = B.deformable_attention_forward(x, still, residual=False).data
plain = B.mhsa_forward(x.reshape(16, 36).T, still).data.T.reshape(16, 6, 6)
print("deform vs mhsa ", np.abs(deform - plain).max())
print("sample points  ", B.deformable_sampling_points(x, attn).shape)

# EMA reweights channel groups and never changes the shape.
ema = B.EMAParams.init(rng, 16, groups=8)
print("ema            ", B.ema_forward(x, ema).shape)
