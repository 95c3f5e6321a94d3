"""
A learnable orthogonal transform versus the Haar wavelet
========================================================

The downscaler rearranges every s x s block into channels and multiplies the
channel vector by an orthogonal matrix W.  With W set to the Haar kernel this
is exactly one level of the 2-D Haar transform; with a random orthogonal W it
is still exactly invertible and energy preserving.
"""

import numpy as np

from invrescale.imaging import synthetic_images
from invrescale.numerics import seeded_rng
from invrescale.transforms import (
    OrthogonalKernel,
    haar_forward,
    lrt_forward,
    lrt_inverse,
    reproject,
)

rng = seeded_rng(0)
x = synthetic_images(1, 32, rng)[0]

# Haar kernel: the learnable transform reduces to the closed form
haar = OrthogonalKernel.haar(3)
print("max |lrt(haar) - haar_forward|:", np.abs(lrt_forward(x, haar) - haar_forward(x)).max())

# The LL band of each colour holds twice the 2x2 block mean
ll = lrt_forward(x, haar)[0::4]
block_mean = x.reshape(3, 16, 2, 16, 2).mean(axis=(2, 4))
print("max |LL - 2 * block mean|:", np.abs(ll - 2 * block_mean).max())

# A random orthogonal kernel at 4x, drawn uniformly and projected with an SVD
k = OrthogonalKernel.random(3, 4, rng)
y = lrt_forward(x, k)
print("kernel", k.w.shape, "orthogonality error:", k.orthogonality_error())
print("energy in / out:", float((x ** 2).sum()), float((y ** 2).sum()))
print("round trip error:", np.abs(lrt_inverse(y, k) - x).max())

# A gradient step breaks orthogonality; reprojection restores it
k.weight.data = k.weight.data + 1e-2 * rng.normal(size=k.w.shape).astype(np.float32)
print("after a raw update:", k.orthogonality_error())
reproject(k)
print("after reprojection:", k.orthogonality_error())
