"""Space-to-depth rearrangement, the orthonormal Haar transform and the learnable
orthogonal rescaling transform built on top of them.

Every function accepts either a single map ``(C, H, W)`` or a batch
``(N, C, H, W)``.  Plain arrays in give plain arrays out; ``Var`` inputs are
recorded on the tape so the same code serves training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var
from .numerics import FLOAT, orthogonal_project, orthogonality_error

ORTHOGONALITY_BUDGET = 1e-4


def pixel_unshuffle(x, s: int):
    v, is_var, squeeze = ag.as_batch(x)
    n, c, h, w = v.shape
    if h % s or w % s:
        raise ValueError(f"spatial extents {(h, w)} not divisible by scale {s}")
    y = ag.reshape(v, (n, c, h // s, s, w // s, s))
    y = ag.transpose(y, (0, 1, 3, 5, 2, 4))
    y = ag.reshape(y, (n, c * s * s, h // s, w // s))
    return ag.unbatch(y, is_var, squeeze)


def pixel_shuffle(x, s: int):
    v, is_var, squeeze = ag.as_batch(x)
    n, cs, h, w = v.shape
    if cs % (s * s):
        raise ValueError(f"channel count {cs} not divisible by {s * s}")
    c = cs // (s * s)
    y = ag.reshape(v, (n, c, s, s, h, w))
    y = ag.transpose(y, (0, 1, 4, 2, 5, 3))
    y = ag.reshape(y, (n, c, h * s, w * s))
    return ag.unbatch(y, is_var, squeeze)


# Rows act on the 2x2 block (a, b, c, d) = (top-left, top-right, bottom-left,
# bottom-right), which is exactly the order pixel_unshuffle lays out.
HAAR_2X2 = 0.5 * np.array(
    [
        [1, 1, 1, 1],    # LL
        [1, -1, 1, -1],  # LH
        [1, 1, -1, -1],  # HL
        [1, -1, -1, 1],  # HH
    ],
    dtype=np.float64,
)


def haar_matrix(channels: int) -> np.ndarray:
    """Block-diagonal Haar analysis matrix for ``channels`` input channels at scale 2."""
    return np.kron(np.eye(channels), HAAR_2X2).astype(FLOAT)


def haar_forward(x):
    """Orthonormal one-level 2-D Haar transform; output channels LL, LH, HL, HH per input channel."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"haar_forward needs even extents, got {(h, w)}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    bands = np.stack(
        [(a + b + c + d) / 2, (a - b + c - d) / 2, (a + b - c - d) / 2, (a - b - c + d) / 2],
        axis=-3,
    )
    # (..., C, 4, h, w) -> (..., 4C, h, w)
    return bands.reshape(x.shape[:-3] + (4 * x.shape[-3], h // 2, w // 2))


def haar_inverse(y):
    y = np.asarray(y)
    c4, h, w = y.shape[-3:]
    if c4 % 4:
        raise ValueError(f"haar_inverse needs a channel count divisible by 4, got {c4}")
    bands = y.reshape(y.shape[:-3] + (c4 // 4, 4, h, w))
    ll, lh, hl, hh = (bands[..., k, :, :] for k in range(4))
    out = np.empty(y.shape[:-3] + (c4 // 4, 2 * h, 2 * w), dtype=y.dtype)
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[..., 0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[..., 1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


@dataclass
class OrthogonalKernel:
    """A (C*s*s) x (C*s*s) orthogonal matrix acting on pixel-unshuffled channel vectors."""

    weight: Var
    scale: int
    channels: int

    def __post_init__(self):
        if not isinstance(self.weight, Var):
            self.weight = Var(np.asarray(self.weight, dtype=FLOAT), requires_grad=True, name="lrt.weight")
        n = self.channels * self.scale ** 2
        if self.weight.shape != (n, n):
            raise ValueError(f"kernel shape {self.weight.shape} inconsistent with C={self.channels}, s={self.scale}")

    @property
    def w(self) -> np.ndarray:
        return self.weight.data

    @property
    def dim(self) -> int:
        return self.channels * self.scale ** 2

    @classmethod
    def random(cls, channels: int, scale: int, rng: np.random.Generator) -> "OrthogonalKernel":
        n = channels * scale ** 2
        bound = 1.0 / np.sqrt(n)
        draw = rng.uniform(-bound, bound, size=(n, n))
        return cls(orthogonal_project(draw), scale, channels)

    @classmethod
    def identity(cls, channels: int, scale: int) -> "OrthogonalKernel":
        return cls(np.eye(channels * scale ** 2, dtype=FLOAT), scale, channels)

    @classmethod
    def rearrange(cls, channels: int, scale: int) -> "OrthogonalKernel":
        """Permutation to phase-major order: output p*C + c is sub-pixel phase p of channel c.

        The first ``channels`` outputs are then the (0, 0) phase of the image.
        """
        n = scale * scale
        perm = np.array([c * n + p for p in range(n) for c in range(channels)])
        return cls(np.eye(channels * n, dtype=FLOAT)[perm], scale, channels)

    @classmethod
    def haar(cls, channels: int) -> "OrthogonalKernel":
        return cls(haar_matrix(channels), 2, channels)

    def orthogonality_error(self) -> float:
        return orthogonality_error(self.w)


def lrt_forward(x, k: OrthogonalKernel):
    """pixel_unshuffle followed by ``W @ v`` on the channel vector of every site."""
    v, is_var, squeeze = ag.as_batch(x)
    if v.shape[1] != k.channels:
        raise ValueError(f"kernel expects {k.channels} channels, input has {v.shape[1]}")
    y = ag.channel_mix(pixel_unshuffle(v, k.scale), k.weight)
    return ag.unbatch(y, is_var, squeeze)


def lrt_inverse(y, k: OrthogonalKernel):
    """``W.T @ v`` per site, then pixel_shuffle."""
    v, is_var, squeeze = ag.as_batch(y)
    if v.shape[1] != k.dim:
        raise ValueError(f"kernel expects {k.dim} channels, input has {v.shape[1]}")
    x = pixel_shuffle(ag.channel_mix_t(v, k.weight), k.scale)
    return ag.unbatch(x, is_var, squeeze)


def reproject(k: OrthogonalKernel) -> OrthogonalKernel:
    """Snap the kernel back onto the orthogonal group in place and return it."""
    before = k.orthogonality_error()
    projected = orthogonal_project(k.w)
    # projection is only kept if it does not make things worse (float32 rounding)
    if orthogonality_error(projected) <= before:
        k.weight.data = projected
    return k
