"""The invertible latent rescaler: orthogonal transform, coupling blocks, channel
split with quantization, and the detail prior that stands in for the discarded
high-frequency channels at upscale time.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Var
from .nn import Conv, Module, frozen, param
from .numerics import NonFiniteError
from .transforms import OrthogonalKernel, lrt_forward, lrt_inverse, pixel_shuffle

LR_CHANNELS = 3
ADP_KINDS = ("zeros", "random", "learnable")
ADP_LAYOUTS = ("tile", "channel")


def quantize(x):
    """Clamp to [0, 1] and snap to multiples of 1/255, rounding half away from zero.

    On a ``Var`` the gradient is straight-through inside [0, 1] and zero outside.
    """
    if isinstance(x, Var):
        return ag.quantize_ste(x)
    return ag.quantize_ste(Var(np.asarray(x))).data


class SubNet(Module):
    """3x3 conv -> ReLU -> 3x3 conv.  The output conv starts at zero."""

    def __init__(self, c_in, c_out, hidden, rng=None, zero=False):
        self.conv1 = Conv(c_in, hidden, 3, rng=rng, zero=zero)
        self.conv2 = Conv(hidden, c_out, 3, zero=True)

    def __call__(self, x):
        return self.conv2(ag.relu(self.conv1(x)))


class CouplingBlock(Module):
    """Additive update of the LR branch followed by an affine update of the rest.

    forward:  a' = a + phi(b);  b' = b * exp(alpha * tanh(rho(a'))) + eta(a')
    """

    def __init__(self, n_a, n_b, hidden=32, alpha=1.0, rng=None, zero=False):
        self.n_a = n_a
        self.n_b = n_b
        self.alpha = alpha
        self.phi = SubNet(n_b, n_a, hidden, rng, zero)
        self.rho = SubNet(n_a, n_b, hidden, rng, zero)
        self.eta = SubNet(n_a, n_b, hidden, rng, zero)

    def log_scale(self, a):
        return ag.tanh(self.rho(a)) * self.alpha

    def _split(self, x: Var):
        if x.shape[1] != self.n_a + self.n_b:
            raise ValueError(f"coupling block expects {self.n_a + self.n_b} channels, got {x.shape[1]}")
        return x[:, : self.n_a], x[:, self.n_a:]


def coupling_forward(x, blk: CouplingBlock):
    v, is_var, squeeze = ag.as_batch(x)
    a, b = blk._split(v)
    a = a + blk.phi(b)
    b = b * ag.exp(blk.log_scale(a)) + blk.eta(a)
    return ag.unbatch(ag.concat([a, b], axis=1), is_var, squeeze)


def coupling_inverse(y, blk: CouplingBlock):
    v, is_var, squeeze = ag.as_batch(y)
    a, b = blk._split(v)
    b = (b - blk.eta(a)) * ag.exp(blk.log_scale(a) * -1.0)
    a = a - blk.phi(b)
    return ag.unbatch(ag.concat([a, b], axis=1), is_var, squeeze)


class AdaptiveDetailPrior(Module):
    """A learnable (C_hf, P, P) tile repeated over the LR grid.

    ``kind`` picks the values: ``zeros`` and ``random`` are fixed, ``learnable``
    starts at zero and is trained.  ``layout="channel"`` collapses the tile to
    one scalar per channel.
    """

    def __init__(self, channels, tile=8, kind="learnable", layout="tile", rng=None, random_std=1.0):
        if kind not in ADP_KINDS:
            raise ValueError(f"unknown ADP kind {kind!r}; expected one of {ADP_KINDS}")
        if layout not in ADP_LAYOUTS:
            raise ValueError(f"unknown ADP layout {layout!r}; expected one of {ADP_LAYOUTS}")
        self.kind = kind
        self.layout = layout
        p = 1 if layout == "channel" else tile
        shape = (channels, p, p)
        if kind == "random":
            if rng is None:
                raise ValueError("random ADP needs an rng")
            values = rng.normal(0.0, random_std, size=shape)
        else:
            values = np.zeros(shape)
        self.tile = param(values) if kind == "learnable" else frozen(values)

    @property
    def channels(self):
        return self.tile.shape[0]


def adp_map(adp: AdaptiveDetailPrior, h: int, w: int):
    """The prior tiled over an (h, w) grid; returns a ``Var`` of shape (C_hf, h, w)."""
    return ag.tile_spatial(adp.tile, h, w)


class IdentityCodec(Module):
    """Latent = pixels."""

    latent_channels = 3
    reduction = 1

    def encode(self, x):
        return x

    def decode(self, z):
        return z


class TinyAutoencoder(Module):
    """Two stride-2 convs down, two sub-pixel convs up: a 4x spatial reduction."""

    reduction = 4

    def __init__(self, latent_channels=4, hidden=16, rng=None):
        self.latent_channels = latent_channels
        self.enc1 = Conv(3, hidden, 3, stride=2, rng=rng)
        self.enc2 = Conv(hidden, latent_channels, 3, stride=2, rng=rng)
        self.dec1 = Conv(latent_channels, hidden * 4, 3, rng=rng)
        self.dec2 = Conv(hidden, 3 * 4, 3, rng=rng)

    def encode(self, x):
        v, is_var, squeeze = ag.as_batch(x)
        z = self.enc2(ag.relu(self.enc1(v)))
        return ag.unbatch(z, is_var, squeeze)

    def decode(self, z):
        v, is_var, squeeze = ag.as_batch(z)
        h = ag.relu(pixel_shuffle(self.dec1(v), 2))
        x = pixel_shuffle(self.dec2(h), 2)
        return ag.unbatch(x, is_var, squeeze)


class RescalerModel(Module):
    """Codec, orthogonal kernel, three coupling blocks and the detail prior."""

    def __init__(self, codec, kernel: OrthogonalKernel, blocks, adp: AdaptiveDetailPrior):
        self.codec = codec
        self.kernel = kernel
        self.blocks = list(blocks)
        self.adp = adp
        dim = kernel.dim
        if kernel.channels != codec.latent_channels:
            raise ValueError("kernel channels must equal the codec's latent channels")
        for blk in self.blocks:
            if blk.n_a != LR_CHANNELS or blk.n_a + blk.n_b != dim:
                raise ValueError("coupling split must be 3 + (C_lat * s^2 - 3)")
        if adp.channels != dim - LR_CHANNELS:
            raise ValueError(f"ADP has {adp.channels} channels, expected {dim - LR_CHANNELS}")

    @property
    def scale(self) -> int:
        return self.kernel.scale

    @property
    def total_scale(self) -> int:
        return self.kernel.scale * self.codec.reduction

    @property
    def hf_channels(self) -> int:
        return self.kernel.dim - LR_CHANNELS

    def named_parameters(self, prefix=""):
        yield f"{prefix}lrt.weight", self.kernel.weight
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"{prefix}blocks.{i}.")
        yield from self.adp.named_parameters(f"{prefix}adp.")
        yield from self.codec.named_parameters(f"{prefix}codec.")

    @classmethod
    def build(cls, rng, scale=4, codec="identity", hidden=32, alpha=1.0, adp_kind="learnable",
              adp_tile=8, adp_layout="tile", n_blocks=3, zero_blocks=False, kernel="random"):
        """Construct a fresh model; every random draw comes from ``rng`` in a fixed order.

        ``kernel`` is ``random`` (SVD-projected uniform draw), ``identity`` or
        ``rearrange`` (phase-major permutation, so the LR branch starts as one
        sub-pixel phase of the latent).
        """
        if codec == "identity":
            cod = IdentityCodec()
        elif codec == "tiny-ae":
            cod = TinyAutoencoder(rng=rng)
        else:
            raise ValueError(f"unknown codec {codec!r}")
        c = cod.latent_channels
        if kernel == "random":
            k = OrthogonalKernel.random(c, scale, rng)
        elif kernel == "identity":
            k = OrthogonalKernel.identity(c, scale)
        elif kernel == "rearrange":
            k = OrthogonalKernel.rearrange(c, scale)
        else:
            raise ValueError(f"unknown kernel init {kernel!r}")
        dim = c * scale * scale
        blocks = [CouplingBlock(LR_CHANNELS, dim - LR_CHANNELS, hidden, alpha, rng, zero=zero_blocks)
                  for _ in range(n_blocks)]
        adp = AdaptiveDetailPrior(dim - LR_CHANNELS, adp_tile, adp_kind, adp_layout, rng)
        return cls(cod, k, blocks, adp)


def _finite(v: Var, name: str) -> Var:
    if not np.all(np.isfinite(v.data)):
        raise NonFiniteError(f"non-finite activations in {name}")
    return v


def downscale(x, m: RescalerModel, quantized: bool = True):
    """Image -> (LR image, discarded high-frequency channels).

    The second output exists for diagnostics and training only; it is never
    part of the stored representation.
    """
    v, is_var, squeeze = ag.as_batch(x)
    s = m.total_scale
    if v.shape[2] % s or v.shape[3] % s:
        raise ValueError(f"image extents {v.shape[2:]} not divisible by total scale {s}")
    t = _finite(m.codec.encode(v), "codec.encode")
    t = lrt_forward(t, m.kernel)
    for i, blk in enumerate(m.blocks):
        t = _finite(coupling_forward(t, blk), f"blocks.{i}")
    lr, hf = t[:, :LR_CHANNELS], t[:, LR_CHANNELS:]
    if quantized:
        lr = quantize(lr)
    return ag.unbatch(lr, is_var, squeeze), ag.unbatch(hf, is_var, squeeze)


def upscale(lr, m: RescalerModel, hf_override=None):
    """LR image (+ detail prior, or an explicit hf tensor) -> latent F_T."""
    v, is_var, squeeze = ag.as_batch(lr)
    n, c, h, w = v.shape
    if c != LR_CHANNELS:
        raise ValueError(f"LR image must have {LR_CHANNELS} channels, got {c}")
    if hf_override is None:
        hf = ag.reshape(adp_map(m.adp, h, w), (1, m.hf_channels, h, w))
        hf = ag.mul(hf, np.ones((n, 1, 1, 1), dtype=hf.data.dtype)) if n > 1 else hf
    else:
        hf = hf_override if isinstance(hf_override, Var) else Var(np.asarray(hf_override))
        if hf.ndim == 3:
            hf = ag.reshape(hf, (1,) + hf.shape)
        if hf.shape != (n, m.hf_channels, h, w):
            raise ValueError(f"hf_override shape {hf.shape} does not match {(n, m.hf_channels, h, w)}")
    t = ag.concat([v, hf], axis=1)
    for i in reversed(range(len(m.blocks))):
        t = _finite(coupling_inverse(t, m.blocks[i]), f"blocks.{i}.inverse")
    f_t = lrt_inverse(t, m.kernel)
    return ag.unbatch(f_t, is_var, squeeze)

