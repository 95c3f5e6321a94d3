"""
The detail prior learns the average of what downscaling throws away
===================================================================

Only three of the C*s^2 transformed channels survive downscaling.  At upscale
time the rest are replaced by a small learnable tile.  Trained alone with a
pixel loss, the tile converges to the per-position mean of the discarded
channels over the training set, and that beats both zeros and random values.
"""

import numpy as np

from invrescale.imaging import psnr, synthetic_images
from invrescale.invnet import RescalerModel, downscale, upscale
from invrescale.numerics import seeded_rng
from invrescale.training import fit_adp

images = synthetic_images(32, 64, seeded_rng(7))


def toy(kind):
    # identity coupling blocks: only the prior can compensate
    return RescalerModel.build(seeded_rng(1), scale=4, hidden=4, zero_blocks=True, adp_kind=kind)


m = toy("learnable")
losses = fit_adp(m, images, steps=400, lr=5e-2)
print(f"pixel loss {losses[0]:.4f} -> {losses[-1]:.4f}")

# empirical mean of the discarded channels at every tile position
_, hf = downscale(images, m)
p = m.adp.tile.shape[-1]
mean = np.stack([[hf[:, :, i::p, j::p].mean(axis=(0, 2, 3)) for j in range(p)] for i in range(p)])
mean = mean.transpose(2, 0, 1)
print("max |tile - empirical mean|:", np.abs(m.adp.tile.data - mean).max())

# latent reconstruction quality for the three prior kinds
for kind, model in (("random", toy("random")), ("zeros", toy("zeros")), ("learnable", m)):
    lr, _ = downscale(images, model)
    print(f"{kind:>9}: {psnr(upscale(lr, model), images):6.2f} dB")
