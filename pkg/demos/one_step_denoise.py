"""
One-step refinement on a linear noise schedule
==============================================

The upscaled latent is treated as a sample at the last step of a 1000-step
linear-beta schedule and mapped back with a single noise estimate.  The
algebra is exact: corrupting a clean latent and denoising with the true noise
returns it.  A predictor that outputs zero noise only rescales the input by
1/sqrt(abar), which is why the learned predictor starts from the estimate
that leaves its input unchanged.
"""

import numpy as np

from invrescale.numerics import seeded_rng
from invrescale.refiner import (
    ConditionedResidualNet,
    IdentityPredictor,
    NoiseSchedule,
    ZeroPredictor,
    add_noise,
    alpha_bar,
    one_step_denoise,
    refine,
)

sched = NoiseSchedule()
for t in (1, 250, 500, 1000):
    print(f"abar_{t:<4} = {alpha_bar(sched, t):.10e}")

rng = seeded_rng(0)
z = rng.normal(size=(3, 16, 16))
n = rng.normal(size=z.shape)
for t in (1, 500, 1000):
    err = np.abs(one_step_denoise(add_noise(z, n, sched, t), n, sched, t) - z).max()
    print(f"t={t:<4} corrupt-then-denoise error {err:.2e}")

# zero noise estimate on a zero latent and unit noise: -sqrt(1-abar)/sqrt(abar)
print("F0 for F_T = 0, eps = 1:", one_step_denoise(np.zeros(1), np.ones(1), sched, 1000)[0])

f = rng.normal(size=(3, 8, 8)).astype(np.float32)
c = np.zeros(16)
print("zero predictor gain:", float((refine(f, c, ZeroPredictor(), sched) / f).mean()))
print("identity predictor error:", np.abs(refine(f, c, IdentityPredictor(sched), sched) - f).max())
net = ConditionedResidualNet(3, 16, 8, rng, sched)
print("fresh conditioned net error:", np.abs(refine(f, c, net, sched) - f).max())
