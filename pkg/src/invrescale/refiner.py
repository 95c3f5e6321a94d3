"""One-step refinement of the upscaled latent.

The noisy latent is treated as a sample at the last step of a linear-beta DDPM
schedule and mapped back with a single noise estimate.  The estimate comes
from a pluggable predictor conditioned on an embedding of the LR image.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from . import autograd as ag
from .autograd import Var
from .nn import Conv, Dense, Module, frozen
from .numerics import seeded_rng


class NoiseSchedule:
    """Linear betas and their cumulative products, indexed from t = 1."""

    def __init__(self, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if steps < 1:
            raise ValueError("schedule needs at least one step")
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        self.steps = int(steps)
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self.betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        self.alpha_bars = np.cumprod(1.0 - self.betas)
        self.betas.setflags(write=False)
        self.alpha_bars.setflags(write=False)

    def __repr__(self):
        return f"NoiseSchedule(steps={self.steps}, beta_start={self.beta_start}, beta_end={self.beta_end})"


def alpha_bar(sched: NoiseSchedule, t: int) -> float:
    if not 1 <= t <= sched.steps:
        raise ValueError(f"timestep {t} outside [1, {sched.steps}]")
    return float(sched.alpha_bars[t - 1])


def one_step_denoise(f_t, eps, sched: NoiseSchedule, t: int):
    """F_0 = (F_T - sqrt(1 - abar_t) * eps) / sqrt(abar_t)."""
    ab = alpha_bar(sched, t)
    if tuple(np.shape(getattr(f_t, "data", f_t))) != tuple(np.shape(getattr(eps, "data", eps))):
        raise ValueError("latent and noise estimate shapes differ")
    if isinstance(f_t, Var) or isinstance(eps, Var):
        return (ag.as_var(f_t) - ag.as_var(eps) * np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))
    f_t = np.asarray(f_t)
    return ((f_t - np.sqrt(1.0 - ab) * np.asarray(eps)) / np.sqrt(ab)).astype(f_t.dtype)


def add_noise(z, noise, sched: NoiseSchedule, t: int):
    """Forward corruption sqrt(abar_t) z + sqrt(1 - abar_t) n."""
    ab = alpha_bar(sched, t)
    return np.sqrt(ab) * np.asarray(z) + np.sqrt(1.0 - ab) * np.asarray(noise)


class SemanticTeacher(Protocol):
    dim: int

    def embed(self, x) -> np.ndarray: ...


class EpsilonPredictor(Protocol):
    def predict(self, f_t, c_s, t: int): ...


class PixelSemanticEmbedder(Module):
    """1x1 projection + ReLU, global average pool, then three dense layers."""

    def __init__(self, dim=64, hidden=32, rng=None, in_channels=3):
        self.dim = dim
        self.proj = Conv(in_channels, hidden, 1, rng=rng)
        self.fc1 = Dense(hidden, dim, rng=rng)
        self.fc2 = Dense(dim, dim, rng=rng)
        self.fc3 = Dense(dim, dim, rng=rng)

    def __call__(self, x: Var) -> Var:
        h = ag.mean(ag.relu(self.proj(x)), axis=(2, 3))
        h = ag.relu(self.fc1(h))
        h = ag.relu(self.fc2(h))
        return self.fc3(h)


def pse_forward(lr, pse: PixelSemanticEmbedder):
    """Embedding of shape (D,) for one LR image, or (N, D) for a batch."""
    v, is_var, squeeze = ag.as_batch(lr)
    out = pse(v)
    if squeeze:
        out = ag.reshape(out, (pse.dim,))
    return out if is_var else out.data


def _freeze(module: Module) -> Module:
    for p in module.parameters():
        p.requires_grad = False
    return module


class FrozenRandomTeacher:
    """Seeded, frozen stand-in for a pretrained semantic encoder.

    Two stride-2 convs with ReLU, global average pool, fixed random projection.
    """

    def __init__(self, dim=64, seed=1234, width=16):
        rng = seeded_rng(seed)
        self.dim = dim
        self.seed = seed
        self.conv1 = _freeze(Conv(3, width, 3, stride=2, rng=rng))
        self.conv2 = _freeze(Conv(width, 2 * width, 3, stride=2, rng=rng))
        self.projection = frozen(rng.normal(0.0, 1.0 / np.sqrt(2 * width), size=(dim, 2 * width)))

    def embed(self, x) -> np.ndarray:
        x = np.asarray(getattr(x, "data", x))
        squeeze = x.ndim == 3
        v = Var(x[None] if squeeze else x)
        h = ag.relu(self.conv2(ag.relu(self.conv1(v))))
        out = ag.linear(ag.mean(h, axis=(2, 3)), self.projection).data
        return out[0] if squeeze else out


class ConditionedResidualNet(Module):
    """Three-conv noise predictor with feature-wise modulation from the embedding.

    The network output ``r`` is a correction in latent space; ``predict``
    expresses it as the noise estimate that makes the one-step update land on
    ``f_t + r``.  With the zero-initialized last conv the refiner therefore
    starts as the identity.  The timestep is fixed at the schedule maximum, so
    it is accepted but not embedded.
    """

    def __init__(self, channels=3, cond_dim=64, width=16, rng=None, sched: NoiseSchedule | None = None):
        self.sched = sched or NoiseSchedule()
        self.conv1 = Conv(channels, width, 3, rng=rng)
        self.film = Dense(cond_dim, 2 * width, zero=True)
        self.conv2 = Conv(width, width, 3, rng=rng)
        self.conv3 = Conv(width, channels, 3, zero=True)
        self.width = width

    def correction(self, f_t: Var, c_s: Var) -> Var:
        gb = self.film(c_s)
        gamma = ag.reshape(gb[:, : self.width], (-1, self.width, 1, 1))
        beta = ag.reshape(gb[:, self.width:], (-1, self.width, 1, 1))
        h = self.conv1(f_t)
        h = ag.relu(h * (gamma + 1.0) + beta)
        h = ag.relu(self.conv2(h))
        return self.conv3(h)

    def predict(self, f_t, c_s, t: int):
        v, is_var, squeeze = ag.as_batch(f_t)
        c = ag.as_var(c_s)
        if c.ndim == 1:
            c = ag.reshape(c, (1, c.shape[0]))
        ab = alpha_bar(self.sched, t)
        identity_coef = (1.0 - np.sqrt(ab)) / np.sqrt(1.0 - ab)
        residual_coef = np.sqrt(ab) / np.sqrt(1.0 - ab)
        eps = v * identity_coef - self.correction(v, c) * residual_coef
        return ag.unbatch(eps, is_var or isinstance(c_s, Var), squeeze)


class IdentityPredictor:
    """Returns the noise estimate for which the one-step update is the identity."""

    def __init__(self, sched: NoiseSchedule):
        self.sched = sched

    def predict(self, f_t, c_s, t: int):
        ab = alpha_bar(self.sched, t)
        return f_t * ((1.0 - np.sqrt(ab)) / np.sqrt(1.0 - ab))


class ZeroPredictor:
    def predict(self, f_t, c_s, t: int):
        return f_t * 0.0


def refine(f_t, c_s, pred: EpsilonPredictor, sched: NoiseSchedule):
    """One-step denoise with the timestep pinned at the schedule maximum."""
    t = sched.steps
    return one_step_denoise(f_t, pred.predict(f_t, c_s, t), sched, t)
