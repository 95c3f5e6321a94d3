"""Training objective, AdamW, the end-to-end training step and the system bundle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Var
from .checkpoint import decode_checkpoint, encode_checkpoint
from .config import RunConfig, parse_config
from .imaging import bicubic_resize
from .invnet import RescalerModel, downscale, upscale
from .nn import Conv, Module
from .numerics import FLOAT, NonFiniteError, seeded_rng
from .refiner import (
    ConditionedResidualNet,
    FrozenRandomTeacher,
    NoiseSchedule,
    PixelSemanticEmbedder,
    refine,
)
from .transforms import reproject

LOSS_NAMES = ("pixel", "feat", "lr", "sem")


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 2.0
    feat: float = 5.0
    lr: float = 3.0
    sem: float = 3.0

    def __post_init__(self):
        if min(self.pixel, self.feat, self.lr, self.sem) < 0:
            raise ValueError("loss weights must be nonnegative")


class FrozenRandomFeatures:
    """Seeded, frozen three-layer strided conv net used as the perceptual feature map."""

    def __init__(self, seed=4321, widths=(8, 16, 32)):
        rng = seeded_rng(seed)
        self.seed = seed
        chans = (3,) + tuple(widths)
        self.convs = [Conv(chans[i], chans[i + 1], 3, stride=2, rng=rng) for i in range(len(widths))]
        for conv in self.convs:
            for p in conv.parameters():
                p.requires_grad = False

    def features(self, x):
        v, is_var, squeeze = ag.as_batch(x)
        for conv in self.convs:
            v = ag.relu(conv(v))
        return ag.unbatch(v, is_var, squeeze)


def rms(diff) -> Var:
    """Root of the mean of squared entries."""
    return ag.sqrt(ag.mean(ag.square(diff)))


def _value(x) -> np.ndarray:
    return x.data if isinstance(x, Var) else np.asarray(x)


def _check_same(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_lr(lr_pred, x, s_total: int) -> Var:
    """RMS distance of the LR image from the bicubic downscale of the HR image."""
    x = _value(x)
    h, w = x.shape[-2] // s_total, x.shape[-1] // s_total
    target = bicubic_resize(x, h, w).astype(_value(lr_pred).dtype)
    _check_same(ag.as_var(lr_pred), target, "loss_lr")
    return rms(ag.as_var(lr_pred) - target)


def loss_sem(c_s, x, teacher) -> Var:
    """Euclidean distance to the teacher embedding, averaged over the batch."""
    c = ag.as_var(c_s)
    target = teacher.embed(_value(x)).astype(c.data.dtype)
    _check_same(c, target, "loss_sem")
    sq = ag.square(c - target)
    if c.ndim == 1:
        return ag.sqrt(ag.sum_(sq))
    return ag.mean(ag.sqrt(ag.sum_(sq, axis=1)))


def loss_pixel(x_hat, x) -> Var:
    x_hat = ag.as_var(x_hat)
    _check_same(x_hat, _value(x), "loss_pixel")
    return rms(x_hat - _value(x))


def loss_feat(x_hat, x, fx) -> Var:
    """RMS distance between feature maps; both sides are differentiable."""
    return rms(fx.features(ag.as_var(x_hat)) - fx.features(ag.as_var(x)))


def loss_total(parts: dict, w: LossWeights):
    for name in LOSS_NAMES:
        if not np.all(np.isfinite(_value(parts[name]))):
            raise NonFiniteError(f"loss part {name!r} is not finite")
    total = (ag.as_var(parts["pixel"]) * w.pixel + ag.as_var(parts["feat"]) * w.feat
             + ag.as_var(parts["lr"]) * w.lr + ag.as_var(parts["sem"]) * w.sem)
    return total if any(isinstance(parts[n], Var) for n in LOSS_NAMES) else float(total.data)


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    halve_every: int = 5000
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.lr * 0.5 ** (self.step // self.halve_every)


def optimizer_step(params: dict, grads: dict, st: OptimizerState) -> dict:
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    ``params`` and ``grads`` map names to arrays; returns the updated arrays
    and advances ``st`` in place.
    """
    lr = st.current_lr()
    st.step += 1
    t = st.step
    c1 = 1.0 - st.beta1 ** t
    c2 = 1.0 - st.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
        m = st.m.get(name)
        v = st.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = (st.beta1 * m + (1.0 - st.beta1) * g).astype(p.dtype)
        v = (st.beta2 * v + (1.0 - st.beta2) * g * g).astype(p.dtype)
        st.m[name], st.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + st.eps)
        out[name] = (p * (1.0 - lr * st.weight_decay) - lr * update).astype(p.dtype)
    return out


class RescalingSystem(Module):
    """Everything needed to downscale, upscale and train, built from one config."""

    def __init__(self, config: RunConfig, model: RescalerModel, pse: PixelSemanticEmbedder,
                 predictor: ConditionedResidualNet, teacher, features, sched: NoiseSchedule):
        self.config = config
        self.model = model
        self.pse = pse
        self.predictor = predictor
        self.teacher = teacher
        self.features = features
        self.sched = sched
        self.state = OptimizerState(lr=config.lr, weight_decay=config.weight_decay,
                                    halve_every=config.lr_halve_every)

    @classmethod
    def from_config(cls, config: RunConfig) -> "RescalingSystem":
        rng = seeded_rng(config.seed)
        model = RescalerModel.build(
            rng, scale=config.scale, codec=config.codec, hidden=config.coupling_hidden,
            alpha=config.coupling_alpha, adp_kind=config.adp, adp_tile=config.adp_tile,
            adp_layout=config.adp_layout, kernel=config.kernel_init,
        )
        sched = NoiseSchedule(config.t_max, config.beta_start, config.beta_end)
        pse = PixelSemanticEmbedder(config.pse_dim, config.pse_hidden, rng)
        predictor = ConditionedResidualNet(model.codec.latent_channels, config.pse_dim,
                                           config.predictor_width, rng, sched)
        teacher = FrozenRandomTeacher(config.pse_dim, seed=config.seed + 1)
        features = FrozenRandomFeatures(seed=config.seed + 2)
        return cls(config, model, pse, predictor, teacher, features, sched)

    @property
    def weights(self) -> LossWeights:
        c = self.config
        return LossWeights(c.lambda_pixel, c.lambda_feat, c.lambda_lr, c.lambda_sem)

    def named_parameters(self, prefix=""):
        yield from self.model.named_parameters(prefix + "rescaler.")
        yield from self.pse.named_parameters(prefix + "pse.")
        yield from self.predictor.named_parameters(prefix + "predictor.")

    # inference ---------------------------------------------------------

    def downscale(self, x) -> np.ndarray:
        lr, _ = downscale(np.asarray(x, dtype=FLOAT), self.model)
        return lr

    def reconstruct(self, lr, hf_override=None):
        """LR image -> (HR image, latent F_T)."""
        f_t = upscale(lr, self.model, hf_override)
        c_s = self.pse(ag.as_batch(lr)[0])
        f_0 = refine(ag.as_batch(f_t)[0], c_s, self.predictor, self.sched)
        x_hat = self.model.codec.decode(f_0)
        single = np.ndim(_value(lr)) == 3
        out = _value(x_hat)
        return (out[0] if single else out), _value(f_t)

    def upscale(self, lr, hf_override=None) -> np.ndarray:
        return self.reconstruct(lr, hf_override)[0]

    # persistence -------------------------------------------------------

    def state_dict(self, with_optimizer=True) -> dict:
        tensors = {"meta.config": np.frombuffer(self.config.to_text().encode("utf-8"), np.uint8).astype(FLOAT)}
        for name, p in self.named_parameters():
            tensors[name] = np.asarray(p.data, dtype=FLOAT)
        if with_optimizer:
            tensors["optim.step"] = np.array(self.state.step, dtype=FLOAT)
            for name in self.state.m:
                tensors[f"optim.m.{name}"] = self.state.m[name].astype(FLOAT)
                tensors[f"optim.v.{name}"] = self.state.v[name].astype(FLOAT)
        return tensors

    def to_bytes(self) -> bytes:
        return encode_checkpoint(self.state_dict())

    @classmethod
    def from_state_dict(cls, tensors: dict) -> "RescalingSystem":
        text = bytes(np.asarray(tensors["meta.config"]).astype(np.uint8)).decode("utf-8")
        system = cls.from_config(parse_config(text))
        params = dict(system.named_parameters())
        for name, p in params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if tensors[name].shape != p.shape:
                raise ValueError(f"checkpoint tensor {name!r} has shape {tensors[name].shape}, expected {p.shape}")
            p.data = np.array(tensors[name], dtype=FLOAT)
        if "optim.step" in tensors:
            system.state.step = int(tensors["optim.step"])
            for name in params:
                if f"optim.m.{name}" in tensors:
                    system.state.m[name] = np.array(tensors[f"optim.m.{name}"], dtype=FLOAT)
                    system.state.v[name] = np.array(tensors[f"optim.v.{name}"], dtype=FLOAT)
        return system

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RescalingSystem":
        return cls.from_state_dict(decode_checkpoint(raw))


def forward_losses(batch, model, pse, predictor, teacher, fx, sched):
    """Run the full pipeline on a batch and return the four loss parts as ``Var``s."""
    x = np.asarray(batch)
    lr, _ = downscale(Var(x), model)
    f_t = upscale(lr, model)
    c_s = pse(lr)
    f_0 = refine(f_t, c_s, predictor, sched)
    x_hat = model.codec.decode(f_0)
    return {
        "pixel": loss_pixel(x_hat, x),
        "feat": loss_feat(x_hat, x, fx),
        "lr": loss_lr(lr, x, model.total_scale),
        "sem": loss_sem(c_s, x, teacher),
    }


def _trainable(model, pse, predictor):
    yield from model.named_parameters("rescaler.")
    yield from pse.named_parameters("pse.")
    yield from predictor.named_parameters("predictor.")


def train_step(batch, model, pse, predictor, teacher, fx, sched, w: LossWeights, st: OptimizerState):
    """Forward, backward, AdamW update and kernel reprojection.

    Returns a dict of float loss parts plus ``total`` and ``ortho`` (the
    kernel's orthogonality error after reprojection).
    """
    params = dict(_trainable(model, pse, predictor))
    for p in params.values():
        p.grad = None
    parts = forward_losses(batch, model, pse, predictor, teacher, fx, sched)
    total = loss_total(parts, w)
    if not np.isfinite(total.data):
        raise NonFiniteError("total loss is not finite")
    total.backward()
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
        grads[name] = g
    updated = optimizer_step({n: p.data for n, p in params.items()}, grads, st)
    for name, p in params.items():
        p.data = updated[name]
        p.grad = None
    reproject(model.kernel)
    out = {name: float(parts[name].data) for name in LOSS_NAMES}
    out["total"] = float(total.data)
    out["ortho"] = model.kernel.orthogonality_error()
    return out


def system_train_step(system: RescalingSystem, batch):
    return train_step(batch, system.model, system.pse, system.predictor, system.teacher,
                      system.features, system.sched, system.weights, system.state)


def pretrain_codec(codec, images, steps: int, rng, batch: int = 4, crop: int = 32, lr: float = 1e-3):
    """Fit an autoencoder codec alone with an RMS reconstruction loss; returns the last loss."""
    from .imaging import crop_batch

    st = OptimizerState(lr=lr, weight_decay=0.0, halve_every=max(1, steps))
    params = dict(codec.named_parameters())
    loss = float("nan")
    for _ in range(steps):
        x = crop_batch(images, crop, batch, rng)
        for p in params.values():
            p.grad = None
        out = rms(codec.decode(codec.encode(Var(x))) - x)
        out.backward()
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
        for n, arr in optimizer_step({n: p.data for n, p in params.items()}, grads, st).items():
            params[n].data = arr
        loss = float(out.data)
    return loss


def fit_adp(model: RescalerModel, images, steps: int, lr: float = 1e-2) -> list:
    """Train only the detail prior with the pixel loss, everything else frozen.

    The reconstruction skips the refiner (identity) and decodes the upscaled
    latent directly.  Full-batch AdamW without weight decay, with the rate
    halved every fifth of the run.  Returns the loss per step.
    """
    x = np.asarray(images, dtype=FLOAT)
    lr_q = Var(downscale(x, model)[0])
    params = dict(model.adp.named_parameters())
    if not params:
        raise ValueError("the detail prior has no trainable values (kind must be 'learnable')")
    st = OptimizerState(lr=lr, weight_decay=0.0, halve_every=max(1, steps // 5))
    losses = []
    for _ in range(steps):
        for p in params.values():
            p.grad = None
        loss = loss_pixel(model.codec.decode(upscale(lr_q, model)), x)
        loss.backward()
        updated = optimizer_step({n: p.data for n, p in params.items()},
                                 {n: p.grad for n, p in params.items()}, st)
        for n, p in params.items():
            p.data = updated[n]
        losses.append(float(loss.data))
    return losses
