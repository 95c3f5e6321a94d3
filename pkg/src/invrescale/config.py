"""Run configuration: plain-text ``key = value`` lines, ``#`` comments allowed.

Keys
----
scale               latent scale factor s (2, 4 or 8)
codec               identity | tiny-ae
codec_pretrain_steps  autoencoder pretraining steps before joint training (tiny-ae only)
kernel_init         random (SVD-projected uniform draw) | rearrange (phase-major permutation)
coupling_hidden     hidden width of every coupling subnet
coupling_alpha      clamp amplitude of the affine log-scale
adp                 zeros | random | learnable
adp_tile            spatial tile size P of the detail prior
adp_layout          tile | channel
pse_dim             embedding width D shared by the embedder and the teacher
pse_hidden          width of the embedder's per-pixel projection
predictor_width     channel width of the noise predictor
t_max, beta_start, beta_end   DDPM schedule
lambda_pixel, lambda_feat, lambda_lr, lambda_sem   loss weights
lr                  initial learning rate
lr_halve_every      halve the learning rate every this many steps
weight_decay        decoupled weight decay
steps, batch, crop  training length, batch size, crop size
seed                master seed
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scale: int = 4
    codec: str = "identity"
    codec_pretrain_steps: int = 500
    kernel_init: str = "random"
    coupling_hidden: int = 32
    coupling_alpha: float = 1.0
    adp: str = "learnable"
    adp_tile: int = 8
    adp_layout: str = "tile"
    pse_dim: int = 64
    pse_hidden: int = 32
    predictor_width: int = 16
    t_max: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lambda_pixel: float = 2.0
    lambda_feat: float = 5.0
    lambda_lr: float = 3.0
    lambda_sem: float = 3.0
    lr: float = 1e-4
    lr_halve_every: int = 5000
    weight_decay: float = 0.01
    steps: int = 200
    batch: int = 4
    crop: int = 64
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.scale not in (2, 4, 8):
            raise ConfigError(f"scale must be 2, 4 or 8, got {self.scale}")
        if self.codec not in ("identity", "tiny-ae"):
            raise ConfigError(f"codec must be identity or tiny-ae, got {self.codec!r}")
        if self.kernel_init not in ("random", "rearrange"):
            raise ConfigError(f"kernel_init must be random or rearrange, got {self.kernel_init!r}")
        if self.adp not in ("zeros", "random", "learnable"):
            raise ConfigError(f"adp must be zeros, random or learnable, got {self.adp!r}")
        if self.adp_layout not in ("tile", "channel"):
            raise ConfigError(f"adp_layout must be tile or channel, got {self.adp_layout!r}")
        for name in ("coupling_hidden", "adp_tile", "pse_dim", "pse_hidden", "predictor_width",
                     "t_max", "lr_halve_every", "batch", "crop"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_pixel", "lambda_feat", "lambda_lr", "lambda_sem", "weight_decay",
                     "steps", "codec_pretrain_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        total = self.scale * (4 if self.codec == "tiny-ae" else 1)
        if self.crop % total:
            raise ConfigError(f"crop {self.crop} not divisible by total scale {total}")

    @property
    def total_scale(self) -> int:
        return self.scale * (4 if self.codec == "tiny-ae" else 1)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def parse_config(text: str) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kind = types[key]
        try:
            values[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
        except ValueError:
            raise ConfigError(f"line {lineno}: bad {kind} value {value!r} for {key}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
