"""Command-line interface: ``python -m invrescale <command> ...``.

Commands
--------
train      --config CFG --data DIR --out CKPT [--resume CKPT] [--log PATH]
downscale  --ckpt CKPT --in HR.png --out LR.png
upscale    --ckpt CKPT --in LR.png --out HR.png
roundtrip  --ckpt CKPT --in HR.png --json REPORT [--debug-true-hf]
eval       --ckpt CKPT --data DIR --json REPORT
check      --ckpt CKPT [--json REPORT]

The config file holds ``key = value`` lines; every key is listed in
``invrescale.config`` and printed by ``train --help``.  Unknown keys are errors.

Outputs
-------
train log (JSON lines, default ``CKPT.log.jsonl``), one row per step:
    step, pixel, feat, lr, sem, total, ortho, lr_rate
roundtrip report:
    schema_version, psnr, ssim, lr_l2_vs_bicubic (RMS of LR minus bicubic
    downscale), original_bytes (input PNG size), lr_bytes (LR PNG size),
    cr (original_bytes / lr_bytes), debug_true_hf
eval report:
    schema_version, images: [{name, psnr, ssim, lr_l2_vs_bicubic}], mean: {...}
check report:
    schema_version, checks: {name: {value, limit, ok}}, failed: [names]

Exit codes: 0 success, 1 failed invariants (check), 2 usage, config, data or
numerical errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_module
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .imaging import (
    ImageFormatError,
    bicubic_resize,
    crop_batch,
    from_tensor,
    png_bytes,
    png_read,
    png_write,
    psnr,
    ssim,
    to_tensor,
)
from .invnet import coupling_forward, coupling_inverse, downscale, upscale
from .numerics import NonFiniteError, seeded_rng
from .refiner import add_noise, one_step_denoise
from .training import RescalingSystem, pretrain_codec, system_train_step
from .transforms import ORTHOGONALITY_BUDGET

SCHEMA_VERSION = 1
CODEC_SEED_OFFSET = 3


class CliError(Exception):
    pass


def _load_system(path) -> RescalingSystem:
    return RescalingSystem.from_state_dict(load_checkpoint(path))


def _load_dir(data) -> tuple[list[str], list[np.ndarray]]:
    paths = sorted(Path(data).glob("*.png"))
    if not paths:
        raise CliError(f"no PNG images in {data}")
    return [p.name for p in paths], [to_tensor(png_read(p)) for p in paths]


def _check_divisible(x, system, what):
    s = system.model.total_scale
    if x.shape[1] % s or x.shape[2] % s:
        raise CliError(f"{what}: extents {x.shape[1]}x{x.shape[2]} not divisible by the checkpoint scale {s}")


def _lr_deviation(lr, x, s) -> float:
    target = bicubic_resize(x, x.shape[1] // s, x.shape[2] // s)
    return float(np.sqrt(np.mean((lr.astype(np.float64) - target) ** 2)))


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


# ---- commands --------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _, images = _load_dir(args.data)
    for img in images:
        if min(img.shape[1:]) < cfg.crop:
            raise CliError(f"training image {img.shape[1:]} is smaller than crop {cfg.crop}")
    if args.resume:
        system = _load_system(args.resume)
        if system.config != cfg:
            raise CliError("config does not match the checkpoint being resumed")
    else:
        system = RescalingSystem.from_config(cfg)
        if cfg.codec == "tiny-ae" and cfg.codec_pretrain_steps:
            pretrain_codec(system.model.codec, images, cfg.codec_pretrain_steps,
                           seeded_rng(cfg.seed + CODEC_SEED_OFFSET), crop=min(cfg.crop, 32))
    log_path = args.log or f"{args.out}.log.jsonl"
    mode = "a" if args.resume else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        while system.state.step < cfg.steps:
            step = system.state.step
            batch = crop_batch(images, cfg.crop, cfg.batch, np.random.default_rng([cfg.seed, step]))
            rate = system.state.current_lr()
            row = system_train_step(system, batch)
            log.write(json.dumps({"step": step + 1, **row, "lr_rate": rate}) + "\n")
    save_checkpoint(args.out, system.state_dict())
    return 0


def cmd_downscale(args) -> int:
    system = _load_system(args.ckpt)
    x = to_tensor(png_read(args.inp))
    _check_divisible(x, system, args.inp)
    png_write(args.out, from_tensor(system.downscale(x)))
    return 0


def cmd_upscale(args) -> int:
    system = _load_system(args.ckpt)
    lr = to_tensor(png_read(args.inp))
    png_write(args.out, from_tensor(np.clip(system.upscale(lr), 0.0, 1.0)))
    return 0


def _roundtrip(system, x, debug_true_hf=False):
    lr, hf = downscale(x, system.model)
    lr_img = from_tensor(lr)
    lr_stored = to_tensor(lr_img)
    x_hat = np.clip(system.upscale(lr_stored, hf if debug_true_hf else None), 0.0, 1.0)
    x_hat = to_tensor(from_tensor(x_hat))
    return {
        "psnr": psnr(x_hat, x),
        "ssim": ssim(x_hat, x),
        "lr_l2_vs_bicubic": _lr_deviation(lr_stored, x, system.model.total_scale),
    }, lr_img


def cmd_roundtrip(args) -> int:
    system = _load_system(args.ckpt)
    x = to_tensor(png_read(args.inp))
    _check_divisible(x, system, args.inp)
    metrics, lr_img = _roundtrip(system, x, args.debug_true_hf)
    original = os.path.getsize(args.inp)
    lr_bytes = len(png_bytes(lr_img))
    report = {"schema_version": SCHEMA_VERSION, **metrics, "original_bytes": original,
              "lr_bytes": lr_bytes, "cr": original / lr_bytes, "debug_true_hf": bool(args.debug_true_hf)}
    _write_json(args.json, report)
    return 0


def cmd_eval(args) -> int:
    system = _load_system(args.ckpt)
    names, images = _load_dir(args.data)
    rows = []
    for name, x in zip(names, images):
        _check_divisible(x, system, name)
        rows.append({"name": name, **_roundtrip(system, x)[0]})
    keys = ("psnr", "ssim", "lr_l2_vs_bicubic")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    _write_json(args.json, {"schema_version": SCHEMA_VERSION, "images": rows, "mean": mean})
    return 0


def run_checks(system: RescalingSystem, seed: int = 0) -> dict:
    """Invariant suite: {name: (value, limit)}; a check passes when value < limit."""
    rng = seeded_rng(seed)
    m = system.model
    out = {"orthogonality": (m.kernel.orthogonality_error(), ORTHOGONALITY_BUDGET)}
    size = 2 * m.total_scale
    x = rng.uniform(size=(2, 3, size, size)).astype(np.float32)
    t = rng.normal(size=(2, m.kernel.dim, 4, 4)).astype(np.float32)
    err = max(float(np.abs(coupling_inverse(coupling_forward(t, b), b) - t).max()) for b in m.blocks)
    out["coupling_roundtrip"] = (err, 1e-4)
    lr, hf = downscale(x, m, quantized=False)
    latent = m.codec.encode(x)
    out["exact_inversion"] = (float(np.abs(upscale(lr, m, hf) - latent).max()), 1e-3)
    z = rng.normal(size=(3, 8, 8))
    n = rng.normal(size=z.shape)
    sched = system.sched
    err = max(float(np.abs(one_step_denoise(add_noise(z, n, sched, s), n, sched, s) - z).max())
              for s in sorted({1, (sched.steps + 1) // 2, sched.steps}))
    out["denoise_inversion"] = (err, 1e-4)
    for name, (value, _) in out.items():
        if not np.isfinite(value):
            out[name] = (float("inf"), out[name][1])
    return out


def cmd_check(args) -> int:
    system = _load_system(args.ckpt)
    results = run_checks(system)
    checks = {k: {"value": v, "limit": lim, "ok": bool(v < lim)} for k, (v, lim) in results.items()}
    failed = [k for k, c in checks.items() if not c["ok"]]
    report = {"schema_version": SCHEMA_VERSION, "checks": checks, "failed": failed}
    if args.json:
        _write_json(args.json, report)
    print(json.dumps(report))
    if failed:
        print("failed invariants: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


# ---- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invrescale", description="Invertible latent image rescaling.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model", epilog=config_module.__doc__,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--log", help="metrics log path (default: OUT.log.jsonl)")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("downscale", cmd_downscale, "HR PNG -> quantized LR PNG"),
                              ("upscale", cmd_upscale, "LR PNG -> reconstructed HR PNG")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--ckpt", required=True)
        c.add_argument("--in", dest="inp", required=True)
        c.add_argument("--out", required=True)
        c.set_defaults(func=func)

    r = sub.add_parser("roundtrip", help="downscale + upscale in memory and report metrics")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--json", required=True)
    r.add_argument("--debug-true-hf", action="store_true",
                   help="inject the discarded channels instead of the detail prior (diagnostics only)")
    r.set_defaults(func=cmd_roundtrip)

    e = sub.add_parser("eval", help="per-image and mean metrics over a directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--json", required=True)
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("check", help="run the invariant suite against a checkpoint")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--json")
    k.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, ImageFormatError, NonFiniteError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
