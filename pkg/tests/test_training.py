import numpy as np
import pytest

from invrescale import autograd as ag
from invrescale.autograd import Var
from invrescale.checkpoint import (
    BadMagicError,
    CheckpointError,
    TruncatedCheckpointError,
    UnknownDtypeError,
    UnsupportedVersionError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from invrescale.config import RunConfig
from invrescale.imaging import bicubic_resize, crop_batch, synthetic_images
from invrescale.numerics import NonFiniteError, seeded_rng
from invrescale.refiner import FrozenRandomTeacher
from invrescale.training import (
    FrozenRandomFeatures,
    LossWeights,
    OptimizerState,
    RescalingSystem,
    forward_losses,
    loss_feat,
    loss_lr,
    loss_pixel,
    loss_sem,
    loss_total,
    optimizer_step,
    system_train_step,
)
from invrescale.transforms import ORTHOGONALITY_BUDGET

from conftest import max_rel_err

SMALL = RunConfig(coupling_hidden=8, pse_dim=8, pse_hidden=8, predictor_width=4, crop=16, batch=2,
                  lr=2e-3, steps=10)


@pytest.fixture(scope="module")
def images():
    return synthetic_images(6, 32, seeded_rng(7))


def batch_at(images, step, cfg=SMALL):
    return crop_batch(images, cfg.crop, cfg.batch, np.random.default_rng([cfg.seed, step]))


# ---- losses ---------------------------------------------------------------

class _EchoTeacher:
    """Teacher whose embedding is a fixed vector, for closed-form checks."""

    def __init__(self, vec):
        self.vec = np.asarray(vec, dtype=np.float64)
        self.dim = self.vec.size

    def embed(self, x):
        x = np.asarray(x)
        return self.vec if x.ndim == 3 else np.tile(self.vec, (x.shape[0], 1))


def test_loss_lr_examples(rng):
    x = rng.uniform(size=(3, 16, 16))
    target = bicubic_resize(x, 4, 4)
    assert float(loss_lr(target, x, 4).data) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_lr(target + 0.3, x, 4).data) == pytest.approx(0.3, abs=1e-12)
    assert float(loss_lr(target - 0.3, x, 4).data) == pytest.approx(0.3, abs=1e-12)
    with pytest.raises(ValueError):
        loss_lr(np.zeros((3, 5, 4)), x, 4)


def test_loss_sem_examples():
    x = np.zeros((3, 8, 8))
    e1 = np.array([1.0, 0.0, 0.0])
    e2 = np.array([0.0, 1.0, 0.0])
    assert float(loss_sem(e1, x, _EchoTeacher(e1)).data) == 0.0
    assert float(loss_sem(e1, x, _EchoTeacher(e2)).data) == pytest.approx(np.sqrt(2.0), abs=1e-12)
    batch = np.stack([e1, e2])
    assert float(loss_sem(batch, np.zeros((2, 3, 8, 8)), _EchoTeacher(e2)).data) == pytest.approx(np.sqrt(2) / 2)
    with pytest.raises(ValueError):
        loss_sem(np.zeros(4), x, _EchoTeacher(e1))


def test_loss_pixel_and_feat(rng):
    x = rng.uniform(size=(2, 3, 16, 16))
    assert float(loss_pixel(x, x).data) == 0.0
    assert float(loss_pixel(x + 0.25, x).data) == pytest.approx(0.25, abs=1e-12)
    fx = FrozenRandomFeatures(seed=1)
    assert float(loss_feat(x, x, fx).data) == 0.0
    assert float(loss_feat(x + 0.1, x, fx).data) > 0
    with pytest.raises(ValueError):
        loss_pixel(x[0], x)


def test_loss_total_example():
    parts = {"pixel": 1.0, "feat": 1.0, "lr": 1.0, "sem": 1.0}
    assert loss_total(parts, LossWeights()) == pytest.approx(13.0)
    parts["feat"] = float("nan")
    with pytest.raises(NonFiniteError, match="feat"):
        loss_total(parts, LossWeights())
    with pytest.raises(ValueError):
        LossWeights(pixel=-1)


def test_loss_gradients(rng):
    x = rng.uniform(size=(2, 3, 8, 8))
    xh = Var(x + rng.normal(0, 0.1, size=x.shape), requires_grad=True)
    lr = Var(rng.uniform(size=(2, 3, 2, 2)), requires_grad=True)
    c = Var(rng.normal(size=(2, 16)), requires_grad=True)
    fx = FrozenRandomFeatures(seed=3)
    for conv in fx.convs:
        conv.astype(np.float64)
    teacher = FrozenRandomTeacher(16, seed=4)
    for fn, v in [(lambda: loss_pixel(xh, x), xh), (lambda: loss_feat(xh, x, fx), xh),
                  (lambda: loss_lr(lr, x, 4), lr), (lambda: loss_sem(c, x, teacher), c)]:
        assert max_rel_err(ag.probe_gradients(fn, {"v": v}, rng=rng)) < 1e-3


# ---- optimizer -------------------------------------------------------------

def test_adamw_first_step_is_sign_step():
    st = OptimizerState(lr=0.1, weight_decay=0.0)
    out = optimizer_step({"p": np.array([1.0, -2.0, 3.0])}, {"p": np.array([0.5, -4.0, 0.0])}, st)
    np.testing.assert_allclose(out["p"], [0.9, -1.9, 3.0], atol=1e-6)
    assert st.step == 1


def test_adamw_decoupled_decay():
    st = OptimizerState(lr=0.1, weight_decay=0.5)
    out = optimizer_step({"p": np.array([2.0])}, {"p": np.array([0.0])}, st)
    np.testing.assert_allclose(out["p"], [2.0 * (1 - 0.05)])


def test_adamw_matches_reference_recurrence(rng):
    p = rng.normal(size=5)
    st = OptimizerState(lr=0.01, weight_decay=0.1, halve_every=3)
    m = np.zeros(5)
    v = np.zeros(5)
    ref = p.copy()
    for t in range(1, 8):
        g = rng.normal(size=5)
        lr = 0.01 * 0.5 ** ((t - 1) // 3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        ref = ref * (1 - lr * 0.1) - lr * mh / (np.sqrt(vh) + 1e-8)
        p = optimizer_step({"p": p}, {"p": g}, st)["p"]
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_adamw_rejects_bad_gradients():
    st = OptimizerState()
    with pytest.raises(ValueError):
        optimizer_step({"p": np.zeros(3)}, {"p": np.zeros(4)}, st)
    with pytest.raises(NonFiniteError):
        optimizer_step({"p": np.zeros(3)}, {"p": np.array([0, np.inf, 0])}, st)


def test_learning_rate_halves():
    st = OptimizerState(lr=1.0, halve_every=10)
    assert st.current_lr() == 1.0
    st.step = 10
    assert st.current_lr() == 0.5
    st.step = 35
    assert st.current_lr() == 0.125


# ---- training step --------------------------------------------------------

def test_train_step_finite_and_orthogonal(images):
    system = RescalingSystem.from_config(SMALL)
    for step in range(5):
        out = system_train_step(system, batch_at(images, step))
        assert set(out) == {"pixel", "feat", "lr", "sem", "total", "ortho"}
        assert all(np.isfinite(v) for v in out.values())
        assert out["ortho"] < ORTHOGONALITY_BUDGET
    assert system.state.step == 5


def test_training_reduces_loss_on_fixed_batch(images):
    system = RescalingSystem.from_config(SMALL)
    batch = batch_at(images, 0)
    log = [system_train_step(system, batch) for _ in range(200)]
    assert log[-1]["total"] < 0.5 * log[0]["total"]
    assert log[-1]["sem"] < log[0]["sem"]
    assert log[-1]["lr"] < log[0]["lr"]


def test_loss_lr_decreases_over_smoke_run(images):
    system = RescalingSystem.from_config(SMALL)
    log = [system_train_step(system, batch_at(images, step)) for step in range(500)]
    first = np.mean([r["lr"] for r in log[:20]])
    last = np.mean([r["lr"] for r in log[-20:]])
    assert last < first


# Parameters whose gradient is identically zero at initialization:
# - the first conv of every coupling subnet (its output conv starts at zero);
# - the whole rho subnet of every block: the log-scale only multiplies the hf
#   branch, which is discarded by downscale and is exactly zero inside upscale
#   while the learnable ADP and every eta output are still zero;
# - every predictor layer before its zero-initialized last conv, including the
#   modulation layer.
def _masked_at_init(name):
    if name.startswith("rescaler.blocks.") and (".conv1." in name or ".rho." in name):
        return True
    return name.startswith(("predictor.conv1.", "predictor.conv2.", "predictor.film."))


def _grads(system, batch):
    params = dict(system.named_parameters())
    for p in params.values():
        p.grad = None
    parts = forward_losses(batch, system.model, system.pse, system.predictor, system.teacher,
                           system.features, system.sched)
    loss_total(parts, system.weights).backward()
    return {n: (np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in params.items()}


def test_no_dead_parameters(images):
    system = RescalingSystem.from_config(SMALL)
    batch = batch_at(images, 0)
    grads = _grads(system, batch)
    masked = sorted(n for n in grads if _masked_at_init(n))
    assert len(masked) == 3 * (2 * 2 + 4) + 6
    for name, g in grads.items():
        if _masked_at_init(name):
            assert not np.any(g), name
        else:
            assert np.any(g), f"dead parameter {name}"
    assert "rescaler.adp.tile" in grads and np.any(grads["rescaler.adp.tile"])
    # once the zero-initialized layers have moved the masked ones train too;
    # rho.conv1 sits behind two zero factors and needs a second step
    for step in range(3):
        system_train_step(system, batch_at(images, step))
    grads = _grads(system, batch_at(images, 3))
    for name in masked:
        assert np.any(grads[name]), f"still dead after one step: {name}"


def test_training_bitwise_reproducible(images):
    runs = []
    for _ in range(2):
        system = RescalingSystem.from_config(SMALL)
        log = [system_train_step(system, batch_at(images, s)) for s in range(4)]
        runs.append((system.to_bytes(), log))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]
    other = RescalingSystem.from_config(SMALL.replace(seed=1))
    assert other.to_bytes() != RescalingSystem.from_config(SMALL).to_bytes()


def test_reconstruct_shapes(images):
    system = RescalingSystem.from_config(SMALL)
    x = images[0]
    lr = system.downscale(x)
    assert lr.shape == (3, 8, 8)
    assert np.all(np.round(lr * 255) == lr * 255)
    x_hat, f_t = system.reconstruct(lr)
    assert x_hat.shape == x.shape and f_t.shape == x.shape
    assert system.upscale(lr[None]).shape == (1,) + x.shape


def test_tiny_ae_system_trains(images):
    cfg = SMALL.replace(codec="tiny-ae", scale=2, crop=32, batch=1)
    system = RescalingSystem.from_config(cfg)
    assert system.model.total_scale == 8
    out = system_train_step(system, batch_at(images, 0, cfg))
    assert np.isfinite(out["total"]) and out["ortho"] < ORTHOGONALITY_BUDGET
    assert system.downscale(images[0]).shape == (3, 4, 4)


# ---- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "scalar": np.float32(2.5),
               "empty": np.zeros((0, 5), np.float32), "ünï": np.arange(6, dtype=np.float32).reshape(1, 2, 3)}
    save_checkpoint(tmp_path / "c.bin", tensors)
    back = load_checkpoint(tmp_path / "c.bin")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == np.float32 and back[k].shape == np.shape(tensors[k])
        assert back[k].tobytes() == np.asarray(tensors[k]).tobytes()
    raw = (tmp_path / "c.bin").read_bytes()
    assert encode_checkpoint(back) == raw


def test_checkpoint_empty_table():
    raw = encode_checkpoint({})
    assert raw == b"FEIR" + (1).to_bytes(4, "little") + (0).to_bytes(4, "little")
    assert decode_checkpoint(raw) == {}


def test_checkpoint_layout_fixture():
    raw = encode_checkpoint({"w": np.array([1.0, -2.0], np.float32)})
    expected = (b"FEIR" + bytes([1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]) + b"w" + bytes([0, 1, 2, 0, 0, 0])
                + np.array([1.0, -2.0], "<f4").tobytes())
    assert raw == expected


def test_checkpoint_truncation_at_every_offset(rng):
    raw = encode_checkpoint({"alpha": rng.normal(size=(2, 3)).astype(np.float32),
                             "b": np.ones(4, np.float32)})
    for cut in range(len(raw)):
        with pytest.raises(CheckpointError):
            decode_checkpoint(raw[:cut])
        if cut >= 4:
            with pytest.raises(TruncatedCheckpointError):
                decode_checkpoint(raw[:cut])


def test_checkpoint_distinct_errors():
    raw = bytearray(encode_checkpoint({"w": np.ones(2, np.float32)}))
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"FEIQ" + bytes(raw[4:]))
    bad_version = bytearray(raw)
    bad_version[4] = 2
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(bytes(bad_version))
    bad_dtype = bytearray(raw)
    bad_dtype[4 + 4 + 4 + 4 + 1] = 7
    with pytest.raises(UnknownDtypeError):
        decode_checkpoint(bytes(bad_dtype))
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(bytes(raw) + b"\0")
    with pytest.raises(TypeError):
        encode_checkpoint({"w": np.ones(2)})


def test_system_checkpoint_round_trip(tmp_path, images):
    system = RescalingSystem.from_config(SMALL)
    for s in range(3):
        system_train_step(system, batch_at(images, s))
    raw = system.to_bytes()
    restored = RescalingSystem.from_bytes(raw)
    assert restored.config == system.config
    assert restored.to_bytes() == raw
    assert restored.state.step == 3
    # resumed training continues bitwise identically
    a = system_train_step(system, batch_at(images, 3))
    b = system_train_step(restored, batch_at(images, 3))
    assert a == b and system.to_bytes() == restored.to_bytes()
    x = images[1, :, :16, :16]
    np.testing.assert_array_equal(system.upscale(system.downscale(x)), restored.upscale(restored.downscale(x)))
