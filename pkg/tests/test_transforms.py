import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invrescale import autograd as ag
from invrescale.autograd import Var
from invrescale.numerics import orthogonality_error, seeded_rng
from invrescale.transforms import (
    HAAR_2X2,
    OrthogonalKernel,
    haar_forward,
    haar_inverse,
    haar_matrix,
    lrt_forward,
    lrt_inverse,
    pixel_shuffle,
    pixel_unshuffle,
    reproject,
)
from invrescale.training import OptimizerState, optimizer_step

from conftest import max_rel_err


def test_pixel_unshuffle_shape_and_constant():
    x = np.full((3, 8, 8), 0.25, dtype=np.float32)
    y = pixel_unshuffle(x, 2)
    assert y.shape == (12, 4, 4)
    assert np.all(y == 0.25)


def test_pixel_unshuffle_index_formula(rng):
    np.testing.assert_array_equal(
        pixel_unshuffle(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2).reshape(-1), [1, 2, 3, 4])
    c, h, w, s = 2, 6, 9, 3
    x = rng.normal(size=(c, h, w))
    y = pixel_unshuffle(x, s)
    for ci in range(c):
        for dy in range(s):
            for dx in range(s):
                np.testing.assert_array_equal(y[ci * s * s + dy * s + dx], x[ci, dy::s, dx::s])


def test_pixel_shuffle_examples():
    np.testing.assert_array_equal(pixel_shuffle(np.arange(1.0, 5.0).reshape(4, 1, 1), 2),
                                  [[[1, 2], [3, 4]]])
    assert pixel_shuffle(np.zeros((12, 4, 4)), 2).shape == (3, 8, 8)


@pytest.mark.parametrize("s", [2, 4, 8])
def test_shuffle_roundtrip_bitwise(s):
    x = seeded_rng(s).normal(size=(2, 3, 2 * s, 3 * s)).astype(np.float32)
    assert pixel_shuffle(pixel_unshuffle(x, s), s).tobytes() == x.tobytes()


def test_shuffle_errors():
    with pytest.raises(ValueError):
        pixel_unshuffle(np.zeros((3, 6, 8)), 4)
    with pytest.raises(ValueError):
        pixel_shuffle(np.zeros((6, 2, 2)), 2)


def test_haar_examples():
    y = haar_forward(np.full((1, 4, 4), 0.3))
    np.testing.assert_allclose(y[0], 0.6)
    np.testing.assert_allclose(y[1:], 0.0)
    block = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_allclose(haar_forward(block).reshape(-1), [5, -1, -2, 0])
    np.testing.assert_allclose(haar_inverse(np.array([5.0, -1, -2, 0]).reshape(4, 1, 1)), block)


def test_haar_roundtrip_and_energy(rng):
    x = rng.normal(size=(3, 8, 10))
    y = haar_forward(x)
    assert y.shape == (12, 4, 5)
    assert np.abs(haar_inverse(y) - x).max() < 1e-6
    assert abs(np.linalg.norm(y) - np.linalg.norm(x)) < 1e-5


def test_haar_zero_detail_is_block_constant(rng):
    ll = rng.normal(size=(1, 3, 3))
    y = np.concatenate([ll, np.zeros((3, 3, 3))])
    x = haar_inverse(y)
    np.testing.assert_allclose(x, np.kron(ll / 2, np.ones((2, 2))), atol=1e-12)


def test_haar_errors():
    with pytest.raises(ValueError):
        haar_forward(np.zeros((1, 3, 4)))
    with pytest.raises(ValueError):
        haar_inverse(np.zeros((6, 2, 2)))


def test_haar_matrix_is_orthogonal():
    assert orthogonality_error(haar_matrix(3)) < 1e-7
    np.testing.assert_array_equal(haar_matrix(1), HAAR_2X2.astype(np.float32))


def test_lrt_identity_is_unshuffle(rng):
    x = rng.normal(size=(3, 8, 8)).astype(np.float32)
    k = OrthogonalKernel.identity(3, 4)
    assert lrt_forward(x, k).tobytes() == pixel_unshuffle(x, 4).tobytes()
    y = rng.normal(size=(48, 2, 2)).astype(np.float32)
    assert lrt_inverse(y, k).tobytes() == pixel_shuffle(y, 4).tobytes()


def test_lrt_haar_matches_haar_forward(rng):
    x = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    np.testing.assert_allclose(lrt_forward(x, OrthogonalKernel.haar(3)), haar_forward(x), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), s=st.sampled_from([2, 4]), c=st.integers(1, 3))
def test_lrt_roundtrip_and_norm(seed, s, c):
    rng = seeded_rng(seed)
    k = OrthogonalKernel.random(c, s, rng)
    x = rng.normal(size=(c, 2 * s, 3 * s)).astype(np.float32)
    y = lrt_forward(x, k)
    assert y.shape == (c * s * s, 2, 3)
    assert np.abs(lrt_inverse(y, k) - x).max() < 1e-4
    assert abs(np.linalg.norm(y) - np.linalg.norm(x)) < 1e-4


def test_lrt_shape_errors(rng):
    k = OrthogonalKernel.random(3, 2, rng)
    with pytest.raises(ValueError):
        lrt_forward(np.zeros((1, 4, 4)), k)
    with pytest.raises(ValueError):
        lrt_inverse(np.zeros((8, 2, 2)), k)
    with pytest.raises(ValueError):
        OrthogonalKernel(np.eye(5), 2, 1)


def test_random_kernel_is_within_budget(rng):
    for s in (2, 4, 8):
        assert OrthogonalKernel.random(3, s, rng).orthogonality_error() < 1e-5


def test_reproject_examples(rng):
    k = OrthogonalKernel.random(3, 2, rng)
    before = k.w.copy()
    reproject(k)
    np.testing.assert_allclose(k.w, before, atol=1e-5)
    k.weight.data = (k.w + rng.uniform(0, 0.01, size=k.w.shape)).astype(np.float32)
    assert k.orthogonality_error() > 1e-4
    reproject(k)
    assert k.orthogonality_error() < 1e-5
    d = OrthogonalKernel(2 * np.eye(4, dtype=np.float32), 2, 1)
    np.testing.assert_allclose(reproject(d).w, np.eye(4), atol=1e-6)


def test_reproject_idempotent_and_monotone(rng):
    k = OrthogonalKernel(rng.normal(size=(12, 12)).astype(np.float32), 2, 3)
    errs = [k.orthogonality_error()]
    for _ in range(3):
        reproject(k)
        errs.append(k.orthogonality_error())
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    w1 = k.w.copy()
    reproject(k)
    assert np.abs(k.w - w1).max() < 1e-5


def test_roundtrip_after_updates_and_reprojection(rng):
    k = OrthogonalKernel.random(3, 2, rng)
    st = OptimizerState(lr=1e-2)
    x = rng.normal(size=(3, 8, 8)).astype(np.float32)
    for _ in range(10):
        k.weight.grad = None
        ag.sum_(ag.square(lrt_forward(Var(x), k)[:3])).backward()
        k.weight.data = optimizer_step({"w": k.w}, {"w": k.weight.grad}, st)["w"]
        reproject(k)
        assert k.orthogonality_error() < 1e-4
        assert np.abs(lrt_inverse(lrt_forward(x, k), k) - x).max() < 1e-4


def test_lrt_gradients(rng):
    k = OrthogonalKernel.random(3, 2, rng)
    k.weight.data = k.w.astype(np.float64)
    x = Var(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    target = rng.normal(size=(2, 12, 2, 2))
    loss = lambda: ag.sum_(ag.tanh(lrt_forward(x, k)) * target)
    assert max_rel_err(ag.probe_gradients(loss, {"w": k.weight, "x": x}, probes=8, rng=rng)) < 1e-3
    y = Var(rng.normal(size=(2, 12, 2, 2)), requires_grad=True)
    loss = lambda: ag.sum_(ag.tanh(lrt_inverse(y, k)) * x.data)
    assert max_rel_err(ag.probe_gradients(loss, {"w": k.weight, "y": y}, probes=8, rng=rng)) < 1e-3


def test_rearrange_kernel_is_phase_major_permutation(rng):
    k = OrthogonalKernel.rearrange(3, 2)
    assert k.orthogonality_error() == 0.0
    x = rng.normal(size=(3, 4, 6)).astype(np.float32)
    y = lrt_forward(x, k)
    np.testing.assert_array_equal(y[:3], x[:, ::2, ::2])
    np.testing.assert_array_equal(y[3:6], x[:, ::2, 1::2])
    assert lrt_inverse(y, k).tobytes() == x.tobytes()
