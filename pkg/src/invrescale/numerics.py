"""Small-matrix linear algebra, seeded randomness and a finite-difference oracle.

Tensors throughout the package are plain ``numpy.ndarray`` objects holding
``float32`` data.  The SVD below accumulates in ``float64`` because the
orthogonality tolerance (1e-5) is not reliably reachable with 32-bit Jacobi
rotations.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

FLOAT = np.float32
MAX_SVD_DIM = 256


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where only finite values are allowed."""


class SvdConvergenceError(ArithmeticError):
    """Jacobi sweeps did not converge within the iteration budget."""


def seeded_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {name}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament ordering: every column pair meets once per sweep, in rounds of
    # disjoint pairs.  Odd n gets a bye slot that is filtered out.
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        half = m // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        p, q = np.minimum(p, q), np.maximum(p, q)
        real = q < n
        rounds.append((p[real], q[real]))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Fill columns of ``u`` not flagged in ``keep`` with an orthonormal complement."""
    n = u.shape[0]
    basis = [u[:, k] for k in range(n) if keep[k]]
    out = u.copy()
    candidates = iter(np.eye(n))
    for k in range(n):
        if keep[k]:
            continue
        for e in candidates:
            v = e.copy()
            for b in basis:
                v -= (b @ v) * b
            # second pass keeps the complement orthogonal to working precision
            for b in basis:
                v -= (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                v /= norm
                basis.append(v)
                out[:, k] = v
                break
    return out


def svd_square(w: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """Singular value decomposition of a square matrix by one-sided Jacobi rotations.

    Returns ``(U, S, V)`` with ``w = U @ diag(S) @ V.T``, ``S`` nonnegative and
    nonincreasing.  All three are returned in float64.
    """
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"svd_square needs a square matrix, got shape {w.shape}")
    n = w.shape[0]
    if n > MAX_SVD_DIM:
        raise ValueError(f"matrix dimension {n} exceeds {MAX_SVD_DIM}")
    check_finite(w, "svd input")

    a = w.astype(np.float64, copy=True)
    v = np.eye(n)
    rounds = _round_robin(n)

    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            active &= gamma != 0.0
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0.0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p], a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise SvdConvergenceError(f"no convergence after {max_sweeps} sweeps (ill-conditioned input?)")

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    scale = sigma.max() if n else 0.0
    keep = sigma > max(scale, 1.0) * 1e-12
    u = np.zeros_like(a)
    u[:, keep] = a[:, keep] / sigma[keep]
    if not keep.all():
        u = _complete_basis(u, keep)
        sigma[~keep] = 0.0
    return u, sigma, v


def orthogonal_project(w: np.ndarray) -> np.ndarray:
    """Nearest orthogonal matrix ``U @ V.T`` (polar factor), returned in float32."""
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"orthogonal_project needs a square matrix, got shape {w.shape}")
    u, _, v = svd_square(w.astype(np.float64))
    return (u @ v.T).astype(FLOAT)


def orthogonality_error(w: np.ndarray) -> float:
    """``max |W^T W - I|``."""
    w = np.asarray(w, dtype=np.float64)
    return float(np.max(np.abs(w.T @ w - np.eye(w.shape[0]))))


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.array(x, copy=True)
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value probing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
