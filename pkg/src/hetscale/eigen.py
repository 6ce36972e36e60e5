"""Dense symmetric eigensolver (cyclic Jacobi).

Rotations are applied in round-robin order: every round annihilates n/2
disjoint off-diagonal pairs at once, and the same round is applied to a
whole stack of matrices. A layer's per-neuron matrices all share one
dimension, so one call diagonalizes every neuron of a layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

OFFDIAG_TOL = 1e-11
MAX_SWEEPS = 100


@dataclass(frozen=True)
class SymmetricMatrix:
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
        object.__setattr__(self, "data", 0.5 * (a + a.T))

    @property
    def dim(self) -> int:
        return self.data.shape[0]


def _as_array(m) -> np.ndarray:
    return m.data if isinstance(m, SymmetricMatrix) else SymmetricMatrix(m).data


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Pair schedule for even ``n``: n-1 rounds of n/2 disjoint pairs."""
    players = list(range(n))
    ps, qs = [], []
    for _ in range(n - 1):
        pairs = [(players[i], players[n - 1 - i]) for i in range(n // 2)]
        ps.append([min(p) for p in pairs])
        qs.append([max(p) for p in pairs])
        players = [players[0], players[-1]] + players[1:-1]
    return np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)


def _offdiag_norm(a: np.ndarray) -> np.ndarray:
    off = a * a
    np.einsum("bii->bi", off)[...] = 0.0
    return np.sqrt(off.sum(axis=(1, 2)))


def jacobi_eigh(stack: np.ndarray, vectors: bool = False,
                tol: float = OFFDIAG_TOL, max_sweeps: int = MAX_SWEEPS):
    """Eigen-decompose a stack of symmetric matrices, shape (..., n, n).

    Returns ascending eigenvalues (and column eigenvectors if ``vectors``).
    Sweeps stop once the off-diagonal Frobenius norm is at most
    ``tol * ||A||_F`` for every matrix, or after ``max_sweeps``.
    """
    a = np.asarray(stack, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected (..., n, n), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    lead, n = a.shape[:-2], a.shape[-1]
    a = a.reshape(-1, n, n)
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    batch = a.shape[0]

    m = n + (n % 2)
    if m != n:
        # Zero padding row/column stays decoupled: its pairs never rotate.
        padded = np.zeros((batch, m, m))
        padded[:, :n, :n] = a
        a = padded
    v = np.broadcast_to(np.eye(m), (batch, m, m)).copy() if vectors else None

    target = tol * np.sqrt((a * a).sum(axis=(1, 2)))
    ps, qs = _round_robin(m) if m > 1 else (np.zeros((0, 0), np.intp),) * 2
    active = np.nonzero(_offdiag_norm(a) > target)[0]
    sweeps = 0
    while active.size and sweeps < max_sweeps:
        sub = a[active]
        vsub = v[active] if vectors else None
        for p, q in zip(ps, qs):
            _rotate_round(sub, vsub, p, q)
        a[active] = sub
        if vectors:
            v[active] = vsub
        sweeps += 1
        still = _offdiag_norm(sub) > target[active]
        active = active[still]

    evals = np.einsum("bii->bi", a)[:, :n].copy()
    order = np.argsort(evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1).reshape(*lead, n)
    if not vectors:
        return evals
    vecs = v[:, :n, :n]
    vecs = np.take_along_axis(vecs, order[:, None, :], axis=2).reshape(*lead, n, n)
    return evals, vecs


def _rotate_round(a: np.ndarray, v: np.ndarray | None, p: np.ndarray, q: np.ndarray) -> None:
    app = a[:, p, p]
    aqq = a[:, q, q]
    apq = a[:, p, q]
    nonzero = apq != 0.0
    safe = np.where(nonzero, apq, 1.0)
    with np.errstate(over="ignore", divide="ignore"):
        theta = (aqq - app) / (2.0 * safe)
        t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
    t = np.where(nonzero, t, 0.0)
    c = 1.0 / np.sqrt(t * t + 1.0)
    s = t * c
    c3, s3 = c[:, :, None], s[:, :, None]

    rp, rq = a[:, p, :], a[:, q, :]
    a[:, p, :] = c3 * rp - s3 * rq
    a[:, q, :] = s3 * rp + c3 * rq
    cp, cq = a[:, :, p], a[:, :, q]
    c2, s2 = c[:, None, :], s[:, None, :]
    a[:, :, p] = c2 * cp - s2 * cq
    a[:, :, q] = s2 * cp + c2 * cq
    a[:, p, q] = 0.0
    a[:, q, p] = 0.0
    if v is not None:
        vp, vq = v[:, :, p], v[:, :, q]
        v[:, :, p] = c2 * vp - s2 * vq
        v[:, :, q] = s2 * vp + c2 * vq


def sym_eigvals(m) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix."""
    return jacobi_eigh(_as_array(m))


def sym_eig(m) -> tuple[np.ndarray, np.ndarray]:
    return jacobi_eigh(_as_array(m), vectors=True)


def min_eigval(m) -> float:
    return float(sym_eigvals(m)[0])


def min_eigvals(stack: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of each matrix in a (k, n, n) stack."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.shape[0] == 0:
        return np.zeros(0)
    return jacobi_eigh(stack)[:, 0]
