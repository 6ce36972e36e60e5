"""Independent reference computations used by the tests.

Nothing here calls into the package's numerical kernels; each oracle is
derived from a definition (cofactor expansion, sign changes of the
characteristic polynomial, power iteration, exhaustive search).
"""

from itertools import combinations

import numpy as np


def cofactor_det(a: np.ndarray) -> float:
    """Determinant by Laplace expansion along the first row."""
    n = a.shape[0]
    if n == 1:
        return float(a[0, 0])
    if n == 2:
        return float(a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0])
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(a, 0, axis=0), j, axis=1)
        total += (-1) ** j * a[0, j] * cofactor_det(minor)
    return total


def charpoly_roots(a: np.ndarray, grid: int = 4000, iters: int = 200) -> np.ndarray:
    """Eigenvalues of a small symmetric matrix from sign changes of det(A - xI).

    The search interval comes from Gershgorin discs; each bracketed root is
    refined by bisection to machine precision.
    """
    n = a.shape[0]
    radius = np.sum(np.abs(a), axis=1) - np.abs(np.diag(a))
    lo = float(np.min(np.diag(a) - radius)) - 1.0
    hi = float(np.max(np.diag(a) + radius)) + 1.0

    def p(x):
        return cofactor_det(a - x * np.eye(n))

    xs = np.linspace(lo, hi, grid)
    vals = np.array([p(x) for x in xs])
    roots = []
    for k in range(grid - 1):
        if vals[k] == 0.0:
            roots.append(xs[k])
            continue
        if vals[k] * vals[k + 1] < 0:
            left, right, fl = xs[k], xs[k + 1], vals[k]
            for _ in range(iters):
                mid = 0.5 * (left + right)
                fm = p(mid)
                if fm == 0.0 or right - left < 1e-15 * max(1.0, abs(mid)):
                    break
                if fl * fm < 0:
                    right = mid
                else:
                    left, fl = mid, fm
            roots.append(0.5 * (left + right))
    return np.sort(np.array(roots))


def power_iteration_extreme(a: np.ndarray, iters: int = 5000, seed: int = 0) -> float:
    """Eigenvalue of largest magnitude via power iteration with Rayleigh quotient."""
    v = np.random.default_rng(seed).normal(size=a.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = a @ v
        v = w / np.linalg.norm(w)
    return float(v @ a @ v)


def random_symmetric(rng: np.random.Generator, n: int, spread: float = 1.0) -> np.ndarray:
    m = rng.normal(size=(n, n)) * spread
    return 0.5 * (m + m.T)


def brute_force_prefix_plan(pool, budget, threshold, counts):
    """Exhaustive search for the most-negative prefix that fits the budget.

    ``pool`` is a list of (eigval, layer_id, index, cost). Layers whose
    eligible count (``counts[layer]``) is below ``threshold`` are removed
    first. Every subset of the remaining neurons is enumerated; a subset is
    admissible when it is closed under "more negative first" (with ties
    ordered by layer then index) and its cost fits the budget. The
    admissible subset with the most neurons is returned as a set of
    (layer_id, index).
    """
    kept = [c for c in pool if c[0] < -1e-6 and counts[c[1]] >= threshold]
    order = sorted(kept, key=lambda c: (c[0], c[1], c[2]))
    rank = {(c[1], c[2]): r for r, c in enumerate(order)}
    best: set = set()
    for size in range(len(order) + 1):
        for subset in combinations(order, size):
            ranks = sorted(rank[(c[1], c[2])] for c in subset)
            if ranks != list(range(size)):
                continue
            if sum(c[3] for c in subset) <= budget and size > len(best):
                best = {(c[1], c[2]) for c in subset}
    return best


def brute_force_max_mass(pool, budget):
    """Subset of equal-cost neurons maximizing total |eigval| within budget."""
    best, best_mass = set(), -1.0
    for size in range(len(pool) + 1):
        for subset in combinations(pool, size):
            if sum(c[3] for c in subset) > budget:
                continue
            mass = -sum(c[0] for c in subset)
            if mass > best_mass + 1e-12:
                best, best_mass = {(c[1], c[2]) for c in subset}, mass
    return best


# ---------------------------------------------------------------------------
# Two-layer GeLU network, written in plain numpy (float64)
# ---------------------------------------------------------------------------

def _erf(x):
    from math import erf
    return np.vectorize(erf)(x)


def np_gelu(z):
    return 0.5 * z * (1.0 + _erf(z / np.sqrt(2.0)))


def np_gelu_d1(z):
    phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return 0.5 * (1.0 + _erf(z / np.sqrt(2.0))) + z * phi


def toy_loss(w1, b1, w2, b2, x, y):
    """Mean cross-entropy of fc2(gelu(fc1(x)))."""
    logits = np_gelu(x @ w1.T + b1) @ w2.T + b2
    m = logits.max(1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def fd_hessian(f, w: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Hessian of scalar ``f`` at vector ``w`` from second differences of values."""
    n = w.size
    h = np.zeros((n, n))
    f0 = f(w)
    for a in range(n):
        for b in range(a, n):
            if a == b:
                e = np.zeros(n)
                e[a] = eps
                h[a, a] = (f(w + e) - 2 * f0 + f(w - e)) / eps ** 2
            else:
                ea, eb = np.zeros(n), np.zeros(n)
                ea[a], eb[b] = eps, eps
                h[a, b] = h[b, a] = (f(w + ea + eb) - f(w + ea - eb) - f(w - ea + eb)
                                     + f(w - ea - eb)) / (4 * eps ** 2)
    return h


def gauss_newton_fc1(w1, b1, w2, b2, x, y, i):
    """Analytic Gauss-Newton block for fc1 neuron ``i``.

    (1/N) sum_n gelu'(z)^2 * w2[:, i]^T (diag(p) - p p^T) w2[:, i] * x x^T
    """
    z = x @ w1.T + b1
    logits = np_gelu(z) @ w2.T + b2
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    a = w2[:, i]
    curv = (p * a * a).sum(1) - (p @ a) ** 2
    coef = np_gelu_d1(z[:, i]) ** 2 * curv
    return np.einsum("n,na,nb->ab", coef, x, x) / len(y)


def toy_params(model):
    return (model.fc1.weight.data.astype(np.float64), model.fc1.bias.data.astype(np.float64),
            model.fc2.weight.data.astype(np.float64), model.fc2.bias.data.astype(np.float64))


def splitting_oracle(model, x, y, i):
    """Full fan-in Hessian minus Gauss-Newton term for fc1 neuron ``i``."""
    w1, b1, w2, b2 = toy_params(model)

    def f(row):
        w = w1.copy()
        w[i] = row
        return toy_loss(w, b1, w2, b2, x, y)

    return fd_hessian(f, w1[i].copy()) - gauss_newton_fc1(w1, b1, w2, b2, x, y, i)


def split_slice(model, x, y, i, v, eps):
    """Loss after splitting fc1 neuron ``i`` into copies w +/- eps*v with halved outputs."""
    w1, b1, w2, b2 = toy_params(model)
    w1s = np.vstack([w1, w1[i] - eps * v])
    w1s[i] = w1[i] + eps * v
    b1s = np.append(b1, b1[i])
    w2s = np.hstack([w2, w2[:, i:i + 1] / 2])
    w2s[:, i] /= 2
    return toy_loss(w1s, b1s, w2s, b2, x, y)


def elimination_logdet(a: np.ndarray) -> tuple[float, float]:
    """(sign, log|det|) by Gaussian elimination with partial pivoting."""
    u = np.array(a, dtype=np.float64)
    n = u.shape[0]
    sign, logdet = 1.0, 0.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(u[k:, k])))
        if u[p, k] == 0.0:
            return 0.0, -np.inf
        if p != k:
            u[[k, p]] = u[[p, k]]
            sign = -sign
        sign *= np.sign(u[k, k])
        logdet += np.log(abs(u[k, k]))
        u[k + 1:, k:] -= np.outer(u[k + 1:, k] / u[k, k], u[k, k:])
    return sign, logdet
