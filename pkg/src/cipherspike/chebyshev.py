"""Chebyshev step-function series and their encrypted evaluation.

The firing nonlinearity is approximated by a degree-d Chebyshev expansion
of the Heaviside step on [-1, 1].  Encrypted evaluation uses a
baby-step/giant-step split: Chebyshev powers T_1..T_{m-1} plus giants
T_m, T_2m, ... are produced once from the input, and several coefficient
sets can then be evaluated over the shared powers (the firing indicator
and its matching reset/decay series differ only in coefficients).

Level contract: evaluating a degree-d series consumes exactly
ceil(log2(d)) + 1 levels — the natural cost of the recursion, topped up
with a free trim so callers can budget without knowing the split detail.
"""

from __future__ import annotations

import math

import numpy as np

from .backend import Backend, CipherVector

BABY_COUNT = 8  # leaf blocks hold degrees < 8


# ---------------------------------------------------------------------------
# fitting / plain evaluation


def fit_function(f, degree: int) -> np.ndarray:
    """Chebyshev coefficients of f on [-1, 1] by Gauss-Chebyshev quadrature."""
    m = 4 * (degree + 1)
    theta = (np.arange(m) + 0.5) * np.pi / m
    fx = f(np.cos(theta))
    n = np.arange(degree + 1)
    c = 2.0 / m * np.cos(np.outer(n, theta)) @ fx
    c[0] *= 0.5
    return c


def fit_step(threshold: float, degree: int) -> np.ndarray:
    """Series for the firing indicator: 1 where x > threshold, else 0."""
    if not -1.0 < threshold < 1.0:
        raise ValueError("threshold must lie inside (-1, 1)")
    return fit_function(lambda x: (x > threshold).astype(np.float64), degree)


def decay_from_step(step_coeffs: np.ndarray, tau: float) -> np.ndarray:
    """Coefficients of tau * (1 - S(x)) given the step series S."""
    d = -tau * np.asarray(step_coeffs, dtype=np.float64)
    d[0] += tau
    return d


def clenshaw(coeffs, x):
    """Plain Chebyshev evaluation (reference for the encrypted path)."""
    x = np.asarray(x, dtype=np.float64)
    b1 = np.zeros_like(x)
    b2 = np.zeros_like(x)
    for c in np.asarray(coeffs)[:0:-1]:
        b1, b2 = 2.0 * x * b1 - b2 + c, b1
    return x * b1 - b2 + coeffs[0]


def dead_zone(coeffs, threshold: float, tol: float = 0.05, grid: int = 20001) -> float:
    """Half-width of the band around the jump where |S - step| exceeds tol."""
    x = np.linspace(-1.0, 1.0, grid)
    err = np.abs(clenshaw(coeffs, x) - (x > threshold))
    bad = np.abs(x[err > tol] - threshold)
    return float(bad.max()) if len(bad) else 0.0


def save_coeffs(path: str, coeffs):
    np.savetxt(path, np.asarray(coeffs, dtype=np.float64))


def load_coeffs(path: str) -> np.ndarray:
    return np.atleast_1d(np.loadtxt(path, dtype=np.float64))


# ---------------------------------------------------------------------------
# Chebyshev-basis division: p = q * T_g + r  (uses 2 T_g T_j = T_{g+j} + T_{|g-j|})


def cheb_divide(coeffs: np.ndarray, g: int):
    c = np.asarray(coeffs, dtype=np.float64)
    d = len(c) - 1
    assert d >= g >= 1
    q = np.zeros(d - g + 1)
    r = c[:g].copy()
    q[0] = c[g]
    for j in range(1, d - g + 1):
        q[j] = 2.0 * c[g + j]
        r[abs(g - j)] -= c[g + j]
    return q, r


def _trim_zeros(c: np.ndarray) -> np.ndarray:
    nz = np.nonzero(c)[0]
    return c[: nz[-1] + 1] if len(nz) else c[:1]


# ---------------------------------------------------------------------------
# encrypted evaluation


class ChebyshevPowers:
    """Lazily built T_k ciphertexts over one input, shared across series."""

    def __init__(self, backend: Backend, x: CipherVector):
        self.backend = backend
        self.T: dict[int, CipherVector] = {1: x}

    def get(self, k: int) -> CipherVector:
        if k in self.T:
            return self.T[k]
        be = self.backend
        i, j = (k + 1) // 2, k // 2
        prod = be.mul(self.get(i), self.get(j))
        two = be.add(prod, prod)
        if i == j:  # T_2i = 2 T_i^2 - 1
            out = be.add_plain(two, np.full(be.slots, -1.0))
        else:  # T_{i+j} = 2 T_i T_j - T_{i-j}
            out = be.sub(two, self.get(i - j))
        self.T[k] = out
        return out


def _leaf(powers: ChebyshevPowers, c: np.ndarray) -> CipherVector:
    be = powers.backend
    deg = len(c) - 1
    ks = list(range(1, max(deg, 1) + 1))
    vecs = [powers.get(k) for k in ks]
    coeffs = [c[k] if k <= deg else 0.0 for k in ks]
    return be.linear_combine(vecs, coeffs, const=float(c[0]))


def _eval_block(powers: ChebyshevPowers, c: np.ndarray) -> CipherVector:
    c = _trim_zeros(c)
    d = len(c) - 1
    if d < BABY_COUNT:
        return _leaf(powers, c)
    g = 1 << (d.bit_length() - 1)  # largest power of two <= d
    q, r = cheb_divide(c, g)
    be = powers.backend
    qv = _eval_block(powers, q)
    out = be.mul(qv, powers.get(g))
    return be.add(out, _eval_block(powers, r))


def series_levels(degree: int) -> int:
    """Levels consumed by evaluate_series for this degree."""
    return max(degree, 1).bit_length() - (1 if degree and degree & (degree - 1) == 0 else 0) + 1


def evaluate_series(backend: Backend, x: CipherVector, coeff_sets) -> list[CipherVector]:
    """Evaluate one or more Chebyshev series over shared powers of x.

    All results come back at the same level: input level minus
    ceil(log2(max degree)) + 1.
    """
    sets = [np.asarray(c, dtype=np.float64) for c in coeff_sets]
    max_deg = max(len(c) - 1 for c in sets)
    budget = series_levels(max_deg)
    target = x.level - budget
    if target < 1:
        # surface as a level-exhaustion through the ledger
        backend._need(x, budget + 1, "chebyshev_series")
    powers = ChebyshevPowers(backend, x)
    outs = []
    for c in sets:
        v = _eval_block(powers, c)
        assert v.level >= target, "series recursion exceeded its level budget"
        outs.append(backend.trim(v, target))
    return outs
