"""One-dimensional quadrature rules and nodal Lagrange bases on [-1, 1].

Everything the tensor-product kernels need is built here once per
(degree, flavor) pair: Legendre-Gauss (LG) and Legendre-Gauss-Lobatto (LGL)
rules, barycentric Lagrange evaluation, and the value/derivative matrices
``B`` and ``D`` sampled at the quadrature points.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

LG = "LG"
LGL = "LGL"
FLAVORS = (LG, LGL)

MAX_POINTS = 16
MAX_DEGREE = 8

_NEWTON_TOL = 1e-15
_NEWTON_MAXITER = 100


def _check_flavor(flavor: str) -> str:
    flavor = str(flavor).upper()
    if flavor not in FLAVORS:
        raise ValueError(f"unknown quadrature flavor {flavor!r}, expected one of {FLAVORS}")
    return flavor


def _legendre(n: int, x: np.ndarray):
    """Return (P_n(x), P_{n-1}(x)) by the three-term recurrence."""
    p_prev = np.ones_like(x)
    if n == 0:
        return p_prev, np.zeros_like(x)
    p = x.copy()
    for k in range(2, n + 1):
        p_prev, p = p, ((2 * k - 1) * x * p - (k - 1) * p_prev) / k
    return p, p_prev


def _gauss_nodes(n: int):
    if n == 1:
        return np.array([0.0]), np.array([2.0])
    i = np.arange(1, n + 1)
    x = -np.cos(np.pi * (4 * i - 1) / (4 * n + 2))
    for _ in range(_NEWTON_MAXITER):
        pn, pn1 = _legendre(n, x)
        dp = n * (x * pn - pn1) / (x * x - 1.0)
        dx = pn / dp
        x = x - dx
        if np.max(np.abs(dx)) < _NEWTON_TOL:
            break
    pn, pn1 = _legendre(n, x)
    dp = n * (x * pn - pn1) / (x * x - 1.0)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    return x, w


def _lobatto_nodes(n: int):
    # Newton on (1 - x^2) P'_N with N = n - 1, Chebyshev-Gauss-Lobatto start.
    N = n - 1
    x = -np.cos(np.pi * np.arange(n) / N)
    for _ in range(_NEWTON_MAXITER):
        pn, pn1 = _legendre(N, x)
        dx = (x * pn - pn1) / (n * pn)
        x = x - dx
        if np.max(np.abs(dx)) < _NEWTON_TOL:
            break
    x[0], x[-1] = -1.0, 1.0
    pn, _ = _legendre(N, x)
    w = 2.0 / (N * n * pn * pn)
    return x, w


@dataclass(frozen=True)
class QuadratureRule:
    flavor: str
    points: np.ndarray
    weights: np.ndarray
    degree_of_exactness: int

    @property
    def n_points(self) -> int:
        return len(self.points)

    def integrate(self, f) -> float:
        return float(np.dot(self.weights, f(self.points)))


@lru_cache(maxsize=None)
def make_quadrature(flavor: str, n_points: int) -> QuadratureRule:
    """Build an ``n_points`` LG or LGL rule on [-1, 1].

    Parameters
    ----------
    flavor : {"LG", "LGL"}
    n_points : int
        1..16 for LG, 2..16 for LGL.
    """
    flavor = _check_flavor(flavor)
    n_points = int(n_points)
    lo = 1 if flavor == LG else 2
    if not lo <= n_points <= MAX_POINTS:
        raise ValueError(f"{flavor} rule needs {lo} <= n_points <= {MAX_POINTS}, got {n_points}")
    if flavor == LG:
        x, w = _gauss_nodes(n_points)
        exact = 2 * n_points - 1
    else:
        x, w = _lobatto_nodes(n_points)
        exact = 2 * n_points - 3
    if n_points % 2 == 1:
        x[n_points // 2] = 0.0
    # symmetrize against round-off
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    x.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(flavor, x, w, exact)


def barycentric_weights(nodes) -> np.ndarray:
    """Barycentric weights ``w_i = 1 / prod_{j != i} (x_i - x_j)``."""
    x = np.asarray(nodes, dtype=float)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    if np.any(diff == 0.0):
        raise ValueError("interpolation nodes must be pairwise distinct")
    return 1.0 / np.prod(diff, axis=1)


def lagrange_matrices(nodes, points):
    """Values and derivatives of the Lagrange basis on ``nodes`` at ``points``.

    Returns ``(B, D)`` with ``B[q, i] = l_i(points[q])`` and
    ``D[q, i] = l_i'(points[q])``.
    """
    x = np.asarray(nodes, dtype=float)
    xi = np.asarray(points, dtype=float)
    w = barycentric_weights(x)
    n, m = len(x), len(xi)
    B = np.zeros((m, n))
    D = np.zeros((m, n))
    for q in range(m):
        d = xi[q] - x
        hit = np.flatnonzero(d == 0.0)
        if hit.size:
            i = hit[0]
            B[q, i] = 1.0
            others = np.arange(n) != i
            D[q, others] = (w[others] / w[i]) / (x[i] - x[others])
            D[q, i] = -np.sum(D[q, others])
            continue
        t = w / d
        s = np.sum(t)
        ds = -np.sum(t / d)
        B[q] = t / s
        D[q] = (-t / d * s - t * ds) / (s * s)
    return B, D


@dataclass(frozen=True)
class TensorBasis:
    """Nodal Q_p basis on LGL support nodes, sampled at a (p+1)-point rule."""

    p: int
    support_nodes: np.ndarray
    quad: QuadratureRule
    B: np.ndarray
    D: np.ndarray

    @property
    def flavor(self) -> str:
        return self.quad.flavor

    @property
    def n(self) -> int:
        return self.p + 1

    @property
    def collocated(self) -> bool:
        """True when quadrature points coincide with support nodes (B = I)."""
        return self.quad.flavor == LGL and self.quad.n_points == self.p + 1

    def evaluate(self, points):
        """Basis values and derivatives at arbitrary reference points."""
        return lagrange_matrices(self.support_nodes, points)


@lru_cache(maxsize=None)
def make_basis(p: int, flavor: str = LGL, n_quad: int | None = None) -> TensorBasis:
    """Lagrange basis of degree ``p`` with a ``flavor`` quadrature rule.

    ``n_quad`` defaults to ``p + 1`` points; other counts are used only for
    over-integrated error norms.
    """
    p = int(p)
    if not 1 <= p <= MAX_DEGREE:
        raise ValueError(f"polynomial degree must satisfy 1 <= p <= {MAX_DEGREE}, got {p}")
    flavor = _check_flavor(flavor)
    nodes = make_quadrature(LGL, p + 1).points
    quad = make_quadrature(flavor, p + 1 if n_quad is None else n_quad)
    B, D = lagrange_matrices(nodes, quad.points)
    if flavor == LGL and quad.n_points == p + 1:
        B = np.eye(p + 1)
    for a in (B, D):
        a.setflags(write=False)
    return TensorBasis(p, nodes, quad, B, D)
