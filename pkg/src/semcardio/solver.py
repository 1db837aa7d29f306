"""Conjugate gradients, Chebyshev smoothing and the h-multigrid V-cycle."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigvalsh_tridiagonal

from .basis import LGL, lagrange_matrices, make_quadrature
from .mesh import DofMap, LevelHierarchy

log = logging.getLogger(__name__)

EIGEN_SEED = 20240521


class IndefiniteOperatorError(ArithmeticError):
    """Raised when CG meets a non-positive curvature direction."""


def as_apply(op):
    """Turn an operator object, sparse matrix or callable into ``v -> A v``."""
    if callable(op) and not sp.issparse(op) and not isinstance(op, np.ndarray):
        return op
    if hasattr(op, "apply"):
        return op.apply
    return lambda v: op @ v


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residuals: list
    converged: bool

    @property
    def initial_residual(self) -> float:
        return self.residuals[0]

    @property
    def final_residual(self) -> float:
        return self.residuals[-1]


def cg_solve(operator, b, x0=None, tol_abs=1e-15, max_iter=500, preconditioner=None, tol_rel=0.0):
    """(Preconditioned) conjugate gradients.

    Stops when ``||b - A x||_2 <= max(tol_abs, tol_rel * ||b - A x0||_2)``.

    Parameters
    ----------
    preconditioner : callable, ndarray or None
        ``r -> z``; an ndarray is taken as an inverse diagonal.
    """
    A = as_apply(operator)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if preconditioner is None:
        P = None
    elif isinstance(preconditioner, np.ndarray):
        inv = preconditioner
        P = lambda r: inv * r  # noqa: E731
    else:
        P = as_apply(preconditioner)
    r = b - A(x) if np.any(x) else b.copy()
    rnorm = float(np.linalg.norm(r))
    history = [rnorm]
    target = max(tol_abs, tol_rel * rnorm)
    if rnorm <= target:
        return CGResult(x, 0, history, True)
    z = P(r) if P else r
    p = z.copy()
    rz = float(np.dot(r, z))
    for it in range(1, max_iter + 1):
        Ap = A(p)
        pAp = float(np.dot(p, Ap))
        if not pAp > 0.0:
            raise IndefiniteOperatorError(
                f"CG breakdown at iteration {it}: <p, Ap> = {pAp:.3e} (operator not positive definite)")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = float(np.linalg.norm(r))
        history.append(rnorm)
        if rnorm <= target:
            return CGResult(x, it, history, True)
        z = P(r) if P else r
        rz_new = float(np.dot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return CGResult(x, max_iter, history, False)


def lanczos_from_cg(alphas, betas) -> np.ndarray:
    """Tridiagonal Lanczos matrix implied by CG coefficients: (diag, offdiag)."""
    k = len(alphas)
    diag = np.empty(k)
    off = np.empty(max(k - 1, 0))
    for j in range(k):
        diag[j] = 1.0 / alphas[j] + (betas[j - 1] / alphas[j - 1] if j > 0 else 0.0)
        if j < k - 1:
            off[j] = np.sqrt(betas[j]) / alphas[j]
    return diag, off


def estimate_lambda_max(operator, diag_inv, n_cg_iters=10, seed=EIGEN_SEED) -> float:
    """Largest Ritz value of ``D^-1 A`` from ``n_cg_iters`` Jacobi-PCG steps.

    The right-hand side is a fixed pseudo-random vector so estimates, and
    hence iteration counts, are reproducible.
    """
    A = as_apply(operator)
    n = len(diag_inv)
    b = np.random.default_rng(seed).uniform(-1.0, 1.0, n)
    r = b.copy()
    z = diag_inv * r
    p = z.copy()
    rz = float(np.dot(r, z))
    alphas, betas = [], []
    for _ in range(n_cg_iters):
        Ap = A(p)
        pAp = float(np.dot(p, Ap))
        if pAp <= 0.0 or rz == 0.0:
            break
        alpha = rz / pAp
        alphas.append(alpha)
        r = r - alpha * Ap
        z = diag_inv * r
        rz_new = float(np.dot(r, z))
        if rz_new <= 1e-300 * max(abs(rz), 1.0):
            break
        betas.append(rz_new / rz)
        rz = rz_new
        p = z + betas[-1] * p
    if not alphas:
        return 0.0
    d, e = lanczos_from_cg(alphas, betas)
    if len(d) == 1:
        return float(d[0])
    return float(eigvalsh_tridiagonal(d, e)[-1])


@dataclass
class ChebyshevSmoother:
    """Chebyshev polynomial in ``D^-1 A`` over ``[lower, upper] * lambda_max``."""

    operator: object
    diag_inv: np.ndarray
    degree: int = 5
    lower_factor: float = 0.08
    upper_factor: float = 1.2
    n_eig_iters: int = 10
    lambda_max: float | None = None
    applications: int = 0

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("Chebyshev degree must be >= 1")
        self._A = as_apply(self.operator)
        if self.lambda_max is None:
            self.lambda_max = estimate_lambda_max(self._A, self.diag_inv, self.n_eig_iters)

    @property
    def interval(self):
        return self.lower_factor * self.lambda_max, self.upper_factor * self.lambda_max

    def apply(self, b, x=None):
        return chebyshev_apply(self, b, x)


def chebyshev_apply(smoother: ChebyshevSmoother, b, x=None) -> np.ndarray:
    """``degree`` steps of the three-term Chebyshev recurrence.

    Uses exactly ``degree`` operator applications; the iterate error is
    multiplied by ``T_k((theta - D^-1 A)/delta) / T_k(theta/delta)``.
    """
    A = smoother._A
    lo, hi = smoother.interval
    theta = 0.5 * (hi + lo)
    delta = 0.5 * (hi - lo)
    sigma = theta / delta
    rho = 1.0 / sigma
    x = np.zeros_like(b) if x is None else np.array(x, dtype=float)
    dinv = smoother.diag_inv
    r = b - A(x)
    d = (dinv * r) / theta
    x += d
    for _ in range(1, smoother.degree):
        r = b - A(x)
        rho_new = 1.0 / (2.0 * sigma - rho)
        d = (rho_new * rho) * d + (2.0 * rho_new / delta) * (dinv * r)
        x += d
        rho = rho_new
    smoother.applications += smoother.degree
    return x


# -- inter-level transfer -------------------------------------------------


def prolongation_1d(n_coarse_cells: int, p: int) -> sp.csr_matrix:
    """Coarse Q_p (LGL nodes) evaluated at the nodes of the 2x refined line."""
    nodes = make_quadrature(LGL, p + 1).points
    # child cells of a parent on [-1, 1]: [-1, 0] and [0, 1]
    child = np.concatenate([0.5 * (nodes[:p] + 1.0) - 1.0, 0.5 * (nodes[:p] + 1.0)])
    B, _ = lagrange_matrices(nodes, child)  # (2p, p+1)
    B[np.abs(B) < 1e-15] = 0.0
    nf = 2 * n_coarse_cells * p + 1
    nc = n_coarse_cells * p + 1
    rows, cols, vals = [], [], []
    for c in range(n_coarse_cells):
        r0 = 2 * p * c
        c0 = p * c
        for i in range(2 * p):
            for j in range(p + 1):
                if B[i, j] != 0.0:
                    rows.append(r0 + i)
                    cols.append(c0 + j)
                    vals.append(B[i, j])
    rows.append(nf - 1)
    cols.append(nc - 1)
    vals.append(1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(nf, nc))


def _apply_axis(mat, x, axis):
    x = np.moveaxis(x, axis, 0)
    shp = x.shape
    y = mat @ x.reshape(shp[0], -1)
    return np.moveaxis(y.reshape((mat.shape[0],) + shp[1:]), 0, axis)


@dataclass
class Transfer:
    """Tensor-product prolongation P = P_0 (x) P_1 (x) ... and R = P^T."""

    coarse: DofMap
    fine: DofMap
    factors: list
    transposed: list = field(default_factory=list)

    def __post_init__(self):
        self.transposed = [m.T.tocsr() for m in self.factors]

    def prolongate(self, v):
        x = np.asarray(v).reshape(self.coarse.grid_shape)
        for a, m in enumerate(self.factors):
            x = _apply_axis(m, x, a)
        return np.ascontiguousarray(x).reshape(-1)

    def restrict(self, v):
        x = np.asarray(v).reshape(self.fine.grid_shape)
        for a, m in enumerate(self.transposed):
            x = _apply_axis(m, x, a)
        return np.ascontiguousarray(x).reshape(-1)

    def matrix(self) -> sp.csr_matrix:
        P = self.factors[0]
        for m in self.factors[1:]:
            P = sp.kron(P, m)
        return P.tocsr()


def transfer_build(coarse: DofMap, fine: DofMap) -> Transfer:
    """Prolongation/restriction between nested octree levels of equal degree."""
    if coarse.p != fine.p:
        raise ValueError("levels must share the polynomial degree")
    cm, fm = coarse.mesh, fine.mesh
    nested = (
        cm.dim == fm.dim
        and np.allclose(cm.extent, fm.extent)
        and np.allclose(cm.origin, fm.origin)
        and all(f == 2 * c for c, f in zip(cm.cells_per_axis, fm.cells_per_axis))
    )
    if not nested:
        raise ValueError(f"levels {cm.cells_per_axis} -> {fm.cells_per_axis} are not nested octree levels")
    factors = [prolongation_1d(c, coarse.p) for c in cm.cells_per_axis]
    return Transfer(coarse, fine, factors)


# -- geometric multigrid --------------------------------------------------


@dataclass
class GmgLevel:
    operator: object
    smoother: ChebyshevSmoother | None
    transfer: Transfer | None  # from the level below to this one


@dataclass
class GmgPreconditioner:
    """High-order h-multigrid V-cycle, matrix-free on every level.

    ``make_operator(dofmap)`` builds the level operator; the coarsest level
    is solved by CG to ``coarse_tol`` relative residual, point-Jacobi
    preconditioned with the matrix-free diagonal when ``coarse_preconditioner``
    is ``"jacobi"`` and unpreconditioned when it is ``"none"``.
    """

    hierarchy: LevelHierarchy
    make_operator: object
    degree: int = 5
    lower_factor: float = 0.08
    upper_factor: float = 1.2
    n_eig_iters: int = 10
    coarse_tol: float = 1e-12
    coarse_max_iter: int = 2000
    coarse_preconditioner: str = "jacobi"
    levels: list = field(default_factory=list, init=False)
    level_times: list = field(default_factory=list, init=False)
    coarse_iterations: int = field(default=0, init=False)
    _coarse_diag_inv: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if len(self.hierarchy) < 1:
            raise ValueError("empty hierarchy")
        if self.coarse_preconditioner not in ("none", "jacobi"):
            raise ValueError("coarse_preconditioner must be 'none' or 'jacobi'")
        prev = None
        for i, (_, dm) in enumerate(self.hierarchy.levels):
            op = self.make_operator(dm)
            smoother = None
            if i > 0:
                smoother = ChebyshevSmoother(op, 1.0 / op.diagonal(), self.degree, self.lower_factor,
                                             self.upper_factor, self.n_eig_iters)
            elif self.coarse_preconditioner == "jacobi":
                self._coarse_diag_inv = 1.0 / op.diagonal()
            transfer = transfer_build(prev, dm) if prev is not None else None
            self.levels.append(GmgLevel(op, smoother, transfer))
            prev = dm
        self.level_times = [0.0] * len(self.levels)

    @property
    def operator(self):
        return self.levels[-1].operator

    def vcycle(self, r, level=None) -> np.ndarray:
        if level is None:
            level = len(self.levels) - 1
        t0 = time.perf_counter()
        lv = self.levels[level]
        if level == 0:
            if not np.any(r):
                return np.zeros_like(r)
            res = cg_solve(lv.operator, r, tol_abs=0.0, tol_rel=self.coarse_tol,
                           max_iter=self.coarse_max_iter, preconditioner=self._coarse_diag_inv)
            self.coarse_iterations += res.iterations
            self.level_times[0] += time.perf_counter() - t0
            return res.x
        A = as_apply(lv.operator)
        x = chebyshev_apply(lv.smoother, r)
        rc = lv.transfer.restrict(r - A(x))
        self.level_times[level] += time.perf_counter() - t0
        ec = self.vcycle(rc, level - 1)
        t1 = time.perf_counter()
        x = x + lv.transfer.prolongate(ec)
        x = chebyshev_apply(lv.smoother, r, x)
        self.level_times[level] += time.perf_counter() - t1
        return x

    __call__ = vcycle

    def apply(self, r):
        return self.vcycle(r)


def gmg_vcycle(preconditioner: GmgPreconditioner, r) -> np.ndarray:
    return preconditioner.vcycle(np.asarray(r, dtype=float))
