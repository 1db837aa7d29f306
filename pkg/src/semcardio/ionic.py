"""Pointwise ionic models and their BDF-implicit state update.

A model provides the right-hand sides ``H`` (gating), ``G``
(concentrations) and the ionic current ``I_ion``.  The monodomain coupling
only ever evaluates them at the extrapolated potential ``u*``, so the update
of ``(w, z)`` is a decoupled per-DOF nonlinear problem.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# BDF-k written as (alpha0 y^{n+1} - sum_j c_j y^{n+1-j}) / dt together with
# the matching extrapolation weights for y*.
BDF_ALPHA0 = {1: 1.0, 2: 1.5, 3: 11.0 / 6.0}
BDF_HISTORY = {1: (1.0,), 2: (2.0, -0.5), 3: (3.0, -1.5, 1.0 / 3.0)}
BDF_EXTRAPOLATION = {1: (1.0,), 2: (2.0, -1.0), 3: (3.0, -3.0, 1.0)}

NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50

# Default surrogate, 0D cell kicked to u = 0.3: time until |u| < 1e-3 after
# the upstroke, from a dt = 0.01 ms BDF2 integration.
SURROGATE_APD_MS = 28.7

# dimensionless potential <-> mV for output
MV_REST = -85.0
MV_PEAK = 40.0


def scheme_order(scheme) -> int:
    """``"BDF2"`` or ``2`` -> 2."""
    s = str(scheme).upper().removeprefix("BDF")
    try:
        k = int(s)
    except ValueError:
        raise ValueError(f"unknown BDF scheme {scheme!r}") from None
    if k not in BDF_ALPHA0:
        raise ValueError(f"BDF order must be 1, 2 or 3, got {k}")
    return k


def bdf_history(levels, order):
    """``sum_j c_j y^{n+1-j}`` from ``levels = [y^n, y^{n-1}, ...]``."""
    c = BDF_HISTORY[order]
    out = c[0] * levels[0]
    for cj, y in zip(c[1:], levels[1:order]):
        out = out + cj * y
    return out


def extrapolate(levels, order):
    """``y*`` from the newest ``order`` levels (``2 y^n - y^{n-1}`` for BDF2)."""
    e = BDF_EXTRAPOLATION[order]
    out = e[0] * levels[0]
    for ej, y in zip(e[1:], levels[1:order]):
        out = out + ej * y
    return out


def to_millivolts(u):
    return MV_REST + (MV_PEAK - MV_REST) * np.asarray(u)


class NonFiniteStateError(FloatingPointError):
    pass


class IonicModel:
    """Interface for ``dw/dt = H(u, w, z)``, ``dz/dt = G(u, w, z)`` and ``I_ion``.

    Arrays of gating and concentration variables have shape ``(n, M)`` and
    ``(n, P)``; ``u`` has shape ``(n,)``.  Subclasses override the three
    right-hand sides and may override :meth:`solve_implicit` with a closed
    form.
    """

    n_gating = 0
    n_concentration = 0
    name = "abstract"

    def H(self, u, w, z):
        return np.zeros((len(u), self.n_gating))

    def G(self, u, w, z):
        return np.zeros((len(u), self.n_concentration))

    def I_ion(self, u, w, z):
        raise NotImplementedError

    def resting_state(self):
        """``(u0, w0, z0)`` for a single DOF."""
        return 0.0, np.zeros(self.n_gating), np.zeros(self.n_concentration)

    def bounds(self):
        """Admissible box for ``w`` used by the clamp, or None."""
        return None

    def params(self) -> dict:
        return {}

    def solve_implicit(self, u_star, w_hist, z_hist, alpha0, dt, w_guess, z_guess):
        """Solve ``alpha0 y - hist = dt * F(u*, y)`` for ``y = (w, z)`` per DOF.

        Damped Newton with a forward-difference Jacobian; returns
        ``(w, z, newton_iterations)``.
        """
        M, P = self.n_gating, self.n_concentration
        m = M + P
        if m == 0:
            return w_guess, z_guess, 0
        y = np.concatenate([w_guess, z_guess], axis=1)
        hist = np.concatenate([w_hist, z_hist], axis=1)

        def residual(y):
            w, z = y[:, :M], y[:, M:]
            F = np.concatenate([self.H(u_star, w, z), self.G(u_star, w, z)], axis=1)
            return alpha0 * y - hist - dt * F

        r = residual(y)
        for it in range(1, NEWTON_MAXITER + 1):
            J = np.empty((len(y), m, m))
            for j in range(m):
                eps = 1e-7 * np.maximum(1.0, np.abs(y[:, j]))
                yp = y.copy()
                yp[:, j] += eps
                J[:, :, j] = (residual(yp) - r) / eps[:, None]
            step = np.linalg.solve(J, r[..., None])[..., 0]
            lam = 1.0
            rn = np.linalg.norm(r, axis=1)
            while True:
                y_new = y - lam * step
                r_new = residual(y_new)
                if lam < 1e-4 or np.all(np.linalg.norm(r_new, axis=1) <= (1 - 1e-4 * lam) * rn + 1e-300):
                    break
                lam *= 0.5
            y, r = y_new, r_new
            if np.max(np.abs(lam * step)) < NEWTON_TOL:
                return y[:, :M], y[:, M:], it
        log.warning("ionic Newton did not converge in %d iterations", NEWTON_MAXITER)
        return y[:, :M], y[:, M:], NEWTON_MAXITER


class NullIonicModel(IonicModel):
    """``I_ion = 0`` with no state: turns the monodomain into a heat equation."""

    name = "none"

    def I_ion(self, u, w, z):
        return np.zeros_like(np.asarray(u, dtype=float))


@dataclass
class SurrogateParams:
    k: float = 8.0
    a: float = 0.15
    eps0: float = 0.002
    mu1: float = 0.2
    mu2: float = 0.3

    def validate(self):
        if not self.k > 0:
            raise ValueError("k must be positive")
        if not 0.0 < self.a < 0.5:
            raise ValueError("a must lie in (0, 0.5) for an excitable medium")
        if self.eps0 <= 0 or self.mu1 < 0 or self.mu2 <= 0:
            raise ValueError("eps0, mu2 must be positive and mu1 non-negative")
        return self


class SurrogateModel(IonicModel):
    """Two-variable excitable kinetics with a cubic current.

    ``I_ion = k u (u - a)(u - 1) + u w`` and
    ``H = eps(u, w) (-w - k u (u - a - 1))`` with
    ``eps = eps0 + mu1 w / (u + mu2)``.
    """

    n_gating = 1
    name = "surrogate"

    def __init__(self, params: SurrogateParams | None = None):
        self.p = (params or SurrogateParams()).validate()

    def params(self) -> dict:
        return dict(vars(self.p))

    def eps(self, u, w):
        p = self.p
        return p.eps0 + p.mu1 * w / (u + p.mu2)

    def H(self, u, w, z):
        p = self.p
        u = np.asarray(u)[:, None]
        return self.eps(u, w) * (-w - p.k * u * (u - p.a - 1.0))

    def I_ion(self, u, w, z):
        p = self.p
        u = np.asarray(u)
        return p.k * u * (u - p.a) * (u - 1.0) + u * w[:, 0]

    def bounds(self):
        # w relaxes towards the nullcline -k u (u - a - 1), whose maximum is this
        return 0.0, self.p.k * (1.0 + self.p.a) ** 2 / 4.0

    def solve_implicit(self, u_star, w_hist, z_hist, alpha0, dt, w_guess, z_guess):
        """Closed form: the implicit relation is a quadratic in ``w``.

        ``m w^2 + (beta + eps0 + m g) w + (eps0 g - r) = 0`` with
        ``m = mu1/(u*+mu2)``, ``g = k u*(u*-a-1)``, ``beta = alpha0/dt``,
        ``r = hist/dt``.  The root continuous in ``m -> 0`` is taken; DOFs
        where it is not real (``u* <= -mu2``) fall back to Newton.
        """
        p = self.p
        u = np.asarray(u_star, dtype=float)
        r = w_hist[:, 0] / dt
        g = p.k * u * (u - p.a - 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            m = p.mu1 / (u + p.mu2)
            B = alpha0 / dt + p.eps0 + m * g
            C = p.eps0 * g - r
            disc = B * B - 4.0 * m * C
            w = -2.0 * C / (B + np.sqrt(disc))
        bad = ~((u + p.mu2 > 0) & (B > 0) & (disc >= 0) & np.isfinite(w))
        its = 0
        if np.any(bad):
            idx = np.flatnonzero(bad)
            wb, _, its = IonicModel.solve_implicit(
                self, u[idx], w_hist[idx], z_hist[idx], alpha0, dt, w_guess[idx], z_guess[idx])
            w[idx] = wb[:, 0]
        return w[:, None], z_guess, its


def surrogate_model(params: dict | SurrogateParams | None = None) -> SurrogateModel:
    if isinstance(params, dict):
        params = SurrogateParams(**params)
    return SurrogateModel(params)


MODELS = {"surrogate": surrogate_model, "none": lambda params=None: NullIonicModel()}


def make_model(name: str, params: dict | None = None) -> IonicModel:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown ionic model {name!r}, expected one of {sorted(MODELS)}") from None
    return factory(params or None)


@dataclass
class IonicState:
    """Per-DOF state with BDF history; ``w[0]`` is the newest level."""

    w: list
    z: list
    clamp_count: int = 0
    newton_iterations: int = 0
    depth: int = field(default=3)

    @classmethod
    def resting(cls, model: IonicModel, n_dofs: int, depth: int = 3) -> "IonicState":
        _, w0, z0 = model.resting_state()
        w = np.tile(np.asarray(w0, dtype=float), (n_dofs, 1))
        z = np.tile(np.asarray(z0, dtype=float), (n_dofs, 1))
        return cls([w], [z], depth=depth)

    @property
    def n_dofs(self) -> int:
        return self.w[0].shape[0]

    def push(self, w, z):
        self.w = [w] + self.w[: self.depth - 1]
        self.z = [z] + self.z[: self.depth - 1]

    def copy(self) -> "IonicState":
        return IonicState([a.copy() for a in self.w], [a.copy() for a in self.z],
                          self.clamp_count, self.newton_iterations, self.depth)


def _check_finite(name, arr, step=None):
    if not np.all(np.isfinite(arr)):
        i = int(np.flatnonzero(~np.isfinite(np.reshape(arr, (len(arr), -1))).any(axis=1))[0])
        where = f" at step {step}" if step is not None else ""
        raise NonFiniteStateError(f"non-finite {name} at DOF {i}{where}: {np.reshape(arr, (len(arr), -1))[i]}")


def step_ionic(model: IonicModel, state: IonicState, u_star, dt: float, scheme="BDF2", step=None):
    """Advance ``(w, z)`` by one BDF step at ``u*`` and return ``I_ion``.

    ``scheme`` is capped by the available history, so the first calls of a
    BDF2/BDF3 run use lower orders.
    """
    order = min(scheme_order(scheme), len(state.w))
    u_star = np.asarray(u_star, dtype=float)
    if u_star.shape != (state.n_dofs,):
        raise ValueError(f"u* of shape {u_star.shape} does not match {state.n_dofs} DOFs")
    _check_finite("u*", u_star, step)
    alpha0 = BDF_ALPHA0[order]
    w_hist = bdf_history(state.w, order)
    z_hist = bdf_history(state.z, order)
    w, z, its = model.solve_implicit(u_star, w_hist, z_hist, alpha0, dt, state.w[0], state.z[0])
    state.newton_iterations += its
    box = model.bounds()
    if box is not None and w.size:
        lo, hi = box
        out = (w < lo) | (w > hi)
        n_out = int(np.count_nonzero(out))
        if n_out:
            state.clamp_count += n_out
            w = np.clip(w, lo, hi)
    _check_finite("gating state", w, step)
    _check_finite("concentration state", z, step)
    state.push(w, z)
    I = model.I_ion(u_star, w, z)
    _check_finite("I_ion", I, step)
    return I


def ici_rhs(I_ion, mass) -> np.ndarray:
    """``s = -M I_ion`` with ``mass`` an operator, sparse matrix or callable."""
    I_ion = np.asarray(I_ion, dtype=float)
    if hasattr(mass, "mass_apply"):
        if I_ion.shape != (mass.n_dofs,):
            raise ValueError(f"I_ion of shape {I_ion.shape} does not match {mass.n_dofs} DOFs")
        return -mass.mass_apply(I_ion)
    if callable(mass):
        return -mass(I_ion)
    if I_ion.shape != (mass.shape[0],):
        raise ValueError(f"I_ion of shape {I_ion.shape} does not match {mass.shape[0]} DOFs")
    return -(mass @ I_ion)


def simulate_cell(model: IonicModel, u0: float, t_final: float, dt: float, scheme="BDF2",
                  stimulus=None):
    """0D cell: ``du/dt = -I_ion + I_app`` with the same semi-implicit scheme.

    Returns ``(t, u, w)`` arrays including the initial state.
    """
    order = scheme_order(scheme)
    state = IonicState.resting(model, 1)
    us = [np.array([float(u0)])]
    n = int(round(t_final / dt))
    ts = [0.0]
    U = [float(u0)]
    W = [state.w[0][0].copy()]
    for k in range(1, n + 1):
        o = min(order, len(us))
        u_star = extrapolate(us, o)
        I = step_ionic(model, state, u_star, dt, o)
        t = k * dt
        app = stimulus(t) if stimulus is not None else 0.0
        u_new = (bdf_history(us, o) / dt - I + app) / (BDF_ALPHA0[o] / dt)
        us = [u_new] + us[:2]
        ts.append(t)
        U.append(float(u_new[0]))
        W.append(state.w[0][0].copy())
    return np.asarray(ts), np.asarray(U), np.asarray(W)
