"""Semi-implicit BDF time loop for the monodomain system.

Each step extrapolates ``u*``, advances the ionic state at ``u*``, builds
``b = M (hist / dt - I_ion + I_app)`` and solves
``(alpha0 / dt) M u + K u = b``.  The matrix-free and matrix-based modes
differ only in how ``A`` and ``M`` are applied.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import mb_operator as mb
from .ionic import (BDF_ALPHA0, IonicModel, IonicState, NonFiniteStateError, NullIonicModel, bdf_history,
                    extrapolate, scheme_order, step_ionic)
from .mesh import DofMap, LevelHierarchy
from .mf_operator import DEFAULT_BATCH_WIDTH, MonodomainOperator
from .post import TRACE_COLUMNS, ActivationTracker, TraceSeries, format_row
from .solver import GmgPreconditioner, cg_solve

log = logging.getLogger(__name__)

MODES = ("mf", "mb")
PRECONDITIONERS = ("none", "jacobi", "gmg")
PHASES = ("solver", "assembly", "ionic")
PHASE_LABELS = {"solver": "Monodomain solver", "assembly": "Monodomain assembly", "ionic": "Ionic model solver"}

# 15 mV/ms over the 125 mV span of the dimensionless potential
STIMULUS_AMPLITUDE = 15.0 / 125.0
STIMULUS_DURATION = 3.0
STIMULUS_EDGE = 1.5


class LinearSolverError(RuntimeError):
    pass


@dataclass
class Stimulus:
    """``I_app = amplitude`` inside ``region`` for ``0 < t <= t_app``.

    ``region`` is ``("box", lower, upper)`` or ``("sphere", center, radius)``.
    """

    region: tuple
    amplitude: float = STIMULUS_AMPLITUDE
    t_app: float = STIMULUS_DURATION

    def __post_init__(self):
        kind = self.region[0]
        if kind not in ("box", "sphere"):
            raise ValueError(f"unknown stimulus region {kind!r}")
        if self.t_app < 0:
            raise ValueError("stimulus duration must be non-negative")

    @classmethod
    def corner_cube(cls, edge=STIMULUS_EDGE, origin=(0.0, 0.0, 0.0), **kw) -> "Stimulus":
        lo = tuple(float(o) for o in origin)
        return cls(("box", lo, tuple(o + edge for o in lo)), **kw)

    def indicator(self, points, tol=1e-12) -> np.ndarray:
        x = np.asarray(points, dtype=float)
        if self.region[0] == "box":
            lo, hi = np.asarray(self.region[1]), np.asarray(self.region[2])
            return np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)
        c, r = np.asarray(self.region[1]), float(self.region[2])
        return np.sum((x - c) ** 2, axis=-1) <= (r + tol) ** 2

    def active(self, t) -> bool:
        return 0.0 < t <= self.t_app + 1e-12

    def nodal(self, points, t, mask=None) -> np.ndarray:
        if mask is None:
            mask = self.indicator(points)
        return np.where(mask, self.amplitude if self.active(t) else 0.0, 0.0)


@dataclass
class TimeLoopConfig:
    dt: float = 0.1
    t_final: float = 200.0
    scheme: str = "BDF2"
    solver_mode: str = "mf"
    flavor: str = "LGL"
    preconditioner: str = "gmg"
    tol_abs: float = 1e-15
    tol_rel: float = 1e-7
    max_iter: int = 500
    reassemble: bool = True
    batch_width: int = DEFAULT_BATCH_WIDTH
    threads: int = 1
    max_coarse_dofs: int = 4000
    coarse_preconditioner: str = "jacobi"
    activation_threshold: float | None = None
    raise_on_nonconvergence: bool = True
    keep_fields: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_final < 0:
            raise ValueError("t_final must be non-negative")
        self.order = scheme_order(self.scheme)
        self.scheme = f"BDF{self.order}"
        if self.solver_mode not in MODES:
            raise ValueError(f"solver_mode must be one of {MODES}")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}")
        if self.solver_mode == "mb" and self.preconditioner == "gmg":
            raise ValueError("the gmg preconditioner is matrix-free; use jacobi or none with mb")
        self.flavor = str(self.flavor).upper()

    @property
    def n_steps(self) -> int:
        """Whole steps in ``(0, t_final]``; a trailing partial step is dropped."""
        return int(np.floor(self.t_final / self.dt + 1e-9))


@dataclass
class PhaseTimer:
    """Wall-clock per phase and per step (``time.perf_counter``)."""

    steps: list = field(default_factory=list)
    setup: float = 0.0
    post: float = 0.0

    def new_step(self):
        self.steps.append(dict.fromkeys(PHASES, 0.0))

    def add(self, phase, seconds):
        self.steps[-1][phase] += seconds

    def totals(self, skip_warmup=True) -> dict:
        rows = self.steps[1:] if skip_warmup and len(self.steps) > 1 else self.steps
        return {p: float(sum(r[p] for r in rows)) for p in PHASES}

    def report(self, skip_warmup=True) -> dict:
        tot = self.totals(skip_warmup)
        s = sum(tot.values())
        pct = {p: (100.0 * v / s if s > 0 else 0.0) for p, v in tot.items()}
        n = max(len(self.steps) - (1 if skip_warmup and len(self.steps) > 1 else 0), 1)
        return {
            "seconds": tot,
            "percent": pct,
            "labels": PHASE_LABELS,
            "per_step": {p: v / n for p, v in tot.items()},
            "total": s,
            "steps_timed": n,
            "setup_seconds": self.setup,
            "post_seconds": self.post,
        }


@dataclass
class SimulationResult:
    u: np.ndarray
    state: IonicState
    times: np.ndarray
    traces: TraceSeries
    activation: ActivationTracker
    iterations: list
    residuals: list
    timer: PhaseTimer
    config: TimeLoopConfig
    dofmap: DofMap
    fields: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def mean_iterations(self) -> float:
        return float(np.mean(self.iterations)) if self.iterations else 0.0

    def activation_times(self) -> np.ndarray:
        return self.activation.activation_times(self.config.n_steps * self.config.dt, self.config.dt)


class _Dirichlet:
    """``A`` restricted to free DOFs, identity on constrained ones."""

    def __init__(self, apply, free):
        self.A = apply
        self.free = free

    def __call__(self, v):
        return np.where(self.free, self.A(np.where(self.free, v, 0.0)), v)


class LinearSystem:
    """Operator, mass and preconditioner for one BDF order (fixed ``alpha0 / dt``)."""

    def __init__(self, basis, dofmap, diffusion, mass_coeff, cfg: TimeLoopConfig, free=None):
        self.basis, self.dofmap, self.diffusion = basis, dofmap, diffusion
        self.mass_coeff = mass_coeff
        self.cfg = cfg
        self.free = free
        self.op = None
        self.A = None
        self.M = None
        self.precond = None
        self._mf_prec_ready = False
        if cfg.solver_mode == "mf":
            self.op = MonodomainOperator(basis, dofmap, diffusion, mass_coeff, cfg.batch_width, cfg.threads)

    def setup_preconditioner(self):
        """Matrix-free preconditioner setup (once per run and order)."""
        cfg = self.cfg
        if cfg.solver_mode != "mf" or self._mf_prec_ready:
            return
        if cfg.preconditioner == "jacobi":
            diag = self.op.diagonal()
            if self.free is not None:
                diag = np.where(self.free, diag, 1.0)
            self.precond = 1.0 / diag
        elif cfg.preconditioner == "gmg":
            if self.free is not None:
                raise ValueError("gmg with Dirichlet constraints is not supported; use jacobi")
            hier = LevelHierarchy.from_fine(self.dofmap.mesh, self.dofmap.p, cfg.max_coarse_dofs)
            finest = self.op

            def make(dm):
                if dm.mesh == self.dofmap.mesh:
                    return finest
                return MonodomainOperator(self.basis, dm, self.diffusion, self.mass_coeff, cfg.batch_width,
                                          cfg.threads)

            self.precond = GmgPreconditioner(hier, make, coarse_preconditioner=cfg.coarse_preconditioner)
        self._mf_prec_ready = True

    def assemble(self):
        """Matrix-based: assemble ``A`` and ``M`` from scratch (per step)."""
        self.A, self.M = mb.assemble_system(self.basis, self.dofmap, self.diffusion, self.mass_coeff)
        if self.cfg.preconditioner == "jacobi":
            d = self.A.diagonal()
            if self.free is not None:
                d = np.where(self.free, d, 1.0)
            self.precond = 1.0 / d
        else:
            self.precond = None

    def mass(self, v):
        if self.op is not None:
            return self.op.mass_apply(v)
        return self.M @ v

    def matvec(self, v):
        if self.op is not None:
            return self.op.apply(v)
        return self.A @ v

    def operator(self):
        if self.free is None:
            return self.matvec
        return _Dirichlet(self.matvec, self.free)


def assemble_rhs(mass, u_levels, I_ion, I_app, dt, order=2) -> np.ndarray:
    """``b = M (sum_j c_j u^{n+1-j}) / dt + s + f`` with ``s = -M I_ion`` and ``f = M I_app``.

    For BDF2 the history term is ``M (4 u^n - u^{n-1}) / (2 dt)``.  The three
    contributions share one mass application.  ``mass`` is a callable
    ``v -> M v``.
    """
    hist = bdf_history(u_levels, order) / dt
    n = hist.shape[0]
    for name, arr in (("I_ion", I_ion), ("I_app", I_app)):
        if arr is not None and np.shape(arr) != (n,):
            raise ValueError(f"{name} of shape {np.shape(arr)} does not match {n} DOFs")
    g = hist
    if I_ion is not None:
        g = g - I_ion
    if I_app is not None:
        g = g + I_app
    return mass(g)


def _resolve_probe(dofmap, probe):
    if probe is None:
        return None
    if isinstance(probe, tuple) and len(probe) == 2 and isinstance(probe[0], np.ndarray):
        return probe
    return dofmap.point_weights(probe)


def run(mesh, basis, model: IonicModel, diffusion, stimulus: Stimulus | None, config: TimeLoopConfig,
        probe=None, u0=None, state0: IonicState | None = None, forcing=None, dirichlet=None,
        initial_levels=None, t0=0.0, on_step=None, csv_stream=None) -> SimulationResult:
    """Advance the monodomain system from ``t0`` to ``t0 + n_steps * dt``.

    Parameters
    ----------
    probe : point or (indices, weights), optional
        Point P for the ``u_P``/``w_P`` traces.
    forcing : callable, optional
        ``forcing(points, t) -> (n,)`` nodal source added to ``I_app``.
    dirichlet : callable, optional
        ``dirichlet(points, t)`` imposed on the boundary nodes; without it
        the boundary is insulated (homogeneous Neumann).
    initial_levels : list of ndarray, optional
        ``[u^n, u^{n-1}, ...]`` at ``t0, t0 - dt, ...``.  Missing levels are
        produced by lower-order start-up steps (BDF1, then BDF2).
    on_step : callable, optional
        ``on_step(step, t, u)`` after every step.
    csv_stream : file, optional
        Trace rows are written and flushed here as they are produced.
    """
    cfg = config
    if basis.flavor != cfg.flavor:
        raise ValueError(f"basis flavor {basis.flavor} does not match config flavor {cfg.flavor}")
    dofmap = DofMap(mesh, basis.p)
    n = dofmap.n_dofs
    pts = dofmap.node_coords
    dt = cfg.dt
    timer = PhaseTimer()
    t_setup = time.perf_counter()

    if initial_levels is not None:
        levels = [np.array(u, dtype=float) for u in initial_levels][: cfg.order]
    else:
        levels = [np.full(n, model.resting_state()[0], dtype=float) if u0 is None else np.array(u0, dtype=float)]
    for u in levels:
        if u.shape != (n,):
            raise ValueError(f"initial field of shape {u.shape} does not match {n} DOFs")
    state = state0.copy() if state0 is not None else IonicState.resting(model, n, depth=3)

    free = None
    if dirichlet is not None:
        free = ~dofmap.boundary_mask()
    stim_mask = stimulus.indicator(pts) if stimulus is not None else None
    probe = _resolve_probe(dofmap, probe)

    systems = {}
    traces = TraceSeries()
    tracker = ActivationTracker(n, cfg.activation_threshold)
    iterations, residuals, fields, times = [], [], [], []
    timer.setup = time.perf_counter() - t_setup

    writer = None
    if csv_stream is not None:
        writer = csv.writer(csv_stream)
        writer.writerow(TRACE_COLUMNS)

    for step in range(1, cfg.n_steps + 1):
        t = t0 + step * dt
        order = min(cfg.order, len(levels))
        alpha0 = BDF_ALPHA0[order]
        timer.new_step()

        # ionic phase: extrapolation, state update and current
        t1 = time.perf_counter()
        u_star = extrapolate(levels, order)
        I_ion = None if isinstance(model, NullIonicModel) else step_ionic(model, state, u_star, dt, order,
                                                                          step=step)
        timer.add("ionic", time.perf_counter() - t1)

        # assembly phase: system (matrix-based) and right-hand side
        t1 = time.perf_counter()
        if order not in systems:
            systems[order] = LinearSystem(basis, dofmap, diffusion, alpha0 / dt, cfg, free)
        sys_ = systems[order]
        if cfg.solver_mode == "mb" and (cfg.reassemble or sys_.A is None):
            sys_.assemble()
        I_app = None
        if stimulus is not None and stimulus.active(t):
            I_app = stimulus.nodal(pts, t, stim_mask)
        if forcing is not None:
            f = np.asarray(forcing(pts, t), dtype=float)
            I_app = f if I_app is None else I_app + f
        b = assemble_rhs(sys_.mass, levels, I_ion, I_app, dt, order)
        x0 = levels[0]
        if free is not None:
            g = np.where(free, 0.0, np.asarray(dirichlet(pts, t), dtype=float))
            b = np.where(free, b - sys_.matvec(g), g)
            x0 = np.where(free, x0, g)
        timer.add("assembly", time.perf_counter() - t1)

        # linear solver phase
        t1 = time.perf_counter()
        sys_.setup_preconditioner()
        res = cg_solve(sys_.operator(), b, x0=x0, tol_abs=cfg.tol_abs, tol_rel=cfg.tol_rel,
                       max_iter=cfg.max_iter, preconditioner=sys_.precond)
        timer.add("solver", time.perf_counter() - t1)
        if not res.converged and cfg.raise_on_nonconvergence:
            raise LinearSolverError(
                f"CG did not converge at step {step} (t = {t:g}): residual {res.final_residual:.3e} "
                f"after {res.iterations} iterations")
        u_new = res.x
        if not np.all(np.isfinite(u_new)):
            raise NonFiniteStateError(f"non-finite potential at step {step} (t = {t:g})")

        t1 = time.perf_counter()
        dudt = (alpha0 * u_new - bdf_history(levels, order)) / dt
        tracker.update(t, dudt)
        levels = [u_new] + levels[:2]
        iterations.append(res.iterations)
        residuals.append((res.initial_residual, res.final_residual))
        times.append(t)
        w = state.w[0][:, 0] if model.n_gating > 0 else None
        traces.record(step, t, u_new, w, probe)
        if writer is not None:
            writer.writerow(format_row(traces.rows[-1]))
            csv_stream.flush()
        if cfg.keep_fields and step % cfg.keep_fields == 0:
            fields.append((t, u_new.copy()))
        if on_step is not None:
            on_step(step, t, u_new)
        timer.post += time.perf_counter() - t1

    return SimulationResult(levels[0], state, np.asarray(times), traces, tracker, iterations, residuals,
                            timer, cfg, dofmap, fields, {"levels": levels, "systems": systems})


def bootstrap_first_step(mesh, basis, model, diffusion, stimulus, config: TimeLoopConfig, u0=None,
                         state0=None, probe=None):
    """One BDF1 step producing the second history level ``(u^1, w^1, z^1)``."""
    from dataclasses import replace

    cfg1 = replace(config, scheme="BDF1", t_final=config.dt)
    res = run(mesh, basis, model, diffusion, stimulus, cfg1, probe=probe, u0=u0, state0=state0)
    return res.u, res.state


def default_probe(mesh, stimulus: Stimulus | None = None):
    """Interior point farthest from the stimulus region (slab: the far corner)."""
    lo = np.asarray(mesh.origin, dtype=float)
    hi = lo + np.asarray(mesh.extent)
    if stimulus is None:
        return tuple(hi)
    corners = np.array(np.meshgrid(*[(lo[a], hi[a]) for a in range(mesh.dim)], indexing="ij")).reshape(mesh.dim, -1).T
    c = np.asarray(stimulus.region[1], dtype=float)
    far = corners[np.argmax(np.linalg.norm(corners - c, axis=1))]
    # pull slightly inside so the point is interior
    return tuple(far - 0.05 * np.sign(far - (lo + hi) / 2) * np.minimum(mesh.h, 1.0))
