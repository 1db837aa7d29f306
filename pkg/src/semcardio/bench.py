"""Desk-scale reproductions of the convergence, iteration and timing studies.

Three families of studies live here:

* :func:`bdf_order_study` integrates the 2D heat equation with manufactured
  solutions and fits temporal convergence slopes for BDF1/2/3.
* :func:`spectral_convergence_study` solves a shifted Neumann problem for a
  sweep of polynomial degrees and checks the faster-than-algebraic decay.
* :func:`slab_study` runs a :class:`SweepPlan` of slab monodomain
  simulations and derives error, speedup, phase-share and iteration tables.
"""
from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .basis import LG, LGL, make_basis
from .ionic import NullIonicModel, make_model
from .mesh import (SLAB_EXTENT, DofMap, IsotropicDiffusion, build_box_mesh, table1_diffusion)
from .mf_operator import MonodomainOperator
from .post import NormEvaluator, TraceSeries, error_norms, subsample
from .solver import cg_solve
from .stepper import PHASES, Stimulus, TimeLoopConfig, default_probe, run

log = logging.getLogger(__name__)

__all__ = [
    "HeatProblem", "heat_problem", "heat_run", "fit_slope", "bdf_order_study", "plateau_check",
    "spectral_convergence_study", "h_convergence_study", "SlabRun", "SweepPlan", "slab_study",
    "run_slab", "timing_report", "speedup_table", "phase_table", "iteration_table", "error_table",
    "content_version",
]


# ---------------------------------------------------------------------------
# heat equation (BDF order study)

@dataclass(frozen=True)
class HeatProblem:
    """Manufactured solution ``u = S(x) g(t)`` of ``u_t - lap u = f`` on ``(0, 1)^2``.

    ``g(t) = 2 + sin(pi t)``; ``S = x1^2 + x2^2`` ("poly") or
    ``S = sin(pi x1) sin(pi x2)`` ("sin").
    """

    name: str

    @staticmethod
    def g(t):
        return 2.0 + np.sin(np.pi * t)

    @staticmethod
    def dg(t):
        return np.pi * np.cos(np.pi * t)

    def space(self, x):
        x1, x2 = x[..., 0], x[..., 1]
        if self.name == "poly":
            return x1 ** 2 + x2 ** 2
        return np.sin(np.pi * x1) * np.sin(np.pi * x2)

    def space_grad(self, x):
        x1, x2 = x[..., 0], x[..., 1]
        if self.name == "poly":
            return np.stack([2 * x1, 2 * x2], axis=-1)
        s1, s2 = np.sin(np.pi * x1), np.sin(np.pi * x2)
        c1, c2 = np.cos(np.pi * x1), np.cos(np.pi * x2)
        return np.stack([np.pi * c1 * s2, np.pi * s1 * c2], axis=-1)

    def space_laplacian(self, x):
        if self.name == "poly":
            return np.full(x.shape[:-1], 4.0)
        return -2.0 * np.pi ** 2 * self.space(x)

    def exact(self, x, t):
        return self.space(x) * self.g(t)

    def grad(self, x, t):
        return self.space_grad(x) * self.g(t)

    def forcing(self, x, t):
        return self.space(x) * self.dg(t) - self.space_laplacian(x) * self.g(t)


HEAT_PROBLEMS = ("poly", "sin")


def heat_problem(name: str) -> HeatProblem:
    if name not in HEAT_PROBLEMS:
        raise ValueError(f"unknown heat problem {name!r}; expected one of {HEAT_PROBLEMS}")
    return HeatProblem(name)


def heat_run(p: int, scheme: str, dt: float, problem="poly", t_final=1.0, cells=20, flavor=LGL,
             seed="exact", tol_rel=1e-13) -> dict:
    """One heat-equation run; returns the time-accumulated ``err_H1`` and ``err_L2``.

    The mesh is ``cells x cells`` on the unit square (``h = 0.5 mm`` for
    ``cells = 20`` with lengths in cm), Dirichlet data come from the exact
    solution and the diffusivity is 1.  With ``seed = "exact"`` the missing
    history levels ``u(-dt), u(-2 dt)`` are taken from the exact solution;
    with ``seed = "bootstrap"`` they are produced by lower-order steps.
    """
    prob = heat_problem(problem) if isinstance(problem, str) else problem
    mesh = build_box_mesh((1.0, 1.0), (cells, cells))
    basis = make_basis(p, flavor)
    dofmap = DofMap(mesh, p)
    cfg = TimeLoopConfig(dt=dt, t_final=t_final, scheme=scheme, solver_mode="mb", flavor=flavor,
                         preconditioner="jacobi", reassemble=False, tol_abs=1e-15, tol_rel=tol_rel,
                         max_iter=2000)
    pts = dofmap.node_coords
    if seed == "exact":
        levels = [prob.exact(pts, -k * dt) for k in range(cfg.order)]
    elif seed == "bootstrap":
        levels = [prob.exact(pts, 0.0)]
    else:
        raise ValueError("seed must be 'exact' or 'bootstrap'")
    # u = S(x) g(t): spatial factors evaluated once
    S, lap = prob.space(pts), prob.space_laplacian(pts)
    ev = NormEvaluator(dofmap)
    Sq, Gq = prob.space(ev.points), prob.space_grad(ev.points)
    sums = np.zeros(2)

    def on_step(step, t, u):
        sums[:] += ev.errors_from_values(u, Sq * prob.g(t), Gq * prob.g(t))

    t0 = time.perf_counter()
    res = run(mesh, basis, NullIonicModel(), IsotropicDiffusion(1.0, dim=2), None, cfg, initial_levels=levels,
              forcing=lambda x, t: S * prob.dg(t) - lap * prob.g(t), dirichlet=lambda x, t: S * prob.g(t),
              on_step=on_step)
    out = {"err_H1": float(np.sqrt(dt * sums[1])), "err_L2": float(np.sqrt(dt * sums[0]))}
    out.update(p=p, scheme=cfg.scheme, dt=dt, problem=prob.name, steps=cfg.n_steps,
               mean_iterations=res.mean_iterations, seconds=time.perf_counter() - t0)
    return out


def fit_slope(dts, errs) -> float:
    """Least-squares slope of ``log err`` against ``log dt``."""
    x = np.log(np.asarray(dts, dtype=float))
    y = np.log(np.asarray(errs, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


POLY_DTS = (0.04, 0.02, 0.01, 0.005)
SIN_DTS = (1e-3, 4e-4, 2e-4, 1e-4)


def bdf_order_study(ps=(3, 4), schemes=("BDF1", "BDF2", "BDF3"), dts=None, problem="poly", t_final=1.0,
                    cells=20, flavor=LGL, seed="exact") -> dict:
    """Temporal convergence of BDF1/2/3 on the 2D heat equation.

    Returns ``{"rows": [...], "slopes": {(p, scheme): {"H1": s, "L2": s}}}``
    where each row is the output of :func:`heat_run`.
    """
    if dts is None:
        dts = POLY_DTS if problem == "poly" else SIN_DTS
    rows, slopes = [], {}
    for p in ps:
        for scheme in schemes:
            sub = [heat_run(p, scheme, dt, problem, t_final, cells, flavor, seed) for dt in dts]
            rows.extend(sub)
            slopes[(p, sub[0]["scheme"])] = {
                "H1": fit_slope(dts, [r["err_H1"] for r in sub]),
                "L2": fit_slope(dts, [r["err_L2"] for r in sub]),
            }
            log.info("p=%d %s slopes %s", p, scheme, slopes[(p, sub[0]["scheme"])])
    return {"rows": rows, "slopes": slopes, "problem": problem, "dts": tuple(dts)}


def plateau_check(study: dict, dt_star=1e-4, norm="H1") -> dict:
    """Local slopes between consecutive ``dt`` at and below ``dt_star``.

    A plateau means the error no longer decreases with ``dt``: the slope of
    the last segment is small compared with the scheme's order.
    """
    out = {}
    for (p, scheme), _ in study["slopes"].items():
        rows = sorted((r for r in study["rows"] if r["p"] == p and r["scheme"] == scheme), key=lambda r: -r["dt"])
        dts = np.array([r["dt"] for r in rows])
        errs = np.array([r[f"err_{norm}"] for r in rows])
        local = np.diff(np.log(errs)) / np.diff(np.log(dts))
        below = dts[1:] <= dt_star * (1 + 1e-9)
        out[(p, scheme)] = {"dts": dts.tolist(), "errors": errs.tolist(), "local_slopes": local.tolist(),
                            "slope_below": float(local[below][-1]) if np.any(below) else float("nan")}
    return out


# ---------------------------------------------------------------------------
# spectral convergence (elliptic, pure Neumann plus mass shift)

def _cos_exact(x):
    return np.prod(np.cos(np.pi * x), axis=-1)


def _cos_grad(x):
    d = x.shape[-1]
    c, s = np.cos(np.pi * x), np.sin(np.pi * x)
    cols = []
    for a in range(d):
        g = -np.pi * s[..., a]
        for b in range(d):
            if b != a:
                g = g * c[..., b]
        cols.append(g)
    return np.stack(cols, axis=-1)


def elliptic_solve(p: int, cells=(4, 4, 4), flavor=LG, exact=_cos_exact, grad=_cos_grad, shift=1.0,
                   tol_rel=1e-13) -> dict:
    """Solve ``-lap u + shift u = f`` with natural boundary conditions; return H1/L2 errors.

    The default solution ``prod cos(pi x_a)`` on the unit cube has zero normal
    derivative on the boundary, so the discrete problem is SPD and needs no
    constraints.
    """
    d = len(cells)
    mesh = build_box_mesh((1.0,) * d, cells)
    basis = make_basis(p, flavor)
    dofmap = DofMap(mesh, p)
    op = MonodomainOperator(basis, dofmap, IsotropicDiffusion(1.0, d), mass_coeff=shift)
    pts = dofmap.node_coords
    f = (d * np.pi ** 2 + shift) * exact(pts)
    b = op.mass_apply(f)
    res = cg_solve(op.apply, b, tol_abs=1e-15, tol_rel=tol_rel, max_iter=5000, preconditioner=1.0 / op.diagonal())
    l2, h1 = NormEvaluator(dofmap).errors(res.x, exact, grad)
    return {"p": p, "cells": tuple(cells), "h": float(mesh.h_avg), "n_dofs": dofmap.n_dofs,
            "err_L2": float(np.sqrt(l2)), "err_H1": float(np.sqrt(h1)), "iterations": res.iterations}


def spectral_convergence_study(ps=range(1, 7), cells=(4, 4, 4), flavor=LG) -> dict:
    """H1 error against p at fixed mesh, with successive reduction ratios."""
    rows = [elliptic_solve(p, cells, flavor) for p in ps]
    errs = np.array([r["err_H1"] for r in rows])
    return {"rows": rows, "ratios": (errs[:-1] / errs[1:]).tolist()}


def h_convergence_study(p=1, cells_list=((2, 2, 2), (4, 4, 4), (8, 8, 8)), flavor=LG) -> dict:
    """H1 error against h at fixed p; the fitted slope approximates ``p``."""
    rows = [elliptic_solve(p, c, flavor) for c in cells_list]
    hs = [r["h"] for r in rows]
    return {"rows": rows, "slope_H1": fit_slope(hs, [r["err_H1"] for r in rows]),
            "slope_L2": fit_slope(hs, [r["err_L2"] for r in rows])}


# ---------------------------------------------------------------------------
# slab sweeps (timing, iteration, phase and self-convergence tables)

def content_version() -> str:
    """Short hash of the package sources, stamped on every table row."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


@dataclass(frozen=True)
class SlabRun:
    """One slab simulation of a sweep."""

    p: int = 2
    cells: tuple = (40, 16, 8)
    flavor: str = LGL
    solver_mode: str = "mf"
    preconditioner: str = "gmg"
    dt: float = 0.1
    t_final: float = 10.0
    scheme: str = "BDF2"
    extent: tuple = SLAB_EXTENT
    model: str = "surrogate"
    threads: int = 1
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(int(c) for c in self.cells))
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        object.__setattr__(self, "flavor", str(self.flavor).upper())

    def key(self) -> dict:
        d = asdict(self)
        d.pop("label")
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.key(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def n_dofs(self) -> int:
        return int(np.prod([c * self.p + 1 for c in self.cells]))

    @property
    def h_avg(self) -> float:
        return float(np.mean(np.asarray(self.extent) / np.asarray(self.cells)))

    def loop_config(self, **kw) -> TimeLoopConfig:
        return TimeLoopConfig(dt=self.dt, t_final=self.t_final, scheme=self.scheme, solver_mode=self.solver_mode,
                              flavor=self.flavor, preconditioner=self.preconditioner, threads=self.threads, **kw)


@dataclass
class SweepPlan:
    """Ordered list of slab runs sharing stimulus and model; hashes must be unique."""

    runs: list
    output_dir: str | None = None
    repetitions: int = 1
    reference: SlabRun | None = None

    def __post_init__(self):
        seen = {}
        for r in self.runs:
            h = r.config_hash
            if h in seen:
                raise ValueError(f"runs {seen[h]!r} and {r.label!r} have the same configuration (hash {h})")
            seen[h] = r.label
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


def run_slab(spec: SlabRun, probe=None, keep_fields=0, csv_stream=None, **loop_kw) -> dict:
    """Run one slab simulation and collect traces, iterations and phase timings."""
    mesh = build_box_mesh(spec.extent, spec.cells)
    basis = make_basis(spec.p, spec.flavor)
    stim = Stimulus.corner_cube()
    cfg = spec.loop_config(keep_fields=keep_fields, **loop_kw)
    probe = default_probe(mesh, stim) if probe is None else probe
    t0 = time.perf_counter()
    res = run(mesh, basis, make_model(spec.model), table1_diffusion(), stim, cfg, probe=probe,
              csv_stream=csv_stream)
    wall = time.perf_counter() - t0
    return {
        "label": spec.label,
        "config_hash": spec.config_hash,
        "version": content_version(),
        "spec": spec,
        "n_dofs": res.dofmap.n_dofs,
        "h_avg": mesh.h_avg,
        "wall_seconds": wall,
        "timings": timing_report(res),
        "iterations": list(res.iterations),
        "mean_iterations": res.mean_iterations,
        "max_iterations": int(max(res.iterations)) if res.iterations else 0,
        "traces": res.traces,
        "result": res,
    }


def timing_report(result) -> dict:
    """Phase breakdown of a :class:`~semcardio.stepper.SimulationResult` (warm-up step excluded)."""
    rep = result.timer.report()
    rep["assembly_plus_solve"] = rep["seconds"]["assembly"] + rep["seconds"]["solver"]
    return rep


def timed_repeats(spec: SlabRun, repetitions=3, **kw) -> dict:
    """Median over repetitions of the per-phase seconds and of assembly + solve."""
    reps = [run_slab(spec, **kw) for _ in range(repetitions)]
    med = {p: statistics.median(r["timings"]["seconds"][p] for r in reps) for p in PHASES}
    out = dict(reps[-1])
    out["repetitions"] = repetitions
    out["median_seconds"] = med
    out["median_assembly_plus_solve"] = statistics.median(r["timings"]["assembly_plus_solve"] for r in reps)
    return out


def _cost(r) -> float:
    return r.get("median_assembly_plus_solve", r["timings"]["assembly_plus_solve"])


def speedup_table(results) -> list:
    """Matrix-based over matrix-free (assembly + solve) time per (p, mesh, flavor)."""
    groups = {}
    for r in results:
        s = r["spec"]
        groups.setdefault((s.p, s.cells, s.flavor), {})[s.solver_mode] = r
    rows = []
    for (p, cells, flavor), g in sorted(groups.items()):
        if "mf" in g and "mb" in g:
            rows.append({"p": p, "cells": cells, "flavor": flavor, "n_dofs": g["mf"]["n_dofs"],
                         "mf_seconds": _cost(g["mf"]), "mb_seconds": _cost(g["mb"]),
                         "speedup": _cost(g["mb"]) / _cost(g["mf"]),
                         "config_hash": g["mf"]["config_hash"] + "/" + g["mb"]["config_hash"],
                         "version": g["mf"]["version"]})
    return rows


def phase_table(results) -> list:
    rows = []
    for r in results:
        s = r["spec"]
        pct = r["timings"]["percent"]
        rows.append({"label": r["label"], "p": s.p, "cells": s.cells, "solver_mode": s.solver_mode,
                     "solver_pct": pct["solver"], "assembly_pct": pct["assembly"], "ionic_pct": pct["ionic"],
                     "config_hash": r["config_hash"], "version": r["version"]})
    return rows


def iteration_table(results) -> list:
    rows = []
    for r in results:
        s = r["spec"]
        rows.append({"label": r["label"], "p": s.p, "cells": s.cells, "h_avg": r["h_avg"], "n_dofs": r["n_dofs"],
                     "preconditioner": s.preconditioner, "mean_iterations": r["mean_iterations"],
                     "max_iterations": r["max_iterations"], "config_hash": r["config_hash"],
                     "version": r["version"]})
    return rows


def error_table(results, reference) -> list:
    """Self-convergence errors of the trace functionals against a reference run.

    A reference computed with a smaller ``dt`` is subsampled to the run's
    step grid.
    """
    rows = []
    ref_spec = reference["spec"]
    for r in results:
        s = r["spec"]
        ratio = s.dt / ref_spec.dt
        stride = int(round(ratio))
        if stride < 1 or abs(stride - ratio) > 1e-9:
            raise ValueError(f"run dt {s.dt} is not a multiple of the reference dt {ref_spec.dt}")
        ref = subsample(reference["traces"], stride, stride - 1)
        n = min(len(ref), len(r["traces"]))
        errs = error_norms(TraceSeries(r["traces"].rows[:n]), TraceSeries(ref.rows[:n]), s.dt)
        rows.append({"label": r["label"], "p": s.p, "cells": s.cells, "flavor": s.flavor, "n_dofs": r["n_dofs"],
                     "h_avg": r["h_avg"], "solver_seconds": r["timings"]["seconds"]["solver"], **errs,
                     "config_hash": r["config_hash"], "version": r["version"]})
    return rows


def _write_rows(path, rows):
    import csv

    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys)
        w.writeheader()
        for row in rows:
            w.writerow({k: (" ".join(map(str, v)) if isinstance(v, tuple) else v) for k, v in row.items()})


def _log_record(r) -> dict:
    return {"label": r["label"], "config_hash": r["config_hash"], "version": r["version"],
            "config": r["spec"].key(), "n_dofs": r["n_dofs"], "h_avg": r["h_avg"],
            "wall_seconds": r["wall_seconds"], "timings": {k: r["timings"][k] for k in ("seconds", "percent")},
            "mean_iterations": r["mean_iterations"], "max_iterations": r["max_iterations"]}


def slab_study(plan: SweepPlan) -> dict:
    """Run every entry of ``plan`` and derive the comparison tables.

    Results are appended to ``runs.jsonl`` as they finish, so a failing run
    leaves the earlier ones on disk; the error is re-raised afterwards.
    """
    out_dir = Path(plan.output_dir) if plan.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        logf = open(out_dir / "runs.jsonl", "a")
    results = []
    try:
        reference = None
        if plan.reference is not None:
            reference = run_slab(plan.reference)
            if out_dir is not None:
                logf.write(json.dumps({"reference": True, **_log_record(reference)}) + "\n")
                logf.flush()
        for spec in plan.runs:
            r = timed_repeats(spec, plan.repetitions) if plan.repetitions > 1 else run_slab(spec)
            r.pop("result", None)
            results.append(r)
            if out_dir is not None:
                logf.write(json.dumps(_log_record(r)) + "\n")
                logf.flush()
    finally:
        if out_dir is not None:
            logf.close()
    tables = {"speedup": speedup_table(results), "phases": phase_table(results),
              "iterations": iteration_table(results)}
    if reference is not None:
        tables["errors"] = error_table(results, reference)
    if out_dir is not None:
        for name, rows in tables.items():
            _write_rows(out_dir / f"{name}.csv", rows)
    return {"results": results, "tables": tables, "reference": reference}
