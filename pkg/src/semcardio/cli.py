"""Command-line entry point: ``semcardio {run,sweep,bdf-study,spectral-study,export-mesh}``.

``run`` writes a fixed output layout into ``--output-dir``:

``config.snapshot``
    The fully resolved configuration (parseable by ``--config``).
``traces.csv``
    ``step,time_ms,u_min,u_mean,u_max,u_P,w_min,w_mean,w_max,w_P``, streamed per step.
``activation.vtk``
    Legacy-VTK node lattice with point field ``activation_time_ms``.
``timings.json``
    Phase seconds and percentages (warm-up step excluded), wall time, iterations.
``iterations.csv``
    ``step,time_ms,iterations,initial_residual,final_residual``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 solver
failure (non-convergence or non-finite state), 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench
from .basis import make_basis
from .config import THREADS_ENV, ConfigError, RunConfig, dump_config, parse_config, parse_plan
from .ionic import NonFiniteStateError, make_model
from .mesh import DofMap, build_box_mesh, table1_diffusion, write_vtk
from .stepper import LinearSolverError, Stimulus, TimeLoopConfig, default_probe, run

log = logging.getLogger("semcardio")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
OUTPUT_FILES = ("config.snapshot", "traces.csv", "activation.vtk", "timings.json", "iterations.csv")


def _cells(text):
    parts = text.replace(",", " ").replace("x", " ").split()
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three cell counts, got {text!r}")
    return tuple(int(p) for p in parts)


def _int_list(text):
    return tuple(int(x) for x in text.replace(",", " ").split())


def _float_list(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _add_run_flags(p):
    p.add_argument("--config", help="configuration file (sectioned key = value)")
    p.add_argument("--output-dir", default="out", help="output directory (default: out)")
    p.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or available CPUs)")
    p.add_argument("--p", type=int, help="polynomial degree")
    p.add_argument("--cells", type=_cells, help="cells per axis, e.g. 40,16,8")
    p.add_argument("--dt", type=float, help="time step in ms")
    p.add_argument("--t-final", type=float, help="final time in ms")
    p.add_argument("--scheme", choices=("BDF1", "BDF2", "BDF3"))
    p.add_argument("--flavor", choices=("LG", "LGL"))
    p.add_argument("--solver", choices=("mf", "mb"))
    p.add_argument("--precond", choices=("none", "gmg", "jacobi"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semcardio", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="slab monodomain simulation")
    _add_run_flags(p)
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")

    p = sub.add_parser("sweep", help="slab sweep from a plan file (speedup, phase, iteration, error tables)")
    p.add_argument("--plan", required=True)
    p.add_argument("--output-dir", help="overrides plan.output_dir")

    p = sub.add_parser("bdf-study", help="temporal order of BDF1/2/3 on the 2D heat equation")
    p.add_argument("--p", type=_int_list, default=(3, 4), help="degrees (default: 3,4)")
    p.add_argument("--schemes", default="BDF1,BDF2,BDF3")
    p.add_argument("--problem", choices=("poly", "sin", "both"), default="both")
    p.add_argument("--dts", type=_float_list, help="time steps in s (default per problem)")
    p.add_argument("--t-final", type=float, default=1.0)
    p.add_argument("--output-dir", default="out")

    p = sub.add_parser("spectral-study", help="H1 error against p for a smooth elliptic problem")
    p.add_argument("--p", type=_int_list, default=(1, 2, 3, 4, 5, 6))
    p.add_argument("--cells", type=_cells, default=(4, 4, 4))
    p.add_argument("--flavor", choices=("LG", "LGL"), default="LG")
    p.add_argument("--output-dir", default="out")

    p = sub.add_parser("export-mesh", help="write the slab mesh and DOF lattice as legacy VTK")
    p.add_argument("--config")
    p.add_argument("--p", type=int)
    p.add_argument("--cells", type=_cells)
    p.add_argument("--output-dir", default="out")
    return ap


def config_from_args(args) -> RunConfig:
    overrides = {"p": args.p, "cells": args.cells, "dt": args.dt, "t_final": getattr(args, "t_final", None),
                 "scheme": getattr(args, "scheme", None), "flavor": getattr(args, "flavor", None),
                 "solver": getattr(args, "solver", None), "precond": getattr(args, "precond", None),
                 "threads": getattr(args, "threads", None)}
    return parse_config(args.config, overrides)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:12]


def simulate(cfg: RunConfig, output_dir) -> dict:
    """Run one slab simulation and write the documented output layout."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    threads = cfg.resolved_threads
    (out / "config.snapshot").write_text(dump_config(cfg))
    mesh = build_box_mesh(cfg.extent, cfg.cells)
    basis = make_basis(cfg.p, cfg.flavor)
    model = make_model(cfg.model, cfg.surrogate_params() if cfg.model == "surrogate" else None)
    stim = Stimulus(("box", tuple(cfg.lower), tuple(cfg.upper)), cfg.amplitude, cfg.duration)
    loop = TimeLoopConfig(dt=cfg.dt, t_final=cfg.t_final, scheme=cfg.scheme, solver_mode=cfg.solver,
                          flavor=cfg.flavor, preconditioner=cfg.precond, tol_abs=cfg.tol_abs, tol_rel=cfg.tol_rel,
                          max_iter=cfg.max_iter, batch_width=cfg.batch_width, threads=threads,
                          max_coarse_dofs=cfg.max_coarse_dofs, coarse_preconditioner=cfg.coarse_preconditioner,
                          activation_threshold=cfg.threshold)
    probe = cfg.probe_point or default_probe(mesh, stim)
    dofmap = DofMap(mesh, cfg.p)

    def on_step(step, t, u):
        if cfg.snapshot_stride and step % cfg.snapshot_stride == 0:
            write_vtk(out / f"snapshot_{step:06d}.vtk", dofmap, {"u": u})

    t0 = time.perf_counter()
    with open(out / "traces.csv", "w", newline="") as fh:
        res = run(mesh, basis, model, table1_diffusion(), stim, loop, probe=probe, on_step=on_step, csv_stream=fh)
    wall = time.perf_counter() - t0

    tau = res.activation_times()
    write_vtk(out / "activation.vtk", dofmap, {"activation_time_ms": tau}, title="activation time [ms]")
    with open(out / "iterations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "time_ms", "iterations", "initial_residual", "final_residual"))
        for i, (t, its, (r0, r1)) in enumerate(zip(res.times, res.iterations, res.residuals), start=1):
            w.writerow((i, repr(float(t)), its, repr(float(r0)), repr(float(r1))))
    report = bench.timing_report(res)
    timings = {
        "config_hash": config_hash(cfg),
        "version": bench.content_version(),
        "threads": threads,
        "n_dofs": dofmap.n_dofs,
        "h_avg": mesh.h_avg,
        "steps": len(res.times),
        "wall_seconds": wall,
        "phase_seconds": report["seconds"],
        "phase_percent": report["percent"],
        "phase_labels": report["labels"],
        "setup_seconds": report["setup_seconds"],
        "bookkeeping_seconds": report["post_seconds"],
        "mean_iterations": res.mean_iterations,
        "max_iterations": int(max(res.iterations)) if res.iterations else 0,
        "clamp_count": int(res.state.clamp_count),
        "last_activation_ms": float(np.max(tau)) if tau.size else 0.0,
    }
    (out / "timings.json").write_text(json.dumps(timings, indent=2))
    return {"result": res, "timings": timings, "output_dir": str(out)}


def _cmd_run(args) -> int:
    cfg = config_from_args(args)
    if args.print_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    info = simulate(cfg, args.output_dir)
    t = info["timings"]
    pct = t["phase_percent"]
    print(f"{t['steps']} steps, {t['n_dofs']} DOFs, wall {t['wall_seconds']:.2f} s, "
          f"mean PCG iterations {t['mean_iterations']:.2f}")
    print("phases: " + ", ".join(f"{t['phase_labels'][k]} {pct[k]:.1f}%" for k in ("solver", "assembly", "ionic")))
    print(f"outputs in {info['output_dir']}")
    return EXIT_OK


def _print_rows(title, rows, keys):
    if not rows:
        return
    print(title)
    print("  " + "  ".join(f"{k:>14}" for k in keys))
    for r in rows:
        cells = []
        for k in keys:
            v = r[k]
            cells.append(f"{v:>14.4g}" if isinstance(v, float) else f"{str(v):>14}")
        print("  " + "  ".join(cells))


def _cmd_sweep(args) -> int:
    plan = parse_plan(args.plan)
    if args.output_dir:
        plan.output_dir = args.output_dir
    if plan.output_dir is None:
        plan.output_dir = "out"
    study = bench.slab_study(plan)
    t = study["tables"]
    _print_rows("speedup (matrix-based / matrix-free, assembly + solve)", t["speedup"],
                ("p", "flavor", "n_dofs", "mf_seconds", "mb_seconds", "speedup"))
    _print_rows("phase shares [%]", t["phases"], ("label", "solver_mode", "solver_pct", "assembly_pct", "ionic_pct"))
    _print_rows("PCG iterations", t["iterations"], ("label", "p", "h_avg", "preconditioner", "mean_iterations",
                                                    "max_iterations"))
    if "errors" in t:
        _print_rows("self-convergence errors", t["errors"], ("label", "p", "n_dofs", "err_min", "err_mean", "err_max",
                                                             "err_P"))
    print(f"tables in {plan.output_dir}")
    return EXIT_OK


def _cmd_bdf(args) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    schemes = tuple(s.strip().upper() for s in args.schemes.split(","))
    problems = ("poly", "sin") if args.problem == "both" else (args.problem,)
    rows, slope_rows = [], []
    for prob in problems:
        st = bench.bdf_order_study(args.p, schemes, args.dts, prob, args.t_final)
        rows.extend(st["rows"])
        plateau = bench.plateau_check(st) if prob == "sin" else {}
        for (p, scheme), s in st["slopes"].items():
            row = {"problem": prob, "p": p, "scheme": scheme, "slope_H1": s["H1"], "slope_L2": s["L2"]}
            if plateau:
                row["last_local_slope_H1"] = plateau[(p, scheme)]["local_slopes"][-1]
            slope_rows.append(row)
    bench._write_rows(out / "bdf_errors.csv", [{k: r[k] for k in ("problem", "p", "scheme", "dt", "err_H1",
                                                                  "err_L2", "steps")} for r in rows])
    bench._write_rows(out / "bdf_slopes.csv", slope_rows)
    _print_rows("fitted temporal orders", slope_rows, ("problem", "p", "scheme", "slope_H1", "slope_L2"))
    return EXIT_OK


def _cmd_spectral(args) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    st = bench.spectral_convergence_study(args.p, args.cells, args.flavor)
    rows = [dict(r, cells=" ".join(map(str, r["cells"]))) for r in st["rows"]]
    bench._write_rows(out / "spectral.csv", rows)
    _print_rows("H1 / L2 error against p", rows, ("p", "n_dofs", "err_H1", "err_L2", "iterations"))
    return EXIT_OK


def _cmd_export(args) -> int:
    cfg = parse_config(args.config, {"p": args.p, "cells": args.cells})
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = build_box_mesh(cfg.extent, cfg.cells)
    dm = DofMap(mesh, cfg.p)
    path = out / "mesh.vtk"
    write_vtk(path, dm, {"dof_index": np.arange(dm.n_dofs)}, title=f"Q{cfg.p} slab {cfg.cells}")
    print(f"{mesh.n_cells} cells, {dm.n_dofs} DOFs, h_avg {mesh.h_avg:.4f} mm -> {path}")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "bdf-study": _cmd_bdf, "spectral-study": _cmd_spectral,
            "export-mesh": _cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LinearSolverError, NonFiniteStateError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
