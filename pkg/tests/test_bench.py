import json

import numpy as np
import pytest

from semcardio.basis import LG, LGL
from semcardio.bench import (
    SlabRun, SweepPlan, bdf_order_study, content_version, elliptic_solve, error_table, fit_slope,
    h_convergence_study, heat_problem, heat_run, iteration_table, phase_table, plateau_check, run_slab,
    slab_study, spectral_convergence_study, speedup_table,
)


def test_fit_slope_exact():
    dts = np.array([0.4, 0.2, 0.1])
    assert fit_slope(dts, 3.0 * dts ** 2) == pytest.approx(2.0, rel=1e-12)
    assert fit_slope(dts, np.full(3, 5.0)) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("name", ["poly", "sin"])
def test_heat_problem_forcing_consistent(name):
    """f = u_t - lap u, checked against centered differences of the exact solution."""
    prob = heat_problem(name)
    rng = np.random.default_rng(0)
    x = rng.uniform(0.1, 0.9, (20, 2))
    t, e = 0.37, 1e-4
    ut = (prob.exact(x, t + e) - prob.exact(x, t - e)) / (2 * e)
    lap = sum((prob.exact(x + e * np.eye(2)[a], t) - 2 * prob.exact(x, t) + prob.exact(x - e * np.eye(2)[a], t))
              / e ** 2 for a in range(2))
    np.testing.assert_allclose(prob.forcing(x, t), ut - lap, rtol=1e-4, atol=1e-4)
    g = np.stack([(prob.exact(x + e * np.eye(2)[a], t) - prob.exact(x - e * np.eye(2)[a], t)) / (2 * e)
                  for a in range(2)], -1)
    np.testing.assert_allclose(prob.grad(x, t), g, rtol=1e-6, atol=1e-6)
    with pytest.raises(ValueError):
        heat_problem("gauss")


def test_heat_run_bdf1_halving():
    """Halving dt halves the BDF1 error on the polynomial problem."""
    a = heat_run(3, "BDF1", 0.02, cells=4, t_final=0.2)
    b = heat_run(3, "BDF1", 0.01, cells=4, t_final=0.2)
    assert a["err_H1"] / b["err_H1"] == pytest.approx(2.0, rel=0.1)
    assert a["steps"] == 10 and b["steps"] == 20
    with pytest.raises(ValueError):
        heat_run(3, "BDF1", 0.02, cells=4, seed="guess")


def test_bdf_study_small():
    st = bdf_order_study(ps=(3,), schemes=("BDF2", "BDF3"), dts=(0.04, 0.02, 0.01), cells=4, t_final=0.4)
    assert st["slopes"][(3, "BDF2")]["H1"] == pytest.approx(2.0, abs=0.15)
    assert st["slopes"][(3, "BDF3")]["H1"] == pytest.approx(3.0, abs=0.15)
    pl = plateau_check(st, dt_star=0.02)
    assert len(pl[(3, "BDF2")]["local_slopes"]) == 2
    assert pl[(3, "BDF2")]["slope_below"] == pytest.approx(2.0, abs=0.2)


def test_elliptic_solution_and_h_rate():
    r = elliptic_solve(2, cells=(2, 2, 2))
    assert r["n_dofs"] == 125 and r["err_H1"] < 0.5
    h = h_convergence_study(p=1, cells_list=((2, 2, 2), (4, 4, 4), (8, 8, 8)))
    assert h["slope_H1"] == pytest.approx(1.0, abs=0.2)
    assert h["slope_L2"] == pytest.approx(2.0, abs=0.3)


@pytest.mark.parametrize("flavor", [LG, LGL])
def test_spectral_decay(flavor):
    st = spectral_convergence_study(ps=range(1, 6), cells=(2, 2, 2), flavor=flavor)
    errs = [r["err_H1"] for r in st["rows"]]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    # geometric (not algebraic) decay: the reduction factor grows with p
    assert st["ratios"][-1] > st["ratios"][0]


def test_slab_run_hash_and_key():
    a = SlabRun(p=2, cells=[10, 4, 2], flavor="lgl", label="x")
    b = SlabRun(p=2, cells=(10, 4, 2), flavor=LGL, label="y")
    assert a.config_hash == b.config_hash and a.key() == b.key()
    assert "label" not in a.key()
    assert SlabRun(p=3, cells=(10, 4, 2)).config_hash != a.config_hash
    assert a.n_dofs == 21 * 9 * 5
    assert a.h_avg == pytest.approx(np.mean([2.0, 1.75, 1.5]))


def test_sweep_plan_rejects_duplicates():
    with pytest.raises(ValueError, match="same configuration"):
        SweepPlan([SlabRun(label="a"), SlabRun(label="b")])
    with pytest.raises(ValueError):
        SweepPlan([SlabRun()], repetitions=0)


def test_content_version_stable():
    v = content_version()
    assert v == content_version() and len(v) == 12


def fake(label, p, mode, seconds, traces=None, dt=0.1):
    spec = SlabRun(p=p, cells=(4, 2, 2), solver_mode=mode, preconditioner="gmg" if mode == "mf" else "jacobi",
                   dt=dt, label=label)
    return {"label": label, "spec": spec, "config_hash": spec.config_hash, "version": "v", "n_dofs": spec.n_dofs,
            "h_avg": spec.h_avg, "iterations": [2, 2], "mean_iterations": 2.0, "max_iterations": 2,
            "timings": {"seconds": {"assembly": seconds / 2, "solver": seconds / 2, "ionic": 1.0},
                        "percent": {"assembly": 10.0, "solver": 30.0, "ionic": 60.0},
                        "assembly_plus_solve": seconds},
            "traces": traces}


def test_tables_from_records():
    rs = [fake("mf1", 1, "mf", 1.0), fake("mb1", 1, "mb", 3.0), fake("mf2", 2, "mf", 2.0)]
    sp = speedup_table(rs)
    assert len(sp) == 1 and sp[0]["speedup"] == pytest.approx(3.0)
    assert [r["ionic_pct"] for r in phase_table(rs)] == [60.0] * 3
    assert iteration_table(rs)[1]["preconditioner"] == "jacobi"


def test_error_table_subsamples_reference():
    small = run_slab(SlabRun(p=1, cells=(4, 2, 2), t_final=0.4, dt=0.2, label="run"))
    ref = run_slab(SlabRun(p=1, cells=(4, 2, 2), t_final=0.4, dt=0.1, label="ref"))
    rows = error_table([small], ref)
    assert rows[0]["label"] == "run" and rows[0]["err_P"] >= 0.0
    same = error_table([ref], ref)
    assert all(same[0][k] == 0.0 for k in ("err_min", "err_mean", "err_max", "err_P"))
    with pytest.raises(ValueError):
        error_table([ref], small)


def test_slab_study_writes_tables(tmp_path):
    plan = SweepPlan([SlabRun(p=1, cells=(4, 2, 2), t_final=0.3, label="mf"),
                      SlabRun(p=1, cells=(4, 2, 2), t_final=0.3, solver_mode="mb", preconditioner="jacobi",
                              label="mb")],
                     output_dir=str(tmp_path), repetitions=2,
                     reference=SlabRun(p=2, cells=(4, 2, 2), t_final=0.3, label="ref"))
    out = slab_study(plan)
    assert set(out["tables"]) == {"speedup", "phases", "iterations", "errors"}
    recs = [json.loads(line) for line in (tmp_path / "runs.jsonl").read_text().splitlines()]
    assert recs[0]["reference"] is True and [r["label"] for r in recs[1:]] == ["mf", "mb"]
    assert (tmp_path / "speedup.csv").read_text().splitlines()[1].startswith("1,4 2 2,LGL")


def test_mf_lg_run():
    r = run_slab(SlabRun(p=2, cells=(4, 2, 2), flavor=LG, t_final=0.3))
    assert r["max_iterations"] <= 4 and r["n_dofs"] == 9 * 5 * 5
