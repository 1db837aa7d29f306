import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcardio.basis import LG, LGL, make_basis
from semcardio.ionic import (
    BDF_ALPHA0, SURROGATE_APD_MS, IonicModel, IonicState, NonFiniteStateError, NullIonicModel, SurrogateParams,
    bdf_history, extrapolate, ici_rhs, make_model, scheme_order, simulate_cell, step_ionic, surrogate_model,
    to_millivolts,
)
from semcardio.mesh import IsotropicDiffusion, build_box_mesh, build_dof_map
from semcardio.mf_operator import MonodomainOperator


class Decay(IonicModel):
    """w' = -w through the generic Newton path."""

    n_gating = 1

    def H(self, u, w, z):
        return -w

    def I_ion(self, u, w, z):
        return np.zeros(len(u))


def test_scheme_order():
    assert scheme_order("BDF2") == 2 and scheme_order("bdf3") == 3 and scheme_order(1) == 1
    for bad in ("BDF4", "RK4", 0):
        with pytest.raises(ValueError):
            scheme_order(bad)


def test_bdf_coefficients_exact_on_polynomials():
    """BDF-k differentiates degree-k polynomials exactly; extrapolation is exact to degree k-1."""
    dt = 0.3
    for k in (1, 2, 3):
        for deg in range(k + 1):
            y = lambda t: (1.0 + t) ** deg  # noqa: E731
            levels = [np.array([y(-j * dt)]) for j in range(k)]
            d = (BDF_ALPHA0[k] * y(dt) - bdf_history(levels, k)[0]) / dt
            assert d == pytest.approx(deg * (1.0 + dt) ** max(deg - 1, 0), rel=1e-12, abs=1e-12)
            if deg < k:
                assert extrapolate(levels, k)[0] == pytest.approx(y(dt), rel=1e-12)


def test_surrogate_algebraic_roots():
    m = surrogate_model()
    w0 = np.zeros((1, 1))
    assert m.I_ion(np.array([0.0]), w0, None)[0] == 0.0
    assert m.H(np.array([0.0]), w0, None)[0, 0] == 0.0
    assert m.I_ion(np.array([1.0]), w0, None)[0] == 0.0
    assert m.I_ion(np.array([0.15]), w0, None)[0] == 0.0


def test_surrogate_params():
    assert surrogate_model().params() == {"k": 8.0, "a": 0.15, "eps0": 0.002, "mu1": 0.2, "mu2": 0.3}
    assert surrogate_model({"k": 4.0}).p.k == 4.0
    for bad in ({"k": -1.0}, {"a": 0.7}, {"eps0": 0.0}, {"mu2": 0.0}):
        with pytest.raises(ValueError):
            surrogate_model(bad)
    with pytest.raises(ValueError):
        make_model("ttp06")
    assert isinstance(make_model("none"), NullIonicModel)


@pytest.mark.parametrize("scheme", ["BDF1", "BDF2", "BDF3"])
@pytest.mark.parametrize("dt", [0.01, 0.1, 1.0, 10.0])
def test_rest_is_fixed_point(scheme, dt):
    m = surrogate_model()
    st_ = IonicState.resting(m, 5)
    for _ in range(4):
        I = step_ionic(m, st_, np.zeros(5), dt, scheme)
        assert np.abs(I).max() <= 1e-12
        assert np.abs(st_.w[0]).max() <= 1e-12


def test_closed_form_matches_newton():
    m = surrogate_model()
    rng = np.random.default_rng(0)
    u = rng.uniform(-0.2, 1.1, 200)
    hist = rng.uniform(0, 2, (200, 1))
    z = np.zeros((200, 0))
    w_cf, _, _ = m.solve_implicit(u, hist, z, 1.5, 0.1, hist, z)
    w_nt, _, its = IonicModel.solve_implicit(m, u, hist, z, 1.5, 0.1, hist, z)
    assert its > 0
    np.testing.assert_allclose(w_cf, w_nt, atol=1e-9)
    # the returned w solves the implicit relation
    res = 1.5 * w_cf - hist - 0.1 * m.H(u, w_cf, z)
    assert np.abs(res).max() < 1e-12


def test_bdf1_step_close_to_explicit_euler():
    m = surrogate_model()
    u = np.array([0.6])
    w0 = np.array([[0.3]])
    diffs = []
    for dt in (0.1, 0.05, 0.025):
        st_ = IonicState([w0.copy()], [np.zeros((1, 0))])
        step_ionic(m, st_, u, dt, "BDF1")
        euler = w0 + dt * m.H(u, w0, None)
        diffs.append(abs(st_.w[0][0, 0] - euler[0, 0]))
    rates = np.log2(np.array(diffs[:-1]) / np.array(diffs[1:]))
    np.testing.assert_allclose(rates, 2.0, atol=0.1)


def decay_error(dt, scheme, t_final=2.0, exact_seed=True):
    k = scheme_order(scheme)
    m = Decay()
    levels = [np.array([[np.exp(j * dt)]]) for j in range(k)] if exact_seed else [np.ones((1, 1))]
    st_ = IonicState(levels, [np.zeros((1, 0))] * len(levels))
    for _ in range(int(round(t_final / dt))):
        step_ionic(m, st_, np.zeros(1), dt, scheme)
    return abs(st_.w[0][0, 0] - np.exp(-t_final))


@pytest.mark.parametrize("scheme,order", [("BDF1", 1), ("BDF2", 2), ("BDF3", 3)])
def test_bdf_order_on_scalar_ode(scheme, order):
    # BDF3 is still pre-asymptotic at dt = 0.4
    dts = [0.4, 0.2, 0.1, 0.05] if order < 3 else [0.2, 0.1, 0.05, 0.025]
    errs = [decay_error(dt, scheme) for dt in dts]
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert slope == pytest.approx(order, abs=0.1)


def test_bdf2_order_with_bootstrap():
    """A BDF1 first step keeps BDF2 second order once dt is small enough."""
    dts = [0.1, 0.05, 0.025, 0.0125]
    errs = [decay_error(dt, "BDF2", exact_seed=False) for dt in dts]
    assert np.polyfit(np.log(dts), np.log(errs), 1)[0] == pytest.approx(2.0, abs=0.1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 40))
def test_dof_independence(seed, n):
    rng = np.random.default_rng(seed)
    m = surrogate_model()
    u = rng.uniform(-0.1, 1.0, n)
    w = rng.uniform(0, 1, (n, 1))
    perm = rng.permutation(n)
    a = IonicState([w.copy()], [np.zeros((n, 0))])
    b = IonicState([w[perm].copy()], [np.zeros((n, 0))])
    Ia = step_ionic(m, a, u, 0.1, "BDF2")
    Ib = step_ionic(m, b, u[perm], 0.1, "BDF2")
    np.testing.assert_array_equal(Ia[perm], Ib)
    np.testing.assert_array_equal(a.w[0][perm], b.w[0])


def test_clamp_counts():
    m = surrogate_model()
    st_ = IonicState([np.array([[-1.0], [0.1]])], [np.zeros((2, 0))])
    step_ionic(m, st_, np.zeros(2), 10.0, "BDF1")
    assert st_.clamp_count == 1
    lo, hi = m.bounds()
    assert np.all((st_.w[0] >= lo) & (st_.w[0] <= hi))


def test_non_finite_aborts_with_dof():
    m = surrogate_model()
    st_ = IonicState.resting(m, 3)
    with pytest.raises(NonFiniteStateError, match="DOF 1"):
        step_ionic(m, st_, np.array([0.0, np.nan, 0.0]), 0.1, step=7)
    with pytest.raises(ValueError):
        step_ionic(m, st_, np.zeros(4), 0.1)


def test_state_history_depth():
    m = surrogate_model()
    st_ = IonicState.resting(m, 2, depth=3)
    for _ in range(5):
        step_ionic(m, st_, np.full(2, 0.5), 0.1)
    assert len(st_.w) == 3
    c = st_.copy()
    c.w[0][:] = 9.0
    assert st_.w[0][0, 0] != 9.0


def test_action_potential_returns_to_rest():
    t, u, _ = simulate_cell(surrogate_model(), 0.3, 60.0, 0.1)
    peak = int(np.argmax(u))
    assert u[peak] > 0.9
    back = t[peak:][np.abs(u[peak:]) < 1e-3][0]
    assert back == pytest.approx(SURROGATE_APD_MS, rel=0.2)


def test_action_potential_against_fine_reference():
    def apd(dt):
        t, u, _ = simulate_cell(surrogate_model(), 0.3, 40.0, dt)
        peak = int(np.argmax(u))
        return t[peak:][np.abs(u[peak:]) < 1e-3][0]
    ref = apd(0.01)
    assert ref == pytest.approx(SURROGATE_APD_MS, abs=0.1)
    assert apd(0.1) == pytest.approx(ref, rel=0.2)


def test_subthreshold_kick_decays():
    t, u, _ = simulate_cell(surrogate_model(), 0.1, 20.0, 0.1)
    assert u.max() <= 0.1 + 1e-12
    assert abs(u[-1]) < 1e-3


def test_millivolt_scaling():
    np.testing.assert_allclose(to_millivolts([0.0, 1.0]), [-85.0, 40.0])


def test_ici_rhs():
    dm = build_dof_map(build_box_mesh((1.0, 2.0, 0.5), (2, 2, 1)), 2)
    for flavor in (LG, LGL):
        op = MonodomainOperator(make_basis(2, flavor), dm, IsotropicDiffusion(1.0))
        assert not ici_rhs(np.zeros(dm.n_dofs), op).any()
        assert ici_rhs(np.full(dm.n_dofs, 3.0), op).sum() == pytest.approx(-3.0 * 1.0, rel=1e-10)
        with pytest.raises(ValueError):
            ici_rhs(np.zeros(3), op)
    I = np.random.default_rng(1).standard_normal(dm.n_dofs)
    assert np.array_equal(ici_rhs(I, op), -op.mass_lumped() * I)


def test_surrogate_params_dataclass_validate():
    assert SurrogateParams().validate() == SurrogateParams()


def test_bdf1_bootstrap_caps_bdf3_at_second_order():
    dts = [0.1, 0.05, 0.025, 0.0125]
    boot = np.polyfit(np.log(dts), np.log([decay_error(dt, "BDF3", exact_seed=False) for dt in dts]), 1)[0]
    exact = np.polyfit(np.log(dts), np.log([decay_error(dt, "BDF3") for dt in dts]), 1)[0]
    assert boot == pytest.approx(2.0, abs=0.1) and exact == pytest.approx(3.0, abs=0.1)
