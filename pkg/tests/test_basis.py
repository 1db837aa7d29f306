import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import legendre as npleg

from semcardio.basis import LG, LGL, barycentric_weights, lagrange_matrices, make_basis, make_quadrature


def test_lgl_two_points_is_trapezoid():
    q = make_quadrature(LGL, 2)
    np.testing.assert_array_equal(q.points, [-1.0, 1.0])
    np.testing.assert_allclose(q.weights, [1.0, 1.0], atol=1e-15)


def test_lgl_three_points():
    q = make_quadrature(LGL, 3)
    np.testing.assert_allclose(q.points, [-1.0, 0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(q.weights, [1 / 3, 4 / 3, 1 / 3], atol=1e-15)


def test_lg_two_points():
    q = make_quadrature(LG, 2)
    np.testing.assert_allclose(q.points, [-1 / np.sqrt(3), 1 / np.sqrt(3)], atol=1e-15)
    np.testing.assert_allclose(q.weights, [1.0, 1.0], atol=1e-15)
    assert q.integrate(lambda x: x ** 2) == pytest.approx(2 / 3, abs=1e-15)


@pytest.mark.parametrize("flavor", [LG, LGL])
@pytest.mark.parametrize("n", range(2, 17))
def test_rule_invariants(flavor, n):
    q = make_quadrature(flavor, n)
    assert abs(q.weights.sum() - 2.0) < 1e-14
    assert np.all(q.weights > 0)
    assert np.all(np.diff(q.points) > 0)
    if flavor == LGL:
        assert q.points[0] == -1.0 and q.points[-1] == 1.0
        assert q.degree_of_exactness == 2 * n - 3
    else:
        assert -1.0 < q.points[0] and q.points[-1] < 1.0
        assert q.degree_of_exactness == 2 * n - 1


@pytest.mark.parametrize("flavor", [LG, LGL])
@pytest.mark.parametrize("n", range(2, 17))
def test_rule_oracles(flavor, n):
    """Golub-Welsch nodes (numpy) for LG; roots of P'_{n-1} for LGL."""
    q = make_quadrature(flavor, n)
    if flavor == LG:
        x, w = npleg.leggauss(n)
        np.testing.assert_allclose(q.points, x, atol=1e-14)
        np.testing.assert_allclose(q.weights, w, atol=1e-14)
    else:
        c = np.zeros(n)
        c[-1] = 1.0
        inner = np.sort(npleg.legroots(npleg.legder(c)))
        np.testing.assert_allclose(q.points[1:-1], inner, atol=1e-13)
        Pn1 = npleg.legval(q.points, c)
        np.testing.assert_allclose(q.weights, 2.0 / (n * (n - 1) * Pn1 ** 2), atol=1e-14)


@pytest.mark.parametrize("flavor", [LG, LGL])
@pytest.mark.parametrize("n", [2, 3, 5, 8, 12, 16])
def test_legendre_exactness(flavor, n):
    q = make_quadrature(flavor, n)
    for k in range(q.degree_of_exactness + 1):
        c = np.zeros(k + 1)
        c[k] = 1.0
        val = q.integrate(lambda x: npleg.legval(x, c))
        assert val == pytest.approx(2.0 if k == 0 else 0.0, abs=1e-13)


@pytest.mark.parametrize("n", [2, 3, 4, 6, 9])
def test_lgl_not_exact_beyond_degree(n):
    q = make_quadrature(LGL, n)
    k = q.degree_of_exactness + 1
    exact = 2.0 / (k + 1) if k % 2 == 0 else 0.0
    assert abs(q.integrate(lambda x: x ** k) - exact) > 1e-6
    for j in range(k):
        ex = 2.0 / (j + 1) if j % 2 == 0 else 0.0
        assert q.integrate(lambda x: x ** j) == pytest.approx(ex, rel=1e-12, abs=1e-13)


@pytest.mark.parametrize("flavor,n", [(LG, 0), (LG, 17), (LGL, 1), (LGL, 17), ("GL", 3)])
def test_rule_rejects(flavor, n):
    with pytest.raises(ValueError):
        make_quadrature(flavor, n)


def test_barycentric_weights_examples():
    np.testing.assert_allclose(barycentric_weights([-1, 1]), [-0.5, 0.5])
    np.testing.assert_allclose(barycentric_weights([-1, 0, 1]), [0.5, -1.0, 0.5])
    with pytest.raises(ValueError):
        barycentric_weights([0.0, 1.0, 0.0])


def test_barycentric_identity():
    rng = np.random.default_rng(0)
    x = np.sort(rng.uniform(-1, 1, 6))
    w = barycentric_weights(x)
    for xi in rng.uniform(-1, 1, 5):
        s = sum(w[i] * np.prod([xi - x[j] for j in range(len(x)) if j != i]) for i in range(len(x)))
        # the Lagrange polynomials sum to one
        assert s == pytest.approx(1.0, abs=1e-10)


def test_p1_lgl_basis():
    b = make_basis(1, LGL)
    np.testing.assert_array_equal(b.B, np.eye(2))
    np.testing.assert_allclose(b.D, [[-0.5, 0.5], [-0.5, 0.5]])


@pytest.mark.parametrize("p", range(1, 9))
def test_lgl_collocation(p):
    b = make_basis(p, LGL)
    assert b.collocated
    np.testing.assert_array_equal(b.B, np.eye(p + 1))


def test_p2_lg_against_closed_form():
    """Lagrange polynomials on {-1, 0, 1} written out by hand."""
    b = make_basis(2, LG)
    xi = make_quadrature(LG, 3).points
    l0, l1, l2 = xi * (xi - 1) / 2, 1 - xi ** 2, xi * (xi + 1) / 2
    d0, d1, d2 = xi - 0.5, -2 * xi, xi + 0.5
    np.testing.assert_allclose(b.B, np.column_stack([l0, l1, l2]), atol=1e-15)
    np.testing.assert_allclose(b.D, np.column_stack([d0, d1, d2]), atol=1e-14)


@pytest.mark.parametrize("flavor", [LG, LGL])
@pytest.mark.parametrize("p", range(1, 9))
def test_basis_row_sums(flavor, p):
    b = make_basis(p, flavor)
    np.testing.assert_allclose(b.B.sum(axis=1), 1.0, atol=1e-13)
    np.testing.assert_allclose(b.D.sum(axis=1), 0.0, atol=1e-12)


@pytest.mark.parametrize("p", [0, 9])
def test_basis_rejects_degree(p):
    with pytest.raises(ValueError):
        make_basis(p, LGL)


@settings(max_examples=40, deadline=None)
@given(p=st.integers(1, 8), coeffs=st.lists(st.floats(-2, 2), min_size=9, max_size=9), seed=st.integers(0, 2 ** 16))
def test_polynomial_reproduction(p, coeffs, seed):
    c = np.array(coeffs[: p + 1])
    nodes = make_quadrature(LGL, p + 1).points
    xi = np.random.default_rng(seed).uniform(-1, 1, 10)
    B, D = lagrange_matrices(nodes, xi)
    q = np.polynomial.Polynomial(c)
    np.testing.assert_allclose(B @ q(nodes), q(xi), atol=1e-12)
    np.testing.assert_allclose(D @ q(nodes), q.deriv()(xi), atol=1e-11)


@pytest.mark.parametrize("flavor", [LG, LGL])
@pytest.mark.parametrize("p", range(1, 9))
def test_differentiation_exact(flavor, p):
    b = make_basis(p, flavor)
    xq = b.quad.points
    for k in range(p + 1):
        np.testing.assert_allclose(b.D @ b.support_nodes ** k, k * xq ** max(k - 1, 0) * (k > 0), atol=1e-11)
