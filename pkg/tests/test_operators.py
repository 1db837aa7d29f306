from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcardio._kernels import HAVE_NUMBA
from semcardio.basis import LG, LGL, make_basis
from semcardio.mb_operator import (
    assemble, assemble_system, export_coo, interior_row_nnz, jacobi, memory_footprint, spmv,
)
from semcardio.mesh import IsotropicDiffusion, TransmuralFibers, DiffusionField, build_box_mesh, build_dof_map, table1_diffusion
from semcardio.mf_operator import MonodomainOperator, apply_local_sumfac, cell_geometry

rng = np.random.default_rng(20240521)


def unit_cube_q1():
    """Classical trilinear stiffness and consistent mass on the unit cube."""
    corners = list(product((0, 1), repeat=3))
    K = np.empty((8, 8))
    M = np.empty((8, 8))
    for i, a in enumerate(corners):
        for j, b in enumerate(corners):
            ndiff = sum(x != y for x, y in zip(a, b))
            K[i, j] = [4, 0, -1, -1][ndiff] / 12
            M[i, j] = 1 / 27 / 2 ** ndiff
    return K, M


def op_and_matrix(p, flavor, cells=(2, 2, 1), extent=(1.0, 1.5, 0.7), diffusion=None, mass_coeff=3.0, **kw):
    dm = build_dof_map(build_box_mesh(extent, cells), p)
    basis = make_basis(p, flavor)
    diffusion = diffusion or table1_diffusion()
    op = MonodomainOperator(basis, dm, diffusion, mass_coeff, **kw)
    A, M = assemble_system(basis, dm, diffusion, mass_coeff)
    return op, A, M


def test_single_cell_q1_against_classical():
    dm = build_dof_map(build_box_mesh((1, 1, 1), (1, 1, 1)), 1)
    K, M = unit_cube_q1()
    op = MonodomainOperator(make_basis(1, LG), dm, IsotropicDiffusion(2.0))
    A = np.column_stack([op.apply(e) for e in np.eye(8)])
    np.testing.assert_allclose(A, 2.0 * K, atol=1e-15)
    Mop = np.column_stack([op.mass_apply(e) for e in np.eye(8)])
    np.testing.assert_allclose(Mop, M, atol=1e-15)
    np.testing.assert_allclose(Mop.sum(axis=1), 1 / 8, atol=1e-15)


def test_zero_in_zero_out():
    op, _, _ = op_and_matrix(2, LGL)
    assert not op.apply(np.zeros(op.n_dofs)).any()


def test_size_mismatch():
    op, A, _ = op_and_matrix(1, LGL)
    with pytest.raises(ValueError):
        op.apply(np.ones(op.n_dofs + 1))
    with pytest.raises(ValueError):
        op.mass_apply(np.ones(3))
    with pytest.raises(ValueError):
        spmv(A, np.ones(op.n_dofs - 1))


@pytest.mark.parametrize("flavor", [LG, LGL])
@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_oracle_equivalence(p, flavor):
    op, A, _ = op_and_matrix(p, flavor)
    for _ in range(10):
        v = rng.standard_normal(op.n_dofs)
        ref = spmv(A, v)
        assert np.max(np.abs(op.apply(v) - ref)) / np.max(np.abs(ref)) <= 1e-11


@pytest.mark.parametrize("backend", ["numpy", "compiled"] if HAVE_NUMBA else ["numpy"])
def test_oracle_variable_coefficients(backend):
    diff = DiffusionField(TransmuralFibers(normal_axis=2, depth_range=(0.0, 0.7)), 0.08, 0.03, 0.01)
    op, A, _ = op_and_matrix(3, LG, cells=(2, 1, 3), diffusion=diff, backend=backend)
    v = rng.standard_normal(op.n_dofs)
    ref = A @ v
    assert np.max(np.abs(op.apply(v) - ref)) / np.max(np.abs(ref)) <= 1e-11


@pytest.mark.parametrize("flavor", [LG, LGL])
def test_oracle_2d(flavor):
    op, A, _ = op_and_matrix(3, flavor, cells=(3, 2), extent=(1.0, 2.0), diffusion=IsotropicDiffusion(0.5, 2))
    v = rng.standard_normal(op.n_dofs)
    np.testing.assert_allclose(op.apply(v), A @ v, rtol=0, atol=1e-11 * np.abs(A @ v).max())


@pytest.mark.parametrize("flavor", [LG, LGL])
def test_symmetric_positive_definite(flavor):
    op, _, _ = op_and_matrix(3, flavor)
    for _ in range(5):
        v, w = rng.standard_normal((2, op.n_dofs))
        a, b = op.apply(v) @ w, op.apply(w) @ v
        assert abs(a - b) <= 1e-10 * max(abs(a), 1.0)
        assert op.apply(v) @ v > 0


@pytest.mark.parametrize("backend", ["numpy", "compiled"] if HAVE_NUMBA else ["numpy"])
def test_batch_invariance_bitwise(backend):
    dm = build_dof_map(build_box_mesh((1, 1, 1), (3, 2, 2)), 3)
    v = rng.standard_normal(dm.n_dofs)
    outs = [MonodomainOperator(make_basis(3, LG), dm, table1_diffusion(), 2.0, batch_width=w, backend=backend).apply(v)
            for w in (1, 4, 8)]
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


def test_deterministic_repeat():
    op, _, _ = op_and_matrix(2, LG, threads=2)
    v = rng.standard_normal(op.n_dofs)
    assert np.array_equal(op.apply(v), op.apply(v))


def test_threads_agree_with_serial():
    op1, _, _ = op_and_matrix(2, LG, cells=(4, 2, 2))
    op3, _, _ = op_and_matrix(2, LG, cells=(4, 2, 2), threads=3)
    v = rng.standard_normal(op1.n_dofs)
    np.testing.assert_allclose(op3.apply(v), op1.apply(v), rtol=1e-14, atol=1e-14)


@pytest.mark.parametrize("flavor", [LG, LGL])
def test_backends_agree(flavor):
    if not HAVE_NUMBA:
        pytest.skip("numba missing")
    a, _, _ = op_and_matrix(4, flavor, backend="numpy")
    b, _, _ = op_and_matrix(4, flavor, backend="compiled")
    v = rng.standard_normal(a.n_dofs)
    np.testing.assert_allclose(a.apply(v), b.apply(v), rtol=1e-13, atol=1e-13)


def test_local_kernel_constant_in_null_space():
    dm = build_dof_map(build_box_mesh((1, 1, 1), (1, 1, 1)), 4)
    for flavor in (LG, LGL):
        basis = make_basis(4, flavor)
        geo = cell_geometry(dm, basis, table1_diffusion())
        u = np.ones((5, 5, 5, 2))
        out = apply_local_sumfac(u, basis, None, geo.coeff)
        assert np.abs(out).max() < 1e-13


def test_local_kernel_linear_function_flux():
    """K u for a linear u equals the boundary flux pattern of the dense local matrix."""
    dm = build_dof_map(build_box_mesh((2, 1, 1), (1, 1, 1)), 2)
    basis = make_basis(2, LG)
    diff = IsotropicDiffusion(1.0)
    geo = cell_geometry(dm, basis, diff)
    x = dm.node_coords
    u = (x @ np.array([1.0, -2.0, 0.5])).reshape(3, 3, 3, 1)
    u = np.concatenate([u, u], axis=-1)
    out = apply_local_sumfac(u, basis, None, geo.coeff)[..., 0].ravel()
    A, _ = assemble_system(basis, dm, diff, 0.0)
    np.testing.assert_allclose(out, A @ u[..., 0].ravel(), atol=1e-13)
    assert abs(out.sum()) < 1e-13
    # interior node carries no flux
    assert abs(out.reshape(3, 3, 3)[1, 1, 1]) < 1e-13


def test_flop_scaling_law():
    m = build_box_mesh((1, 1, 1), (2, 2, 2))
    fpc = {}
    for p in (1, 4):
        op = MonodomainOperator(make_basis(p, LG), build_dof_map(m, p), table1_diffusion(), 1.0, count_flops=True)
        op.apply(np.ones(op.n_dofs))
        fpc[p] = op.counter.flops_per_cell
    assert fpc[4] / fpc[1] == pytest.approx(5 ** 4 / 2 ** 4, rel=0.2)


@pytest.mark.parametrize("flavor", [LG, LGL])
@pytest.mark.parametrize("p", [1, 2, 3])
def test_diagonal_matches_assembled(p, flavor):
    op, A, _ = op_and_matrix(p, flavor)
    np.testing.assert_allclose(op.diagonal(), A.diagonal(), rtol=1e-12)
    np.testing.assert_allclose(op.diagonal_unit(), A.diagonal(), rtol=1e-12)


def test_diagonal_mass_scaling():
    op, _, _ = op_and_matrix(2, LGL)
    stiff = op.with_mass_coeff(0.0).diagonal()
    m1 = op.with_mass_coeff(1.0).diagonal() - stiff
    m2 = op.with_mass_coeff(2.0).diagonal() - stiff
    np.testing.assert_allclose(m2, 2 * m1, rtol=1e-13)


def test_lgl_mass_is_diagonal():
    dm = build_dof_map(build_box_mesh((1, 2, 1), (2, 2, 2)), 3)
    basis = make_basis(3, LGL)
    op = MonodomainOperator(basis, dm, IsotropicDiffusion(0.0), mass_coeff=1.0)
    assert np.all(op.diagonal() > 0)
    np.testing.assert_allclose(op.diagonal(), op.mass_lumped(), rtol=1e-14)
    v = rng.standard_normal(dm.n_dofs)
    assert np.array_equal(op.mass_apply(v), op.mass_lumped() * v)
    _, M = assemble_system(basis, dm, IsotropicDiffusion(0.0), 1.0)
    assert M.nnz == dm.n_dofs


@pytest.mark.parametrize("flavor", [LG, LGL])
def test_mass_integrates_volume(flavor):
    op, _, _ = op_and_matrix(3, flavor)
    assert op.mass_apply(np.ones(op.n_dofs)).sum() == pytest.approx(1.0 * 1.5 * 0.7, rel=1e-10)


def test_memory_bytes_small():
    op, A, _ = op_and_matrix(4, LGL)
    assert op.memory_bytes() < memory_footprint(A).bytes


# -- matrix-based -----------------------------------------------------------


def test_single_cell_assembled():
    dm = build_dof_map(build_box_mesh((1, 1, 1), (1, 1, 1)), 1)
    A, M = assemble_system(make_basis(1, LGL), dm, IsotropicDiffusion(1.0), 0.0)
    np.testing.assert_allclose(A.toarray().sum(axis=1), 0.0, atol=1e-15)
    np.testing.assert_allclose(M.toarray(), np.eye(8) / 8, atol=1e-16)


@pytest.mark.parametrize("flavor", [LG, LGL])
def test_neumann_null_space(flavor):
    _, A, _ = op_and_matrix(3, flavor, mass_coeff=0.0)
    assert np.abs(A @ np.ones(A.shape[0])).max() <= 1e-10 * abs(A).sum(axis=1).max()
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()
    assert np.all(A.diagonal() > 0)


def test_interior_row_nnz():
    m = build_box_mesh((1, 1, 1), (3, 3, 3))
    for p, expected in [(1, 27), (4, 729)]:
        A = assemble(make_basis(p, LGL), build_dof_map(m, p), table1_diffusion(), 1.0)
        assert interior_row_nnz(A, build_dof_map(m, p)) == expected


def test_mass_limit():
    dm = build_dof_map(build_box_mesh((1, 1, 1), (2, 1, 1)), 2)
    basis = make_basis(2, LG)
    A, M = assemble_system(basis, dm, IsotropicDiffusion(1e-12), 1e6)
    v = rng.standard_normal(dm.n_dofs)
    np.testing.assert_allclose(A @ v, 1e6 * (M @ v), rtol=1e-9)


def test_assemble_flavor_check():
    dm = build_dof_map(build_box_mesh((1, 1, 1), (1, 1, 1)), 2)
    with pytest.raises(ValueError):
        assemble(make_basis(2, LG), dm, IsotropicDiffusion(1.0), 1.0, flavor=LGL)


def test_jacobi_and_footprint():
    _, A, _ = op_and_matrix(2, LGL)
    np.testing.assert_allclose(jacobi(A) * A.diagonal(), 1.0)
    fp = memory_footprint(A)
    assert fp.nnz == A.nnz
    assert fp.bytes == A.nnz * (8 + A.indices.itemsize) + (A.shape[0] + 1) * A.indices.itemsize


def test_export_coo(tmp_path):
    _, A, _ = op_and_matrix(1, LGL, cells=(1, 1, 1))
    path = tmp_path / "A.txt"
    export_coo(path, A)
    data = np.loadtxt(path, comments="%")
    assert len(data) == A.nnz
    B = np.zeros(A.shape)
    B[data[:, 0].astype(int), data[:, 1].astype(int)] = data[:, 2]
    np.testing.assert_array_equal(B, A.toarray())


@settings(max_examples=15, deadline=None)
@given(p=st.integers(1, 3), flavor=st.sampled_from([LG, LGL]),
       cells=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2)), seed=st.integers(0, 2 ** 32 - 1))
def test_spmv_matches_apply(p, flavor, cells, seed):
    op, A, _ = op_and_matrix(p, flavor, cells=cells)
    v = np.random.default_rng(seed).standard_normal(op.n_dofs)
    ref = A @ v
    assert np.max(np.abs(op.apply(v) - ref)) <= 1e-11 * np.max(np.abs(ref))
    w = np.random.default_rng(seed + 1).standard_normal(op.n_dofs)
    assert abs((A @ v) @ w - (A @ w) @ v) <= 1e-11 * max(1.0, abs(ref @ w))
