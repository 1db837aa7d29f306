"""Assembled sparse baseline for ``mass_coeff * M + K``.

Local dense matrices are computed cell by cell from the same quadrature data
as the matrix-free kernel, then compressed into a global CSR matrix.  This is
both the performance comparator and the correctness oracle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mf_operator import CellGeometry, cell_geometry

ASSEMBLY_CHUNK = 64


def _kron_matrices(basis, d):
    """Full tensor-product value and gradient matrices, shape (nq^d, n^d)."""
    B, D = basis.B, basis.D
    vals = B
    for _ in range(d - 1):
        vals = np.kron(vals, B)
    grads = []
    for a in range(d):
        m = np.ones((1, 1))
        for k in range(d):
            m = np.kron(m, D if k == a else B)
        grads.append(m)
    return vals, grads


def local_matrices(basis, geometry: CellGeometry, d: int, mass_coeff: float, cells=slice(None),
                   with_mass=False, n_cells=None):
    """Dense local matrices for a range of cells.

    Returns ``A_K`` with shape (n_cells_in_range, n^d, n^d) and optionally
    the (cell-independent) local mass matrix.  ``n_cells`` sets the range
    length when the coefficients are stored once for all cells.
    """
    vals, grads = _kron_matrices(basis, d)
    nq, nloc = vals.shape
    mw = geometry.mass_weight.reshape(nq)
    coeff = geometry.coeff
    c = coeff.reshape(d, d, nq, coeff.shape[-1])
    if coeff.shape[-1] != 1:
        c = c[..., cells]
    elif n_cells is not None:
        # constant coefficients are still evaluated cell by cell
        c = np.broadcast_to(c, (d, d, nq, n_cells))
    M = vals.T @ (mw[:, None] * vals)
    G = np.stack(grads)  # (d, nq, nloc)
    Y = np.einsum("abqc,bqi->caqi", c, G)  # sum_b C_ab grad_b, per cell
    K = np.matmul(G.reshape(d * nq, nloc).T[None], Y.reshape(-1, d * nq, nloc))
    A = K + mass_coeff * M[None] if mass_coeff != 0.0 else K
    if with_mass:
        return A, M
    return A


def assemble_system(basis, dofmap, diffusion, mass_coeff: float, geometry=None, with_mass=True,
                    n_cells_chunk=ASSEMBLY_CHUNK):
    """Assemble ``A = mass_coeff * M + K`` (and ``M``) in CSR format.

    Cells are processed in fixed-size chunks; every cell recomputes its local
    mass and stiffness matrices from the diffusion tensor at its quadrature
    points.
    """
    geometry = geometry if geometry is not None else cell_geometry(dofmap, basis, diffusion)
    d = dofmap.dim
    c2g = dofmap.cell_to_global
    n_cells, nloc = c2g.shape
    rows = np.repeat(c2g, nloc, axis=1).ravel()
    cols = np.tile(c2g, (1, nloc)).ravel()
    a_vals = np.empty(n_cells * nloc * nloc)
    m_vals = np.empty_like(a_vals) if with_mass else None
    for start in range(0, n_cells, n_cells_chunk):
        stop = min(start + n_cells_chunk, n_cells)
        A, M = local_matrices(basis, geometry, d, mass_coeff, slice(start, stop), with_mass=True,
                              n_cells=stop - start)
        a_vals[start * nloc * nloc: stop * nloc * nloc] = A.ravel()
        if with_mass:
            m_vals[start * nloc * nloc: stop * nloc * nloc] = np.broadcast_to(M, A.shape).ravel()
    shape = (dofmap.n_dofs, dofmap.n_dofs)
    A = sp.coo_matrix((a_vals, (rows, cols)), shape=shape).tocsr()
    A.sum_duplicates()
    if not with_mass:
        return A
    M = sp.coo_matrix((m_vals, (rows, cols)), shape=shape).tocsr()
    M.sum_duplicates()
    if basis.collocated:
        M.eliminate_zeros()
    return A, M


def assemble(basis, dofmap, diffusion, mass_coeff: float, flavor=None, geometry=None):
    """Assemble only ``A``; ``flavor`` is carried by ``basis`` and checked."""
    if flavor is not None and str(flavor).upper() != basis.flavor:
        raise ValueError(f"basis flavor {basis.flavor} does not match {flavor}")
    return assemble_system(basis, dofmap, diffusion, mass_coeff, geometry, with_mass=False)


def spmv(A, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (A.shape[1],):
        raise ValueError(f"vector of shape {v.shape} does not match matrix {A.shape}")
    return A @ v


@dataclass
class MatrixFootprint:
    n_dofs: int
    nnz: int
    bytes: int


def memory_footprint(A, index_bytes=None) -> MatrixFootprint:
    """nnz * (8 + index) bytes plus row offsets."""
    ib = A.indices.dtype.itemsize if index_bytes is None else index_bytes
    return MatrixFootprint(A.shape[0], A.nnz, A.nnz * (8 + ib) + (A.shape[0] + 1) * ib)


def jacobi(A) -> np.ndarray:
    """Inverse diagonal for point-Jacobi preconditioning."""
    d = A.diagonal()
    if np.any(d <= 0):
        raise ValueError("matrix has a non-positive diagonal entry")
    return 1.0 / d


def export_coo(path, A):
    """Write ``row col value`` lines, one per stored entry."""
    C = A.tocoo()
    with open(path, "w") as fh:
        fh.write(f"% {A.shape[0]} {A.shape[1]} {A.nnz}\n")
        np.savetxt(fh, np.column_stack([C.row, C.col, C.data]), fmt=["%d", "%d", "%.17g"])


def interior_row_nnz(A, dofmap) -> int:
    """nnz of the row of an interior vertex node (max over rows)."""
    counts = np.diff(A.indptr)
    return int(counts.max())
