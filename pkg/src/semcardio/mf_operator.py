"""Matrix-free action of ``mass_coeff * M + K`` by sum-factorization.

Cell data live in lane layout ``(p+1,)*dim + (lanes,)``.  Each 1D contraction
("sweep") is a single BLAS gemm over all lanes of a batch, so a batch of cells
is processed by one instruction stream, the numpy analogue of SIMD lanes.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .basis import TensorBasis
from .mesh import DofMap

DEFAULT_BATCH_WIDTH = 512
BACKENDS = ("auto", "numpy", "compiled")


@dataclass
class FlopCounter:
    flops: int = 0
    cells: int = 0
    applies: int = 0
    bytes_read: int = 0

    def reset(self):
        self.flops = self.cells = self.applies = self.bytes_read = 0

    @property
    def flops_per_cell(self) -> float:
        return self.flops / max(self.cells, 1)


def _sweep(mat: np.ndarray, x: np.ndarray, axis: int, counter: FlopCounter | None = None) -> np.ndarray:
    """Contract ``mat`` (m x n) with axis ``axis`` of ``x``."""
    shape = x.shape
    n = shape[axis]
    pre = math.prod(shape[:axis])
    post = math.prod(shape[axis + 1:])
    out = np.matmul(mat, x.reshape(pre, n, post))
    if counter is not None:
        counter.flops += 2 * mat.shape[0] * n * pre * post
    return out.reshape(shape[:axis] + (mat.shape[0],) + shape[axis + 1:])


def apply_local_sumfac(u, basis: TensorBasis, mass_weight=None, coeff=None, counter=None):
    """Cell-local ``(M_K + K_K) u_K`` for a batch of cells.

    Parameters
    ----------
    u : ndarray, shape ``(p+1,)*dim + (lanes,)``
        Local coefficients, one lane per cell.
    mass_weight : ndarray or None
        Quadrature weight x Jacobian x mass coefficient, broadcastable to
        ``(nq,)*dim + (lanes,)``.  None drops the mass term.
    coeff : ndarray or None
        Stiffness coefficients ``w |J| J^-1 D_M J^-T`` with shape
        ``(dim, dim) + (nq,)*dim + (lanes or 1,)``.  None drops the stiffness.
    """
    d = u.ndim - 1
    B, D = basis.B, basis.D
    colloc = basis.collocated
    stiff = coeff is not None

    # forward: values and reference gradients at quadrature points
    terms = {None: u}
    for a in reversed(range(d)):
        new = {}
        for key, arr in terms.items():
            if key is None:
                if mass_weight is not None or a > 0:
                    new[None] = arr if colloc else _sweep(B, arr, a, counter)
                if stiff:
                    new[a] = _sweep(D, arr, a, counter)
            else:
                new[key] = arr if colloc else _sweep(B, arr, a, counter)
        terms = new

    q = {}
    if mass_weight is not None:
        q[None] = mass_weight * terms[None]
        if counter is not None:
            counter.flops += terms[None].size
    if stiff:
        for a in range(d):
            f = coeff[a, 0] * terms[0]
            for b in range(1, d):
                f = f + coeff[a, b] * terms[b]
            q[a] = f
        if counter is not None:
            counter.flops += (2 * d - 1) * d * terms[0].size
            counter.bytes_read += 8 * d * d * terms[0].size

    # backward: transposed sweeps, accumulated in a fixed order
    for a in range(d):
        new = {}
        for key in sorted(q, key=lambda k: -1 if k is None else k):
            arr = q[key]
            if key == a:
                tgt, val = None, _sweep(D.T, arr, a, counter)
            else:
                tgt, val = key, (arr if colloc else _sweep(B.T, arr, a, counter))
            if tgt in new:
                new[tgt] = new[tgt] + val
                if counter is not None:
                    counter.flops += val.size
            else:
                new[tgt] = val
        q = new
    return q[None]


@dataclass
class CellGeometry:
    """Per-quadrature-point data shared by matrix-free and matrix-based paths."""

    mass_weight: np.ndarray  # (nq,)*dim + (1,)
    coeff: np.ndarray  # (dim, dim) + (nq,)*dim + (n_cells or 1,)
    qp_coords: np.ndarray | None = field(default=None, repr=False)


def quadrature_points(dofmap: DofMap, basis: TensorBasis) -> np.ndarray:
    """Physical quadrature points, shape ``(nq,)*dim + (n_cells, dim)``."""
    mesh = dofmap.mesh
    d = mesh.dim
    xi = basis.quad.points
    nq = len(xi)
    origins = mesh.cell_origins()  # (n_cells, d)
    out = np.empty((nq,) * d + (mesh.n_cells, d))
    for a in range(d):
        shape = [1] * d + [1]
        shape[a] = nq
        off = (0.5 * (xi + 1.0) * mesh.h[a]).reshape(shape)
        out[..., a] = off + origins[:, a]
    return out


def cell_geometry(dofmap: DofMap, basis: TensorBasis, diffusion) -> CellGeometry:
    mesh = dofmap.mesh
    d = mesh.dim
    if getattr(diffusion, "dim", d) != d:
        raise ValueError(f"diffusion field is {diffusion.dim}D but the mesh is {d}D")
    w1 = basis.quad.weights
    w = np.ones(())
    for _ in range(d):
        w = np.multiply.outer(w, w1)
    det = float(np.prod(mesh.h / 2.0))
    mass_weight = (w * det)[..., None]
    scale = 2.0 / mesh.h
    if getattr(diffusion, "constant", False):
        Dm = diffusion.tensor(np.asarray(mesh.origin)[None, :])[0]  # (d, d)
        coeff = (Dm * np.outer(scale, scale))[(...,) + (None,) * (d + 1)] * mass_weight
        return CellGeometry(mass_weight, np.ascontiguousarray(coeff))
    x = quadrature_points(dofmap, basis)
    Dm = diffusion.tensor(x)  # (nq,)*d + (n_cells, d, d)
    Dm = np.moveaxis(np.moveaxis(Dm, -1, 0), -1, 0)  # (d, d) + (nq,)*d + (n_cells,)
    coeff = Dm * np.outer(scale, scale)[(...,) + (None,) * (d + 1)] * mass_weight
    return CellGeometry(mass_weight, np.ascontiguousarray(coeff))


class MonodomainOperator:
    """``A = mass_coeff * M + K`` applied cell by cell without storing A.

    Parameters
    ----------
    basis : TensorBasis
        Fixes p and the quadrature flavor (LG -> SEM, LGL -> SEM-NI).
    dofmap : DofMap
    diffusion : DiffusionField or IsotropicDiffusion
    mass_coeff : float
        Typically ``alpha_0 / dt`` (3 / (2 dt) for BDF2).
    batch_width : int
        Cells per kernel invocation.
    threads : int
        Worker threads over contiguous cell slabs.
    backend : {"auto", "numpy", "compiled"}
        ``numpy`` runs batched BLAS sweeps; ``compiled`` runs the fused 3D
        cell loop of :mod:`semcardio._kernels`.  ``auto`` picks the compiled
        loop for 3D meshes when numba is available and no flop counting is
        requested.
    """

    def __init__(self, basis, dofmap, diffusion, mass_coeff=0.0, batch_width=DEFAULT_BATCH_WIDTH,
                 threads=1, count_flops=False, geometry=None, backend="auto"):
        if basis.p != dofmap.p:
            raise ValueError(f"basis degree {basis.p} != dofmap degree {dofmap.p}")
        if batch_width < 1:
            raise ValueError("batch_width must be >= 1")
        self.basis = basis
        self.dofmap = dofmap
        self.diffusion = diffusion
        self.mass_coeff = float(mass_coeff)
        self.batch_width = int(batch_width)
        self.threads = max(1, int(threads))
        self.geometry = geometry if geometry is not None else cell_geometry(dofmap, basis, diffusion)
        self.counter = FlopCounter() if count_flops else None
        if backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if backend == "auto":
            backend = "compiled" if (_kernels.HAVE_NUMBA and dofmap.dim == 3 and not count_flops) else "numpy"
        if backend == "compiled" and (dofmap.dim != 3 or not _kernels.HAVE_NUMBA):
            raise ValueError("the compiled backend needs numba and a 3D mesh")
        self.backend = backend
        self._lumped = None
        self._diag = None

    @property
    def n_dofs(self) -> int:
        return self.dofmap.n_dofs

    @property
    def shape(self):
        return (self.n_dofs, self.n_dofs)

    @property
    def flavor(self) -> str:
        return self.basis.flavor

    def with_mass_coeff(self, mass_coeff: float) -> "MonodomainOperator":
        return MonodomainOperator(self.basis, self.dofmap, self.diffusion, mass_coeff, self.batch_width,
                                  self.threads, self.counter is not None, self.geometry, self.backend)

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_dofs,):
            raise ValueError(f"vector of shape {v.shape} does not match {self.n_dofs} DOFs")
        return v

    def _run_compiled(self, v, mass_scale, stiffness):
        geo = self.geometry
        mw = geo.mass_weight * mass_scale if mass_scale != 0.0 else None
        coeff = geo.coeff if stiffness else None
        per_cell = coeff is not None and coeff.shape[-1] != 1
        n_cells = self.dofmap.mesh.n_cells
        if self.threads == 1:
            out = np.zeros(self.n_dofs)
            _kernels.apply_cells(v, out, self.dofmap, 0, n_cells, self.basis, mw, coeff, per_cell,
                                 self.batch_width)
            return out
        # private accumulators per contiguous slab, merged in slab order
        bounds = np.linspace(0, n_cells, self.threads + 1).astype(int)
        outs = [np.zeros(self.n_dofs) for _ in range(self.threads)]

        def work(t):
            _kernels.apply_cells(v, outs[t], self.dofmap, bounds[t], bounds[t + 1], self.basis, mw, coeff,
                                 per_cell, self.batch_width)

        with ThreadPoolExecutor(self.threads) as pool:
            list(pool.map(work, range(self.threads)))
        out = outs[0]
        for o in outs[1:]:
            out += o
        return out

    def _run(self, v, mass_scale, stiffness):
        if self.backend == "compiled":
            return self._run_compiled(v, mass_scale, stiffness)
        L = self.dofmap.gather(v)
        n_cells = L.shape[-1]
        out = np.empty_like(L)
        geo = self.geometry
        mw = geo.mass_weight * mass_scale if mass_scale != 0.0 else None
        coeff = geo.coeff if stiffness else None
        per_cell = coeff is not None and coeff.shape[-1] != 1
        bw = self.batch_width

        def work(start):
            stop = min(start + bw, n_cells)
            u = np.ascontiguousarray(L[..., start:stop])
            c = coeff[..., start:stop] if per_cell else coeff
            pad = stop - start == 1
            if pad:
                # a single lane would turn gemm into gemv and change rounding
                u = np.concatenate([u, np.zeros_like(u)], axis=-1)
                if per_cell:
                    c = np.concatenate([c, c], axis=-1)
            r = apply_local_sumfac(u, self.basis, mw, c, self.counter)
            out[..., start:stop] = r[..., :1] if pad else r

        starts = range(0, n_cells, bw)
        if self.threads > 1 and self.counter is None:
            with ThreadPoolExecutor(self.threads) as pool:
                list(pool.map(work, starts))
        else:
            for s in starts:
                work(s)
        if self.counter is not None:
            self.counter.cells += n_cells
            self.counter.applies += 1
        return self.dofmap.scatter_add(out)

    def apply(self, v) -> np.ndarray:
        """``A v`` via gather, sum-factorized local kernel, scatter-add."""
        v = self._check(v)
        return self._run(v, self.mass_coeff, True)

    __call__ = apply

    def __matmul__(self, v):
        return self.apply(v)

    def stiffness_apply(self, v) -> np.ndarray:
        return self._run(self._check(v), 0.0, True)

    def mass_apply(self, v) -> np.ndarray:
        """``M v`` with the operator's quadrature; diagonal for collocated LGL."""
        v = self._check(v)
        if self.basis.collocated:
            return self.mass_lumped() * v
        return self._run(v, 1.0, False)

    def mass_lumped(self) -> np.ndarray:
        """Row sums of M; equal to the SEM-NI diagonal mass for LGL."""
        if self._lumped is None:
            if self.basis.collocated:
                mw = np.broadcast_to(self.geometry.mass_weight,
                                     self.geometry.mass_weight.shape[:-1] + (self.dofmap.mesh.n_cells,))
                self._lumped = self.dofmap.scatter_add(np.ascontiguousarray(mw))
            else:
                self._lumped = self._run(np.ones(self.n_dofs), 1.0, False)
        return self._lumped

    def diagonal(self) -> np.ndarray:
        """Exact diagonal of A from tensor products of squared 1D factors."""
        if self._diag is None:
            self._diag = self._diagonal_tensor()
        return self._diag

    def _diagonal_tensor(self):
        B, D = self.basis.B, self.basis.D
        geo = self.geometry
        d = self.dofmap.dim
        n_cells = self.dofmap.mesh.n_cells
        BB, BD, DD = (B * B).T, (B * D).T, (D * D).T
        local = None
        if self.mass_coeff != 0.0:
            x = geo.mass_weight * self.mass_coeff
            for k in range(d):
                x = _sweep(BB, x, k)
            local = np.broadcast_to(x, x.shape[:-1] + (n_cells,))
        for a in range(d):
            for b in range(d):
                x = geo.coeff[a, b]
                for k in range(d):
                    if k == a and k == b:
                        m = DD
                    elif k == a or k == b:
                        m = BD
                    else:
                        m = BB
                    x = _sweep(m, x, k)
                local = x if local is None else local + x
        local = np.ascontiguousarray(np.broadcast_to(local, local.shape[:-1] + (n_cells,)))
        return self.dofmap.scatter_add(local)

    def diagonal_unit(self) -> np.ndarray:
        """Diagonal by applying the local kernel to every local unit vector."""
        d = self.dofmap.dim
        n = self.basis.n
        n_cells = self.dofmap.mesh.n_cells
        geo = self.geometry
        mw = geo.mass_weight * self.mass_coeff if self.mass_coeff != 0.0 else None
        local = np.empty((n,) * d + (n_cells,))
        for j in np.ndindex(*(n,) * d):
            e = np.zeros((n,) * d + (max(n_cells, 2),))
            e[j] = 1.0
            c = geo.coeff
            if c.shape[-1] != 1 and n_cells == 1:
                c = np.concatenate([c, c], axis=-1)
            r = apply_local_sumfac(e, self.basis, mw, c)
            local[j] = r[j][:n_cells]
        return self.dofmap.scatter_add(local)

    def memory_bytes(self) -> int:
        """Bytes held by the operator: geometry only, no matrix."""
        return int(self.geometry.mass_weight.nbytes + self.geometry.coeff.nbytes)
