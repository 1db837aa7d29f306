"""Compiled 3D cell loop: gather, sum-factorized kernel, scatter-add.

Cells are processed in batches whose index is the innermost, contiguous
array axis (the lanes), so every loop body below is a lane loop the compiler
can turn into SIMD instructions.  The sequence of operations per lane
mirrors :func:`semcardio.mf_operator.apply_local_sumfac`: nine forward 1D
sweeps (three when collocated), the pointwise diffusion product, nine
transposed sweeps, and a scatter-add in lexicographic cell order.  Lanes
never interact, so results do not depend on the batch width.
"""
from __future__ import annotations

import numpy as np

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

MAX_LANES = 64


def _sweep0(M, x, y, nl):
    # y[a, j, k, l] = sum_i M[a, i] x[i, j, k, l]
    m, n = M.shape
    for a in range(m):
        for j in range(x.shape[1]):
            for k in range(x.shape[2]):
                for l in range(nl):
                    y[a, j, k, l] = 0.0
                for i in range(n):
                    c = M[a, i]
                    for l in range(nl):
                        y[a, j, k, l] += c * x[i, j, k, l]


def _sweep1(M, x, y, nl):
    m, n = M.shape
    for i in range(x.shape[0]):
        for a in range(m):
            for k in range(x.shape[2]):
                for l in range(nl):
                    y[i, a, k, l] = 0.0
                for j in range(n):
                    c = M[a, j]
                    for l in range(nl):
                        y[i, a, k, l] += c * x[i, j, k, l]


def _sweep2(M, x, y, nl):
    m, n = M.shape
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            for a in range(m):
                for l in range(nl):
                    y[i, j, a, l] = 0.0
                for k in range(n):
                    c = M[a, k]
                    for l in range(nl):
                        y[i, j, a, l] += c * x[i, j, k, l]


def _add(dst, src, nl):
    for i in range(dst.shape[0]):
        for j in range(dst.shape[1]):
            for k in range(dst.shape[2]):
                for l in range(nl):
                    dst[i, j, k, l] += src[i, j, k, l]


def _copy(dst, src, nl):
    for i in range(dst.shape[0]):
        for j in range(dst.shape[1]):
            for k in range(dst.shape[2]):
                for l in range(nl):
                    dst[i, j, k, l] = src[i, j, k, l]


def _run(u, out, grid1, grid2, cells1, cells2, p, c_start, c_stop, lanes, B, D, BT, DT, colloc, mass_w,
         has_mass, coeff, per_cell, stiff):
    n = p + 1
    nq = B.shape[0]
    L = lanes
    loc = np.empty((n, n, n, L))
    t0 = np.empty((n, n, nq, L))
    t1 = np.empty((n, n, nq, L))
    tb = np.empty((n, nq, nq, L))
    tbd = np.empty((n, nq, nq, L))
    tdb = np.empty((n, nq, nq, L))
    val = np.empty((nq, nq, nq, L))
    g0 = np.empty((nq, nq, nq, L))
    g1 = np.empty((nq, nq, nq, L))
    g2 = np.empty((nq, nq, nq, L))
    r_b = np.empty((n, nq, nq, L))
    r_1 = np.empty((n, nq, nq, L))
    r_2 = np.empty((n, nq, nq, L))
    tmp2 = np.empty((n, nq, nq, L))
    s_b = np.empty((n, n, nq, L))
    s_2 = np.empty((n, n, nq, L))
    tmp3 = np.empty((n, n, nq, L))
    res = np.empty((n, n, n, L))
    tmp4 = np.empty((n, n, n, L))
    cf = np.empty((3, 3, L))
    base = np.empty(L, dtype=np.int64)
    for c0 in range(c_start, c_stop, L):
        nl = min(L, c_stop - c0)
        for l in range(nl):
            c = c0 + l
            ci = c // (cells1 * cells2)
            cj = (c // cells2) % cells1
            ck = c % cells2
            base[l] = (ci * p * grid1 + cj * p) * grid2 + ck * p
        for i in range(n):
            for j in range(n):
                off = (i * grid1 + j) * grid2
                for k in range(n):
                    for l in range(nl):
                        loc[i, j, k, l] = u[base[l] + off + k]
        # forward sweeps, last axis first
        if colloc:
            _copy(val, loc, nl)
            if stiff:
                _sweep0(D, loc, g0, nl)
                _sweep1(D, loc, g1, nl)
                _sweep2(D, loc, g2, nl)
        else:
            _sweep2(B, loc, t0, nl)
            if stiff:
                _sweep2(D, loc, t1, nl)
            _sweep1(B, t0, tb, nl)
            if stiff:
                _sweep1(D, t0, tbd, nl)
                _sweep1(B, t1, tdb, nl)
            _sweep0(B, tb, val, nl)
            if stiff:
                _sweep0(D, tb, g0, nl)
                _sweep0(B, tbd, g1, nl)
                _sweep0(B, tdb, g2, nl)
        # pointwise: mass weight and diffusion coefficients
        for a in range(nq):
            for b in range(nq):
                for q in range(nq):
                    if stiff:
                        for r in range(3):
                            for s in range(3):
                                if per_cell:
                                    for l in range(nl):
                                        cf[r, s, l] = coeff[r, s, a, b, q, c0 + l]
                                else:
                                    v = coeff[r, s, a, b, q, 0]
                                    for l in range(nl):
                                        cf[r, s, l] = v
                        for l in range(nl):
                            x0 = g0[a, b, q, l]
                            x1 = g1[a, b, q, l]
                            x2 = g2[a, b, q, l]
                            g0[a, b, q, l] = cf[0, 0, l] * x0 + cf[0, 1, l] * x1 + cf[0, 2, l] * x2
                            g1[a, b, q, l] = cf[1, 0, l] * x0 + cf[1, 1, l] * x1 + cf[1, 2, l] * x2
                            g2[a, b, q, l] = cf[2, 0, l] * x0 + cf[2, 1, l] * x1 + cf[2, 2, l] * x2
                    if has_mass:
                        w = mass_w[a, b, q]
                        for l in range(nl):
                            val[a, b, q, l] = w * val[a, b, q, l]
        # backward sweeps, first axis first
        if colloc:
            if has_mass:
                _copy(res, val, nl)
                if stiff:
                    _sweep0(DT, g0, tmp4, nl)
                    _add(res, tmp4, nl)
            else:
                _sweep0(DT, g0, res, nl)
            if stiff:
                _sweep1(DT, g1, tmp4, nl)
                _add(res, tmp4, nl)
                _sweep2(DT, g2, tmp4, nl)
                _add(res, tmp4, nl)
        else:
            if has_mass:
                _sweep0(BT, val, r_b, nl)
                if stiff:
                    _sweep0(DT, g0, tmp2, nl)
                    _add(r_b, tmp2, nl)
            else:
                _sweep0(DT, g0, r_b, nl)
            if stiff:
                _sweep0(BT, g1, r_1, nl)
                _sweep0(BT, g2, r_2, nl)
                _sweep1(BT, r_b, s_b, nl)
                _sweep1(DT, r_1, tmp3, nl)
                _add(s_b, tmp3, nl)
                _sweep1(BT, r_2, s_2, nl)
                _sweep2(BT, s_b, res, nl)
                _sweep2(DT, s_2, tmp4, nl)
                _add(res, tmp4, nl)
            else:
                _sweep1(BT, r_b, s_b, nl)
                _sweep2(BT, s_b, res, nl)
        # scatter-add lane by lane, in cell order
        for l in range(nl):
            for i in range(n):
                for j in range(n):
                    row = base[l] + (i * grid1 + j) * grid2
                    for k in range(n):
                        out[row + k] += res[i, j, k, l]


if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)
    _sweep0 = _jit(_sweep0)
    _sweep1 = _jit(_sweep1)
    _sweep2 = _jit(_sweep2)
    _add = _jit(_add)
    _copy = _jit(_copy)
    _run = _jit(_run)


def apply_cells(u, out, dofmap, c_start, c_stop, basis, mass_w, coeff, per_cell, lanes=16):
    """Accumulate ``A_K u_K`` of cells ``[c_start, c_stop)`` into ``out``."""
    B = np.ascontiguousarray(basis.B, dtype=float)
    D = np.ascontiguousarray(basis.D, dtype=float)
    nq = B.shape[0]
    has_mass = mass_w is not None
    stiff = coeff is not None
    mw = np.ascontiguousarray(mass_w.reshape(nq, nq, nq)) if has_mass else np.zeros((nq, nq, nq))
    cf = np.ascontiguousarray(coeff) if stiff else np.zeros((3, 3, nq, nq, nq, 1))
    _, g1, g2 = dofmap.grid_shape
    _, c1, c2 = dofmap.mesh.cells_per_axis
    lanes = int(max(1, min(lanes, MAX_LANES)))
    _run(np.ascontiguousarray(u, dtype=float), out, g1, g2, c1, c2, dofmap.p, int(c_start), int(c_stop), lanes,
         B, D, np.ascontiguousarray(B.T), np.ascontiguousarray(D.T), bool(basis.collocated), mw, has_mass, cf,
         bool(per_cell), stiff)
