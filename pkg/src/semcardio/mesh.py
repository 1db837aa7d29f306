"""Structured box meshes, continuous Q_p numbering, octree levels and fibers.

Coordinates are in mm, conductivities in mm^2/ms.  Meshes are uniform and
axis-aligned, so every cell map is affine with a constant diagonal Jacobian.
Global DOFs are numbered lexicographically (C order, last axis fastest) over
the structured lattice of nodes; cells are numbered the same way.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .basis import LGL, make_quadrature, lagrange_matrices

# Table 1 conductivities in m^2/s and the mm^2/ms conversion factor.
SIGMA_L_SI = 0.7643e-4
SIGMA_T_SI = 0.3494e-4
SIGMA_N_SI = 0.1125e-4
M2_PER_S_TO_MM2_PER_MS = 1.0e3

SLAB_EXTENT = (20.0, 7.0, 3.0)
# 76 x 24 x 12 = 21'888 cells reproduces the 25'025 (Q1) and 1'449'665 (Q4)
# node counts of the reference slab.
SLAB_CELLS_REFERENCE = (76, 24, 12)
# T0 for the desk hierarchy; (40, 16, 8) has h_avg ~ 0.44 mm.
SLAB_CELLS_COARSE = (5, 2, 1)


@dataclass(frozen=True)
class HexMesh:
    """Uniform structured mesh of the box ``origin + [0, extent]``.

    Works for 2D (quadrilaterals) and 3D (hexahedra); the dimension is
    ``len(extent)``.
    """

    extent: tuple
    cells_per_axis: tuple
    origin: tuple = None

    def __post_init__(self):
        extent = tuple(float(e) for e in self.extent)
        cells = tuple(int(c) for c in self.cells_per_axis)
        if len(extent) != len(cells) or len(extent) not in (2, 3):
            raise ValueError("extent and cells_per_axis must both have length 2 or 3")
        if any(e <= 0 for e in extent):
            raise ValueError(f"extents must be positive, got {extent}")
        if any(c <= 0 for c in cells):
            raise ValueError(f"cell counts must be positive, got {cells}")
        origin = (0.0,) * len(extent) if self.origin is None else tuple(float(o) for o in self.origin)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "cells_per_axis", cells)
        object.__setattr__(self, "origin", origin)

    @property
    def dim(self) -> int:
        return len(self.extent)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells_per_axis))

    @property
    def h(self) -> np.ndarray:
        return np.array(self.extent) / np.array(self.cells_per_axis)

    @property
    def h_avg(self) -> float:
        return float(np.mean(self.h))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def cell_index(self, multi_index) -> int:
        return int(np.ravel_multi_index(tuple(multi_index), self.cells_per_axis))

    def cell_origins(self) -> np.ndarray:
        """Lower corner of every cell, shape (n_cells, dim)."""
        grids = np.meshgrid(*[np.arange(c) for c in self.cells_per_axis], indexing="ij")
        idx = np.stack([g.ravel() for g in grids], axis=-1)
        return np.asarray(self.origin) + idx * self.h

    @property
    def vertices(self) -> np.ndarray:
        """Vertex coordinates per cell, shape (n_cells, 2**dim, dim)."""
        corners = np.array(list(product((0, 1), repeat=self.dim)), dtype=float)
        return self.cell_origins()[:, None, :] + corners[None] * self.h

    def contains(self, point, tol=1e-12) -> bool:
        x = np.asarray(point, dtype=float)
        lo = np.asarray(self.origin)
        return bool(np.all(x >= lo - tol) and np.all(x <= lo + np.asarray(self.extent) + tol))


def build_box_mesh(extent: Sequence[float], cells_per_axis: Sequence[int], origin=None) -> HexMesh:
    return HexMesh(tuple(extent), tuple(cells_per_axis), origin)


class DofMap:
    """Continuous Q_p numbering on a structured :class:`HexMesh`.

    Local cell arrays use the layout ``(p+1,)*dim + (n_cells,)``: the cell
    index is the trailing, contiguous axis, so batches of cells form the
    lanes of every kernel.
    """

    def __init__(self, mesh: HexMesh, p: int):
        if int(p) < 1:
            raise ValueError(f"polynomial degree must be >= 1, got {p}")
        self.mesh = mesh
        self.p = int(p)
        self.dim = mesh.dim
        self.grid_shape = tuple(c * self.p + 1 for c in mesh.cells_per_axis)
        self.n_dofs = int(np.prod(self.grid_shape))
        self.n_local = (self.p + 1) ** self.dim
        nodes = make_quadrature(LGL, self.p + 1).points
        self.axis_coords = []
        for a in range(self.dim):
            c = np.arange(mesh.cells_per_axis[a])
            x = mesh.origin[a] + (c[:, None] + 0.5 * (nodes[None, :self.p] + 1.0)) * mesh.h[a]
            x = np.append(x.ravel(), mesh.origin[a] + mesh.extent[a])
            self.axis_coords.append(x)

    @cached_property
    def node_coords(self) -> np.ndarray:
        grids = np.meshgrid(*self.axis_coords, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    @cached_property
    def cell_to_global(self) -> np.ndarray:
        """Global indices per cell, shape (n_cells, (p+1)**dim), local C order."""
        idx = np.arange(self.n_dofs).reshape(self.grid_shape)
        return self.gather(idx).reshape(self.n_local, -1).T.copy()

    def gather(self, v: np.ndarray) -> np.ndarray:
        """Global vector -> local cell array of shape ``(p+1,)*dim + (n_cells,)``."""
        g = np.asarray(v).reshape(self.grid_shape)
        win = sliding_window_view(g, (self.p + 1,) * self.dim)
        win = win[tuple(slice(None, None, self.p) for _ in range(self.dim))]
        d = self.dim
        # win: cells... + local...  ->  local... + cells...
        out = np.transpose(win, tuple(range(d, 2 * d)) + tuple(range(d)))
        return np.ascontiguousarray(out).reshape((self.p + 1,) * d + (-1,))

    def scatter_add(self, local: np.ndarray) -> np.ndarray:
        """Sum a local cell array into a global vector (fixed summation order)."""
        d, p = self.dim, self.p
        cells = self.mesh.cells_per_axis
        x = local.reshape((p + 1,) * d + cells)
        # fold one (local, cell) axis pair at a time, starting with axis 0
        for a in range(d):
            # x currently: merged[:a] + local[a:] + cells[a:]
            lead = x.shape[:a]
            nl = x.ndim - a  # remaining local + cell axes
            k = (nl) // 2
            x = np.moveaxis(x, a + k, a)  # cell axis a next to its local axis
            # now: lead + (cells_a, p+1) + rest
            c = cells[a]
            rest = x.shape[a + 2:]
            out = np.zeros(lead + (c * p + 1,) + rest)
            sl = (slice(None),) * a
            out[sl + (slice(0, c * p),)] = x[sl + (slice(None), slice(0, p))].reshape(lead + (c * p,) + rest)
            out[sl + (slice(p, None, p),)] += x[sl + (slice(None), p)]
            x = out
        return x.reshape(-1)

    def locate(self, point) -> tuple[int, np.ndarray]:
        """Cell index and reference coordinates in [-1, 1]^dim of a point."""
        x = np.asarray(point, dtype=float)
        m = self.mesh
        rel = (x - np.asarray(m.origin)) / m.h
        ci = np.clip(np.floor(rel).astype(int), 0, np.asarray(m.cells_per_axis) - 1)
        ref = 2.0 * (rel - ci) - 1.0
        return m.cell_index(ci), ref

    def point_weights(self, point):
        """(global indices, weights) such that u(point) = weights @ u[indices]."""
        cell, ref = self.locate(point)
        nodes = make_quadrature(LGL, self.p + 1).points
        w = np.ones(())
        for a in range(self.dim):
            B, _ = lagrange_matrices(nodes, [ref[a]])
            w = np.multiply.outer(w, B[0])
        return self.cell_to_global[cell], w.ravel()

    def interpolate(self, func: Callable) -> np.ndarray:
        """Nodal interpolant of ``func(points (n, dim)) -> (n,)``."""
        return np.asarray(func(self.node_coords), dtype=float).reshape(self.n_dofs)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.grid_shape, dtype=bool)
        for a in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[a] = 0
            mask[tuple(idx)] = True
            idx[a] = -1
            mask[tuple(idx)] = True
        return mask.ravel()

    def nearest_dof(self, point) -> int:
        x = np.asarray(point, dtype=float)
        ijk = [int(np.argmin(np.abs(self.axis_coords[a] - x[a]))) for a in range(self.dim)]
        return int(np.ravel_multi_index(ijk, self.grid_shape))


def build_dof_map(mesh: HexMesh, p: int) -> DofMap:
    return DofMap(mesh, p)


@dataclass
class LevelHierarchy:
    """Octree levels from coarse ``levels[0]`` to fine ``levels[-1]``."""

    levels: list
    parents: list = field(default_factory=list)

    @property
    def p(self) -> int:
        return self.levels[0][1].p

    @property
    def finest(self):
        return self.levels[-1]

    def __len__(self):
        return len(self.levels)

    @classmethod
    def from_coarse(cls, mesh: HexMesh, p: int) -> "LevelHierarchy":
        return cls([(mesh, DofMap(mesh, p))], [])

    @classmethod
    def from_fine(cls, mesh: HexMesh, p: int, max_coarse_dofs: int = 4000) -> "LevelHierarchy":
        """Coarsen ``mesh`` by 2 per axis while possible and above the DOF cap."""
        meshes = [mesh]
        while DofMap(meshes[0], p).n_dofs > max_coarse_dofs and all(
            c % 2 == 0 for c in meshes[0].cells_per_axis
        ):
            m = meshes[0]
            meshes.insert(0, HexMesh(m.extent, tuple(c // 2 for c in m.cells_per_axis), m.origin))
        hier = cls.from_coarse(meshes[0], p)
        for _ in meshes[1:]:
            hier = refine(hier)
        return hier


def _child_parent_map(coarse: HexMesh, fine: HexMesh) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(c) for c in fine.cells_per_axis], indexing="ij")
    parent = [g.ravel() // 2 for g in grids]
    return np.ravel_multi_index(parent, coarse.cells_per_axis)


def refine(hierarchy: LevelHierarchy) -> LevelHierarchy:
    """Return a hierarchy with one more level, each cell split into 2**dim."""
    mesh, dm = hierarchy.finest
    fine = HexMesh(mesh.extent, tuple(2 * c for c in mesh.cells_per_axis), mesh.origin)
    levels = list(hierarchy.levels) + [(fine, DofMap(fine, dm.p))]
    parents = list(hierarchy.parents) + [_child_parent_map(mesh, fine)]
    return LevelHierarchy(levels, parents)


# -- fibers and diffusion -------------------------------------------------


class FiberField:
    """Maps points of shape (..., 3) to an orthonormal triple (f0, s0, n0)."""

    constant = False

    def __call__(self, points):
        raise NotImplementedError


class ConstantFibers(FiberField):
    constant = True

    def __init__(self, f0, s0, n0):
        self.frame = np.array([f0, s0, n0], dtype=float)
        if not np.allclose(self.frame @ self.frame.T, np.eye(3), atol=1e-12):
            raise ValueError("fiber triple must be orthonormal")

    def __call__(self, points):
        shape = np.shape(points)[:-1]
        return tuple(np.broadcast_to(v, shape + (3,)) for v in self.frame)


def slab_fibers() -> ConstantFibers:
    """Fibers along x, sheetlets along y, sheet normals along z."""
    return ConstantFibers((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


def rotated_fibers(rotation) -> ConstantFibers:
    """Constant frame given by the rows of an orthogonal matrix."""
    R = np.asarray(rotation, dtype=float)
    return ConstantFibers(R[0], R[1], R[2])


class TransmuralFibers(FiberField):
    """Fiber angle rotating linearly with depth.

    The sheet normal is a fixed axis; fiber and sheetlet rotate in the plane
    orthogonal to it from ``angle_start`` at ``depth_range[0]`` to
    ``angle_end`` at ``depth_range[1]`` (degrees).
    """

    def __init__(self, normal_axis=0, angle_start=60.0, angle_end=-60.0, depth_range=(0.0, 3.0)):
        self.axis = int(normal_axis)
        self.a0 = np.deg2rad(angle_start)
        self.a1 = np.deg2rad(angle_end)
        self.d0, self.d1 = map(float, depth_range)

    def __call__(self, points):
        x = np.asarray(points, dtype=float)
        s = np.clip((x[..., self.axis] - self.d0) / (self.d1 - self.d0), 0.0, 1.0)
        ang = self.a0 + (self.a1 - self.a0) * s
        e = np.eye(3)
        n0 = np.broadcast_to(e[self.axis], x.shape)
        u, v = e[(self.axis + 1) % 3], e[(self.axis + 2) % 3]
        c, sn = np.cos(ang)[..., None], np.sin(ang)[..., None]
        f0 = c * v + sn * u
        s0 = -sn * v + c * u
        return f0, s0, n0


class DiffusionField:
    """Anisotropic tensor sigma_l f0f0 + sigma_t s0s0 + sigma_n n0n0."""

    dim = 3

    def __init__(self, fiber: FiberField, sigma_l: float, sigma_t: float, sigma_n: float):
        if min(sigma_l, sigma_t, sigma_n) <= 0:
            raise ValueError("conductivities must be positive")
        self.fiber = fiber
        self.sigmas = (float(sigma_l), float(sigma_t), float(sigma_n))

    @property
    def constant(self) -> bool:
        return self.fiber.constant

    def tensor(self, points) -> np.ndarray:
        f0, s0, n0 = self.fiber(points)
        sl, st, sn = self.sigmas
        return (
            sl * f0[..., :, None] * f0[..., None, :]
            + st * s0[..., :, None] * s0[..., None, :]
            + sn * n0[..., :, None] * n0[..., None, :]
        )


class IsotropicDiffusion:
    """sigma * Identity in any dimension."""

    constant = True

    def __init__(self, sigma: float = 1.0, dim: int = 3):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.sigma = float(sigma)
        self.dim = int(dim)

    def tensor(self, points) -> np.ndarray:
        shape = np.shape(points)[:-1]
        return np.broadcast_to(self.sigma * np.eye(self.dim), shape + (self.dim, self.dim))


def table1_diffusion(fiber: FiberField | None = None) -> DiffusionField:
    """Table 1 conductivities converted to mm^2/ms."""
    k = M2_PER_S_TO_MM2_PER_MS
    return DiffusionField(fiber or slab_fibers(), SIGMA_L_SI * k, SIGMA_T_SI * k, SIGMA_N_SI * k)


def diffusion_at(point, field) -> np.ndarray:
    return np.array(field.tensor(np.asarray(point, dtype=float)[None, :])[0])


# -- export ---------------------------------------------------------------


def write_vtk(path, dofmap: DofMap, point_data: dict | None = None, title="semcardio"):
    """Legacy-VTK ASCII unstructured grid on the node lattice.

    Every Q_p cell is emitted as p**dim linear sub-cells (VTK_HEXAHEDRON = 12,
    VTK_QUAD = 9) spanning neighbouring nodes, so nodal fields map one-to-one
    onto points.
    """
    d = dofmap.dim
    shape = dofmap.grid_shape
    pts = dofmap.node_coords
    if d == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    idx = np.arange(dofmap.n_dofs).reshape(shape)
    base = idx[tuple(slice(0, -1) for _ in range(d))].ravel()
    strides = [int(np.prod(shape[a + 1:])) for a in range(d)]
    if d == 3:
        sx, sy, sz = strides
        order = [0, sx, sx + sy, sy, sz, sx + sz, sx + sy + sz, sy + sz]
        ctype = 12
    else:
        sx, sy = strides
        order = [0, sx, sx + sy, sy]
        ctype = 9
    conn = base[:, None] + np.array(order)[None, :]
    with open(path, "w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(pts)} double\n")
        np.savetxt(fh, pts, fmt="%.10g")
        nv = conn.shape[1]
        fh.write(f"CELLS {len(conn)} {len(conn) * (nv + 1)}\n")
        np.savetxt(fh, np.column_stack([np.full(len(conn), nv), conn]), fmt="%d")
        fh.write(f"CELL_TYPES {len(conn)}\n")
        np.savetxt(fh, np.full(len(conn), ctype), fmt="%d")
        if point_data:
            fh.write(f"POINT_DATA {len(pts)}\n")
            for name, values in point_data.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                np.savetxt(fh, np.asarray(values, dtype=float).reshape(-1), fmt="%.10g")
