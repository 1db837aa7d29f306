"""Activation maps, min/mean/max/point traces and error metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .basis import LG, make_basis, make_quadrature

TRACE_COLUMNS = ("step", "time_ms", "u_min", "u_mean", "u_max", "u_P", "w_min", "w_mean", "w_max", "w_P")


class ActivationTracker:
    """Online per-DOF ``argmax_t |du/dt|``; ties keep the earliest time.

    ``update`` receives the time-derivative approximation produced by the
    time scheme itself.  DOFs whose largest ``|du/dt|`` stays below
    ``threshold`` (when given) are reported as never activated.
    """

    def __init__(self, n_dofs: int, threshold: float | None = None):
        self.best = np.full(n_dofs, -np.inf)
        self.tau = np.full(n_dofs, np.nan)
        self.threshold = threshold
        self.last_time = 0.0
        self.dt = 0.0

    def update(self, t: float, dudt) -> None:
        a = np.abs(np.asarray(dudt, dtype=float))
        better = a > self.best  # strict: earlier time wins ties
        self.best[better] = a[better]
        self.tau[better] = t
        if t > self.last_time:
            self.dt = t - self.last_time
        self.last_time = t

    @property
    def activated(self) -> np.ndarray:
        if self.threshold is None:
            return np.isfinite(self.tau)
        return np.isfinite(self.tau) & (self.best >= self.threshold)

    def activation_times(self, t_final: float | None = None, dt: float | None = None) -> np.ndarray:
        """Activation times with the never-activated sentinel ``T_final + dt``."""
        t_final = self.last_time if t_final is None else t_final
        dt = self.dt if dt is None else dt
        out = self.tau.copy()
        out[~self.activated] = t_final + dt
        return out


def activation_map(times, snapshots, dudt=None, threshold=None) -> np.ndarray:
    """Offline activation times from stored derivative (or field) snapshots.

    With ``dudt`` omitted the derivative is taken as the backward difference
    of consecutive snapshots, i.e. the BDF1 derivative.
    """
    times = np.asarray(times, dtype=float)
    if dudt is None:
        snaps = np.asarray(snapshots, dtype=float)
        dudt = np.diff(snaps, axis=0) / np.diff(times)[:, None]
        times = times[1:]
    tr = ActivationTracker(np.shape(dudt)[1], threshold)
    for t, d in zip(times, dudt):
        tr.update(t, d)
    return tr.activation_times()


@dataclass
class TraceSeries:
    """Per-step min/mean/max/point functionals of ``u`` and of the first state variable."""

    rows: list = field(default_factory=list)

    def record(self, step, t, u, w=None, probe=None):
        u = np.asarray(u)
        uP = float(probe[1] @ u[probe[0]]) if probe is not None else np.nan
        if w is None or np.size(w) == 0:
            wv = (np.nan,) * 4
        else:
            w = np.asarray(w)
            wP = float(probe[1] @ w[probe[0]]) if probe is not None else np.nan
            wv = (float(w.min()), float(w.mean()), float(w.max()), wP)
        self.rows.append((int(step), float(t), float(u.min()), float(u.mean()), float(u.max()), uP) + wv)

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([r[TRACE_COLUMNS.index(name)] for r in self.rows])

    @property
    def times(self) -> np.ndarray:
        return self.column("time_ms")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for r in self.rows:
                writer.writerow(format_row(r))

    @classmethod
    def from_csv(cls, path) -> "TraceSeries":
        with open(path) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != TRACE_COLUMNS:
                raise ValueError(f"unexpected trace header {header}")
            rows = [(int(r[0]),) + tuple(float(x) for x in r[1:]) for r in reader]
        return cls(rows)


def format_row(row):
    return [str(row[0])] + [repr(float(x)) for x in row[1:]]


def error_norms(traces, reference, dt: float) -> dict:
    """Discrete L2-in-time norms of the differences of the u functionals.

    ``traces`` and ``reference`` are :class:`TraceSeries` (or dicts of
    arrays keyed ``min, mean, max, P``) on the same step grid.
    """
    def cols(s):
        if isinstance(s, TraceSeries):
            return {k: s.column(c) for k, c in (("min", "u_min"), ("mean", "u_mean"), ("max", "u_max"), ("P", "u_P"))}
        return {k: np.asarray(v, dtype=float) for k, v in s.items()}

    a, b = cols(traces), cols(reference)
    if isinstance(traces, TraceSeries) and isinstance(reference, TraceSeries):
        if len(traces) != len(reference) or not np.allclose(traces.times, reference.times, rtol=0, atol=1e-9 * dt):
            raise ValueError("trace series are not on the same step grid")
    out = {}
    for k in ("min", "mean", "max", "P"):
        if a[k].shape != b[k].shape:
            raise ValueError(f"series {k} lengths differ: {a[k].shape} vs {b[k].shape}")
        out[f"err_{k}"] = float(np.sqrt(dt * np.sum((a[k] - b[k]) ** 2)))
    return out


def subsample(series: TraceSeries, stride: int, offset: int = 0) -> TraceSeries:
    """Every ``stride``-th row, e.g. to compare a reference run at a finer dt."""
    return TraceSeries(series.rows[offset::stride])


class NormEvaluator:
    """Element-wise L2 and H1 norms of ``u_hp - u`` with a (p+2)-point LG rule."""

    def __init__(self, dofmap, n_quad=None):
        p = dofmap.p
        self.dofmap = dofmap
        nq = p + 2 if n_quad is None else n_quad
        self.basis = make_basis(p, LG, nq)
        q = make_quadrature(LG, nq)
        d = dofmap.dim
        mesh = dofmap.mesh
        h = mesh.h
        self.weights = np.ones(())
        for a in range(d):
            self.weights = np.multiply.outer(self.weights, q.weights * h[a] / 2.0)
        # physical quadrature points per cell: (nq,)*d + (n_cells, d)
        origins = mesh.cell_origins()
        ref = 0.5 * (q.points + 1.0)
        grids = np.meshgrid(*[ref * h[a] for a in range(d)], indexing="ij")
        local = np.stack(grids, axis=-1)  # (nq,)*d + (d,)
        self.points = local[..., None, :] + origins
        self.scale = 2.0 / h

    def _interp(self, u):
        from .mf_operator import _sweep

        L = self.dofmap.gather(u)
        d = self.dofmap.dim
        B, D = self.basis.B, self.basis.D
        val = L
        for k in range(d):
            val = _sweep(B, val, k)
        grads = []
        for a in range(d):
            g = L
            for k in range(d):
                g = _sweep(D if k == a else B, g, k)
            grads.append(g * self.scale[a])
        return val, grads

    def errors(self, u, exact, grad_exact=None) -> tuple[float, float]:
        """Squared ``(L2, H1)`` errors; the H1 one includes the L2 part.

        ``exact(points)`` and ``grad_exact(points) -> (..., d)`` take
        physical points of shape ``(..., d)``.
        """
        pts = self.points
        return self.errors_from_values(u, exact(pts), None if grad_exact is None else grad_exact(pts))

    def errors_from_values(self, u, exact_values, grad_values=None) -> tuple[float, float]:
        """As :meth:`errors` with the exact solution pre-evaluated at :attr:`points`."""
        val, grads = self._interp(np.asarray(u, dtype=float))
        w = self.weights[..., None]
        ev = val - exact_values
        l2 = float(np.sum(w * ev * ev))
        semi = 0.0
        if grad_values is not None:
            for a, g in enumerate(grads):
                e = g - grad_values[..., a]
                semi += float(np.sum(w * e * e))
        return l2, l2 + semi


def space_time_norms(dofmap, times, fields, exact, grad_exact, n_quad=None) -> dict:
    """Time-accumulated ``err_H1`` and ``err_L2``.

    ``sqrt(dt * sum_n ||u_hp(t_n) - u(t_n)||^2)`` with uniform ``dt`` taken
    from ``times``; ``exact(points, t)``, ``grad_exact(points, t)``.
    """
    times = np.asarray(times, dtype=float)
    if len(times) == 0:
        return {"err_H1": 0.0, "err_L2": 0.0}
    dt = float(times[1] - times[0]) if len(times) > 1 else 1.0
    ev = NormEvaluator(dofmap, n_quad)
    l2 = h1 = 0.0
    for t, u in zip(times, fields):
        a, b = ev.errors(u, lambda x: exact(x, t), lambda x: grad_exact(x, t))
        l2 += a
        h1 += b
    return {"err_H1": float(np.sqrt(dt * h1)), "err_L2": float(np.sqrt(dt * l2))}


class SpaceTimeAccumulator:
    """Streaming version of :func:`space_time_norms` for use inside a time loop."""

    def __init__(self, dofmap, exact, grad_exact, n_quad=None):
        self.ev = NormEvaluator(dofmap, n_quad)
        self.exact, self.grad_exact = exact, grad_exact
        self.l2 = 0.0
        self.h1 = 0.0
        self.count = 0

    def add(self, t, u):
        a, b = self.ev.errors(u, lambda x: self.exact(x, t), lambda x: self.grad_exact(x, t))
        self.l2 += a
        self.h1 += b
        self.count += 1

    def result(self, dt) -> dict:
        return {"err_H1": float(np.sqrt(dt * self.h1)), "err_L2": float(np.sqrt(dt * self.l2))}


def diagonal_profile(dofmap, values, start, end, n_samples=None):
    """Nodal values nearest to the segment ``start -> end``.

    Returns ``(distance_from_start, values)`` sorted by distance, using the
    DOFs whose grid index lies on the lattice diagonal when the mesh is
    uniform enough, else nearest nodes to evenly spaced samples.
    """
    start, end = np.asarray(start, float), np.asarray(end, float)
    if n_samples is None:
        n_samples = max(dofmap.grid_shape)
    s = np.linspace(0.0, 1.0, n_samples)
    pts = start + s[:, None] * (end - start)
    idx = np.array([dofmap.nearest_dof(x) for x in pts])
    idx = np.unique(idx)
    dist = np.linalg.norm(dofmap.node_coords[idx] - start, axis=1)
    order = np.argsort(dist, kind="stable")
    return dist[order], np.asarray(values)[idx[order]]


def point_value(dofmap, u, point) -> float:
    idx, w = dofmap.point_weights(point)
    return float(w @ np.asarray(u)[idx])

