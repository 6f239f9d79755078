"""Local snapshot spaces attached to interior coarse edges.

A snapshot is obtained by prescribing a unit normal velocity on one fine edge of
the (possibly oversampled) coarse edge, zero normal velocity on the rest of the
region boundary, and solving the mixed problem separately on the two halves of
the region with a constant divergence in each half fixed by compatibility.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import GridHierarchy, Rect, neighborhood, oversample
from .mixedfem import LocalSolver, rect_forms


class LocalProblems:
    """Local solvers for one coefficient field, cached per rectangle."""

    def __init__(self, grid: GridHierarchy, field_values):
        self.grid = grid
        k = np.asarray(field_values, dtype=float).ravel()
        if np.any(k <= 0) or not np.all(np.isfinite(k)):
            raise ValueError("coefficient must be strictly positive")
        self.kinv = 1.0 / k
        self._solvers: dict[Rect, LocalSolver] = {}
        self._forms: dict[Rect, tuple] = {}

    def solver(self, rect: Rect) -> LocalSolver:
        s = self._solvers.get(rect)
        if s is None:
            s = self._solvers[rect] = LocalSolver(self.grid, rect, self.kinv)
        return s

    def forms(self, rect: Rect):
        """(mass, divergence) over all edges/cells of ``rect``."""
        f = self._forms.get(rect)
        if f is None:
            kin = self.kinv[self.grid.rect_cells(rect)]
            f = self._forms[rect] = rect_forms(self.grid, rect, kin)
        return f

    def clear(self):
        self._solvers.clear()
        self._forms.clear()


def region_positions(ids: np.ndarray, sub: np.ndarray) -> np.ndarray:
    order = np.argsort(ids, kind="stable")
    pos = np.searchsorted(ids, sub, sorter=order)
    out = order[np.clip(pos, 0, len(ids) - 1)]
    if not np.array_equal(ids[out], sub):
        raise KeyError("edges not contained in region")
    return out


def solve_split(problems: LocalProblems, rect: Rect, halves, trace_edges, trace_values):
    """Glue the two half-region solutions driven by normal-velocity data on the dividing line.

    ``trace_values`` has shape ``(len(trace_edges), k)``; returns the velocity on all
    edges of ``rect`` (shape ``(n_edges, k)``) and the divergence constants ``(k, 2)``.
    """
    grid = problems.grid
    tv = np.asarray(trace_values, dtype=float)
    if tv.ndim == 1:
        tv = tv[:, None]
    k = tv.shape[1]
    edges = grid.rect_edges(rect)
    out = np.zeros((len(edges), k))
    beta = np.zeros((k, 2))
    for p, half in enumerate(halves):
        s = problems.solver(half)
        g = np.zeros((s.n_edges, k))
        g[s.boundary_positions(trace_edges)] = tv
        net = np.asarray(s._B_B @ g[s.Bd]).sum(axis=0)
        b = net / (half.n_cells * grid.cell_area)
        beta[:, p] = b
        sol = s.solve(g, np.broadcast_to(b, (half.n_cells, k)))
        out[region_positions(edges, s.edges)] = sol
    return out, beta


@dataclass
class SnapshotSpace:
    edge_id: int
    region: str  # "standard" | "oversampled"
    rect: Rect
    halves: tuple[Rect, Rect]
    edges: np.ndarray = field(repr=False)  # global ids of all region edges (local order)
    trace_edges: np.ndarray = field(repr=False)  # E_i or E_i^+
    functions: np.ndarray = field(repr=False)  # (n_edges, L)
    divergences: np.ndarray = field(repr=False)  # (L, 2): constant per half

    @property
    def L(self) -> int:
        return self.functions.shape[1]

    coarse_per_half: tuple[int, int] = (1, 1)

    def coarse_divergence_map(self) -> np.ndarray:
        """Rows: coarse elements of the region; columns: snapshot functions."""
        rows = []
        for p, n in enumerate(self.coarse_per_half):
            rows.extend([self.divergences[:, p]] * n)
        return np.array(rows).reshape(-1, self.L)

    def dof_matrix(self, grid: GridHierarchy, coeffs: np.ndarray | None = None) -> sp.csc_matrix:
        """Functions (or combinations ``functions @ coeffs``) as columns over global velocity dofs."""
        vals = self.functions if coeffs is None else self.functions @ coeffs
        return local_to_dofs(grid, self.edges, vals)


def local_to_dofs(grid: GridHierarchy, edges: np.ndarray, vals: np.ndarray) -> sp.csc_matrix:
    vals = np.asarray(vals)
    if vals.ndim == 1:
        vals = vals[:, None]
    dof = grid.edge_dof[edges]
    inside = dof >= 0
    rows = dof[inside]
    block = vals[inside]
    n = block.shape[1]
    r = np.tile(rows, n)
    c = np.repeat(np.arange(n), len(rows))
    return sp.csc_matrix((block.T.ravel(), (r, c)), shape=(grid.n_dof, n))


def as_problems(grid: GridHierarchy, field_train) -> LocalProblems:
    if isinstance(field_train, LocalProblems):
        return field_train
    vals = getattr(field_train, "values", field_train)
    return LocalProblems(grid, vals)


def _coarse_count(grid: GridHierarchy, r: Rect) -> int:
    rx, ry = grid.refinement
    return -(-r.nx // rx) * -(-r.ny // ry)


def build_edge_snapshots(grid: GridHierarchy, field_train, edge_id: int) -> SnapshotSpace:
    problems = as_problems(grid, field_train)
    nb = neighborhood(grid, edge_id)
    funcs, beta = solve_split(problems, nb.rect, nb.halves, nb.edge_fine_edges, np.eye(nb.L))
    return SnapshotSpace(edge_id, "standard", nb.rect, nb.halves, nb.fine_edges,
                         nb.edge_fine_edges, funcs, beta, (1, 1))


def build_oversampled_snapshots(grid: GridHierarchy, field_train, edge_id: int,
                                layers: int = 1) -> SnapshotSpace:
    problems = as_problems(grid, field_train)
    if layers == 0:
        return build_edge_snapshots(grid, problems, edge_id)
    ov = oversample(grid, edge_id, layers)
    funcs, beta = solve_split(problems, ov.rect, ov.halves, ov.extended_edge, np.eye(ov.L))
    counts = tuple(_coarse_count(grid, h) for h in ov.halves)
    return SnapshotSpace(edge_id, "oversampled", ov.rect, ov.halves, ov.fine_edges,
                         ov.extended_edge, funcs, beta, counts)


def build_all_snapshots(grid: GridHierarchy, field_train, jobs: int = 1,
                        layers: int | None = None) -> list[SnapshotSpace]:
    """Snapshot spaces for every interior coarse edge (oversampled if ``layers`` is given)."""
    problems = as_problems(grid, field_train)
    if layers is None:
        work = lambda e: build_edge_snapshots(grid, problems, e)  # noqa: E731
    else:
        work = lambda e: build_oversampled_snapshots(grid, problems, e, layers)  # noqa: E731
    ids = range(grid.n_coarse_edges)
    if jobs > 1:
        # warm the shared cache serially so threads only read it
        for c in range(grid.n_coarse):
            problems.solver(grid.coarse_rect(c))
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(work, ids))
    return [work(e) for e in ids]


def divergence_free_subspace(space: SnapshotSpace, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (columns, in snapshot coefficients) of the divergence-free combinations."""
    return nullspace_basis(space.coarse_divergence_map(), rtol)


def nullspace_basis(D: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    D = np.atleast_2d(np.asarray(D, dtype=float))
    L = D.shape[1]
    if L == 0:
        return np.zeros((0, 0))
    _, s, vt = np.linalg.svd(D, full_matrices=True)
    rank = int(np.sum(s > rtol * s.max())) if s.size and s.max() > 0 else 0
    return vt[rank:].T.copy()
