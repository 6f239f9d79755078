"""Offline stage I: per-edge generalized eigenproblems on the snapshot spaces."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .grid import GridHierarchy
from .snapshot import LocalProblems, SnapshotSpace, as_problems, local_to_dofs, region_positions


@dataclass
class EdgeSpectralResult:
    edge_id: int
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray = field(repr=False)  # snapshot coefficients, s-orthonormal columns
    selected_count: int = 0
    space: SnapshotSpace | None = field(default=None, repr=False)
    A_snap: np.ndarray | None = field(default=None, repr=False)
    S_snap: np.ndarray | None = field(default=None, repr=False)

    def selected(self, count: int | None = None) -> np.ndarray:
        n = self.selected_count if count is None else count
        return self.eigenvectors[:, :n]


def edge_kinv(grid: GridHierarchy, kinv_cells: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """kappa^{-1} on fine edges from the harmonic mean of the two adjacent cells."""
    edges = np.asarray(edges)
    out = np.empty(len(edges))
    isx = edges < grid.n_xedges
    e = edges[isx]
    j, i = np.divmod(e, grid.Nx + 1)
    left, right = grid.cell(np.clip(i - 1, 0, grid.Nx - 1), j), grid.cell(np.clip(i, 0, grid.Nx - 1), j)
    out[isx] = 0.5 * (kinv_cells[left] + kinv_cells[right])
    e = edges[~isx] - grid.n_xedges
    j, i = np.divmod(e, grid.Nx)
    lo, hi = grid.cell(i, np.clip(j - 1, 0, grid.Ny - 1)), grid.cell(i, np.clip(j, 0, grid.Ny - 1))
    out[~isx] = 0.5 * (kinv_cells[lo] + kinv_cells[hi])
    return out


def spectral_forms(grid: GridHierarchy, problems: LocalProblems, space: SnapshotSpace, H: float):
    """Dense ``(A_snap, S_snap)`` on the snapshot span."""
    Phi = space.functions
    tpos = region_positions(space.edges, space.trace_edges)
    T = Phi[tpos]
    w = grid.edge_lengths()[space.trace_edges] * edge_kinv(grid, problems.kinv, space.trace_edges)
    A = T.T @ (w[:, None] * T)
    M, B = problems.forms(space.rect)
    BP = B @ Phi
    S = (Phi.T @ (M @ Phi) + BP.T @ BP / grid.cell_area) / H
    return 0.5 * (A + A.T), 0.5 * (S + S.T)


def edge_spectral_problem(space: SnapshotSpace, field_train, H: float | None = None,
                          grid: GridHierarchy | None = None, keep: int | None = None) -> EdgeSpectralResult:
    """Solve ``A_snap x = lambda S_snap x``; ``H`` defaults to the coarse edge length."""
    if isinstance(field_train, LocalProblems):
        grid = field_train.grid
    if grid is None:
        raise ValueError("grid is required unless a LocalProblems instance is passed")
    problems = as_problems(grid, field_train)
    if H is None:
        H = grid.Hy if grid.coarse_edge(space.edge_id).axis == "x" else grid.Hx
    A, S = spectral_forms(grid, problems, space, H)
    try:
        lam, vec = sla.eigh(A, S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"edge {space.edge_id}: s-form is not positive definite (degenerate snapshots)") from exc
    lam = np.clip(lam, 0.0, None)  # both forms are semidefinite; clip round-off
    n = space.L if keep is None else keep
    return EdgeSpectralResult(space.edge_id, lam, vec, n, space, A, S)


def _counts(results, l_rule) -> list[int]:
    if np.isscalar(l_rule):
        counts = [int(l_rule)] * len(results)
    elif isinstance(l_rule, dict):
        counts = [int(l_rule[r.edge_id]) for r in results]
    else:
        counts = [int(c) for c in l_rule]
        if len(counts) != len(results):
            raise ValueError("per-edge counts do not match the number of edges")
    for r, c in zip(results, counts):
        if c < 0 or c > r.space.L:
            raise ValueError(f"edge {r.edge_id}: requested {c} eigenfunctions, snapshot space has {r.space.L}")
    return counts


def threshold_counts(results, lam_max: float, at_least: int = 1) -> list[int]:
    """Adaptive per-edge counts: keep eigenvalues below ``lam_max``."""
    return [max(at_least, int(np.sum(r.eigenvalues < lam_max))) for r in results]


def build_offline_space(results, l_rule, grid: GridHierarchy | None = None, metadata=None):
    """Stage-I multiscale space from the selected eigenvectors of every edge."""
    from .mssolver import MultiscaleSpace

    if grid is None:
        raise ValueError("grid is required")
    counts = _counts(results, l_rule)
    cols, owners = [], []
    for r, c in zip(results, counts):
        if c == 0:
            continue
        cols.append(local_to_dofs(grid, r.space.edges, r.space.functions @ r.eigenvectors[:, :c]))
        owners.extend([r.edge_id] * c)
    A = counts[0] if counts and len(set(counts)) == 1 else None
    meta = dict(metadata or {})
    meta["edge_eigenvalues"] = [r.eigenvalues.tolist() for r in results]
    return MultiscaleSpace.from_columns(grid, cols, owners, np.ones(len(owners), dtype=np.int64),
                                        stage_counts=(A, 0), metadata=meta)


def eigenvalue_table(results) -> list[tuple[int, int, float]]:
    """Rows ``(edge_id, index, eigenvalue)`` for CSV export."""
    return [(r.edge_id, k, float(v)) for r in results for k, v in enumerate(r.eigenvalues, 1)]
