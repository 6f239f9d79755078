"""Offline stage II: residual-driven enrichment of a stage-I multiscale space.

Each iteration solves the coarse training problem, measures the residual on
the divergence-free part of every oversampled snapshot space, and adds one
basis per region of a non-overlapping family of edge neighborhoods.  The basis
for edge ``E_i`` is the local solution on ``D_i`` driven by the (normalized)
normal trace of the Riesz representer on ``E_i``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .grid import GridHierarchy, Rect, edge_tilings, neighborhood
from .mixedfem import SaddleSystem, SourceField, assemble_saddle
from .mssolver import CoarsePressureSpace, MultiscaleSpace, solve_sample
from .snapshot import (LocalProblems, as_problems, build_oversampled_snapshots,
                       divergence_free_subspace, local_to_dofs, region_positions, solve_split)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnrichmentConfig:
    """``tau`` is relative: stop once the global residual norm drops below ``tau``
    times the energy norm of the current multiscale velocity."""

    tau: float = 1e-3
    max_iters: int = 4
    layers: int = 1
    partition_strategy: str = "alternating"  # alternating | all_edges

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.partition_strategy not in ("alternating", "all_edges"):
            raise ValueError(f"unknown partition strategy {self.partition_strategy!r}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")


def iterations_for(grid: GridHierarchy, B: int, strategy: str = "alternating") -> int:
    """Iterations needed to give every interior edge ``B`` residual-driven bases."""
    return B * (len(edge_tilings(grid)) if strategy == "alternating" else 1)


@dataclass
class ResidualReport:
    iteration: int
    region_norms: np.ndarray = field(repr=False)  # every interior edge's oversampled region
    global_norm: float = 0.0  # root-sum-square over all regions
    partition: list = field(default_factory=list, repr=False)  # edges enriched this iteration
    partition_norm: float = 0.0  # root-sum-square over the partition regions
    added: int = 0
    train_error: float | None = None
    overlapping: bool = False
    relative_norm: float = 0.0  # global_norm / energy norm of the multiscale velocity


@dataclass
class DivFreeSpace:
    """Divergence-free oversampled snapshot combinations for one coarse edge."""

    edge_id: int
    rect: Rect
    edges: np.ndarray = field(repr=False)  # global edge ids of the region
    trace_edges: np.ndarray = field(repr=False)  # E_i^+
    Psi: np.ndarray = field(repr=False)  # (n_edges, d) velocity values
    M: object = field(repr=False)  # kappa^{-1} mass over the region
    gram: tuple | None = field(default=None, repr=False)  # Cholesky factor of Psi^T M Psi

    @property
    def dim(self) -> int:
        return self.Psi.shape[1]


def divfree_space(grid: GridHierarchy, field_train, edge_id: int, layers: int = 1) -> DivFreeSpace:
    problems = as_problems(grid, field_train)
    snap = build_oversampled_snapshots(grid, problems, edge_id, layers)
    N = divergence_free_subspace(snap)
    Psi = snap.functions @ N if N.size else np.zeros((len(snap.edges), 0))
    M, _ = problems.forms(snap.rect)
    gram = None
    if Psi.shape[1]:
        G = Psi.T @ (M @ Psi)
        gram = sla.cho_factor(0.5 * (G + G.T))
    return DivFreeSpace(edge_id, snap.rect, snap.edges, snap.trace_edges, Psi, M, gram)


def residual_riesz(space_df: DivFreeSpace, ms_velocity_full: np.ndarray):
    """Representer (values on region edges) and dual norm of ``u -> int kappa^{-1} v_ms . u``.

    ``ms_velocity_full`` is the multiscale velocity on every fine edge.
    """
    if space_df.dim == 0:
        return np.zeros(len(space_df.edges)), 0.0
    v = np.asarray(ms_velocity_full)[space_df.edges]
    r = space_df.Psi.T @ (space_df.M @ v)
    c = sla.cho_solve(space_df.gram, r)
    norm2 = max(float(c @ r), 0.0)
    return space_df.Psi @ c, float(np.sqrt(norm2))


def residual_driven_basis(grid: GridHierarchy, field_train, edge_id: int, representer: np.ndarray,
                          space_df: DivFreeSpace | None = None, rel_tol: float = 1e-14):
    """Local basis on ``D_i`` driven by the normalized trace of ``representer`` on ``E_i``.

    ``representer`` holds values on the edges of the oversampled region (``space_df``)
    or, if ``space_df`` is None, on every fine edge.  Returns ``(edges, values, z)`` or
    None when the trace vanishes.
    """
    problems = as_problems(grid, field_train)
    nb = neighborhood(grid, edge_id)
    rep = np.asarray(representer)
    if space_df is not None:
        trace = rep[region_positions(space_df.edges, nb.edge_fine_edges)]
    else:
        trace = rep[nb.edge_fine_edges]
    lengths = grid.edge_lengths()[nb.edge_fine_edges]
    nrm = np.sqrt(np.sum(trace ** 2 * lengths))
    scale = np.abs(rep).max() if rep.size else 0.0
    if nrm == 0 or nrm <= rel_tol * scale * np.sqrt(lengths.sum()):
        return None
    z = trace / nrm
    vals, _ = solve_split(problems, nb.rect, nb.halves, nb.edge_fine_edges, z[:, None])
    return nb.fine_edges, vals[:, 0], z


def _partitions(grid: GridHierarchy, strategy: str):
    if strategy == "all_edges":
        return [list(range(grid.n_coarse_edges))]
    return edge_tilings(grid)


def enrich(grid: GridHierarchy, field_train, source_train: SourceField, stage1_space: MultiscaleSpace,
           config: EnrichmentConfig = EnrichmentConfig(), jobs: int = 1,
           system: SaddleSystem | None = None, reference=None, dfs: list | None = None):
    """Run the enrichment loop; returns ``(space, reports)``.

    ``reference`` (fine velocity on interior edges for the training problem) is
    optional and only used to record the training error per iteration.
    """
    if stage1_space.n_basis == 0:
        raise ValueError("stage-I space is empty")
    problems = as_problems(grid, field_train)
    if system is None:
        system = assemble_saddle(grid, 1.0 / problems.kinv, source_train)
    ps = CoarsePressureSpace.from_grid(grid)
    if dfs is None:
        dfs = build_divfree_spaces(grid, problems, config.layers, jobs)
    parts = _partitions(grid, config.partition_strategy)
    space = stage1_space
    reports: list[ResidualReport] = []
    ref_energy = None if reference is None else float(reference @ (system.A @ reference))

    def measure():
        sol = solve_sample(space, system, source_train, ps)
        vfull = sol.full_velocity(grid)
        results = [residual_riesz(d, vfull) for d in dfs]
        norms = np.array([r[1] for r in results])
        err = None
        if reference is not None:
            d = reference - sol.velocity
            err = float(d @ (system.A @ d)) / ref_energy
        vnorm = float(np.sqrt(sol.velocity @ (system.A @ sol.velocity)))
        return results, norms, err, vnorm

    k = 0
    while True:
        results, norms, err, vnorm = measure()
        part = parts[k % len(parts)] if k < config.max_iters else []
        gnorm = float(np.sqrt(np.sum(norms ** 2)))
        rep = ResidualReport(k, norms, gnorm, list(part),
                             float(np.sqrt(np.sum(norms[part] ** 2))) if part else 0.0, 0, err,
                             config.partition_strategy == "all_edges",
                             gnorm / vnorm if vnorm > 0 else 0.0)
        reports.append(rep)
        if rep.relative_norm <= config.tau or k >= config.max_iters:
            break
        cols, owners = [], []
        for e in part:
            out = residual_driven_basis(grid, problems, e, results[e][0], dfs[e])
            if out is None:
                log.info("edge %d: residual trace vanishes, skipped", e)
                continue
            edges, vals, _ = out
            cols.append(local_to_dofs(grid, edges, vals))
            owners.append(e)
        rep.added = len(cols)
        if cols:
            a = stage1_space.stage_counts[0]
            space = space.extend(sp.hstack(cols).tocsc(), owners, 2, stage_counts=(a, 0))
        k += 1
    counts = space.edge_counts(stage=2)
    a = stage1_space.stage_counts[0]
    space.stage_counts = (a, int(counts.min()) if counts.size else 0)
    space.metadata = dict(space.metadata, enrichment_iterations=k,
                          partition_strategy=config.partition_strategy, tau=config.tau,
                          layers=config.layers)
    return space, reports


def build_divfree_spaces(grid: GridHierarchy, field_train, layers: int = 1, jobs: int = 1):
    problems = as_problems(grid, field_train)
    ids = range(grid.n_coarse_edges)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(lambda e: divfree_space(grid, problems, e, layers), ids))
    return [divfree_space(grid, problems, e, layers) for e in ids]


def report_rows(reports) -> list[tuple]:
    """``(iteration, global_norm, relative_norm, min_region, max_region, added, train_error)`` rows."""
    return [(r.iteration, r.global_norm, r.relative_norm, float(r.region_norms.min()),
             float(r.region_norms.max()), r.added, r.train_error) for r in reports]
