"""Nested Cartesian coarse/fine grids, coarse neighborhoods and oversampled regions.

Conventions used throughout the package:

* fine cell ``(i, j)`` has id ``j * Nx + i`` (x runs fastest);
* x-edges (normal +x) come first, id ``j * (Nx + 1) + i`` for the edge at
  ``x = i * hx``; y-edges (normal +y) follow, id ``n_xedges + j * Nx + i``
  for the edge at ``y = j * hy``;
* velocity unknowns live on interior fine edges only, numbered in edge order.

Normals are fixed by axis and never flipped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    """Half-open block of fine cells ``[i0, i1) x [j0, j1)``."""

    i0: int
    i1: int
    j0: int
    j1: int

    @property
    def nx(self) -> int:
        return self.i1 - self.i0

    @property
    def ny(self) -> int:
        return self.j1 - self.j0

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def contains(self, other: "Rect") -> bool:
        return (self.i0 <= other.i0 and other.i1 <= self.i1
                and self.j0 <= other.j0 and other.j1 <= self.j1)


@dataclass(frozen=True)
class CoarseEdge:
    id: int
    axis: str  # "x": vertical edge with normal +x; "y": horizontal edge, normal +y
    position: int  # coarse line index (x = position * H_x or y = position * H_y)
    index: int  # coarse cell index along the edge
    cells: tuple[int, int]  # (lower/left, upper/right) coarse cells
    fine_edges: np.ndarray = field(repr=False)  # global fine-edge ids on E_i, ordered along the edge


@dataclass(frozen=True)
class Neighborhood:
    edge_id: int
    member_coarse_cells: tuple[int, int]
    rect: Rect
    halves: tuple[Rect, Rect]
    fine_cells: np.ndarray = field(repr=False)
    fine_edges: np.ndarray = field(repr=False)
    edge_fine_edges: np.ndarray = field(repr=False)

    @property
    def L(self) -> int:
        return len(self.edge_fine_edges)


@dataclass(frozen=True)
class OversampledNeighborhood:
    edge_id: int
    layers: int
    rect: Rect
    halves: tuple[Rect, Rect]
    fine_cells: np.ndarray = field(repr=False)
    fine_edges: np.ndarray = field(repr=False)
    extended_edge: np.ndarray = field(repr=False)
    coarse_cells: np.ndarray = field(repr=False)

    @property
    def L(self) -> int:
        return len(self.extended_edge)


class GridHierarchy:
    """Immutable two-level Cartesian grid on ``[0, Lx] x [0, Ly]``."""

    def __init__(self, extent, fine_counts, coarse_counts):
        Lx, Ly = (float(v) for v in extent)
        Nx, Ny = (int(v) for v in fine_counts)
        nx, ny = (int(v) for v in coarse_counts)
        if not (Lx > 0 and Ly > 0):
            raise GridError(f"domain extent must be positive, got {(Lx, Ly)}")
        if min(Nx, Ny, nx, ny) < 1:
            raise GridError("cell counts must be >= 1")
        if Nx % nx or Ny % ny:
            raise GridError(
                f"fine counts {(Nx, Ny)} not divisible by coarse counts {(nx, ny)}")

        self.domain_extent = (Lx, Ly)
        self.fine_cells = (Nx, Ny)
        self.coarse_cells = (nx, ny)
        self.refinement = (Nx // nx, Ny // ny)
        self.hx, self.hy = Lx / Nx, Ly / Ny
        self.Hx, self.Hy = Lx / nx, Ly / ny
        self.Nx, self.Ny, self.nx, self.ny = Nx, Ny, nx, ny

        self.n_cells = Nx * Ny
        self.n_xedges = (Nx + 1) * Ny
        self.n_edges = self.n_xedges + Nx * (Ny + 1)
        self.cell_area = self.hx * self.hy

        interior = np.ones(self.n_edges, dtype=bool)
        xi = np.arange(self.n_xedges) % (Nx + 1)
        interior[:self.n_xedges] = (xi > 0) & (xi < Nx)
        yj = np.arange(Nx * (Ny + 1)) // Nx
        interior[self.n_xedges:] = (yj > 0) & (yj < Ny)
        self.interior_edges = np.flatnonzero(interior)
        self.edge_dof = np.full(self.n_edges, -1, dtype=np.int64)
        self.edge_dof[self.interior_edges] = np.arange(len(self.interior_edges))
        self.n_dof = len(self.interior_edges)

        ci, cj = np.meshgrid(np.arange(Nx), np.arange(Ny))
        self.cell_coarse = ((cj // self.refinement[1]) * nx
                            + ci // self.refinement[0]).ravel()
        self.n_coarse = nx * ny

        self.coarse_edges = self._enumerate_coarse_edges()
        for arr in (self.interior_edges, self.edge_dof, self.cell_coarse):
            arr.setflags(write=False)

    def __repr__(self):
        return (f"GridHierarchy(extent={self.domain_extent}, fine={self.fine_cells}, "
                f"coarse={self.coarse_cells})")

    # ---- indexing helpers ----
    def xedge(self, i, j):
        return np.asarray(j) * (self.Nx + 1) + np.asarray(i)

    def yedge(self, i, j):
        return self.n_xedges + np.asarray(j) * self.Nx + np.asarray(i)

    def cell(self, i, j):
        return np.asarray(j) * self.Nx + np.asarray(i)

    def cell_centers(self):
        x = (np.arange(self.Nx) + 0.5) * self.hx
        y = (np.arange(self.Ny) + 0.5) * self.hy
        X, Y = np.meshgrid(x, y)
        return X.ravel(), Y.ravel()

    def edge_lengths(self):
        out = np.empty(self.n_edges)
        out[:self.n_xedges] = self.hy
        out[self.n_xedges:] = self.hx
        return out

    def coarse_rect(self, c: int) -> Rect:
        I, J = c % self.nx, c // self.nx
        rx, ry = self.refinement
        return Rect(I * rx, (I + 1) * rx, J * ry, (J + 1) * ry)

    @property
    def n_coarse_edges(self) -> int:
        return len(self.coarse_edges)

    def _enumerate_coarse_edges(self):
        nx, ny = self.nx, self.ny
        rx, ry = self.refinement
        edges = []
        for J in range(ny):
            for I in range(1, nx):
                fe = self.xedge(I * rx, np.arange(J * ry, (J + 1) * ry))
                edges.append(CoarseEdge(len(edges), "x", I, J,
                                        (J * nx + I - 1, J * nx + I), fe))
        for J in range(1, ny):
            for I in range(nx):
                fe = self.yedge(np.arange(I * rx, (I + 1) * rx), J * ry)
                edges.append(CoarseEdge(len(edges), "y", J, I,
                                        ((J - 1) * nx + I, J * nx + I), fe))
        for e in edges:
            e.fine_edges.setflags(write=False)
        return tuple(edges)

    def coarse_edge(self, edge_id: int) -> CoarseEdge:
        if not 0 <= edge_id < len(self.coarse_edges):
            raise GridError(f"coarse edge {edge_id} is not an interior coarse edge")
        return self.coarse_edges[edge_id]

    # ---- region helpers ----
    def rect_cells(self, r: Rect) -> np.ndarray:
        i, j = np.meshgrid(np.arange(r.i0, r.i1), np.arange(r.j0, r.j1))
        return self.cell(i, j).ravel()

    def rect_edges(self, r: Rect) -> np.ndarray:
        """Global edge ids of all edges of ``r``, in the region's local edge order."""
        i, j = np.meshgrid(np.arange(r.i0, r.i1 + 1), np.arange(r.j0, r.j1))
        xe = self.xedge(i, j).ravel()
        i, j = np.meshgrid(np.arange(r.i0, r.i1), np.arange(r.j0, r.j1 + 1))
        ye = self.yedge(i, j).ravel()
        return np.concatenate([xe, ye])


def build_hierarchy(extent, fine_counts, coarse_counts) -> GridHierarchy:
    return GridHierarchy(extent, fine_counts, coarse_counts)


def _split(grid: GridHierarchy, ce: CoarseEdge, r: Rect) -> tuple[Rect, Rect]:
    if ce.axis == "x":
        xline = ce.position * grid.refinement[0]
        return Rect(r.i0, xline, r.j0, r.j1), Rect(xline, r.i1, r.j0, r.j1)
    yline = ce.position * grid.refinement[1]
    return Rect(r.i0, r.i1, r.j0, yline), Rect(r.i0, r.i1, yline, r.j1)


def neighborhood(grid: GridHierarchy, coarse_edge_id: int) -> Neighborhood:
    ce = grid.coarse_edge(coarse_edge_id)
    r1, r2 = grid.coarse_rect(ce.cells[0]), grid.coarse_rect(ce.cells[1])
    rect = Rect(min(r1.i0, r2.i0), max(r1.i1, r2.i1), min(r1.j0, r2.j0), max(r1.j1, r2.j1))
    return Neighborhood(ce.id, ce.cells, rect, (r1, r2), grid.rect_cells(rect),
                        grid.rect_edges(rect), ce.fine_edges)


def oversample(grid: GridHierarchy, coarse_edge_id: int, layers: int = 1) -> OversampledNeighborhood:
    """Grow ``D_i`` by ``layers`` rings of coarse cells, clipped to the domain."""
    if layers < 0:
        raise GridError("layers must be >= 0")
    ce = grid.coarse_edge(coarse_edge_id)
    nb = neighborhood(grid, coarse_edge_id)
    rx, ry = grid.refinement
    r = nb.rect
    rect = Rect(max(r.i0 - layers * rx, 0), min(r.i1 + layers * rx, grid.Nx),
                max(r.j0 - layers * ry, 0), min(r.j1 + layers * ry, grid.Ny))
    halves = _split(grid, ce, rect)
    if ce.axis == "x":
        ext = grid.xedge(ce.position * rx, np.arange(rect.j0, rect.j1))
    else:
        ext = grid.yedge(np.arange(rect.i0, rect.i1), ce.position * ry)
    cells = grid.rect_cells(rect)
    coarse = np.unique(grid.cell_coarse[cells])
    return OversampledNeighborhood(ce.id, layers, rect, halves, cells,
                                   grid.rect_edges(rect), ext, coarse)


def edge_tilings(grid: GridHierarchy) -> list[list[int]]:
    """Four families of pairwise-disjoint neighborhoods covering every interior coarse edge once.

    Order: vertical edges with even left column, vertical odd, horizontal even,
    horizontal odd.  Each family tiles the domain exactly when the relevant
    coarse count is even (even families) or odd (odd families); otherwise the
    unpaired strip is left out and covered by the complementary family.
    """
    fams: list[list[int]] = [[], [], [], []]
    for ce in grid.coarse_edges:
        left = ce.position - 1
        if ce.axis == "x":
            fams[left % 2].append(ce.id)
        else:
            fams[2 + left % 2].append(ce.id)
    return [f for f in fams if f]
