"""Lowest-order Raviart-Thomas / piecewise-constant discretisation of Darcy flow.

The velocity coefficient on an edge is the normal component ``v . n`` of the
field on that edge (not the edge flux), so ``B[c, e] = +-|e|``.  The saddle
system solved is

    A v - B^T p = 0
    B v         = F        (F_c = integral of f over cell c)

with zero normal velocity on the domain boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .grid import GridHierarchy, Rect


class CompatibilityError(ValueError):
    pass


class SingularSystemError(RuntimeError):
    pass


def _as_kinv(grid_or_n, field_eff):
    k = np.asarray(field_eff, dtype=float).ravel()
    if np.any(~np.isfinite(k)) or np.any(k <= 0):
        raise ValueError("coefficient must be strictly positive and finite")
    return 1.0 / k


def rect_forms(grid: GridHierarchy, rect: Rect, kinv: np.ndarray):
    """Mass and divergence matrices over all edges of a rectangle of fine cells.

    ``kinv`` holds one value per cell of ``rect`` in local row-major order.
    Edge numbering follows ``grid.rect_edges(rect)``.
    """
    nx, ny = rect.nx, rect.ny
    hx, hy = grid.hx, grid.hy
    nX = (nx + 1) * ny
    n_e = nX + nx * (ny + 1)
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    cells = j * nx + i
    left = j * (nx + 1) + i
    right = left + 1
    bottom = nX + j * nx + i
    top = bottom + nx
    w = np.asarray(kinv, dtype=float).ravel() * hx * hy
    d, o = w / 3.0, w / 6.0
    rows = np.concatenate([left, right, left, right, bottom, top, bottom, top])
    cols = np.concatenate([left, right, right, left, bottom, top, top, bottom])
    vals = np.concatenate([d, d, o, o, d, d, o, o])
    M = sp.csr_matrix((vals, (rows, cols)), shape=(n_e, n_e))
    n_c = nx * ny
    one = np.ones(n_c)
    B = sp.csr_matrix(
        (np.concatenate([-hy * one, hy * one, -hx * one, hx * one]),
         (np.tile(cells, 4), np.concatenate([left, right, bottom, top]))),
        shape=(n_c, n_e))
    return M, B


def full_rect(grid: GridHierarchy) -> Rect:
    return Rect(0, grid.Nx, 0, grid.Ny)


@dataclass(frozen=True)
class SourceField:
    values: np.ndarray
    cell_area: float
    name: str = "custom"

    @property
    def total_integral(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def integrals(self) -> np.ndarray:
        return self.values * self.cell_area


def _check_compatible(values, area):
    total = values.sum() * area
    if abs(total) > 1e-12 * (np.abs(values).sum() * area + 1):
        raise CompatibilityError(
            f"source integral {total:g} is not zero; the pure-Neumann problem has no solution")


def corner_cells(grid: GridHierarchy) -> dict[str, int]:
    """Corner cells zeta_1..zeta_4 and the centre cell zeta_5.

    For an even cell count the centre square straddles a cell boundary; the
    cell whose lower-left corner is the domain centre is used.
    """
    Nx, Ny = grid.Nx, grid.Ny
    return {"zeta1": int(grid.cell(0, 0)), "zeta2": int(grid.cell(Nx - 1, 0)),
            "zeta3": int(grid.cell(0, Ny - 1)), "zeta4": int(grid.cell(Nx - 1, Ny - 1)),
            "zeta5": int(grid.cell(Nx // 2, Ny // 2))}


def make_source(grid: GridHierarchy, kind="two_point") -> SourceField:
    """``two_point``, ``five_point`` or an iterable of ``(cell, value)`` pairs."""
    f = np.zeros(grid.n_cells)
    z = corner_cells(grid)
    if isinstance(kind, str):
        if kind == "two_point":
            f[z["zeta1"]] = 1.0
            f[z["zeta4"]] = -1.0
        elif kind == "five_point":
            for k in ("zeta1", "zeta2", "zeta3", "zeta4"):
                f[z[k]] = 1.0
            f[z["zeta5"]] = -4.0
        else:
            raise ValueError(f"unknown source kind {kind!r}")
        name = kind
    else:
        for c, v in kind:
            f[int(c)] += float(v)
        name = "custom"
    _check_compatible(f, grid.cell_area)
    f.setflags(write=False)
    return SourceField(f, grid.cell_area, name)


@dataclass(frozen=True)
class SaddleSystem:
    grid: GridHierarchy = field(repr=False)
    A: sp.csr_matrix = field(repr=False)
    B: sp.csr_matrix = field(repr=False)
    kinv: np.ndarray = field(repr=False)
    rhs: np.ndarray | None = field(default=None, repr=False)
    pressure_gauge: int = 0


def assemble_saddle(grid: GridHierarchy, field_eff, source: SourceField | None = None,
                    gauge: int = 0) -> SaddleSystem:
    kinv = _as_kinv(grid, field_eff)
    if kinv.size != grid.n_cells:
        raise ValueError(f"coefficient has {kinv.size} values, grid has {grid.n_cells} cells")
    M, B = rect_forms(grid, full_rect(grid), kinv)
    ie = grid.interior_edges
    A = M[ie][:, ie].tocsr()
    Bi = B[:, ie].tocsr()
    rhs = None if source is None else source.integrals()
    return SaddleSystem(grid, A, Bi, kinv, rhs, gauge)


@dataclass(frozen=True)
class FlowSolution:
    velocity: np.ndarray  # normal velocity per interior fine edge
    pressure: np.ndarray  # per fine cell, zero mean
    resolution: str = "fine"

    def full_velocity(self, grid: GridHierarchy) -> np.ndarray:
        """Normal velocity on every fine edge (boundary entries are zero)."""
        out = np.zeros(grid.n_edges)
        out[grid.interior_edges] = self.velocity
        return out


def _saddle_matrix(A, B, gauge):
    keep = np.ones(B.shape[0], dtype=bool)
    keep[gauge] = False
    Bk = B[keep]
    K = sp.bmat([[A, Bk.T], [Bk, None]], format="csc")
    return K, keep


class SaddleFactor:
    """Sparse LU of the gauged saddle matrix; reusable for several right-hand sides."""

    def __init__(self, A, B, gauge=0):
        self.n_v = A.shape[0]
        self.n_p = B.shape[0]
        self.gauge = gauge
        K, self.keep = _saddle_matrix(A, B, gauge)
        try:
            self.lu = spla.splu(K)
        except RuntimeError as exc:  # exactly singular
            raise SingularSystemError(str(exc)) from exc

    def solve(self, g_v, g_p):
        """Solve ``A v + B^T q = g_v``, ``B v = g_p`` (gauge row dropped); q[gauge] = 0."""
        g_v = np.asarray(g_v, dtype=float)
        rhs = np.concatenate([g_v, np.asarray(g_p, dtype=float)[self.keep]])
        x = self.lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("saddle solve produced non-finite values")
        q = np.zeros((self.n_p,) + g_v.shape[1:])
        q[self.keep] = x[self.n_v:]
        return x[:self.n_v], q


class SchurPCG:
    """Pressure Schur-complement PCG for the global saddle system.

    ``A`` is tridiagonal along grid lines (x-edges row by row, y-edges column by
    column), so ``A^-1`` is applied exactly with banded Cholesky solves.  The
    preconditioner ``B D^-1 B^T`` uses the row-sum lumped mass matrix ``D``;
    it is spectrally equivalent to ``B A^-1 B^T`` within a factor of three,
    independently of the coefficient.
    """

    def __init__(self, system: "SaddleSystem", rtol: float = 1e-12, maxiter: int = 500):
        g = system.grid
        A, B = system.A, system.B
        nxd = (g.Nx - 1) * g.Ny
        # y-dofs reordered column-major so that their block is tridiagonal too
        ny_rows, ny_cols = g.Ny - 1, g.Nx
        yperm = (np.arange(ny_rows * ny_cols).reshape(ny_rows, ny_cols).T.ravel() + nxd)
        self.perm = np.concatenate([np.arange(nxd), yperm])
        Ap = A[self.perm][:, self.perm].tocsr()
        n = A.shape[0]
        ab = np.zeros((2, n))
        ab[1] = Ap.diagonal()
        ab[0, 1:] = Ap.diagonal(1)
        self.cb = sla.cholesky_banded(ab)
        self.B, self.gauge = B, system.pressure_gauge
        self.keep = np.ones(B.shape[0], dtype=bool)
        self.keep[self.gauge] = False
        Bg = B[self.keep].tocsr()
        self.Bg = Bg
        self.dinv = 1.0 / np.asarray(A.sum(axis=1)).ravel()
        P = (Bg @ sp.diags(self.dinv) @ Bg.T).tocsc()
        self.P = spla.splu(P)
        self.rtol, self.maxiter = rtol, maxiter
        self.n = n

    def apply_Ainv(self, r):
        x = np.empty_like(r)
        x[self.perm] = sla.cho_solve_banded((self.cb, False), r[self.perm])
        return x

    def solve(self, F):
        """Return ``(v, q)`` with ``A v + B^T q = 0``, ``B v = F``, ``q[gauge] = 0``."""
        Bg = self.Bg
        m = Bg.shape[0]
        S = spla.LinearOperator((m, m), matvec=lambda x: Bg @ self.apply_Ainv(Bg.T @ x),
                                dtype=float)
        M = spla.LinearOperator((m, m), matvec=self.P.solve, dtype=float)
        b = -np.asarray(F)[self.keep]
        if not np.any(b):
            return np.zeros(self.n), np.zeros(self.B.shape[0])
        qg, info = spla.cg(S, b, rtol=self.rtol, atol=0.0, M=M, maxiter=self.maxiter)
        if info != 0:
            raise SingularSystemError(f"PCG did not converge (info={info})")
        q = np.zeros(self.B.shape[0])
        q[self.keep] = qg
        v = -self.apply_Ainv(Bg.T @ qg)
        # flux repair: remove the divergence residual left by the iteration
        v += self.dinv * (Bg.T @ self.P.solve(-b - Bg @ v))
        return v, q


def solve_fine(system: SaddleSystem, source: SourceField | None = None,
               factor=None, method: str = "auto") -> FlowSolution:
    """Reference solve.  ``method``: ``direct`` (sparse LU), ``pcg`` or ``auto``.

    ``auto`` uses sparse LU up to 4096 cells and Schur PCG beyond.
    """
    if source is not None:
        _check_compatible(source.values, source.cell_area)
        rhs = source.integrals()
    elif system.rhs is not None:
        rhs = system.rhs
    else:
        raise ValueError("no source given")
    if factor is None:
        if method == "auto":
            method = "direct" if system.grid.n_cells <= 4096 else "pcg"
        if method == "direct":
            factor = SaddleFactor(system.A, system.B, system.pressure_gauge)
        elif method == "pcg":
            factor = SchurPCG(system)
        else:
            raise ValueError(f"unknown method {method!r}")
    if isinstance(factor, SchurPCG):
        v, q = factor.solve(rhs)
    else:
        v, q = factor.solve(np.zeros(system.A.shape[0]), rhs)
    res = system.B @ v - rhs
    scale = np.abs(rhs).sum() + 1e-300
    if np.abs(res).max() > 1e-8 * scale:
        raise SingularSystemError("divergence constraint not satisfied; "
                                  "incompatible source or disconnected coefficient")
    p = -q
    p -= p.mean()
    return FlowSolution(v, p, "fine")


def cell_divergence(grid: GridHierarchy, solution: FlowSolution | np.ndarray) -> np.ndarray:
    v = solution.velocity if isinstance(solution, FlowSolution) else np.asarray(solution)
    vf = np.zeros(grid.n_edges)
    vf[grid.interior_edges] = v
    vx = vf[:grid.n_xedges].reshape(grid.Ny, grid.Nx + 1)
    vy = vf[grid.n_xedges:].reshape(grid.Ny + 1, grid.Nx)
    div = (vx[:, 1:] - vx[:, :-1]) / grid.hx + (vy[1:, :] - vy[:-1, :]) / grid.hy
    return div.ravel()


def energy(system: SaddleSystem, v: np.ndarray) -> float:
    """Weighted norm squared: integral of kappa^-1 |v|^2."""
    return float(v @ (system.A @ v))


class LocalSolver:
    """Mixed Neumann solver on a rectangle with prescribed normal velocity on its boundary.

    Unknowns are the velocities on edges interior to the rectangle; boundary
    edges carry the prescribed data.  Returns velocities on all local edges.
    """

    def __init__(self, grid: GridHierarchy, rect: Rect, kinv_cells: np.ndarray):
        self.grid, self.rect = grid, rect
        kin = np.asarray(kinv_cells, dtype=float)[grid.rect_cells(rect)]
        M, B = rect_forms(grid, rect, kin)
        self.M, self.B = M, B
        nx, ny = rect.nx, rect.ny
        nX = (nx + 1) * ny
        n_e = nX + nx * (ny + 1)
        lid = np.arange(n_e)
        xi = lid[:nX] % (nx + 1)
        yj = (lid[nX:] - nX) // nx
        interior = np.concatenate([(xi > 0) & (xi < nx), (yj > 0) & (yj < ny)])
        self.I = np.flatnonzero(interior)
        self.Bd = np.flatnonzero(~interior)
        self.n_edges = n_e
        self.edges = grid.rect_edges(rect)
        self.cells = grid.rect_cells(rect)
        self._A_IB = M[self.I][:, self.Bd]
        self._B_B = B[:, self.Bd]
        self.factor = SaddleFactor(M[self.I][:, self.I].tocsr(), B[:, self.I].tocsr(), 0)

    def boundary_positions(self, global_edges) -> np.ndarray:
        """Local edge positions of given global edges (must be on the rectangle boundary)."""
        order = np.argsort(self.edges)
        ge = np.asarray(global_edges)
        pos = order[np.searchsorted(self.edges, ge, sorter=order)]
        if not np.array_equal(self.edges[pos], ge):
            raise KeyError("edge not on this rectangle")
        return pos

    def solve(self, boundary_values: np.ndarray, cell_div: np.ndarray) -> np.ndarray:
        """``boundary_values``: normal velocity on every local edge (interior entries ignored),
        shape ``(n_edges,)`` or ``(n_edges, k)``; ``cell_div``: divergence per cell, same trailing shape."""
        g = np.asarray(boundary_values, dtype=float)
        single = g.ndim == 1
        if single:
            g = g[:, None]
            cell_div = np.asarray(cell_div, dtype=float)[:, None]
        gB = g[self.Bd]
        F = np.asarray(cell_div) * self.grid.cell_area
        rhs_v = -(self._A_IB @ gB)
        rhs_p = F - self._B_B @ gB
        out = np.zeros_like(g)
        out[self.Bd] = gB
        v, _ = self.factor.solve(np.asarray(rhs_v), np.asarray(rhs_p))
        out[self.I] = v
        return out[:, 0] if single else out
