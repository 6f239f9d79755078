"""Incompressible two-phase flow with an IMPES loop and upwind saturation transport.

Pressure/velocity come from the fine mixed solver or from a frozen multiscale
space; the saturation is advanced by explicit first-order upwinding with
automatic sub-stepping under the CFL limit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridHierarchy
from .mixedfem import LocalSolver, SourceField, assemble_saddle, cell_divergence, solve_fine
from .mssolver import CoarsePressureSpace, MultiscaleSpace, solve_sample


class CFLError(RuntimeError):
    pass


@dataclass(frozen=True)
class TwoPhaseConfig:
    mu_w: float = 1.0
    mu_o: float = 5.0
    t_end: float = 1.0
    dt: float = 0.01  # pressure step; transport sub-steps are chosen automatically
    cfl: float = 0.9
    solver: str = "fine"  # fine | multiscale
    re_enrich_times: tuple = ()

    def __post_init__(self):
        if self.mu_w <= 0 or self.mu_o <= 0:
            raise ValueError("viscosities must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_end < 0:
            raise ValueError("t_end must be >= 0")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl must lie in (0, 1]")
        if self.solver not in ("fine", "multiscale"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass(frozen=True)
class SaturationField:
    values: np.ndarray = field(repr=False)
    time: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size and (v.min() < -1e-12 or v.max() > 1 + 1e-12):
            raise ValueError(f"saturation out of [0, 1]: [{v.min():g}, {v.max():g}]")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class WellSpec:
    injectors: np.ndarray
    producers: np.ndarray
    rates: np.ndarray = field(repr=False)  # volumetric rate per cell (f * |cell|)

    @classmethod
    def from_source(cls, source: SourceField) -> "WellSpec":
        q = source.integrals()
        if abs(q.sum()) > 1e-12 * np.abs(q).sum():
            raise ValueError("well rates do not balance")
        return cls(np.flatnonzero(q > 0), np.flatnonzero(q < 0), q)


def mobility(S, config: TwoPhaseConfig = TwoPhaseConfig()):
    S = np.asarray(S, dtype=float)
    lw = S ** 2 / config.mu_w
    lt = lw + (1 - S) ** 2 / config.mu_o
    return lt, lw / lt


def max_dfrac(config: TwoPhaseConfig, n: int = 2001) -> float:
    """max_S dF/dS, evaluated on a fine sample of [0, 1]."""
    s = np.linspace(0, 1, n)
    _, F = mobility(s, config)
    return float(np.max(np.abs(np.diff(F)) / np.diff(s)) * 1.01)


class Transport:
    """Precomputed edge-to-cell connectivity for upwind updates."""

    def __init__(self, grid: GridHierarchy):
        self.grid = grid
        e = grid.interior_edges
        isx = e < grid.n_xedges
        lo = np.empty(len(e), dtype=np.int64)
        hi = np.empty(len(e), dtype=np.int64)
        j, i = np.divmod(e[isx], grid.Nx + 1)
        lo[isx], hi[isx] = grid.cell(i - 1, j), grid.cell(i, j)
        j, i = np.divmod(e[~isx] - grid.n_xedges, grid.Nx)
        lo[~isx], hi[~isx] = grid.cell(i, j - 1), grid.cell(i, j)
        self.lo, self.hi = lo, hi
        self.lengths = grid.edge_lengths()[e]

    def fluxes(self, velocity):
        return np.asarray(velocity) * self.lengths

    def outflux(self, flux, rates):
        n = self.grid.n_cells
        out = (np.bincount(self.lo, np.maximum(flux, 0), n)
               + np.bincount(self.hi, np.maximum(-flux, 0), n))
        return out + np.maximum(-rates, 0)

    def stable_dt(self, flux, rates, config: TwoPhaseConfig) -> float:
        rate = self.outflux(flux, rates).max() * max_dfrac(config) / self.grid.cell_area
        return np.inf if rate == 0 else config.cfl / rate

    def step(self, S, flux, rates, dt, config: TwoPhaseConfig, check=True):
        g = self.grid
        if check:
            c = self.outflux(flux, rates) * max_dfrac(config) * dt / g.cell_area
            k = int(np.argmax(c))
            if c[k] > 1 + 1e-12:
                raise CFLError(f"CFL violated in cell {k} (i={k % g.Nx}, j={k // g.Nx}): "
                               f"dt*F'*outflux/|cell| = {c[k]:.3g}")
        _, F = mobility(S, config)
        up = np.where(flux > 0, F[self.lo], F[self.hi])
        w = up * flux
        net = np.bincount(self.lo, w, g.n_cells) - np.bincount(self.hi, w, g.n_cells)
        src = np.maximum(rates, 0) + F * np.minimum(rates, 0)
        return S + dt / g.cell_area * (src - net)


def transport_step(grid: GridHierarchy, S, velocity, r, dt, config: TwoPhaseConfig = TwoPhaseConfig()):
    """One explicit upwind step.  ``r``: per-cell rate density (injected water has S = 1)."""
    rates = np.asarray(r, dtype=float) * grid.cell_area
    return Transport(grid).step(np.asarray(S, dtype=float), Transport(grid).fluxes(velocity),
                                rates, dt, config)


def water_cut(S, wells: WellSpec, config: TwoPhaseConfig = TwoPhaseConfig()) -> float:
    if len(wells.producers) == 0:
        raise ValueError("no producer cells")
    q = np.abs(wells.rates[wells.producers])
    qt = q.sum()
    if qt == 0:
        raise ValueError("zero total production rate")
    _, F = mobility(np.asarray(S)[wells.producers], config)
    return float(np.sum(F * q) / qt)


def conservative_correction(grid: GridHierarchy, velocity, source: SourceField, kinv, tol=1e-12):
    """Add local zero-flux corrections so the fine-cell divergence equals ``f`` exactly.

    Only needed for velocities that are conservative on coarse cells (multiscale
    solutions); each coarse cell with a nonzero defect gets one local solve.
    """
    v = np.array(velocity, dtype=float)
    defect = source.values - cell_divergence(grid, v)
    scale = np.abs(source.values).max() + 1e-300
    cells = np.unique(grid.cell_coarse[np.abs(defect) > tol * scale])
    for c in cells:
        r = grid.coarse_rect(c)
        loc = LocalSolver(grid, r, kinv)
        d = defect[loc.cells]
        d = d - d.mean()
        w = loc.solve(np.zeros(loc.n_edges), d)
        dof = grid.edge_dof[loc.edges]
        m = dof >= 0
        v[dof[m]] += w[m]
    return v


@dataclass
class TwoPhaseResult:
    times: np.ndarray
    saturations: list  # SaturationField per recorded time (t = 0 first)
    water_cut: np.ndarray
    injected_water: float
    produced_water: float
    substeps: int = 0
    pressure_solves: int = 0

    def mass_balance_error(self, grid: GridHierarchy) -> float:
        dm = (self.saturations[-1].values.sum() - self.saturations[0].values.sum()) * grid.cell_area
        ref = self.injected_water - self.produced_water
        return abs(dm - ref) / max(abs(ref), 1e-300)


def impes_run(grid: GridHierarchy, field_sample, wells: WellSpec | SourceField, space: MultiscaleSpace | None = None,
              config: TwoPhaseConfig = TwoPhaseConfig(), S0=None, enrich_fn=None) -> TwoPhaseResult:
    """IMPES: pressure with ``S^n``, then transport to ``t + dt`` by CFL-limited sub-steps.

    ``enrich_fn(kappa_eff, space) -> MultiscaleSpace`` is called at each
    ``re_enrich_times`` entry when the multiscale solver is used; it normally
    returns ``space`` extended by residual-driven bases for ``kappa_eff``.
    """
    source = wells if isinstance(wells, SourceField) else None
    if source is None:
        raise TypeError("pass the SourceField that defines the wells")
    wspec = WellSpec.from_source(source)
    kappa = np.asarray(getattr(field_sample, "values", field_sample), dtype=float)
    if config.solver == "multiscale" and space is None:
        raise ValueError("multiscale solver requires a trained space")
    tr = Transport(grid)
    ps = CoarsePressureSpace.from_grid(grid) if space is not None else None
    S = np.zeros(grid.n_cells) if S0 is None else np.array(S0, dtype=float)
    t = 0.0
    times, sats, wc = [0.0], [SaturationField(S.copy(), 0.0)], [water_cut(S, wspec, config)]
    inj = prod = 0.0
    nsub = npres = 0
    pending = sorted(config.re_enrich_times)
    while t < config.t_end - 1e-12 * max(config.t_end, 1):
        lt, _ = mobility(S, config)
        keff = lt * kappa
        if config.solver == "multiscale" and pending and t >= pending[0] - 1e-12:
            while pending and t >= pending[0] - 1e-12:
                pending.pop(0)
            if enrich_fn is not None:
                space = enrich_fn(keff, space)
        system = assemble_saddle(grid, keff, source)
        if config.solver == "fine":
            v = solve_fine(system).velocity
        else:
            v = solve_sample(space, system, source, ps).velocity
            v = conservative_correction(grid, v, source, system.kinv)
        npres += 1
        flux = tr.fluxes(v)
        T = min(config.dt, config.t_end - t)
        dt_max = tr.stable_dt(flux, wspec.rates, config)
        n = max(1, int(np.ceil(T / dt_max)))
        h = T / n
        for _ in range(n):
            _, F = mobility(S, config)
            inj += h * np.maximum(wspec.rates, 0).sum()
            prod += h * np.sum(F * np.maximum(-wspec.rates, 0))
            S = tr.step(S, flux, wspec.rates, h, config, check=False)
        nsub += n
        t += T
        times.append(t)
        sats.append(SaturationField(S.copy(), t))
        wc.append(water_cut(S, wspec, config))
    return TwoPhaseResult(np.array(times), sats, np.array(wc), inj, prod, nsub, npres)
