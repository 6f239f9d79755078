"""Error measures, Monte-Carlo sweeps and empirical checks of the error bounds."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .grid import GridHierarchy
from .mixedfem import FlowSolution, SaddleSystem, SourceField, assemble_saddle, solve_fine
from .mssolver import CoarsePressureSpace, MultiscaleSpace, solve_sample
from .randfield import KLBasis, sample_field

log = logging.getLogger(__name__)


def _vel(x):
    return x.velocity if isinstance(x, FlowSolution) else np.asarray(x, dtype=float)


def velocity_error(fine, ms, field_or_system, grid: GridHierarchy | None = None) -> float:
    """Squared kappa^{-1}-weighted relative error (no square root)."""
    if isinstance(field_or_system, SaddleSystem):
        A = field_or_system.A
    else:
        if grid is None:
            raise ValueError("grid is required when passing a coefficient field")
        A = assemble_saddle(grid, getattr(field_or_system, "values", field_or_system)).A
    vf, vm = _vel(fine), _vel(ms)
    den = float(vf @ (A @ vf))
    if den <= 0:
        raise ZeroDivisionError("reference velocity is zero")
    d = vf - vm
    return float(d @ (A @ d)) / den


def velocity_error_rooted(fine, ms, field_or_system, grid=None) -> float:
    return float(np.sqrt(velocity_error(fine, ms, field_or_system, grid)))


def l2_velocity_norm(grid: GridHierarchy, velocity, unit_mass=None) -> float:
    """Unweighted L2 norm of an RT0 velocity."""
    A = unit_mass if unit_mass is not None else assemble_saddle(grid, np.ones(grid.n_cells)).A
    v = _vel(velocity)
    return float(np.sqrt(v @ (A @ v)))


def source_l2(source: SourceField | np.ndarray, cell_area: float | None = None) -> float:
    if isinstance(source, SourceField):
        return float(np.sqrt(np.sum(source.values ** 2) * source.cell_area))
    return float(np.sqrt(np.sum(np.asarray(source) ** 2) * cell_area))


def saturation_error(fine_S, ms_S) -> float:
    a = np.asarray(getattr(fine_S, "values", fine_S), dtype=float)
    b = np.asarray(getattr(ms_S, "values", ms_S), dtype=float)
    den = float(np.sum(a ** 2))
    if den == 0:
        raise ZeroDivisionError("reference saturation is zero")
    return float(np.sum((a - b) ** 2)) / den


def stochastic_saturation_error(fine_samples, ms_samples) -> float:
    """Error between the sample means of two saturation ensembles."""
    fa = np.mean([np.asarray(getattr(s, "values", s)) for s in fine_samples], axis=0)
    ma = np.mean([np.asarray(getattr(s, "values", s)) for s in ms_samples], axis=0)
    return saturation_error(fa, ma)


@dataclass
class SweepReport:
    descriptor: str
    seeds: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    t_test: list = field(default_factory=list)
    t_fine: list = field(default_factory=list)
    fine_l2: list = field(default_factory=list)
    ms_l2: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    t_train: float | None = None

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.errors, dtype=float)

    @property
    def rooted(self) -> np.ndarray:
        return np.sqrt(self.values)

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def variance(self) -> float:
        return float(self.values.var())

    @property
    def n_failed(self) -> int:
        return len(self.failed)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "e_v", "e_v_rooted", "T_test"])
            for s, e, t in zip(self.seeds, self.errors, self.t_test):
                w.writerow([s, repr(float(e)), repr(float(np.sqrt(e))), repr(float(t))])
            w.writerow(["mean", repr(self.mean), repr(float(self.rooted.mean())), repr(float(np.mean(self.t_test)))])
            w.writerow(["variance", repr(self.variance), repr(float(self.rooted.var())), ""])
            w.writerow(["failed", self.n_failed, "", ""])


class SampleCache:
    """Fine reference solves keyed by (seed, source name), shared between sweeps."""

    def __init__(self):
        self._d = {}

    def get(self, key, make):
        v = self._d.get(key)
        if v is None:
            v = self._d[key] = make()
        return v


def _one_sample(grid, kl, mean_log, space, sources, seed, ps, unit_mass, cache, tag):
    fld = sample_field(kl, mean_log, seed)
    out = []
    for src in sources:
        system = assemble_saddle(grid, fld.values, src)
        t0 = time.perf_counter()
        key = (tag, seed, src.name)
        if cache is not None:
            ref = cache.get(key, lambda: solve_fine(system))
        else:
            ref = solve_fine(system)
        t_fine = time.perf_counter() - t0
        t0 = time.perf_counter()
        ms = solve_sample(space, system, src, ps)
        t_test = time.perf_counter() - t0
        out.append((velocity_error(ref, ms, system), t_test, t_fine,
                    l2_velocity_norm(grid, ref, unit_mass), l2_velocity_norm(grid, ms, unit_mass)))
    return out


def _sweep(kl, mean_log, space, sources, n_samples, seed0, jobs, cache, tag, descriptors):
    if n_samples < 1:
        raise ValueError("empty sweep")
    grid = space.grid
    ps = CoarsePressureSpace.from_grid(grid)
    unit_mass = assemble_saddle(grid, np.ones(grid.n_cells)).A
    reports = [SweepReport(d) for d in descriptors]
    seeds = [seed0 + s for s in range(n_samples)]

    def work(seed):
        try:
            return seed, _one_sample(grid, kl, mean_log, space, sources, seed, ps, unit_mass, cache, tag)
        except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("sample %d failed: %s", seed, exc)
            return seed, exc

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, seeds))
    else:
        results = [work(s) for s in seeds]
    for seed, res in results:
        for k, rep in enumerate(reports):
            if isinstance(res, Exception):
                rep.failed.append((seed, str(res)))
                continue
            e, tt, tf, nf, nm = res[k]
            rep.seeds.append(seed)
            rep.errors.append(e)
            rep.t_test.append(tt)
            rep.t_fine.append(tf)
            rep.fine_l2.append(nf)
            rep.ms_l2.append(nm)
    for rep in reports:
        rep.t_train = space.metadata.get("t_train")
    return reports


def monte_carlo_sweep(kl: KLBasis, mean_log, space: MultiscaleSpace, source_test: SourceField,
                      n_samples: int, seed0: int = 0, jobs: int = 1, cache: SampleCache | None = None,
                      tag: str = "") -> SweepReport:
    desc = f"{space.label} eta=({kl.spec.eta1:g},{kl.spec.eta2:g}) test={source_test.name}"
    return _sweep(kl, mean_log, space, [source_test], n_samples, seed0, jobs, cache, tag, [desc])[0]


def generalization_study(space: MultiscaleSpace, kl: KLBasis, mean_log, source_train: SourceField,
                         source_test: SourceField, n_samples: int, seed0: int = 0, jobs: int = 1,
                         cache: SampleCache | None = None, tag: str = ""):
    """``(same-source report, cross-source report)`` on identical samples."""
    base = f"{space.label} eta=({kl.spec.eta1:g},{kl.spec.eta2:g})"
    if source_test.name == source_train.name and np.array_equal(source_test.values, source_train.values):
        rep = monte_carlo_sweep(kl, mean_log, space, source_train, n_samples, seed0, jobs, cache, tag)
        return rep, rep
    return tuple(_sweep(kl, mean_log, space, [source_train, source_test], n_samples, seed0, jobs, cache, tag,
                        [f"{base} test={source_train.name}", f"{base} test={source_test.name}"]))


def bound_terms(kappa1, kappa2, f1, f2, cell_area: float | None = None):
    """``(t1, t2)``: coefficient-mismatch and source-mismatch terms of the error bound."""
    k1 = np.asarray(getattr(kappa1, "values", kappa1), dtype=float)
    k2 = np.asarray(getattr(kappa2, "values", kappa2), dtype=float)
    if isinstance(f1, SourceField):
        area = f1.cell_area
        a, b = f1.values, f2.values
    else:
        if cell_area is None:
            raise ValueError("cell_area is required for raw source arrays")
        area = cell_area
        a, b = np.asarray(f1, dtype=float), np.asarray(f2, dtype=float)
    t1 = float(np.max(np.abs(k2 ** -0.5 - k1 ** -0.5))) * source_l2(b, area)
    t2 = float(k1.min() ** -0.5) * source_l2(a - b, area)
    return t1, t2


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)


def fit_stability_constant(fine_l2, ms_l2, f_l2, n_fit: int = 10):
    """Fit ``C = max(|v|/|f|)`` on the first ``n_fit`` samples; return ``(C, worst ratio on the rest / C)``."""
    rf = np.asarray(fine_l2) / f_l2
    rm = np.asarray(ms_l2) / f_l2
    C = float(max(rf[:n_fit].max(), rm[:n_fit].max()))
    rest = np.concatenate([rf[n_fit:], rm[n_fit:]])
    return C, float(rest.max() / C) if rest.size else 0.0
