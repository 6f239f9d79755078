"""Log-Gaussian permeability fields via a truncated Karhunen-Loeve expansion.

The Gaussian covariance is separable, so the cell-centre (Nystrom) discretisation
on a tensor grid is the Kronecker product of two 1D matrices and its eigenpairs
are products of 1D eigenpairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridHierarchy
from .mixedfem import corner_cells

RNG_ALGORITHM = "numpy.random.PCG64"


@dataclass(frozen=True)
class CovarianceSpec:
    sigma2: float = 1.0
    eta1: float = 0.125
    eta2: float = 0.125

    def __post_init__(self):
        if min(self.sigma2, self.eta1, self.eta2) <= 0:
            raise ValueError("sigma2, eta1 and eta2 must be positive")


def evaluate_covariance(spec: CovarianceSpec, x, z):
    x, z = np.asarray(x, dtype=float), np.asarray(z, dtype=float)
    d = x - z
    return spec.sigma2 * np.exp(-d[..., 0] ** 2 / (2 * spec.eta1 ** 2)
                                - d[..., 1] ** 2 / (2 * spec.eta2 ** 2))


def _cov_1d(n, h, eta):
    c = (np.arange(n) + 0.5) * h
    return np.exp(-(c[:, None] - c[None, :]) ** 2 / (2 * eta ** 2))


@dataclass(frozen=True)
class KLBasis:
    eigenvalues: np.ndarray  # nonincreasing
    eigenfunctions: np.ndarray = field(repr=False)  # (n_cells, N_k), area-weighted orthonormal
    total_energy: float
    cell_area: float
    spec: CovarianceSpec

    @property
    def n_terms(self) -> int:
        return len(self.eigenvalues)

    @property
    def energy_fraction(self) -> float:
        return float(self.eigenvalues.sum() / self.total_energy)

    def variance(self) -> np.ndarray:
        """Pointwise variance of the truncated expansion."""
        return (self.eigenfunctions ** 2) @ self.eigenvalues


def _eig_1d(n, h, eta):
    C = _cov_1d(n, h, eta) * h
    lam, vec = np.linalg.eigh(C)
    return lam, vec


def kl_decompose(spec: CovarianceSpec, grid: GridHierarchy, n_terms: int | None = None,
                 energy: float | None = 0.95) -> KLBasis:
    """Truncate by fixed count ``n_terms`` or, if that is None, by ``energy`` fraction."""
    hx, hy = grid.hx, grid.hy
    lx, vx = _eig_1d(grid.Nx, hx, spec.eta1)
    ly, vy = _eig_1d(grid.Ny, hy, spec.eta2)
    lam = spec.sigma2 * np.outer(ly, lx).ravel()  # index (b, a) -> b * Nx + a
    lmax = lam.max()
    if lam.min() < -1e-12 * lmax:
        raise np.linalg.LinAlgError(
            f"covariance discretisation is not positive semidefinite (min eigenvalue {lam.min():g})")
    lam = np.clip(lam, 0.0, None)
    order = np.argsort(-lam, kind="stable")
    lam_sorted = lam[order]
    total = float(lam_sorted.sum())
    if n_terms is None:
        if energy is None or not 0 < energy <= 1:
            raise ValueError("energy fraction must lie in (0, 1]")
        cum = np.cumsum(lam_sorted) / total
        n_terms = int(np.searchsorted(cum, energy - 1e-14) + 1)
        n_terms = min(n_terms, lam.size)
    if not 0 <= n_terms <= lam.size:
        raise ValueError(f"n_terms must lie in [0, {lam.size}]")
    sel = order[:n_terms]
    b, a = np.divmod(sel, grid.Nx)
    # cell (i, j) -> vx[i, a] * vy[j, b]; cell id j * Nx + i
    funcs = (vy[:, b][:, None, :] * vx[:, a][None, :, :]).reshape(grid.n_cells, n_terms)
    funcs = funcs / np.sqrt(hx * hy)
    return KLBasis(lam_sorted[:n_terms].copy(), funcs, total, hx * hy, spec)


def dense_kl(spec: CovarianceSpec, grid: GridHierarchy):
    """Direct eigendecomposition of the assembled 2D covariance (small grids only)."""
    X, Y = grid.cell_centers()
    P = np.stack([X, Y], axis=-1)
    C = evaluate_covariance(spec, P[:, None, :], P[None, :, :]) * grid.cell_area
    lam, vec = np.linalg.eigh(C)
    order = np.argsort(-lam, kind="stable")
    return lam[order], vec[:, order] / np.sqrt(grid.cell_area)


@dataclass(frozen=True)
class PermeabilityField:
    values: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(~np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("permeability must be strictly positive and finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def contrast(self) -> float:
        return float(self.values.max() / self.values.min())


def sample_log_field(kl: KLBasis, mean_log, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    mu = rng.standard_normal(kl.n_terms)
    Y = np.array(mean_log, dtype=float, copy=True).ravel()
    if kl.n_terms:
        Y += kl.eigenfunctions @ (mu * np.sqrt(kl.eigenvalues))
    return Y


def sample_field(kl: KLBasis, mean_log, seed: int) -> PermeabilityField:
    Y = sample_log_field(kl, mean_log, seed)
    return PermeabilityField(np.exp(Y), {"seed": int(seed), "rng": RNG_ALGORITHM,
                                         "n_terms": kl.n_terms})


def load_field_raster(path, grid: GridHierarchy) -> PermeabilityField:
    """Whitespace-separated values, row-major starting from the low-y row."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read permeability raster {path}: {exc}") from exc
    vals = np.array(text.split(), dtype=float)
    if vals.size != grid.n_cells:
        raise ValueError(f"raster {path} has {vals.size} values, grid expects {grid.n_cells}")
    if np.any(vals <= 0):
        raise ValueError(f"raster {path} contains non-positive values")
    return PermeabilityField(vals, {"source": str(path)})


def save_field_raster(path, field_: PermeabilityField | np.ndarray, grid: GridHierarchy):
    vals = field_.values if isinstance(field_, PermeabilityField) else np.asarray(field_)
    rows = vals.reshape(grid.Ny, grid.Nx)
    with open(path, "w") as fh:
        for r in rows:
            fh.write(" ".join(repr(float(v)) for v in r) + "\n")


@dataclass(frozen=True)
class Channel:
    """Straight band of cells between two cell-coordinate points."""

    start: tuple[float, float]
    end: tuple[float, float]
    width: float = 1.0


def _segment_mask(grid: GridHierarchy, ch: Channel):
    ci, cj = np.meshgrid(np.arange(grid.Nx) + 0.5, np.arange(grid.Ny) + 0.5)
    p = np.stack([ci.ravel(), cj.ravel()], axis=1)
    a = np.asarray(ch.start, dtype=float) + 0.5
    b = np.asarray(ch.end, dtype=float) + 0.5
    ab = b - a
    den = ab @ ab
    t = np.zeros(len(p)) if den == 0 else np.clip((p - a) @ ab / den, 0.0, 1.0)
    d = p - (a + t[:, None] * ab)
    # Chebyshev distance keeps axis-aligned bands exactly `width` cells wide
    return np.max(np.abs(d), axis=1) <= ch.width / 2.0


def synth_channel_field(grid: GridHierarchy, background: float, channel_value: float,
                        channels=(), seed: int | None = None, n_inclusions: int = 0,
                        inclusion_size: float = 2.0) -> PermeabilityField:
    """Background field with high-value channels and optional random square inclusions.

    Overlapping features take the maximum value.
    """
    if background <= 0 or channel_value <= 0:
        raise ValueError("background and channel values must be positive")
    vals = np.full(grid.n_cells, float(background))
    for ch in channels:
        for pt in (ch.start, ch.end):
            if not (0 <= pt[0] < grid.Nx and 0 <= pt[1] < grid.Ny):
                raise ValueError(f"channel endpoint {pt} lies outside the {grid.Nx}x{grid.Ny} grid")
        m = _segment_mask(grid, ch)
        vals[m] = np.maximum(vals[m], channel_value)
    if n_inclusions:
        rng = np.random.Generator(np.random.PCG64(0 if seed is None else seed))
        for _ in range(n_inclusions):
            c = (rng.uniform(0, grid.Nx - 1), rng.uniform(0, grid.Ny - 1))
            m = _segment_mask(grid, Channel(c, c, inclusion_size))
            vals[m] = np.maximum(vals[m], channel_value)
    return PermeabilityField(vals, {"kind": "synthetic", "seed": seed})


def well_cells(grid: GridHierarchy) -> list[int]:
    """The four corner cells and the centre cell used by the standard point sources."""
    return list(corner_cells(grid).values())


def high_contrast_field(grid: GridHierarchy, seed: int = 4, contrast: float = 1e4,
                        well_zones: bool = True, n_channels: int = 40) -> PermeabilityField:
    """Bundled channelised test medium: background 1, thin channels and inclusions at ``contrast``.

    Channel end points, lengths and angles are drawn from ``seed`` in domain
    fractions, so the picture scales with the resolution.  With ``well_zones``
    the coarse blocks holding the corner cells and the four centre cells are
    set to the high value, i.e. wells are completed in permeable rock.
    """
    Nx, Ny = grid.Nx, grid.Ny
    rng = np.random.Generator(np.random.PCG64(seed))
    chans = []
    for _ in range(n_channels):
        u = rng.uniform(0, 1, 2)
        length = rng.uniform(20, 80) / 127
        a = rng.uniform(0, np.pi)
        x0, y0 = u[0] * (Nx - 1), u[1] * (Ny - 1)
        x1 = float(np.clip(x0 + length * np.cos(a) * (Nx - 1), 0, Nx - 1))
        y1 = float(np.clip(y0 + length * np.sin(a) * (Ny - 1), 0, Ny - 1))
        chans.append(Channel((x0, y0), (x1, y1), max(1.0, Nx / 128)))
    fld = synth_channel_field(grid, 1.0, contrast, chans, seed=seed,
                              n_inclusions=max(1, round(100 * Nx * Ny / 128 ** 2)),
                              inclusion_size=max(1.0, Nx / 64))
    if not well_zones:
        return fld
    vals = np.array(fld.values)
    centre = [grid.cell(i, j) for i in (Nx // 2 - 1, Nx // 2) for j in (Ny // 2 - 1, Ny // 2)]
    for c in list(well_cells(grid)) + centre:
        vals[grid.cell_coarse == grid.cell_coarse[c]] = contrast
    return PermeabilityField(vals, {"kind": "high_contrast", "seed": seed, "contrast": contrast})
