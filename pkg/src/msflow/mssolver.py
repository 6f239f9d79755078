"""Reduced coarse saddle-point solves in a frozen multiscale velocity space."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .grid import GridHierarchy
from .mixedfem import FlowSolution, SaddleSystem, SingularSystemError, SourceField

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
ARCHIVE_MAGIC = b"MSFLOWAR"
ARCHIVE_VERSION = 1


def _edge_block_orthonormalize(old: np.ndarray | None, new: np.ndarray, tol: float):
    """Orthonormalize ``new`` against orthonormal ``old`` and itself; drop dependent columns."""
    scale = np.linalg.norm(new, axis=0)
    Y = new.copy()
    if old is not None and old.shape[1]:
        for _ in range(2):  # two passes of block Gram-Schmidt
            Y -= old @ (old.T @ Y)
    if Y.shape[1] == 0:
        return Y, 0
    Q, R, piv = sla.qr(Y, mode="economic", pivoting=True)
    ref = np.maximum(scale[piv], 1e-300)
    d = np.abs(np.diag(R))
    keep = d > tol * ref
    # pivoted R has nonincreasing diagonal; stop at the first dependent column
    r = int(np.argmin(keep)) if not keep.all() else len(keep)
    return Q[:, :r], Y.shape[1] - r


@dataclass
class MultiscaleSpace:
    grid: GridHierarchy = field(repr=False)
    U: sp.csc_matrix = field(repr=False)  # (n_dof, n_basis)
    owners: np.ndarray = field(repr=False)  # coarse edge per column
    stages: np.ndarray = field(repr=False)  # 1: spectral, 2: residual-driven
    stage_counts: tuple = (None, 0)
    metadata: dict = field(default_factory=dict, repr=False)
    dropped: int = 0

    @property
    def n_basis(self) -> int:
        return self.U.shape[1]

    @property
    def label(self) -> str:
        a, b = self.stage_counts
        return f"{a}+{b}"

    def edge_counts(self, stage: int | None = None) -> np.ndarray:
        m = np.ones(self.n_basis, dtype=bool) if stage is None else self.stages == stage
        return np.bincount(self.owners[m], minlength=self.grid.n_coarse_edges)

    @property
    def U_csr(self) -> sp.csr_matrix:
        if getattr(self, "_U_csr", None) is None:
            self._U_csr = self.U.tocsr()
        return self._U_csr

    @classmethod
    def empty(cls, grid: GridHierarchy, **kw) -> "MultiscaleSpace":
        return cls(grid, sp.csc_matrix((grid.n_dof, 0)), np.zeros(0, dtype=np.int64),
                   np.zeros(0, dtype=np.int64), **kw)

    @classmethod
    def from_columns(cls, grid, cols, owners, stages, stage_counts=(None, 0), metadata=None,
                     tol: float = RANK_TOL) -> "MultiscaleSpace":
        space = cls.empty(grid, stage_counts=stage_counts, metadata=dict(metadata or {}))
        if not cols:
            return space
        return space.extend(sp.hstack(cols).tocsc(), owners, stages, tol=tol,
                            stage_counts=stage_counts)

    def extend(self, new_cols, owners, stages, tol: float = RANK_TOL,
               stage_counts=None) -> "MultiscaleSpace":
        """New space with extra columns; existing columns are kept unchanged.

        Columns are orthonormalized per owning edge (pivoted QR, relative drop
        tolerance ``tol``); dependent columns are dropped and logged.
        """
        new_cols = sp.csc_matrix(new_cols)
        owners = np.asarray(owners, dtype=np.int64)
        stages = np.broadcast_to(np.asarray(stages, dtype=np.int64), owners.shape)
        if new_cols.shape[0] != self.grid.n_dof or new_cols.shape[1] != len(owners):
            raise ValueError("column block does not match the grid or owner list")
        blocks, own, stg = [self.U], [self.owners], [self.stages]
        dropped = 0
        U = self.U
        for e in np.unique(owners):
            sel = np.flatnonzero(owners == e)
            old_sel = np.flatnonzero(self.owners == e)
            Y = new_cols[:, sel]
            X = U[:, old_sel]
            rows = np.union1d(Y.indices, X.indices)
            Yd = Y[rows].toarray()
            Xd = X[rows].toarray() if len(old_sel) else None
            Q, nd = _edge_block_orthonormalize(Xd, Yd, tol)
            if nd:
                log.info("edge %d: dropped %d dependent basis column(s)", e, nd)
            dropped += nd
            if Q.shape[1]:
                Q[np.abs(Q) < 1e-300] = 0.0
                blocks.append(sp.csc_matrix((Q.T.ravel(), (np.tile(rows, Q.shape[1]),
                                                           np.repeat(np.arange(Q.shape[1]), len(rows)))),
                                            shape=(self.grid.n_dof, Q.shape[1])))
                own.append(np.full(Q.shape[1], e, dtype=np.int64))
                # stage of the strongest contributor is not meaningful after mixing;
                # label by the stage of the incoming block
                stg.append(np.full(Q.shape[1], stages[sel].max(), dtype=np.int64))
        Unew = sp.hstack(blocks).tocsc() if len(blocks) > 1 else U.copy()
        Unew.eliminate_zeros()
        out = MultiscaleSpace(self.grid, Unew, np.concatenate(own), np.concatenate(stg),
                              stage_counts if stage_counts is not None else self.stage_counts,
                              dict(self.metadata), self.dropped + dropped)
        return out


@dataclass(frozen=True)
class CoarsePressureSpace:
    Mc: sp.csr_matrix = field(repr=False)  # fine cell x coarse cell indicator

    @classmethod
    def from_grid(cls, grid: GridHierarchy) -> "CoarsePressureSpace":
        n = grid.n_cells
        Mc = sp.csr_matrix((np.ones(n), (np.arange(n), grid.cell_coarse)), shape=(n, grid.n_coarse))
        return cls(Mc)

    @property
    def n_coarse(self) -> int:
        return self.Mc.shape[1]


@dataclass
class ReducedSystem:
    A: np.ndarray  # U^T A_f U
    B: np.ndarray  # M_c^T B_f U
    F: np.ndarray  # M_c^T F_f
    gauge: int = 0

    @property
    def n_velocity(self) -> int:
        return self.A.shape[0]

    @property
    def n_pressure(self) -> int:
        return self.B.shape[0]

    @property
    def n_unknowns(self) -> int:
        return self.n_velocity + self.n_pressure


def assemble_reduced(space: MultiscaleSpace, pressure_space: CoarsePressureSpace,
                     system_fine: SaddleSystem, source: SourceField | None = None) -> ReducedSystem:
    U = space.U_csr
    if U.shape[0] != system_fine.A.shape[0]:
        raise ValueError(f"basis has {U.shape[0]} rows, fine system has {system_fine.A.shape[0]} velocity dofs")
    if pressure_space.Mc.shape[0] != system_fine.B.shape[0]:
        raise ValueError("pressure embedding does not match the fine system")
    rhs = source.integrals() if source is not None else system_fine.rhs
    if rhs is None:
        raise ValueError("no source given")
    AU = (system_fine.A @ U).tocsc()
    Ar = (U.T @ AU).toarray()
    Ar = 0.5 * (Ar + Ar.T)
    Br = (pressure_space.Mc.T @ (system_fine.B @ U)).toarray()
    Fr = pressure_space.Mc.T @ rhs
    return ReducedSystem(Ar, np.asarray(Br), np.asarray(Fr), 0)


def solve_multiscale(reduced: ReducedSystem, rtol: float = 1e-10):
    """Solve ``A c - B^T p = 0``, ``B c = F`` with ``p[gauge] = 0``; returns ``(c, p)``."""
    n, m = reduced.n_velocity, reduced.n_pressure
    if n == 0:
        raise SingularSystemError("empty velocity space")
    F = reduced.F
    if abs(F.sum()) > 1e-12 * (np.abs(F).sum() + 1e-300):
        raise ValueError("incompatible source: integral is not zero")
    keep = np.ones(m, dtype=bool)
    keep[reduced.gauge] = False
    Bk = reduced.B[keep]
    K = np.block([[reduced.A, -Bk.T], [Bk, np.zeros((m - 1, m - 1))]])
    rhs = np.concatenate([np.zeros(n), F[keep]])
    try:
        lu, piv = sla.lu_factor(K, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError(f"reduced solve failed: {exc}") from exc
    d = np.abs(np.diag(lu))
    if d.min() <= 1e-13 * d.max():
        raise SingularSystemError("singular reduced system (rank-deficient basis)")
    x = sla.lu_solve((lu, piv), rhs)
    r = K @ x - rhs
    rel = np.linalg.norm(r) / (np.linalg.norm(K, 1) * np.linalg.norm(x) + np.linalg.norm(rhs) + 1e-300)
    if not np.isfinite(rel) or rel > rtol:
        raise SingularSystemError(f"reduced solve residual {rel:.2e} exceeds {rtol:g}")
    c = x[:n]
    p = np.zeros(m)
    p[keep] = x[n:]
    return c, p


def prolongate(space: MultiscaleSpace, pressure_space: CoarsePressureSpace, v_c, p_c) -> FlowSolution:
    v_c = np.asarray(v_c, dtype=float)
    p_c = np.asarray(p_c, dtype=float)
    if v_c.shape != (space.n_basis,) or p_c.shape != (pressure_space.n_coarse,):
        raise ValueError("coefficient lengths do not match the spaces")
    v = space.U @ v_c
    p = pressure_space.Mc @ p_c
    p = p - p.mean()
    return FlowSolution(np.asarray(v), np.asarray(p), "multiscale-prolongated")


def solve_sample(space: MultiscaleSpace, system_fine: SaddleSystem, source: SourceField | None = None,
                 pressure_space: CoarsePressureSpace | None = None) -> FlowSolution:
    ps = pressure_space or CoarsePressureSpace.from_grid(space.grid)
    red = assemble_reduced(space, ps, system_fine, source)
    c, p = solve_multiscale(red)
    return prolongate(space, ps, c, p)


# ---- archive ----

def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def save_space(path, space: MultiscaleSpace) -> str:
    """Write the basis archive; returns the sha256 of the whole file."""
    g = space.grid
    U = space.U.tocsc()
    U.sort_indices()
    arrays = {
        "U_data": U.data.astype("<f8"),
        "U_indices": U.indices.astype("<i8"),
        "U_indptr": U.indptr.astype("<i8"),
        "owners": space.owners.astype("<i8"),
        "stages": space.stages.astype("<i8"),
    }
    specs, payload, off = [], [], 0
    for name, a in arrays.items():
        b = a.tobytes()
        specs.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                      "offset": off, "nbytes": len(b), "sha256": _sha(b)})
        payload.append(b)
        off += len(b)
    header = {
        "format": "msflow-basis", "version": ARCHIVE_VERSION,
        "grid": {"extent": list(g.domain_extent), "fine": list(g.fine_cells), "coarse": list(g.coarse_cells)},
        "n_dof": g.n_dof, "n_basis": space.n_basis,
        "stage_counts": list(space.stage_counts), "dropped": space.dropped,
        "metadata": space.metadata, "arrays": specs,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = ARCHIVE_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(payload)
    Path(path).write_bytes(blob)
    return _sha(blob)


def load_space(path, grid: GridHierarchy | None = None) -> MultiscaleSpace:
    from .grid import build_hierarchy

    blob = Path(path).read_bytes()
    if blob[:8] != ARCHIVE_MAGIC:
        raise ValueError(f"{path}: not a basis archive")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header.get("version") != ARCHIVE_VERSION:
        raise ValueError(f"{path}: unsupported archive version {header.get('version')}")
    gh = header["grid"]
    if grid is None:
        grid = build_hierarchy(gh["extent"], gh["fine"], gh["coarse"])
    elif (list(grid.fine_cells) != gh["fine"] or list(grid.coarse_cells) != gh["coarse"]
          or not np.allclose(grid.domain_extent, gh["extent"])):
        raise ValueError(f"{path}: archive grid {gh} does not match {grid}")
    base = 16 + hlen
    arrays = {}
    for s in header["arrays"]:
        b = blob[base + s["offset"]: base + s["offset"] + s["nbytes"]]
        if _sha(b) != s["sha256"]:
            raise ValueError(f"{path}: checksum mismatch in array {s['name']}")
        arrays[s["name"]] = np.frombuffer(b, dtype=s["dtype"]).reshape(s["shape"]).copy()
    U = sp.csc_matrix((arrays["U_data"], arrays["U_indices"].astype(np.int64),
                       arrays["U_indptr"].astype(np.int64)), shape=(header["n_dof"], header["n_basis"]))
    return MultiscaleSpace(grid, U, arrays["owners"].astype(np.int64), arrays["stages"].astype(np.int64),
                           tuple(header["stage_counts"]), header["metadata"], header.get("dropped", 0))
