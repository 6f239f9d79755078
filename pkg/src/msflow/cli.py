"""Command-line front end: ``msflow train|solve|sweep|twophase|export --config <path>``.

Config files are line-oriented ``section.key = value`` text with ``#`` comments.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .enrichment import EnrichmentConfig, enrich, iterations_for, report_rows
from .grid import GridError, GridHierarchy, build_hierarchy
from .metrics import monte_carlo_sweep, velocity_error
from .mixedfem import (CompatibilityError, SingularSystemError, SourceField, assemble_saddle,
                       make_source, solve_fine)
from .mssolver import MultiscaleSpace, load_space, save_space, solve_sample
from .randfield import (CovarianceSpec, PermeabilityField, high_contrast_field, kl_decompose,
                        load_field_raster, sample_field)
from .snapshot import LocalProblems, build_all_snapshots
from .spectral import build_offline_space, edge_spectral_problem, eigenvalue_table
from .twophase import CFLError, TwoPhaseConfig, impes_run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("train", "solve", "sweep", "twophase", "export")


class ConfigError(ValueError):
    pass


def _floats(n=None):
    def conv(s):
        v = [float(x) for x in s.replace(",", " ").split()]
        if n is not None and len(v) != n:
            raise ValueError(f"expected {n} numbers")
        return v
    return conv


def _ints(n=None):
    def conv(s):
        v = [int(x) for x in s.replace(",", " ").split()]
        if n is not None and len(v) != n:
            raise ValueError(f"expected {n} integers")
        return v
    return conv


def _choice(*opts):
    def conv(s):
        if s not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}")
        return s
    return conv


def _bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


# key -> (converter, default); a default of REQUIRED marks a mandatory key
REQUIRED = object()
SCHEMA = {
    "grid.extent": (_floats(2), [1.0, 1.0]),
    "grid.fine": (_ints(2), REQUIRED),
    "grid.coarse": (_ints(2), REQUIRED),
    "field.kind": (_choice("kl", "raster", "synthetic"), REQUIRED),
    "field.path": (str, None),
    "field.mean": (str, "synthetic"),  # synthetic | constant:<log value> | raster:<path>
    "field.sigma2": (float, 1.0),
    "field.eta": (_floats(2), [0.125, 0.125]),
    "field.n_terms": (int, None),
    "field.energy": (float, 0.95),
    "field.contrast": (float, 1e4),
    "field.seed": (int, 4),
    "basis.A": (int, 2),
    "basis.B": (int, 1),
    "basis.tau": (float, 1e-3),
    "basis.layers": (int, 1),
    "basis.partition": (_choice("alternating", "all_edges"), "alternating"),
    "basis.l_threshold": (float, None),
    "source.kind": (_choice("two_point", "five_point", "custom"), REQUIRED),
    "source.test": (_choice("two_point", "five_point", "custom", "same"), "same"),
    "source.cells": (str, None),  # custom: "cell:value, cell:value"
    "source.rate": (float, 1.0),  # multiplies f
    "source.total_rate": (float, None),  # rescales f so the injected volume per unit time is this
    "twophase.mu_w": (float, 1.0),
    "twophase.mu_o": (float, 5.0),
    "twophase.t_end": (float, 0.5),
    "twophase.dt": (float, 0.01),
    "twophase.solver": (_choice("fine", "multiscale", "both"), "both"),
    "twophase.re_enrich_times": (_floats(), []),
    "twophase.snapshots": (_floats(), []),
    "sweep.n_samples": (int, 10),
    "sweep.seed0": (int, 0),
    "output.directory": (str, "msflow_out"),
    "output.formats": (str, "csv vtk"),
}


@dataclass
class RunConfig:
    values: dict
    lines: dict = field(default_factory=dict)
    path: str = ""

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}

    def digest(self, sections=("grid", "field", "basis", "source")) -> str:
        d = {k: v for k, v in sorted(self.values.items()) if k.split(".")[0] in sections
             and k not in ("source.test",)}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get("MSFLOW_OUTPUT") or self.values["output.directory"])

    def echo(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.values.items()) if v is not None)


def _fmt(v):
    if isinstance(v, list):
        return " ".join(repr(x) for x in v)
    return str(v)


def parse_config(path, write_echo: bool = True) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    raw, where = {}, {}
    for n, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{path}:{n}: expected 'section.key = value'")
        key, val = (x.strip() for x in s.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{n}: unknown key '{key}'")
        if key in raw:
            raise ConfigError(f"{path}:{n}: duplicate key '{key}' (first set on line {where[key]})")
        conv = SCHEMA[key][0]
        try:
            raw[key] = conv(val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{n}: bad value for '{key}': {exc}") from exc
        where[key] = n
    values = {}
    for key, (_, default) in SCHEMA.items():
        if key in raw:
            values[key] = raw[key]
        elif default is REQUIRED:
            raise ConfigError(f"{path}: missing required key '{key}'")
        else:
            values[key] = list(default) if isinstance(default, list) else default
    cfg = RunConfig(values, where, str(path))
    _validate(cfg)
    if write_echo:
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.effective").write_text(cfg.echo(), encoding="utf-8")
    return cfg


def _validate(cfg: RunConfig):
    def err(key, msg):
        line = cfg.lines.get(key)
        loc = f"{cfg.path}:{line}" if line else cfg.path
        raise ConfigError(f"{loc}: {key}: {msg}")

    try:
        build_hierarchy(cfg["grid.extent"], cfg["grid.fine"], cfg["grid.coarse"])
    except GridError as exc:
        err("grid.coarse", str(exc))
    if cfg["field.kind"] == "raster":
        if not cfg["field.path"]:
            err("field.kind", "raster fields need field.path")
        elif not Path(cfg["field.path"]).exists():
            err("field.path", f"file not found: {cfg['field.path']}")
    m = cfg["field.mean"]
    if not (m == "synthetic" or m.startswith("constant:") or m.startswith("raster:")):
        err("field.mean", "expected synthetic, constant:<value> or raster:<path>")
    if m.startswith("raster:") and not Path(m.split(":", 1)[1]).exists():
        err("field.mean", f"file not found: {m.split(':', 1)[1]}")
    for k in ("basis.A", "basis.B", "basis.layers", "sweep.n_samples"):
        if cfg[k] < 0:
            err(k, "must be >= 0")
    rx, ry = (f // c for f, c in zip(cfg["grid.fine"], cfg["grid.coarse"]))
    if cfg["basis.A"] > min(rx, ry):
        err("basis.A", f"exceeds the snapshot dimension {min(rx, ry)}")
    if cfg["basis.tau"] <= 0:
        err("basis.tau", "must be positive")
    if "custom" in (cfg["source.kind"], cfg["source.test"]) and not cfg["source.cells"]:
        err("source.kind", "custom sources need source.cells")
    if cfg["source.total_rate"] is not None and cfg["source.total_rate"] <= 0:
        err("source.total_rate", "must be positive")
    for k in ("twophase.mu_w", "twophase.mu_o", "twophase.dt"):
        if cfg[k] <= 0:
            err(k, "must be positive")


# ---- building blocks ----

def grid_of(cfg: RunConfig) -> GridHierarchy:
    return build_hierarchy(cfg["grid.extent"], cfg["grid.fine"], cfg["grid.coarse"])


def source_of(cfg: RunConfig, grid: GridHierarchy, which: str = "train") -> SourceField:
    kind = cfg["source.kind"] if which == "train" or cfg["source.test"] == "same" else cfg["source.test"]
    if kind == "custom":
        pairs = []
        for item in cfg["source.cells"].split(","):
            c, v = item.split(":")
            pairs.append((int(c), float(v)))
        src = make_source(grid, pairs)
    else:
        src = make_source(grid, kind)
    scale = cfg["source.rate"]
    if cfg["source.total_rate"] is not None:
        scale *= cfg["source.total_rate"] / np.maximum(src.integrals(), 0).sum()
    if scale != 1.0:
        src = SourceField(src.values * scale, src.cell_area, src.name)
    return src


def mean_log_of(cfg: RunConfig, grid: GridHierarchy) -> np.ndarray:
    m = cfg["field.mean"]
    if m == "synthetic":
        return np.log(high_contrast_field(grid, cfg["field.seed"], cfg["field.contrast"]).values)
    if m.startswith("constant:"):
        return np.full(grid.n_cells, float(m.split(":", 1)[1]))
    return np.log(load_field_raster(m.split(":", 1)[1], grid).values)


def kl_of(cfg: RunConfig, grid: GridHierarchy):
    spec = CovarianceSpec(cfg["field.sigma2"], *cfg["field.eta"])
    return kl_decompose(spec, grid, n_terms=cfg["field.n_terms"], energy=cfg["field.energy"])


def training_field(cfg: RunConfig, grid: GridHierarchy) -> PermeabilityField:
    kind = cfg["field.kind"]
    if kind == "raster":
        return load_field_raster(cfg["field.path"], grid)
    if kind == "synthetic":
        return high_contrast_field(grid, cfg["field.seed"], cfg["field.contrast"])
    return PermeabilityField(np.exp(mean_log_of(cfg, grid)), {"kind": "kl-mean"})


def test_field(cfg: RunConfig, grid: GridHierarchy, seed: int, kl=None) -> PermeabilityField:
    if cfg["field.kind"] != "kl":
        return training_field(cfg, grid)
    kl = kl or kl_of(cfg, grid)
    return sample_field(kl, mean_log_of(cfg, grid), seed)


def train_space(cfg: RunConfig, grid: GridHierarchy, jobs: int = 1):
    fld = training_field(cfg, grid)
    src = source_of(cfg, grid, "train")
    t0 = time.perf_counter()
    problems = LocalProblems(grid, fld.values)
    snaps = build_all_snapshots(grid, problems, jobs=jobs)
    results = [edge_spectral_problem(s, problems) for s in snaps]
    if cfg["basis.l_threshold"] is not None:
        from .spectral import threshold_counts
        rule = threshold_counts(results, cfg["basis.l_threshold"])
    else:
        rule = cfg["basis.A"]
    meta = {"config_digest": cfg.digest(), "field": fld.meta.get("kind", "field"), "source": src.name}
    space = build_offline_space(results, rule, grid, meta)
    reports = []
    B = cfg["basis.B"]
    if B > 0 and space.n_basis:
        econf = EnrichmentConfig(cfg["basis.tau"], iterations_for(grid, B, cfg["basis.partition"]),
                                 cfg["basis.layers"], cfg["basis.partition"])
        space, reports = enrich(grid, problems, src, space, econf, jobs=jobs)
    t_train = time.perf_counter() - t0
    space.metadata["t_train"] = t_train
    return space, results, reports, t_train


def _sha_file(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()


def get_space(cfg: RunConfig, grid: GridHierarchy, jobs: int, manifest: dict):
    """Load the archive when it matches this config, otherwise train and save."""
    out = cfg.output_dir
    arch, info = out / "basis.msb", out / "basis.json"
    if arch.exists() and info.exists():
        meta = json.loads(info.read_text())
        if meta.get("config_digest") == cfg.digest() and meta.get("sha256") == _sha_file(arch):
            space = load_space(arch, grid)
            manifest["basis"] = "loaded"
            manifest["basis_sha256"] = meta["sha256"]
            return space
    space, results, reports, t_train = train_space(cfg, grid, jobs)
    _write_training(cfg, space, results, reports, manifest)
    manifest["basis"] = "trained"
    manifest["timings"]["T_train"] = t_train
    return space


def _write_training(cfg, space, results, reports, manifest):
    out = cfg.output_dir
    sha = save_space(out / "basis.msb", space)
    (out / "basis.json").write_text(json.dumps({"config_digest": cfg.digest(), "sha256": sha,
                                                "n_basis": space.n_basis,
                                                "stage_counts": list(space.stage_counts)}, indent=1))
    write_csv(out / "eigenvalues.csv", ["edge", "index", "eigenvalue"], eigenvalue_table(results))
    write_csv(out / "residuals.csv", ["iteration", "global_norm", "relative_norm", "min_region",
                                      "max_region", "added", "train_error"], report_rows(reports))
    manifest["basis_sha256"] = sha
    manifest["outputs"] += ["basis.msb", "basis.json", "eigenvalues.csv", "residuals.csv"]


# ---- writers ----

def write_csv(path, header, rows):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if x is None else (repr(float(x)) if isinstance(x, (float, np.floating)) else x)
                        for x in r])


def write_vtk(path, grid: GridHierarchy, arrays: dict, title: str = "msflow"):
    """Legacy ASCII structured-points file with cell data."""
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {grid.Nx + 1} {grid.Ny + 1} 1\n")
        fh.write("ORIGIN 0 0 0\n")
        fh.write(f"SPACING {grid.hx!r} {grid.hy!r} 1\n")
        fh.write(f"CELL_DATA {grid.n_cells}\n")
        for name, vals in arrays.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for v in np.asarray(vals, dtype=float):
                fh.write(f"{v!r}\n")


def write_edge_flux(path, grid: GridHierarchy, velocities: dict):
    e = grid.interior_edges
    cols = list(velocities)
    rows = [[int(i)] + [float(velocities[c][k]) for c in cols] for k, i in enumerate(e)]
    write_csv(path, ["edge"] + cols, rows)


# ---- commands ----

def cmd_train(cfg, grid, jobs, seed, manifest):
    space, results, reports, t_train = train_space(cfg, grid, jobs)
    _write_training(cfg, space, results, reports, manifest)
    manifest["basis"] = "trained"
    manifest["timings"]["T_train"] = t_train
    manifest["n_basis"] = space.n_basis
    manifest["stage_counts"] = list(space.stage_counts)


def cmd_solve(cfg, grid, jobs, seed, manifest):
    space = get_space(cfg, grid, jobs, manifest)
    s = cfg["sweep.seed0"] if seed is None else seed
    fld = test_field(cfg, grid, s)
    src = source_of(cfg, grid, "test")
    system = assemble_saddle(grid, fld.values, src)
    t0 = time.perf_counter()
    ref = solve_fine(system)
    t_fine = time.perf_counter() - t0
    t0 = time.perf_counter()
    ms = solve_sample(space, system, src)
    t_test = time.perf_counter() - t0
    ev = velocity_error(ref, ms, system)
    out = cfg.output_dir
    formats = cfg["output.formats"].split()
    if "vtk" in formats:
        write_vtk(out / "solution.vtk", grid, {"permeability": fld.values, "pressure_fine": ref.pressure,
                                               "pressure_ms": ms.pressure})
        manifest["outputs"].append("solution.vtk")
    if "csv" in formats:
        write_edge_flux(out / "edge_flux.csv", grid, {"fine": ref.velocity, "multiscale": ms.velocity})
        manifest["outputs"].append("edge_flux.csv")
    result = {"seed": s, "e_v": ev, "e_v_rooted": float(np.sqrt(ev)), "source": src.name,
              "n_basis": space.n_basis, "reduced_unknowns": space.n_basis + grid.n_coarse,
              "fine_unknowns": grid.n_dof + grid.n_cells}
    (out / "solve.json").write_text(json.dumps(result, indent=1))
    manifest["outputs"].append("solve.json")
    manifest["timings"]["T_test"] = t_test
    manifest["timings"]["T_fine"] = t_fine
    manifest["result"] = result


def cmd_sweep(cfg, grid, jobs, seed, manifest):
    n = cfg["sweep.n_samples"]
    if n < 1:
        raise ConfigError("empty sweep")
    if cfg["field.kind"] != "kl":
        raise ConfigError(f"{cfg.path}: field.kind: sweeps need a kl field")
    space = get_space(cfg, grid, jobs, manifest)
    kl = kl_of(cfg, grid)
    seed0 = cfg["sweep.seed0"] if seed is None else seed
    rep = monte_carlo_sweep(kl, mean_log_of(cfg, grid), space, source_of(cfg, grid, "test"), n, seed0, jobs)
    rep.to_csv(cfg.output_dir / "sweep.csv")
    manifest["outputs"].append("sweep.csv")
    manifest["timings"]["T_test_mean"] = float(np.mean(rep.t_test)) if rep.t_test else None
    manifest["result"] = {"mean": rep.mean if rep.errors else None,
                          "variance": rep.variance if rep.errors else None,
                          "failed": rep.n_failed, "n_kl_terms": kl.n_terms}


def cmd_twophase(cfg, grid, jobs, seed, manifest):
    s = cfg["sweep.seed0"] if seed is None else seed
    fld = test_field(cfg, grid, s)
    src = source_of(cfg, grid, "test")
    mode = cfg["twophase.solver"]
    runs = {}
    base = dict(mu_w=cfg["twophase.mu_w"], mu_o=cfg["twophase.mu_o"], t_end=cfg["twophase.t_end"],
                dt=cfg["twophase.dt"], re_enrich_times=tuple(cfg["twophase.re_enrich_times"]))
    if mode in ("fine", "both"):
        t0 = time.perf_counter()
        runs["fine"] = impes_run(grid, fld, src, None, TwoPhaseConfig(solver="fine", **base))
        manifest["timings"]["T_fine"] = time.perf_counter() - t0
    if mode in ("multiscale", "both"):
        space = get_space(cfg, grid, jobs, manifest)

        def refresh(keff, current):
            # extend the current space with residual-driven bases for the current total mobility
            econf = EnrichmentConfig(cfg["basis.tau"],
                                     iterations_for(grid, max(cfg["basis.B"], 1), cfg["basis.partition"]),
                                     cfg["basis.layers"], cfg["basis.partition"])
            return enrich(grid, LocalProblems(grid, keff), src, current, econf, jobs=jobs)[0]

        t0 = time.perf_counter()
        runs["multiscale"] = impes_run(grid, fld, src, space, TwoPhaseConfig(solver="multiscale", **base),
                                       enrich_fn=refresh)
        manifest["timings"]["T_test"] = time.perf_counter() - t0
    out = cfg.output_dir
    names = list(runs)
    times = runs[names[0]].times
    rows = [[t] + [float(runs[n].water_cut[k]) for n in names] for k, t in enumerate(times)]
    write_csv(out / "water_cut.csv", ["time"] + [f"water_cut_{n}" for n in names], rows)
    manifest["outputs"].append("water_cut.csv")
    if "vtk" in cfg["output.formats"].split():
        want = cfg["twophase.snapshots"] or [times[-1]]
        for tw in want:
            k = int(np.argmin(np.abs(times - tw)))
            name = f"saturation_t{times[k]:.6g}.vtk"
            write_vtk(out / name, grid, {f"saturation_{n}": runs[n].saturations[k].values for n in names})
            manifest["outputs"].append(name)
    manifest["result"] = {n: {"final_water_cut": float(r.water_cut[-1]),
                              "mass_balance_error": r.mass_balance_error(grid),
                              "pressure_solves": r.pressure_solves, "substeps": r.substeps}
                          for n, r in runs.items()}


def cmd_export(cfg, grid, jobs, seed, manifest):
    out = cfg.output_dir
    s = cfg["sweep.seed0"] if seed is None else seed
    train = training_field(cfg, grid)
    arrays = {"permeability_train": train.values}
    if cfg["field.kind"] == "kl":
        arrays["permeability_sample"] = test_field(cfg, grid, s).values
    write_vtk(out / "field.vtk", grid, arrays)
    from .randfield import save_field_raster
    save_field_raster(out / "field_train.txt", train, grid)
    manifest["outputs"] += ["field.vtk", "field_train.txt"]
    if cfg["field.kind"] == "kl":
        kl = kl_of(cfg, grid)
        write_csv(out / "kl_eigenvalues.csv", ["index", "eigenvalue"],
                  [(k + 1, float(v)) for k, v in enumerate(kl.eigenvalues)])
        manifest["outputs"].append("kl_eigenvalues.csv")
    arch = out / "basis.msb"
    if arch.exists():
        space = load_space(arch, grid)
        write_csv(out / "basis_columns.csv", ["column", "owner_edge", "stage", "nnz"],
                  [(k, int(space.owners[k]), int(space.stages[k]), int(space.U.indptr[k + 1] - space.U.indptr[k]))
                   for k in range(space.n_basis)])
        manifest["outputs"].append("basis_columns.csv")


HANDLERS = {"train": cmd_train, "solve": cmd_solve, "sweep": cmd_sweep, "twophase": cmd_twophase,
            "export": cmd_export}


def execute(cfg: RunConfig, command: str, jobs: int = 1, seed: int | None = None) -> int:
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    grid = grid_of(cfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": cfg.path, "config_sha256": _sha_file(Path(cfg.path)),
                "config_digest": cfg.digest(), "seed": seed, "jobs": jobs, "timings": {}, "outputs": []}
    t0 = time.perf_counter()
    HANDLERS[command](cfg, grid, jobs, seed, manifest)
    manifest["timings"]["total"] = time.perf_counter() - t0
    manifest["output_sha256"] = {n: _sha_file(out / n) for n in manifest["outputs"] if (out / n).exists()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="msflow", description="Multiscale mixed FEM for Darcy flow")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        return execute(cfg, args.command, max(1, args.jobs), args.seed)
    except (ConfigError, GridError) as exc:
        print(f"msflow: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingularSystemError, CompatibilityError, CFLError, np.linalg.LinAlgError,
            ArithmeticError) as exc:
        print(f"msflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
