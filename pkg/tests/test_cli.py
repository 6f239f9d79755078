import json

import numpy as np
import pytest

from msflow.cli import EXIT_CONFIG, EXIT_OK, ConfigError, main, parse_config
from msflow.mssolver import load_space

BASE = """\
grid.extent = 1 1
grid.fine = 16 16
grid.coarse = 4 4
field.kind = kl
field.eta = 0.25 0.25
source.kind = two_point
"""


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.fixture
def outdir(tmp_path, monkeypatch):
    d = tmp_path / "out"
    monkeypatch.setenv("MSFLOW_OUTPUT", str(d))
    return d


def test_defaults(tmp_path, outdir):
    cfg = parse_config(write(tmp_path, BASE))
    assert cfg["basis.A"] == 2 and cfg["basis.B"] == 1 and cfg["twophase.mu_o"] == 5.0
    assert cfg["source.test"] == "same"
    assert "grid.fine = 16 16" in (outdir / "config.effective").read_text()


def test_duplicate_key_names_both_lines(tmp_path, outdir):
    p = write(tmp_path, BASE + "basis.A = 1\n# note\nbasis.A = 2\n")
    with pytest.raises(ConfigError, match=r"run.cfg:9: duplicate key 'basis.A' \(first set on line 7\)"):
        parse_config(p)


@pytest.mark.parametrize("extra,msg", [("basis.C = 1\n", "unknown key"),
                                       ("basis.A = two\n", "bad value"),
                                       ("basis.A = 5\n", "snapshot dimension"),
                                       ("basis.tau = 0\n", "must be positive"),
                                       ("grid.coarse = 3 3\n", "")])
def test_config_errors(tmp_path, outdir, extra, msg, capsys):
    text = BASE.replace("grid.coarse = 4 4\n", "") if extra.startswith("grid.coarse") else BASE
    p = write(tmp_path, text + extra)
    assert main(["train", "--config", str(p)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert err.startswith("msflow: config error") and msg in err and err.count("\n") == 1


def test_missing_required(tmp_path, outdir):
    with pytest.raises(ConfigError, match="source.kind"):
        parse_config(write(tmp_path, BASE.replace("source.kind = two_point\n", "")))


def test_three_plus_zero(tmp_path, outdir):
    p = write(tmp_path, BASE + "basis.A = 3\nbasis.B = 0\n")
    assert main(["train", "--config", str(p)]) == EXIT_OK
    assert load_space(outdir / "basis.msb").label == "3+0"
    m = json.loads((outdir / "manifest.json").read_text())
    assert m["stage_counts"] == [3, 0] and m["n_basis"] == 72 and m["basis"] == "trained"


def test_train_then_solve_loads(tmp_path, outdir):
    p = write(tmp_path, BASE)
    assert main(["train", "--config", str(p)]) == EXIT_OK
    assert main(["solve", "--config", str(p), "--seed", "4"]) == EXIT_OK
    m = json.loads((outdir / "manifest.json").read_text())
    assert m["basis"] == "loaded"
    assert "T_test" in m["timings"] and "T_train" not in m["timings"]
    r = json.loads((outdir / "solve.json").read_text())
    assert 0 <= r["e_v"] < 1 and r["seed"] == 4
    assert r["fine_unknowns"] == 2 * 16 * 15 + 256
    head = (outdir / "solution.vtk").read_text().splitlines()[:8]
    assert head[0] == "# vtk DataFile Version 3.0"
    assert "DATASET STRUCTURED_POINTS" in head and "DIMENSIONS 17 17 1" in head
    assert "CELL_DATA 256" in head


def test_changed_basis_retrains(tmp_path, outdir):
    assert main(["train", "--config", str(write(tmp_path, BASE))]) == EXIT_OK
    p = write(tmp_path, BASE + "basis.A = 1\n", "b.cfg")
    assert main(["solve", "--config", str(p)]) == EXIT_OK
    assert json.loads((outdir / "manifest.json").read_text())["basis"] == "trained"


def test_empty_sweep(tmp_path, outdir, capsys):
    p = write(tmp_path, BASE + "sweep.n_samples = 0\n")
    assert main(["sweep", "--config", str(p)]) == EXIT_CONFIG
    assert "empty sweep" in capsys.readouterr().err


def test_sweep_reproducible(tmp_path, outdir):
    p = write(tmp_path, BASE + "sweep.n_samples = 3\nbasis.B = 0\n")
    assert main(["sweep", "--config", str(p), "--seed", "7"]) == EXIT_OK
    m1 = json.loads((outdir / "manifest.json").read_text())
    first = [l.split(",")[:3] for l in (outdir / "sweep.csv").read_text().splitlines()]
    assert main(["sweep", "--config", str(p), "--seed", "7", "--jobs", "2"]) == EXIT_OK
    m2 = json.loads((outdir / "manifest.json").read_text())
    again = [l.split(",")[:3] for l in (outdir / "sweep.csv").read_text().splitlines()]
    assert first == again and first[1][0] == "7"
    assert m1["result"]["mean"] == m2["result"]["mean"]


def test_export_bit_identical(tmp_path, outdir):
    p = write(tmp_path, BASE)
    assert main(["export", "--config", str(p), "--seed", "1"]) == EXIT_OK
    a = json.loads((outdir / "manifest.json").read_text())["output_sha256"]
    assert main(["export", "--config", str(p), "--seed", "1"]) == EXIT_OK
    b = json.loads((outdir / "manifest.json").read_text())["output_sha256"]
    assert a == b and "field.vtk" in a and "kl_eigenvalues.csv" in a


def test_twophase_both(tmp_path, outdir):
    text = BASE.replace("field.kind = kl", "field.kind = synthetic") + \
        "source.total_rate = 1\ntwophase.t_end = 0.1\ntwophase.dt = 0.05\ntwophase.re_enrich_times = 0.05\n"
    assert main(["twophase", "--config", str(write(tmp_path, text))]) == EXIT_OK
    rows = (outdir / "water_cut.csv").read_text().splitlines()
    assert rows[0] == "time,water_cut_fine,water_cut_multiscale" and len(rows) == 4
    m = json.loads((outdir / "manifest.json").read_text())
    assert m["result"]["fine"]["mass_balance_error"] < 1e-8
    assert any(n.startswith("saturation_t") for n in m["outputs"])


def test_output_directory_key(tmp_path, monkeypatch):
    monkeypatch.delenv("MSFLOW_OUTPUT", raising=False)
    d = tmp_path / "elsewhere"
    p = write(tmp_path, BASE + f"output.directory = {d}\n")
    assert main(["export", "--config", str(p)]) == EXIT_OK
    assert (d / "manifest.json").exists()
    assert np.loadtxt(d / "field_train.txt", skiprows=0, comments="#").size > 0
