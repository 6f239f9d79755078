import numpy as np
import pytest

from msflow.grid import build_hierarchy
from msflow.metrics import (SampleCache, bound_terms, fit_stability_constant, generalization_study,
                            monte_carlo_sweep, saturation_error, source_l2, spearman,
                            stochastic_saturation_error, velocity_error, velocity_error_rooted)
from msflow.mixedfem import assemble_saddle, make_source, solve_fine
from msflow.randfield import CovarianceSpec, kl_decompose
from msflow.snapshot import LocalProblems, build_all_snapshots
from msflow.spectral import build_offline_space, edge_spectral_problem


def quadrature_norm2(g, kappa, v_full):
    """Cellwise 3x3 Gauss quadrature of kappa^-1 |v|^2 for the RT0 field with edge values v_full."""
    x, w = np.polynomial.legendre.leggauss(3)
    t = (x + 1) / 2
    W = np.outer(w, w) / 4 * g.cell_area
    total = 0.0
    for j in range(g.Ny):
        for i in range(g.Nx):
            l, r = v_full[g.xedge(i, j)], v_full[g.xedge(i + 1, j)]
            b, tp = v_full[g.yedge(i, j)], v_full[g.yedge(i, j + 1)]
            vx = l * (1 - t)[:, None] + r * t[:, None]
            vy = b * (1 - t)[None, :] + tp * t[None, :]
            total += np.sum(W * (vx ** 2 + vy ** 2)) / kappa[g.cell(i, j)]
    return total


@pytest.fixture(scope="module")
def setup():
    g = build_hierarchy((1, 1), (8, 8), (2, 2))
    k = np.exp(np.random.default_rng(1).normal(size=g.n_cells))
    src = make_source(g, "two_point")
    s = assemble_saddle(g, k, src)
    return g, k, src, s, solve_fine(s)


def test_velocity_error_basic(setup):
    g, k, src, s, ref = setup
    assert velocity_error(ref, ref, s) == 0
    assert velocity_error(ref, np.zeros(g.n_dof), s) == 1
    assert np.isclose(velocity_error(ref, 0.5 * ref.velocity, k, g), 0.25)
    assert np.isclose(velocity_error_rooted(ref, 0.5 * ref.velocity, s), 0.5)
    with pytest.raises(ValueError):
        velocity_error(ref, ref, k)


def test_velocity_error_quadrature_oracle(setup):
    g, k, src, s, ref = setup
    other = ref.velocity + np.random.default_rng(0).normal(scale=0.1, size=g.n_dof)
    d = np.zeros(g.n_edges)
    d[g.interior_edges] = ref.velocity - other
    f = ref.full_velocity(g)
    expect = quadrature_norm2(g, k, d) / quadrature_norm2(g, k, f)
    assert abs(velocity_error(ref, other, s) - expect) <= 1e-12 * expect


def test_saturation_errors():
    a = np.random.default_rng(0).uniform(size=50)
    assert saturation_error(a, a) == 0
    assert np.isclose(saturation_error(a, 2 * a), 1.0)
    b = np.random.default_rng(1).uniform(size=50)
    assert stochastic_saturation_error([a], [b]) == saturation_error(a, b)
    with pytest.raises(ZeroDivisionError):
        saturation_error(np.zeros(3), a[:3])


def test_bound_terms():
    g = build_hierarchy((1, 1), (8, 8), (2, 2))
    f1, f2 = make_source(g, "two_point"), make_source(g, "five_point")
    k1, k2 = np.full(g.n_cells, 2.0), np.full(g.n_cells, 8.0)
    assert bound_terms(k1, k1, f1, f2)[0] == 0
    assert bound_terms(k1, k2, f1, f1)[1] == 0
    t1, _ = bound_terms(k1, k2, f1, f2)
    assert np.isclose(t1, abs(8 ** -0.5 - 2 ** -0.5) * source_l2(f2))
    assert np.isclose(source_l2(f2), np.sqrt(20 * g.cell_area))


def test_spearman_and_stability_fit():
    x = np.arange(20.0)
    assert np.isclose(spearman(x, x ** 3), 1.0)
    C, ratio = fit_stability_constant(np.r_[np.ones(10), 1.05 * np.ones(5)], np.ones(15), 1.0)
    assert C == 1.0 and np.isclose(ratio, 1.05)


@pytest.fixture(scope="module")
def sweep_setup():
    g = build_hierarchy((1, 1), (16, 16), (4, 4))
    mean_log = np.zeros(g.n_cells)
    pr = LocalProblems(g, np.ones(g.n_cells))
    V = build_offline_space([edge_spectral_problem(x, pr) for x in build_all_snapshots(g, pr)], 2, g)
    return g, mean_log, V


def test_sweep_zero_modes_deterministic(sweep_setup):
    g, mean_log, V = sweep_setup
    kl0 = kl_decompose(CovarianceSpec(), g, n_terms=0)
    r1 = monte_carlo_sweep(kl0, mean_log, V, make_source(g, "five_point"), 1, seed0=3)
    r2 = monte_carlo_sweep(kl0, mean_log, V, make_source(g, "five_point"), 1, seed0=99)
    assert r1.errors == r2.errors and r1.n_failed == 0


def test_sweep_csv_and_parallel(sweep_setup, tmp_path):
    g, mean_log, V = sweep_setup
    kl = kl_decompose(CovarianceSpec(1.0, 0.25, 0.25), g)
    src = make_source(g, "two_point")
    a = monte_carlo_sweep(kl, mean_log, V, src, 6, seed0=10)
    b = monte_carlo_sweep(kl, mean_log, V, src, 6, seed0=10, jobs=3)
    assert a.errors == b.errors and a.seeds == list(range(10, 16))
    a.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "seed,e_v,e_v_rooted,T_test" and len(lines) == 1 + 6 + 3
    assert lines[-1].startswith("failed,0")
    with pytest.raises(ValueError, match="empty sweep"):
        monte_carlo_sweep(kl, mean_log, V, src, 0)


def test_generalization_same_source_identical(sweep_setup):
    g, mean_log, V = sweep_setup
    kl = kl_decompose(CovarianceSpec(1.0, 0.25, 0.25), g)
    f1 = make_source(g, "two_point")
    same, cross = generalization_study(V, kl, mean_log, f1, f1, 3)
    assert same.errors == cross.errors
    cache = SampleCache()
    same, cross = generalization_study(V, kl, mean_log, f1, make_source(g, "five_point"), 3, cache=cache)
    assert same.seeds == cross.seeds and same.errors != cross.errors
    again = monte_carlo_sweep(kl, mean_log, V, f1, 3, cache=cache)
    assert again.errors == same.errors
