import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msflow.grid import build_hierarchy
from msflow.mixedfem import SourceField, assemble_saddle, cell_divergence, make_source, solve_fine
from msflow.mssolver import solve_sample
from msflow.snapshot import LocalProblems, build_all_snapshots
from msflow.spectral import build_offline_space, edge_spectral_problem
from msflow.twophase import (CFLError, SaturationField, Transport, TwoPhaseConfig, WellSpec,
                             conservative_correction, impes_run, max_dfrac, mobility, transport_step,
                             water_cut)


def test_mobility_values():
    lt, F = mobility(np.array([0.0, 1.0, 0.5]))
    np.testing.assert_allclose(lt, [0.2, 1.0, 0.25 + 0.05])
    np.testing.assert_allclose(F, [0.0, 1.0, 5 / 6])


def test_config_validation():
    with pytest.raises(ValueError):
        TwoPhaseConfig(mu_w=0)
    with pytest.raises(ValueError):
        TwoPhaseConfig(dt=0)
    with pytest.raises(ValueError):
        TwoPhaseConfig(solver="coarse")
    with pytest.raises(ValueError):
        SaturationField(np.array([0.5, 1.2]))


def test_max_dfrac_bounds_slope():
    c = TwoPhaseConfig()
    s = np.linspace(0, 1, 100001)
    _, F = mobility(s, c)
    assert max_dfrac(c) >= np.max(np.diff(F) / np.diff(s))


def test_static_state_unchanged():
    g = build_hierarchy((1, 1), (4, 4), (2, 2))
    S = np.random.default_rng(0).uniform(size=g.n_cells)
    out = transport_step(g, S, np.zeros(g.n_dof), np.zeros(g.n_cells), 0.1)
    assert np.array_equal(out, S)


def test_two_cell_balance():
    g = build_hierarchy((2, 1), (2, 1), (1, 1))
    q, dt = 0.3, 0.1
    out = transport_step(g, np.array([1.0, 0.0]), np.array([q]), np.zeros(2), dt)
    assert np.isclose(out[1], q * 1.0 * dt / g.cell_area)
    assert np.isclose(out[0], 1 - q * dt)


def test_step_profile_no_overshoot():
    g = build_hierarchy((1, 1), (20, 1), (1, 1))
    v = np.ones(g.n_dof)  # only x-edges are interior on a one-row grid
    S = np.where(np.arange(20) < 8, 1.0, 0.0)
    r = np.zeros(20)
    r[0], r[-1] = g.hy / g.cell_area, -g.hy / g.cell_area  # water in on the left, out on the right
    c = TwoPhaseConfig()
    dt = Transport(g).stable_dt(Transport(g).fluxes(v), r * g.cell_area, c)
    for _ in range(30):
        S = transport_step(g, S, v, r, dt, c)
        assert S.min() >= -1e-14 and S.max() <= 1 + 1e-14
    assert S[8] > 0


def test_cfl_violation_names_cell():
    g = build_hierarchy((1, 1), (4, 1), (1, 1))
    with pytest.raises(CFLError, match="cell"):
        transport_step(g, np.zeros(4), np.full(g.n_dof, 10.0), np.zeros(4), 1.0)


def test_water_cut_values():
    g = build_hierarchy((1, 1), (4, 4), (2, 2))
    w = WellSpec.from_source(make_source(g, "two_point"))
    S = np.zeros(g.n_cells)
    assert water_cut(S, w) == 0
    assert water_cut(np.ones(g.n_cells), w) == 1
    S[w.producers] = 0.5
    assert np.isclose(water_cut(S, w), 5 / 6)
    with pytest.raises(ValueError):
        WellSpec.from_source(SourceField(np.r_[1.0, np.zeros(15)], g.cell_area))


@pytest.fixture(scope="module")
def small():
    g = build_hierarchy((1, 1), (16, 16), (4, 4))
    k = np.exp(np.random.default_rng(2).normal(size=g.n_cells))
    s = make_source(g, "two_point")
    src = SourceField(s.values / g.cell_area, s.cell_area, "two_point")
    return g, k, src


def test_t_end_zero(small):
    g, k, src = small
    r = impes_run(g, k, src, None, TwoPhaseConfig(t_end=0.0))
    assert len(r.times) == 1 and not r.saturations[0].values.any()


def test_mass_balance_and_bounds(small):
    g, k, src = small
    r = impes_run(g, k, src, None, TwoPhaseConfig(t_end=0.6, dt=0.05))
    assert r.mass_balance_error(g) < 1e-8
    for S in r.saturations:
        assert S.values.min() >= 0 and S.values.max() <= 1
    assert r.water_cut[-1] > 0 and r.pressure_solves == 12


def test_multiscale_run(small):
    g, k, src = small
    pr = LocalProblems(g, k)
    V = build_offline_space([edge_spectral_problem(x, pr) for x in build_all_snapshots(g, pr)], 2, g)
    with pytest.raises(ValueError):
        impes_run(g, k, src, None, TwoPhaseConfig(solver="multiscale"))
    calls = []

    def refresh(keff, space):
        calls.append(space.n_basis)
        return space

    r = impes_run(g, k, src, V, TwoPhaseConfig(t_end=0.3, dt=0.05, solver="multiscale", re_enrich_times=(0.1, 0.2)),
                  enrich_fn=refresh)
    assert calls == [V.n_basis, V.n_basis]
    assert r.mass_balance_error(g) < 1e-8


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_conservative_correction(seed):
    g = build_hierarchy((1, 1), (12, 12), (3, 3))
    k = np.exp(np.random.default_rng(seed).normal(size=g.n_cells))
    src = make_source(g, "five_point")
    s = assemble_saddle(g, k, src)
    pr = LocalProblems(g, k)
    V = build_offline_space([edge_spectral_problem(x, pr) for x in build_all_snapshots(g, pr)], 1, g)
    v = solve_sample(V, s, src).velocity
    w = conservative_correction(g, v, src, s.kinv)
    np.testing.assert_allclose(cell_divergence(g, w), src.values, atol=1e-9)
    # fluxes on coarse edges are untouched
    ce = np.concatenate([c.fine_edges for c in g.coarse_edges])
    np.testing.assert_array_equal(w[g.edge_dof[ce]], v[g.edge_dof[ce]])
    ref = solve_fine(s).velocity
    assert (ref - w) @ (s.A @ (ref - w)) <= (ref - v) @ (s.A @ (ref - v)) + 1e-12
