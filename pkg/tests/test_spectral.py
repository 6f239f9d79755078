import numpy as np
import pytest
from scipy.linalg import subspace_angles

from msflow.grid import build_hierarchy
from msflow.mixedfem import SingularSystemError, assemble_saddle, make_source, solve_fine
from msflow.mssolver import solve_sample
from msflow.metrics import velocity_error
from msflow.snapshot import LocalProblems, SnapshotSpace, build_all_snapshots
from msflow.spectral import (build_offline_space, edge_kinv, edge_spectral_problem, eigenvalue_table,
                             threshold_counts)


@pytest.fixture(scope="module")
def setup():
    g = build_hierarchy((1, 1), (16, 16), (4, 4))
    k = np.exp(2 * np.random.default_rng(5).normal(size=g.n_cells))
    pr = LocalProblems(g, k)
    snaps = build_all_snapshots(g, pr)
    return g, k, pr, snaps, [edge_spectral_problem(s, pr) for s in snaps]


def test_counts_and_sign(setup):
    g, k, pr, snaps, res = setup
    for s, r in zip(snaps, res):
        assert len(r.eigenvalues) == s.L
        assert np.all(r.eigenvalues >= 0)
        assert np.all(np.diff(r.eigenvalues) >= 0)


def test_matches_explicit_inverse(setup):
    g, k, pr, snaps, res = setup
    r = res[3]
    assert r.space.L == 4
    w, V = np.linalg.eig(np.linalg.inv(r.S_snap) @ r.A_snap)
    order = np.argsort(w.real)
    np.testing.assert_allclose(r.eigenvalues, w.real[order], rtol=1e-8, atol=1e-10 * w.real.max())
    for a, b in zip(r.eigenvectors.T, V[:, order].real.T):
        c = abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
        assert abs(c - 1) < 1e-8


def test_edge_kinv_harmonic():
    g = build_hierarchy((1, 1), (2, 1), (1, 1))
    kinv = 1 / np.array([1.0, 4.0])
    e = np.array([g.xedge(1, 0)])
    assert np.isclose(1 / edge_kinv(g, kinv, e)[0], 2 / (1 + 1 / 4))


def test_full_rank_spans_snapshots(setup):
    g, k, pr, snaps, res = setup
    V = build_offline_space(res, [s.L for s in snaps], g)
    S = np.hstack([s.dof_matrix(g).toarray() for s in snaps])
    U = V.U.toarray()
    assert np.linalg.matrix_rank(U) == np.linalg.matrix_rank(S) == np.linalg.matrix_rank(np.hstack([U, S]))


def test_empty_space_fails(setup):
    g, k, pr, snaps, res = setup
    V = build_offline_space(res, 0, g)
    assert V.n_basis == 0
    s = assemble_saddle(g, k, make_source(g, "two_point"))
    with pytest.raises(SingularSystemError, match="empty velocity space"):
        solve_sample(V, s)


def test_three_plus_zero_count():
    g = build_hierarchy((4, 1), (16, 4), (4, 1))
    assert g.n_coarse_edges == 3
    pr = LocalProblems(g, np.ones(g.n_cells))
    res = [edge_spectral_problem(s, pr) for s in build_all_snapshots(g, pr)]
    V = build_offline_space(res, 3, g)
    assert V.n_basis == 9 and V.label == "3+0"


def test_too_many_requested(setup):
    g, k, pr, snaps, res = setup
    with pytest.raises(ValueError):
        build_offline_space(res, 5, g)


def test_span_monotone_and_error_nonincreasing(setup):
    g, k, pr, snaps, res = setup
    s = assemble_saddle(g, k, make_source(g, "two_point"))
    ref = solve_fine(s)
    prev_U, prev_e = None, np.inf
    for l in range(1, 5):
        V = build_offline_space(res, l, g)
        U = V.U.toarray()
        if prev_U is not None:
            r = np.linalg.matrix_rank(U)
            assert np.linalg.matrix_rank(np.hstack([U, prev_U])) == r
        e = velocity_error(ref, solve_sample(V, s), s)
        assert e <= prev_e + 1e-12
        prev_U, prev_e = U, e


def test_permutation_invariance(setup):
    g, k, pr, snaps, res = setup
    s = snaps[6]
    r = res[6]
    perm = np.random.default_rng(1).permutation(s.L)
    s2 = SnapshotSpace(s.edge_id, s.region, s.rect, s.halves, s.edges, s.trace_edges,
                       s.functions[:, perm], s.divergences[perm], s.coarse_per_half)
    r2 = edge_spectral_problem(s2, pr)
    np.testing.assert_allclose(r2.eigenvalues, r.eigenvalues, rtol=1e-9, atol=1e-12)
    gaps = np.diff(r.eigenvalues) > 1e-6 * r.eigenvalues.max()
    for l in np.flatnonzero(gaps) + 1:
        a = s.functions @ r.eigenvectors[:, :l]
        b = s2.functions @ r2.eigenvectors[:, :l]
        assert subspace_angles(a, b).max() < 1e-8


def test_threshold_and_table(setup):
    g, k, pr, snaps, res = setup
    c = threshold_counts(res, np.inf)
    assert c == [s.L for s in snaps]
    assert min(threshold_counts(res, 0.0)) == 1
    rows = eigenvalue_table(res)
    assert len(rows) == sum(s.L for s in snaps) and rows[0][:2] == (0, 1)
