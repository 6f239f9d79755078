"""Mean velocity error of several "A+B" spaces on log-normal samples of the bundled field.

    python demos/basis_table.py [n_samples] [eta]
"""
import sys
import time

import numpy as np

from msflow import build_hierarchy, high_contrast_field, kl_decompose, CovarianceSpec
from msflow.enrichment import EnrichmentConfig, build_divfree_spaces, enrich, iterations_for
from msflow.metrics import SampleCache, generalization_study, monte_carlo_sweep
from msflow.mixedfem import make_source
from msflow.snapshot import LocalProblems, build_all_snapshots
from msflow.spectral import build_offline_space, edge_spectral_problem

n = int(sys.argv[1]) if len(sys.argv) > 1 else 20
eta = float(sys.argv[2]) if len(sys.argv) > 2 else 1 / 8

g = build_hierarchy((1, 1), (128, 128), (8, 8))
train = high_contrast_field(g)
f1, f2 = make_source(g, "two_point"), make_source(g, "five_point")

t0 = time.perf_counter()
pr = LocalProblems(g, train.values)
results = [edge_spectral_problem(s, pr) for s in build_all_snapshots(g, pr)]
dfs = build_divfree_spaces(g, pr, 1)
spaces = {f"{a}+0": build_offline_space(results, a, g) for a in (1, 2, 3, 6, 8, 16)}
one_sweep = EnrichmentConfig(tau=1e-30, max_iters=iterations_for(g, 1))
for a in (1, 2, 3):
    spaces[f"{a}+1"] = enrich(g, pr, f1, spaces[f"{a}+0"], one_sweep, dfs=dfs)[0]
spaces["2+2"] = enrich(g, pr, f1, spaces["2+1"], one_sweep, dfs=dfs)[0]
print(f"training: {time.perf_counter() - t0:.1f} s")

kl = kl_decompose(CovarianceSpec(1.0, eta, eta), g)
mean_log = np.log(train.values)
cache = SampleCache()
print(f"eta = {eta:g}, N_k = {kl.n_terms}, {n} samples")
print(f"{'space':>6} {'dof':>6} {'mean e_v':>10} {'variance':>10} {'T_test':>8}")
for label, V in spaces.items():
    rep = monte_carlo_sweep(kl, mean_log, V, f1, n, cache=cache)
    print(f"{label:>6} {V.n_basis + g.n_coarse:6d} {rep.mean:10.4f} {rep.variance:10.2e} {np.mean(rep.t_test):8.3f}")

same, cross = generalization_study(spaces["2+1"], kl, mean_log, f1, f2, n, cache=cache)
print(f"2+1 trained with the two-point source: two-point test {same.mean:.4f}, five-point test {cross.mean:.4f}")
