"""Smoke test for the permsplit Python bindings."""

import math
import os
import random
import tempfile

import permsplit


def simulated_entries(n_experts, n_clusters, sigma2, seed):
    rnd = random.Random(seed)
    betas = [rnd.gauss(-1.0, 1.0) for _ in range(n_clusters)]
    entries = []
    for e in range(n_experts):
        b = rnd.gauss(0.0, math.sqrt(sigma2))
        for c in range(n_clusters):
            p = 1.0 / (1.0 + math.exp(-(betas[c] + b)))
            entries.append((e, c, int(rnd.random() < p)))
    return entries


def main():
    nodes, weights = permsplit.gauss_hermite(20)
    assert len(nodes) == 20
    assert abs(sum(weights) - math.sqrt(math.pi)) < 1e-12

    table = permsplit.RatingsTable(simulated_entries(40, 12, 2.0, 3))
    assert (table.n_experts, table.n_clusters, len(table)) == (40, 12, 480)
    observed = table.observed_probabilities()
    assert all(0.0 <= p <= 1.0 for p in observed.values())

    fit = permsplit.fit_ml(table)
    assert fit.converged, fit
    assert max(abs(g) for g in fit.gradient) < 1e-6
    ll = permsplit.log_likelihood(table, fit.beta, fit.sigma2)
    assert abs(ll - fit.loglik) < 1e-8, (ll, fit.loglik)

    beta = fit.beta[0]
    p = permsplit.success_probability(beta, fit.sigma2, q=20000, seed=1)
    lo, hi = permsplit.delta_method_ci(beta, fit.sigma2, fit.beta_sigma2_cov(0), q=20000, seed=1)
    assert 0.0 <= lo <= p <= hi <= 1.0, (lo, p, hi)
    assert permsplit.combine_cis([(0.1, 0.3), (0.2, 0.5)], "union") == (0.1, 0.5)
    assert permsplit.combine_cis([(0.1, 0.3), (0.2, 0.5)], "intersection") == (0.2, 0.3)

    res = permsplit.run_procedure(table, subset_size=4, permutations=3, mc_draws=2000, seed=5)
    assert len(res["sigma2_per_permutation"]) == 3
    assert len(res["estimates"]) == 12
    again = permsplit.run_procedure(table, subset_size=4, permutations=3, mc_draws=2000, seed=5)
    assert again == res

    weighted = table.with_weights(table.compute_weights())
    assert weighted.is_weighted

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ratings.csv")
        with open(path, "w") as f:
            f.write("expert_id,cluster_id,rating\nann,x,1\nann,y,0\nbob,x,0\nbob,y,1\n")
        loaded, experts, clusters = permsplit.RatingsTable.load(path)
        assert (loaded.n_experts, loaded.n_clusters) == (2, 2)
        assert experts == ["ann", "bob"] and clusters == ["x", "y"]
        try:
            permsplit.RatingsTable.load(os.path.join(d, "missing.csv"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file should raise OSError")

    try:
        permsplit.combine_cis([(0.1, 0.2)], "widest")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown mode should raise ValueError")

    report = permsplit.simulate(replications=2, seed=7, n_clusters=10, n_experts=30, subset_size=5,
                                permutations=2, mc_draws=500)
    assert report

    print("smoke test passed")


if __name__ == "__main__":
    main()
