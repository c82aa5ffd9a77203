import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from frailforest.forest import (
    Branch,
    Forest,
    ForestPrior,
    Leaf,
    SoftTree,
    SplitRule,
    backfit_sweep,
    draw_leaf_values,
    evaluate,
    forest_from_json,
    forest_to_json,
    leaf_weights,
    log_topology_prior,
    propose_move,
    sample_prior_forest,
    sample_prior_tree,
    single_leaf_forest,
    tree_marginal_loglik,
)


def depth1_tree(cutpoint=0.5, bandwidth=0.1, left=0.0, right=0.0, feature=0):
    return SoftTree(
        Branch(SplitRule(feature, cutpoint, bandwidth), Leaf(left), Leaf(right))
    )


def dense_marginal(phi, r, sigma_mu):
    """Independent n x n evaluation of log N(r; 0, sigma_mu^2 Phi Phi' + I)."""
    n = phi.shape[0]
    cov = sigma_mu**2 * phi @ phi.T + np.eye(n)
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    quad = r @ np.linalg.solve(cov, r)
    return -0.5 * (n * math.log(2 * math.pi) + logdet + quad)


class TestLeafWeights:
    def test_single_leaf(self):
        w = leaf_weights(SoftTree(Leaf(1.0)), np.array([0.3]))
        assert w == pytest.approx([1.0])

    def test_cutpoint_gives_half(self):
        for bw in (0.01, 0.1, 1.0):
            w = leaf_weights(depth1_tree(bandwidth=bw), np.array([0.5]))
            assert w == pytest.approx([0.5, 0.5])

    def test_tiny_bandwidth_recovers_hard_split(self):
        # oracle: the indicator rule x <= C sends the point left
        tree = depth1_tree(cutpoint=0.5, bandwidth=1e-8)
        for x, hard_left in [(0.3, 1.0), (0.7, 0.0)]:
            w = leaf_weights(tree, np.array([x]))
            assert w[0] == pytest.approx(hard_left, abs=1e-12)
            assert w[1] == pytest.approx(1.0 - hard_left, abs=1e-12)

    @settings(deadline=None, max_examples=60)
    @given(st.integers(min_value=0, max_value=10**6), st.integers(min_value=0, max_value=10**6))
    def test_weights_sum_to_one(self, tree_seed, x_seed):
        rng = np.random.default_rng(tree_seed)
        prior = ForestPrior(n_trees=1, gamma=0.7, depth_power=1.0)
        tree = sample_prior_tree(prior, 3, rng)
        x = np.random.default_rng(x_seed).uniform(size=3)
        w = leaf_weights(tree, x)
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.all(w >= 0) and np.all(w <= 1)


class TestEvaluate:
    def test_constant_leaf(self):
        forest = Forest([SoftTree(Leaf(0.7))])
        for x in ([0.1], [0.9]):
            assert evaluate(forest, np.array(x)) == pytest.approx(0.7)

    def test_two_copies_add(self):
        forest = Forest([SoftTree(Leaf(0.7)), SoftTree(Leaf(0.7))])
        assert evaluate(forest, np.array([0.5])) == pytest.approx(1.4)

    def test_matches_per_tree_sum(self, rng):
        prior = ForestPrior(n_trees=7, gamma=0.8)
        forest = sample_prior_forest(prior, 2, rng)
        X = rng.uniform(size=(40, 2))
        total = sum(t.evaluate(X) for t in forest.trees)
        assert np.max(np.abs(forest.evaluate(X) - total)) < 1e-12

    def test_lattice_matches_flat_evaluation(self, rng):
        prior = ForestPrior(n_trees=5, gamma=0.9)
        forest = sample_prior_forest(prior, 3, rng)
        axes = [np.linspace(0, 1, 4), np.linspace(0, 1, 3), np.linspace(0, 1, 5)]
        lattice = forest.evaluate_on_lattice(axes)
        g0, g1, g2 = np.meshgrid(*axes, indexing="ij")
        flat = forest.evaluate(np.column_stack([g0.ravel(), g1.ravel(), g2.ravel()]))
        assert np.max(np.abs(lattice.ravel() - flat)) < 1e-12

    def test_bounded_by_summed_leaf_magnitudes(self, rng):
        prior = ForestPrior(n_trees=10, gamma=0.9)
        forest = sample_prior_forest(prior, 2, rng)
        bound = sum(np.abs(t.leaf_values()).max() for t in forest.trees)
        X = rng.uniform(size=(200, 2))
        vals = forest.evaluate(X)
        assert np.all(np.isfinite(vals))
        assert np.max(np.abs(vals)) <= bound + 1e-12


class TestPriorSampling:
    def test_gamma_zero_always_leaf(self, rng):
        prior = ForestPrior(n_trees=1, gamma=0.0)
        for _ in range(50):
            tree = sample_prior_tree(prior, 2, rng)
            assert isinstance(tree.root, Leaf)

    def test_root_branch_probability(self, rng):
        prior = ForestPrior(n_trees=1, gamma=0.95, depth_power=2.0)
        n = 100_000
        branches = sum(
            isinstance(sample_prior_tree(prior, 2, rng).root, Branch) for _ in range(n)
        )
        assert branches / n == pytest.approx(0.95, abs=0.01)

    def test_leaf_value_moments(self, rng):
        prior = ForestPrior(n_trees=1, gamma=0.0)
        assert prior.sigma_mu == pytest.approx(1.5)
        vals = np.array(
            [sample_prior_tree(prior, 2, rng).root.value for _ in range(100_000)]
        )
        assert vals.mean() == pytest.approx(0.0, abs=3 * prior.sigma_mu / math.sqrt(len(vals)))
        assert vals.std() == pytest.approx(prior.sigma_mu, rel=0.02)

    def test_default_leaf_sd(self):
        assert ForestPrior(n_trees=50).sigma_mu == pytest.approx(3.0 / (2.0 * math.sqrt(50)))

    def test_single_leaf_forest_prior_variance(self, rng):
        # for single-leaf trees the ensemble variance is exactly K sigma_mu^2
        prior = ForestPrior(n_trees=9, gamma=0.0)
        draws = np.array(
            [
                evaluate(sample_prior_forest(prior, 2, rng), np.array([0.4, 0.6]))
                for _ in range(20_000)
            ]
        )
        expected_var = prior.n_trees * prior.sigma_mu**2
        assert draws.mean() == pytest.approx(0.0, abs=3 * math.sqrt(expected_var / len(draws)))
        assert draws.var() == pytest.approx(expected_var, rel=0.05)


class TestMoves:
    def test_grow_on_single_leaf(self, rng):
        prior = ForestPrior(n_trees=1, gamma=0.5)
        tree = SoftTree(Leaf(0.0))
        cand, _ = propose_move(tree, "grow", rng, prior, 2)
        assert isinstance(cand.root, Branch)
        assert cand.n_leaves == 2

    def test_prune_inverts_grow(self, rng):
        prior = ForestPrior(n_trees=1, gamma=0.5)
        grown, _ = propose_move(SoftTree(Leaf(0.0)), "grow", rng, prior, 2)
        pruned, _ = propose_move(grown, "prune", rng, prior, 2)
        assert isinstance(pruned.root, Leaf)

    def test_prune_on_single_leaf_is_noop(self, rng):
        prior = ForestPrior(n_trees=1, gamma=0.5)
        assert propose_move(SoftTree(Leaf(0.0)), "prune", rng, prior, 2) is None

    def test_grow_prune_ratio_antisymmetry(self, rng):
        # q and prior contributions of the move pair must cancel exactly
        prior = ForestPrior(n_trees=1, gamma=0.6, depth_power=2.0)
        tree = SoftTree(Leaf(0.0))
        grown, up = propose_move(tree, "grow", rng, prior, 2)
        _, down = propose_move(grown, "prune", rng, prior, 2)
        assert up + down == pytest.approx(0.0, abs=1e-12)


class TestMarginal:
    def test_single_leaf_zero_target(self):
        sigma_mu = 0.8
        tree = SoftTree(Leaf(0.0))
        got = tree_marginal_loglik(tree, np.zeros(1), np.zeros((1, 1)), sigma_mu)
        expected = -0.5 * (math.log(2 * math.pi) + math.log(sigma_mu**2 + 1.0))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_zero_targets_reduce_to_logdet(self, rng):
        prior = ForestPrior(n_trees=1, gamma=0.9)
        tree = sample_prior_tree(prior, 2, rng)
        X = rng.uniform(size=(8, 2))
        phi = tree.leaf_weight_matrix(X)
        sigma_mu = 0.5
        cov = sigma_mu**2 * phi @ phi.T + np.eye(8)
        expected = -0.5 * np.linalg.slogdet(cov)[1] - 4.0 * math.log(2 * math.pi)
        got = tree_marginal_loglik(tree, np.zeros(8), X, sigma_mu)
        assert got == pytest.approx(expected, abs=1e-10)

    def test_matches_dense_oracle(self, rng):
        tree = SoftTree(
            Branch(
                SplitRule(0, 0.4, 0.07),
                Branch(SplitRule(1, 0.6, 0.2), Leaf(0.0), Leaf(0.0)),
                Leaf(0.0),
            )
        )
        X = rng.uniform(size=(5, 2))
        r = rng.normal(size=5)
        got = tree_marginal_loglik(tree, r, X, 0.45)
        want = dense_marginal(tree.leaf_weight_matrix(X), r, 0.45)
        assert got == pytest.approx(want, abs=1e-8)

    def test_invariant_to_leaf_reordering(self, rng):
        from frailforest.forest import _marginal_from_weights

        phi = np.random.default_rng(1).dirichlet(np.ones(4), size=12)
        r = rng.normal(size=12)
        base = _marginal_from_weights(phi, r, 0.3)
        for perm_seed in range(5):
            perm = np.random.default_rng(perm_seed).permutation(4)
            assert _marginal_from_weights(phi[:, perm], r, 0.3) == pytest.approx(
                base, abs=1e-12
            )

    def test_nonfinite_targets_rejected(self):
        tree = SoftTree(Leaf(0.0))
        with pytest.raises(ValueError):
            tree_marginal_loglik(tree, np.array([np.nan]), np.zeros((1, 1)), 0.5)


class TestDrawLeafValues:
    def test_scalar_conjugacy(self, rng):
        sigma_mu = 0.7
        n = 50
        r = rng.normal(loc=1.3, size=n)
        mean_expected = n * r.mean() / (n + 1.0 / sigma_mu**2)
        sd_expected = math.sqrt(1.0 / (n + 1.0 / sigma_mu**2))
        tree = SoftTree(Leaf(0.0))
        X = np.zeros((n, 1))
        draws = np.array(
            [draw_leaf_values(tree, r, X, sigma_mu, rng)[0] for _ in range(4000)]
        )
        assert draws.mean() == pytest.approx(
            mean_expected, abs=4 * sd_expected / math.sqrt(len(draws))
        )
        assert draws.std() == pytest.approx(sd_expected, rel=0.1)

    def test_sigma_mu_to_zero_pins_leaves(self, rng):
        tree = depth1_tree()
        X = rng.uniform(size=(30, 1))
        r = rng.normal(size=30)
        vals = draw_leaf_values(tree, r, X, 1e-8, rng)
        assert np.max(np.abs(vals)) < 1e-6

    def test_empty_leaf_falls_back_to_prior(self, rng):
        # all mass flows right, so the left leaf posterior is its prior
        tree = depth1_tree(cutpoint=0.01, bandwidth=1e-9)
        X = np.full((40, 1), 0.9)
        r = rng.normal(size=40)
        sigma_mu = 0.6
        draws = np.array(
            [draw_leaf_values(tree, r, X, sigma_mu, rng)[0] for _ in range(4000)]
        )
        assert draws.mean() == pytest.approx(0.0, abs=4 * sigma_mu / math.sqrt(len(draws)))
        assert draws.std() == pytest.approx(sigma_mu, rel=0.1)


class TestBackfit:
    def test_single_leaf_stationary_distribution(self, rng):
        # gamma=0 freezes the topology, so each sweep is an exact conjugate draw
        prior = ForestPrior(n_trees=1, gamma=0.0, sigma_mu=0.9)
        forest = single_leaf_forest(prior)
        n = 100
        z = rng.normal(loc=0.8, size=n)
        X = rng.uniform(size=(n, 1))
        post_mean = n * z.mean() / (n + 1.0 / prior.sigma_mu**2)
        post_sd = math.sqrt(1.0 / (n + 1.0 / prior.sigma_mu**2))
        n_sweeps = 3000
        chain = np.empty(n_sweeps)
        for i in range(n_sweeps):
            backfit_sweep(forest, z, X, prior, rng)
            chain[i] = forest.trees[0].root.value
        assert chain.mean() == pytest.approx(
            post_mean, abs=3 * post_sd / math.sqrt(n_sweeps)
        )

    def test_self_consistent_targets_accept_change_more(self, rng):
        # paired runs: change moves on perfectly fitted targets vs noisy targets
        def change_acceptance(noise_sd, seed):
            local = np.random.default_rng(seed)
            prior = ForestPrior(
                n_trees=1, gamma=0.9, sigma_mu=0.5, fixed_bandwidth=0.05,
                p_grow=0.0, p_prune=0.0, p_change=1.0,
            )
            tree = depth1_tree(cutpoint=0.3, bandwidth=0.05, left=-1.0, right=1.0)
            forest = Forest([tree])
            X = local.uniform(size=(80, 1))
            z = forest.evaluate(X) + noise_sd * local.standard_normal(80)
            accepted = 0
            trials = 400
            current = forest.trees[0]
            for _ in range(trials):
                r = z  # K=1: the partial residual is the target itself
                cand, ratio = propose_move(current, "change", local, prior, 1)
                cur_ml = tree_marginal_loglik(current, r, X, prior.sigma_mu)
                cand_ml = tree_marginal_loglik(cand, r, X, prior.sigma_mu)
                if math.log(local.uniform()) < cand_ml - cur_ml + ratio:
                    current = cand
                    accepted += 1
            return accepted / trials

        clean = change_acceptance(0.0, 11)
        noisy = change_acceptance(3.0, 11)
        assert clean >= noisy

    def test_forest_stays_bounded_after_sweeps(self, rng):
        prior = ForestPrior(n_trees=5, gamma=0.8)
        forest = single_leaf_forest(prior)
        X = rng.uniform(size=(60, 2))
        z = rng.normal(size=60)
        for _ in range(20):
            backfit_sweep(forest, z, X, prior, rng)
        bound = sum(np.abs(t.leaf_values()).max() for t in forest.trees)
        vals = forest.evaluate(rng.uniform(size=(50, 2)))
        assert np.all(np.isfinite(vals))
        assert np.max(np.abs(vals)) <= bound + 1e-9


SHAPE_IDS = ("leaf", "split", "split-left", "split-right", "split-both")


def shape_of(tree):
    root = tree.root
    if isinstance(root, Leaf):
        return "leaf"
    left_b = isinstance(root.left, Branch)
    right_b = isinstance(root.right, Branch)
    if left_b and right_b:
        return "split-both"
    if left_b:
        return "split-left"
    if right_b:
        return "split-right"
    return "split"


def oracle_shape_posterior(x, r, gamma, sigma_mu, bandwidth, n_cuts=32):
    """Enumerate depth <= 2 skeletons, integrating cutpoints on a midpoint grid
    and leaf values analytically through the dense n x n Gaussian marginal."""
    cuts = (np.arange(n_cuts) + 0.5) / n_cuts
    g0, g1 = gamma, gamma / 4.0

    def left_gate(c):
        return 1.0 - expit((x - c) / bandwidth)

    def mean_marginal(phi_builder, n_branches):
        grids = np.meshgrid(*([cuts] * n_branches), indexing="ij")
        flat = [g.ravel() for g in grids]
        vals = np.empty(flat[0].shape[0])
        for i in range(flat[0].shape[0]):
            phi = phi_builder(*[f[i] for f in flat])
            vals[i] = dense_marginal(phi, r, sigma_mu)
        peak = vals.max()
        return peak + math.log(np.mean(np.exp(vals - peak)))

    def phi_split(c):
        wl = left_gate(c)
        return np.column_stack([wl, 1 - wl])

    def phi_split_left(c0, c1):
        w0 = left_gate(c0)
        w1 = left_gate(c1)
        return np.column_stack([w0 * w1, w0 * (1 - w1), 1 - w0])

    def phi_split_right(c0, c1):
        w0 = left_gate(c0)
        w1 = left_gate(c1)
        return np.column_stack([w0, (1 - w0) * w1, (1 - w0) * (1 - w1)])

    def phi_split_both(c0, c1, c2):
        w0 = left_gate(c0)
        wl = left_gate(c1)
        wr = left_gate(c2)
        return np.column_stack(
            [w0 * wl, w0 * (1 - wl), (1 - w0) * wr, (1 - w0) * (1 - wr)]
        )

    log_topo = {
        "leaf": math.log(1 - g0),
        "split": math.log(g0) + 2 * math.log(1 - g1),
        "split-left": math.log(g0) + math.log(g1) + math.log(1 - g1),
        "split-right": math.log(g0) + math.log(g1) + math.log(1 - g1),
        "split-both": math.log(g0) + 2 * math.log(g1),
    }
    log_ml = {
        "leaf": dense_marginal(np.ones((x.shape[0], 1)), r, sigma_mu),
        "split": mean_marginal(phi_split, 1),
        "split-left": mean_marginal(phi_split_left, 2),
        "split-right": mean_marginal(phi_split_right, 2),
        "split-both": mean_marginal(phi_split_both, 3),
    }
    log_post = np.array([log_topo[s] + log_ml[s] for s in SHAPE_IDS])
    post = np.exp(log_post - log_post.max())
    return post / post.sum()


@pytest.mark.slow
def test_topology_chain_matches_enumerated_posterior():
    rng = np.random.default_rng(77)
    x = np.linspace(0.04, 0.96, 20)
    r = 0.6 * np.sign(x - 0.55) + 0.25 * rng.standard_normal(20)
    gamma, sigma_mu, bandwidth = 0.5, 0.5, 0.1

    oracle = oracle_shape_posterior(x, r, gamma, sigma_mu, bandwidth)

    prior = ForestPrior(
        n_trees=1, gamma=gamma, depth_power=2.0, sigma_mu=sigma_mu,
        fixed_bandwidth=bandwidth, max_depth=2,
    )
    forest = single_leaf_forest(prior)
    X = x[:, None]
    n_sweeps = 150_000
    visits = dict.fromkeys(SHAPE_IDS, 0)
    for _ in range(n_sweeps):
        backfit_sweep(forest, r, X, prior, rng)
        visits[shape_of(forest.trees[0])] += 1
    freqs = np.array([visits[s] / n_sweeps for s in SHAPE_IDS])

    tv = 0.5 * np.abs(freqs - oracle).sum()
    assert tv < 0.02, f"total variation {tv:.4f}, chain {freqs}, oracle {oracle}"


class TestSerialization:
    def test_round_trip_exact(self, rng):
        prior = ForestPrior(n_trees=4, gamma=0.9)
        forest = sample_prior_forest(prior, 3, rng)
        clone = forest_from_json(forest_to_json(forest))
        X = rng.uniform(size=(25, 3))
        assert np.array_equal(clone.evaluate(X), forest.evaluate(X))
        assert forest_to_json(clone) == forest_to_json(forest)

    def test_topology_prior_finite(self, rng):
        prior = ForestPrior(n_trees=1, gamma=0.9)
        for _ in range(20):
            tree = sample_prior_tree(prior, 2, rng)
            assert math.isfinite(log_topology_prior(tree, prior))
