"""Soft decision-tree ensembles with a regularized branching prior.

Each branch carries a logistic gate psi(x; c, a) = 1 / (1 + exp(-(x - c)/a)).
A point takes the left child with weight ``1 - psi`` and the right child with
weight ``psi``, so the bandwidth limit a -> 0 recovers the hard rule
"left iff x_j <= c". A tree's prediction is the gate-weighted average of its
leaf values, and the ensemble prediction is the sum over trees.

The topology update is a Metropolis step over grow / prune / change moves,
with leaf values integrated out analytically: with unit-variance targets the
per-tree model is linear-Gaussian in the leaf weights, so the marginal
likelihood only needs J x J solves (J = number of leaves).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit


@dataclass(frozen=True)
class SplitRule:
    """Gate parameters for one branch: feature index, cutpoint in (0,1), bandwidth > 0."""

    feature: int
    cutpoint: float
    bandwidth: float


@dataclass
class Leaf:
    value: float = 0.0


@dataclass
class Branch:
    rule: SplitRule
    left: "Branch | Leaf"
    right: "Branch | Leaf"


@dataclass(frozen=True)
class ForestPrior:
    """Ensemble size, branching-process prior, leaf prior, and bandwidth prior.

    The probability that a node at depth d is a branch is
    ``gamma * (1 + d) ** -depth_power``. Leaf values are iid Normal(0, sigma_mu^2)
    with sigma_mu defaulting to 3 / (2 sqrt(K)) so the probit of the ensemble
    stays inside (Phi(-3), Phi(3)). Bandwidths are Exponential(bandwidth_rate)
    unless ``fixed_bandwidth`` pins them (useful for hard-split checks).
    """

    n_trees: int = 50
    gamma: float = 0.95
    depth_power: float = 2.0
    sigma_mu: float | None = None
    bandwidth_rate: float = 10.0
    fixed_bandwidth: float | None = None
    max_depth: int | None = None
    p_grow: float = 0.4
    p_prune: float = 0.4
    p_change: float = 0.2

    def __post_init__(self):
        if self.sigma_mu is None:
            object.__setattr__(self, "sigma_mu", 3.0 / (2.0 * math.sqrt(self.n_trees)))

    def branch_prob(self, depth: int) -> float:
        if self.max_depth is not None and depth >= self.max_depth:
            return 0.0
        return self.gamma * (1.0 + depth) ** (-self.depth_power)

    def sample_rule(self, n_features: int, rng: np.random.Generator) -> SplitRule:
        bw = (
            self.fixed_bandwidth
            if self.fixed_bandwidth is not None
            else rng.exponential(1.0 / self.bandwidth_rate)
        )
        return SplitRule(
            feature=int(rng.integers(n_features)),
            cutpoint=float(rng.uniform()),
            bandwidth=float(bw),
        )


class SoftTree:
    """A binary tree of soft splits with real-valued leaves."""

    def __init__(self, root: Branch | Leaf):
        self.root = root

    # ------------------------------------------------------------------ walks

    def leaves(self) -> list[Leaf]:
        out: list[Leaf] = []
        _collect(self.root, out, Leaf)
        return out

    def branches(self) -> list[Branch]:
        out: list[Branch] = []
        _collect(self.root, out, Branch)
        return out

    @property
    def n_leaves(self) -> int:
        return len(self.leaves())

    def leaf_values(self) -> np.ndarray:
        return np.array([lf.value for lf in self.leaves()])

    def set_leaf_values(self, values) -> None:
        leaves = self.leaves()
        if len(values) != len(leaves):
            raise ValueError("leaf value count mismatch")
        for lf, v in zip(leaves, values):
            lf.value = float(v)

    def copy(self) -> "SoftTree":
        return SoftTree(_copy_node(self.root))

    # ------------------------------------------------------------- evaluation

    def leaf_weight_matrix(self, X: np.ndarray) -> np.ndarray:
        """Gate weights of every point over every leaf, shape (n, J).

        Rows are nonnegative and sum to one: the left/right gates at each
        branch are complementary, so the product weights telescope.
        """
        X = np.atleast_2d(X)
        n = X.shape[0]
        out = np.empty((n, self.n_leaves), order="F")
        col = 0

        # explicit stack instead of recursion: this is the inner loop of the
        # whole sampler
        stack = [(self.root, np.ones(n))]
        while stack:
            node, w = stack.pop()
            while isinstance(node, Branch):
                r = node.rule
                p_right = expit((X[:, r.feature] - r.cutpoint) / r.bandwidth)
                stack.append((node.right, w * p_right))
                w = w * (1.0 - p_right)
                node = node.left
            out[:, col] = w
            col += 1
        return out

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_weight_matrix(X) @ self.leaf_values()


class Forest:
    """A sum of soft trees; ``evaluate`` returns b(x) for rows of the unit cube."""

    def __init__(self, trees: list[SoftTree]):
        if not trees:
            raise ValueError("a forest needs at least one tree")
        self.trees = trees

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.evaluate(X)
        return total

    def evaluate_on_lattice(self, axes: list[np.ndarray]) -> np.ndarray:
        """Evaluate b on the tensor-product grid ``axes[0] x axes[1] x ...``.

        Feature j of every tree reads coordinate values from ``axes[j]``. Each
        gate only ever sees one axis, so the logistic is computed per unique
        axis value and broadcast, which is far cheaper than flattening the grid.
        """
        shape = tuple(len(a) for a in axes)
        total = np.zeros(shape)
        d = len(axes)

        def rec(node, w):
            if isinstance(node, Leaf):
                total[...] += w * node.value
                return
            r = node.rule
            p = expit((np.asarray(axes[r.feature], dtype=float) - r.cutpoint) / r.bandwidth)
            bshape = [1] * d
            bshape[r.feature] = shape[r.feature]
            p = p.reshape(bshape)
            rec(node.left, w * (1.0 - p))
            rec(node.right, w * p)

        for tree in self.trees:
            rec(tree.root, np.ones([1] * d))
        return total

    def copy(self) -> "Forest":
        return Forest([t.copy() for t in self.trees])

    def split_counts(self, n_features: int) -> np.ndarray:
        """Number of branch rules using each feature, summed over trees."""
        counts = np.zeros(n_features, dtype=int)
        for tree in self.trees:
            for br in tree.branches():
                counts[br.rule.feature] += 1
        return counts


def _collect(node, out, kind):
    if isinstance(node, Leaf):
        if kind is Leaf:
            out.append(node)
        return
    if kind is Branch:
        out.append(node)
    _collect(node.left, out, kind)
    _collect(node.right, out, kind)


def _copy_node(node):
    if isinstance(node, Leaf):
        return Leaf(node.value)
    return Branch(node.rule, _copy_node(node.left), _copy_node(node.right))


def _depth_of(node, target, depth=0):
    if node is target:
        return depth
    if isinstance(node, Leaf):
        return None
    for child in (node.left, node.right):
        found = _depth_of(child, target, depth + 1)
        if found is not None:
            return found
    return None


# --------------------------------------------------------------------- priors


def leaf_weights(tree: SoftTree, x: np.ndarray) -> np.ndarray:
    """Gate weights of a single point over the tree's leaves."""
    return tree.leaf_weight_matrix(np.asarray(x, dtype=float)[None, :])[0]


def evaluate(forest: Forest, x: np.ndarray) -> float:
    """Ensemble prediction b(x) at a single point."""
    return float(forest.evaluate(np.asarray(x, dtype=float)[None, :])[0])


def sample_prior_tree(prior: ForestPrior, n_features: int, rng: np.random.Generator) -> SoftTree:
    """Draw a tree from the branching-process prior.

    Branching probability decays polynomially in depth, so generation
    terminates almost surely; leaves get independent Normal(0, sigma_mu) values.
    """

    def grow(depth: int):
        if rng.uniform() < prior.branch_prob(depth):
            return Branch(
                rule=prior.sample_rule(n_features, rng),
                left=grow(depth + 1),
                right=grow(depth + 1),
            )
        return Leaf(float(rng.normal(0.0, prior.sigma_mu)))

    return SoftTree(grow(0))


def sample_prior_forest(prior: ForestPrior, n_features: int, rng: np.random.Generator) -> Forest:
    return Forest([sample_prior_tree(prior, n_features, rng) for _ in range(prior.n_trees)])


def single_leaf_forest(prior: ForestPrior) -> Forest:
    """All-root forest with zero leaves, the conventional chain start."""
    return Forest([SoftTree(Leaf(0.0)) for _ in range(prior.n_trees)])


def log_topology_prior(tree: SoftTree, prior: ForestPrior) -> float:
    """Log prior of the branch/leaf skeleton (split-rule densities excluded)."""

    def rec(node, depth):
        p = prior.branch_prob(depth)
        if isinstance(node, Leaf):
            return math.log1p(-p) if p > 0 else 0.0
        if p <= 0:
            return -math.inf
        return math.log(p) + rec(node.left, depth + 1) + rec(node.right, depth + 1)

    return rec(tree.root, 0)


# ---------------------------------------------------------------------- moves


def _growable_leaves(tree: SoftTree, prior: ForestPrior) -> list[Leaf]:
    if prior.max_depth is None:
        return tree.leaves()
    return [lf for lf in tree.leaves() if _depth_of(tree.root, lf) < prior.max_depth]


def _prunable_branches(tree: SoftTree) -> list[Branch]:
    return [
        b for b in tree.branches() if isinstance(b.left, Leaf) and isinstance(b.right, Leaf)
    ]


def _replace_node(root, old, new):
    if root is old:
        return new
    if isinstance(root, Leaf):
        return root
    return Branch(
        root.rule,
        _replace_node(root.left, old, new),
        _replace_node(root.right, old, new),
    )


def propose_move(
    tree: SoftTree,
    kind: str,
    rng: np.random.Generator,
    prior: ForestPrior,
    n_features: int,
) -> tuple[SoftTree, float] | None:
    """Propose a grow / prune / change move.

    Returns ``(proposal, log_ratio)`` where ``log_ratio`` is the full
    non-likelihood part of the Metropolis log acceptance: topology-prior ratio
    plus forward/reverse proposal asymmetry. Split rules are always drawn from
    their prior, so rule densities cancel and never appear. Returns ``None``
    when the move is impossible in the current state (treated as a rejected
    identity proposal by the caller).
    """
    if kind == "grow":
        candidates = _growable_leaves(tree, prior)
        if not candidates:
            return None
        leaf = candidates[int(rng.integers(len(candidates)))]
        depth = _depth_of(tree.root, leaf)
        pd = prior.branch_prob(depth)
        if pd <= 0.0:
            return None
        new_branch = Branch(prior.sample_rule(n_features, rng), Leaf(0.0), Leaf(0.0))
        proposal = SoftTree(_replace_node(tree.root, leaf, new_branch))
        pc = prior.branch_prob(depth + 1)
        log_prior = math.log(pd) + 2.0 * math.log1p(-pc) - math.log1p(-pd)
        log_fwd = math.log(prior.p_grow) - math.log(len(candidates))
        log_rev = math.log(prior.p_prune) - math.log(len(_prunable_branches(proposal)))
        return proposal, log_prior + log_rev - log_fwd

    if kind == "prune":
        candidates = _prunable_branches(tree)
        if not candidates:
            return None
        branch = candidates[int(rng.integers(len(candidates)))]
        depth = _depth_of(tree.root, branch)
        proposal = SoftTree(_replace_node(tree.root, branch, Leaf(0.0)))
        pd = prior.branch_prob(depth)
        pc = prior.branch_prob(depth + 1)
        if pd <= 0.0:
            # the prior forbids this branch outright, so pruning always wins
            return proposal, math.inf
        log_prior = math.log1p(-pd) - math.log(pd) - 2.0 * math.log1p(-pc)
        log_fwd = math.log(prior.p_prune) - math.log(len(candidates))
        log_rev = math.log(prior.p_grow) - math.log(len(_growable_leaves(proposal, prior)))
        return proposal, log_prior + log_rev - log_fwd

    if kind == "change":
        branches = tree.branches()
        if not branches:
            return None
        branch = branches[int(rng.integers(len(branches)))]
        new_branch = Branch(prior.sample_rule(n_features, rng), branch.left, branch.right)
        proposal = SoftTree(_replace_node(tree.root, branch, new_branch))
        return proposal, 0.0

    raise ValueError(f"unknown move kind {kind!r}")


# --------------------------------------------------- marginal likelihood core


def _marginal_from_weights(phi: np.ndarray, r: np.ndarray, sigma_mu: float) -> float:
    """log N(r; 0, sigma_mu^2 Phi Phi' + I) via the J x J Woodbury form."""
    n, nleaf = phi.shape
    b = phi.T @ r
    m = sigma_mu**2 * (phi.T @ phi)
    m[np.diag_indices(nleaf)] += 1.0
    low = np.linalg.cholesky(m)
    half = solve_triangular(low, b, lower=True, check_finite=False)
    logdet = 2.0 * float(np.log(np.diag(low)).sum())
    quad = float(r @ r) - sigma_mu**2 * float(half @ half)
    return -0.5 * (n * math.log(2.0 * math.pi) + logdet + quad)


def tree_marginal_loglik(
    tree: SoftTree, targets: np.ndarray, X: np.ndarray, sigma_mu: float
) -> float:
    """Marginal log likelihood of unit-variance targets with leaf values integrated out."""
    targets = np.asarray(targets, dtype=float)
    if not np.all(np.isfinite(targets)):
        raise ValueError("targets must be finite")
    return _marginal_from_weights(tree.leaf_weight_matrix(X), targets, sigma_mu)


def draw_leaf_values(
    tree: SoftTree,
    targets: np.ndarray,
    X: np.ndarray,
    sigma_mu: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Conjugate Gaussian draw of the leaf values given unit-variance targets."""
    phi = tree.leaf_weight_matrix(X)
    return _draw_leaf_values_from_weights(phi, np.asarray(targets, dtype=float), sigma_mu, rng)


def _draw_leaf_values_from_weights(phi, targets, sigma_mu, rng):
    nleaf = phi.shape[1]
    prec = phi.T @ phi
    prec[np.diag_indices(nleaf)] += 1.0 / sigma_mu**2
    low = np.linalg.cholesky(prec)
    half = solve_triangular(low, phi.T @ targets, lower=True, check_finite=False)
    return solve_triangular(
        low.T, half + rng.standard_normal(nleaf), lower=False, check_finite=False
    )


# ------------------------------------------------------------------- backfit


def backfit_sweep(
    forest: Forest,
    latent_z: np.ndarray,
    X: np.ndarray,
    prior: ForestPrior,
    rng: np.random.Generator,
    phis: list[np.ndarray] | None = None,
) -> Forest:
    """One Bayesian back-fitting pass over all trees, in place.

    For each tree: form the partial residual against the rest of the ensemble,
    Metropolis-update the topology with leaf values integrated out, Metropolis-
    update the branch bandwidths on the log scale, then redraw leaf values from
    their conjugate posterior. The forest prediction cache is maintained
    incrementally so each tree costs O(n x J). ``phis`` may carry the current
    per-tree weight matrices on X to skip their recomputation.
    """
    z = np.asarray(latent_z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("latent targets must be finite")
    X = np.atleast_2d(X)
    n_features = X.shape[1]
    sigma_mu = prior.sigma_mu

    if phis is None:
        phis = [t.leaf_weight_matrix(X) for t in forest.trees]
    fits = [phis[k] @ forest.trees[k].leaf_values() for k in range(forest.n_trees)]
    total = np.sum(fits, axis=0)

    move_probs = np.cumsum([prior.p_grow, prior.p_prune, prior.p_change])
    move_probs = move_probs / move_probs[-1]

    for k, tree in enumerate(forest.trees):
        r = z - (total - fits[k])
        phi = phis[k]
        cur_ml = _marginal_from_weights(phi, r, sigma_mu)

        kind = ("grow", "prune", "change")[int(np.searchsorted(move_probs, rng.uniform()))]
        proposed = propose_move(tree, kind, rng, prior, n_features)
        if proposed is not None:
            cand, log_ratio = proposed
            cand_phi = cand.leaf_weight_matrix(X)
            cand_ml = _marginal_from_weights(cand_phi, r, sigma_mu)
            if math.log(rng.uniform()) < cand_ml - cur_ml + log_ratio:
                tree = cand
                forest.trees[k] = tree
                phi, cur_ml = cand_phi, cand_ml

        if prior.fixed_bandwidth is None and tree.branches():
            cand = tree.copy()
            log_jac = 0.0
            log_prior_diff = 0.0
            for br in cand.branches():
                step = rng.normal(0.0, 0.3)
                new_bw = br.rule.bandwidth * math.exp(step)
                log_jac += step  # d(alpha')/d(log alpha') for the log-scale walk
                log_prior_diff += -prior.bandwidth_rate * (new_bw - br.rule.bandwidth)
                br.rule = replace(br.rule, bandwidth=new_bw)
            cand_phi = cand.leaf_weight_matrix(X)
            cand_ml = _marginal_from_weights(cand_phi, r, sigma_mu)
            if math.log(rng.uniform()) < cand_ml - cur_ml + log_prior_diff + log_jac:
                tree = cand
                forest.trees[k] = tree
                phi, cur_ml = cand_phi, cand_ml

        values = _draw_leaf_values_from_weights(phi, r, sigma_mu, rng)
        tree.set_leaf_values(values)
        new_fit = phi @ values
        total += new_fit - fits[k]
        fits[k] = new_fit
        phis[k] = phi

    return forest


# -------------------------------------------------------------- serialization


def _node_to_obj(node):
    if isinstance(node, Leaf):
        return {"leaf": node.value}
    return {
        "feature": node.rule.feature,
        "cutpoint": node.rule.cutpoint,
        "bandwidth": node.rule.bandwidth,
        "left": _node_to_obj(node.left),
        "right": _node_to_obj(node.right),
    }


def _node_from_obj(obj):
    if "leaf" in obj:
        return Leaf(float(obj["leaf"]))
    return Branch(
        SplitRule(int(obj["feature"]), float(obj["cutpoint"]), float(obj["bandwidth"])),
        _node_from_obj(obj["left"]),
        _node_from_obj(obj["right"]),
    )


def forest_to_json(forest: Forest) -> str:
    """One-line JSON document; float repr round-trips exactly."""
    return json.dumps({"trees": [_node_to_obj(t.root) for t in forest.trees]})


def forest_from_json(doc: str) -> Forest:
    obj = json.loads(doc)
    return Forest([SoftTree(_node_from_obj(t)) for t in obj["trees"]])
