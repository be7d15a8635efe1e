import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from qrfvar.errors import ConfigError, DimensionMismatch
from qrfvar.forest import Forest, ForestConfig, Tree, fit_tree, forest_weights, predict_cdf, predict_quantile, tree_weights
from qrfvar.market import OfflineDataset


def empirical_quantile(y, alpha):
    """Smallest order statistic whose exact empirical CDF reaches alpha (less the 1e-12 level tolerance)."""
    ys = sorted(y)
    n = len(ys)
    a = Fraction(alpha) - Fraction(1, 10**12)
    for k in range(1, n + 1):
        if Fraction(k, n) >= a:
            return ys[k - 1]
    return ys[-1]


def root_only(n):
    return ForestConfig(n_trees=1, bootstrap=False, min_node_size=n)


def toy(n=200, d=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (n, d))
    y = 3 * x[:, 0] + rng.standard_normal(n) * (0.5 + x[:, -1])
    return x, y


def leaf(members, n_train):
    members = np.asarray(members, dtype=np.int64)
    return dict(feature=np.array([-1]), threshold=np.zeros(1), left=np.array([-1]), right=np.array([-1]),
                leaf_start=np.array([0]), leaf_count=np.array([members.size]), members=members)


def hand_forest(trees, x, y):
    """Assemble a Forest from per-tree flat arrays."""
    def cat(key, dtype):
        return np.concatenate([np.asarray(t[key], dtype=dtype) for t in trees])

    def offsets(key):
        return np.concatenate([[0], np.cumsum([len(t[key]) for t in trees])]).astype(np.int64)

    return Forest(ForestConfig(n_trees=len(trees)), np.asarray(x, float), np.asarray(y, float),
                  cat("feature", np.int64), cat("threshold", float), cat("left", np.int64), cat("right", np.int64),
                  cat("leaf_start", np.int64), cat("leaf_count", np.int64), offsets("feature"),
                  cat("members", np.int64), offsets("members"), np.empty(0, np.int64),
                  np.zeros(len(trees) + 1, np.int64))


# -- config -------------------------------------------------------------------


def test_config_defaults():
    cfg = ForestConfig()
    assert cfg.n_trees == 500 and cfg.resolved_mtry(4) == 2 and cfg.resolved_min_node_size(1000) == 5
    assert ForestConfig(honest=True).resolved_min_node_size(1000) == 10


def test_leaf_schedule():
    cfg = ForestConfig(leaf_scale=1.0, leaf_exponent=0.5)
    assert [cfg.resolved_min_node_size(n) for n in (16, 1000, 4000, 16000)] == [5, 32, 64, 127]


@pytest.mark.parametrize("field,value", [("n_trees", 0), ("mtry", 0), ("min_node_size", 0),
                                         ("min_child_fraction", 0.6), ("max_leaf_fraction", 0.0),
                                         ("leaf_exponent", 1.0), ("honest", 1)])
def test_config_validation(field, value):
    with pytest.raises(ConfigError) as info:
        ForestConfig(**{field: value})
    assert info.value.field == field


def test_mtry_above_d_rejected():
    x, y = toy(d=2)
    with pytest.raises(ConfigError):
        Forest.fit(x, y, ForestConfig(n_trees=1, mtry=3))


def test_config_round_trip():
    cfg = ForestConfig(n_trees=7, honest=True, leaf_scale=0.5)
    assert ForestConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ForestConfig.from_dict({"trees": 3})


# -- trees --------------------------------------------------------------------


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        Forest.fit(np.empty((0, 2)), np.empty(0))


def test_single_point_tree():
    tree = fit_tree(OfflineDataset(np.array([[1.0, 2.0]]), np.array([5.0])), ForestConfig(bootstrap=False))
    assert tree.n_nodes == 1
    np.testing.assert_array_equal(tree.leaf_members(0), [0])


def test_constant_response_constant_prediction():
    x, _ = toy()
    forest = Forest.fit(x, np.full(x.shape[0], 2.5), ForestConfig(n_trees=10))
    q = forest.predict_quantile(np.random.default_rng(1).uniform(-1, 2, (50, 3)), [0.1, 0.5, 0.99])
    assert np.all(q == 2.5)


def test_min_node_size_n_gives_root_only():
    x, y = toy(n=50)
    tree = fit_tree(OfflineDataset(x, y), root_only(50))
    assert tree.n_nodes == 1 and tree.leaf_members(0).size == 50


def test_leaves_respect_min_node_size():
    x, y = toy(n=400)
    forest = Forest.fit(x, y, ForestConfig(n_trees=20, min_node_size=12))
    assert forest.leaf_sizes().min() >= 12
    honest = Forest.fit(x, y, ForestConfig(n_trees=20, honest=True, min_node_size=8))
    assert honest.leaf_sizes().min() >= 8


def test_internal_nodes_partition_sample():
    x, y = toy(n=300)
    cfg = ForestConfig(n_trees=1, bootstrap=False, min_node_size=5)
    tree = fit_tree(OfflineDataset(x, y), cfg)
    seen = np.concatenate([tree.leaf_members(node) for node in tree.leaves])
    np.testing.assert_array_equal(np.sort(seen), np.arange(300))
    for node in tree.leaves:
        for i in tree.leaf_members(node):
            assert tree.apply(x[i]) == node


def test_max_leaf_fraction_relaxes_balance():
    x = np.concatenate([np.zeros(90), np.arange(1.0, 11.0)])[:, None]
    y = np.arange(100.0)
    strict = ForestConfig(n_trees=1, bootstrap=False, min_node_size=1, min_child_fraction=0.5)
    assert fit_tree(OfflineDataset(x, y), strict).n_nodes == 1
    relaxed = strict.replace(max_leaf_fraction=0.5)
    assert fit_tree(OfflineDataset(x, y), relaxed).n_nodes > 1


def test_honest_members_disjoint_from_structure():
    x, y = toy(n=300)
    forest = Forest.fit(x, y, ForestConfig(n_trees=15, honest=True, seed=3))
    for b in range(forest.n_trees):
        tree = forest.tree(b)
        assert tree.structure.size > 0
        assert not np.intersect1d(tree.structure, tree.members).size


# -- weights ------------------------------------------------------------------


def test_root_only_weights_uniform():
    x, y = toy(n=4)
    tree = fit_tree(OfflineDataset(x, y), root_only(4))
    np.testing.assert_array_equal(tree_weights(tree, x[0]), np.full(4, 0.25))


def test_two_member_leaf_weights():
    tree = Tree(feature=np.array([0, -1, -1]), threshold=np.array([0.5, 0.0, 0.0]),
                left=np.array([1, -1, -1]), right=np.array([2, -1, -1]),
                leaf_start=np.array([0, 0, 2]), leaf_count=np.array([0, 2, 8]),
                members=np.array([2, 7, 0, 1, 3, 4, 5, 6, 8, 9]), n_train=10)
    w = tree_weights(tree, np.array([0.3]))
    expected = np.zeros(10)
    expected[[2, 7]] = 0.5
    np.testing.assert_array_equal(w, expected)
    assert w.sum() == 1.0


def test_bootstrap_duplicates_count_with_multiplicity():
    forest = hand_forest([leaf([0, 0, 1], 2)], np.zeros((2, 1)), [1.0, 2.0])
    np.testing.assert_allclose(forest.weights(np.zeros(1)), [2 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_forest_weight_examples():
    x, y = np.zeros((2, 1)), np.array([1.0, 2.0])
    np.testing.assert_array_equal(hand_forest([leaf([0], 2), leaf([1], 2)], x, y).weights(x[0]), [0.5, 0.5])
    x4, y4 = toy(n=6)
    two_roots = Forest.fit(x4, y4, root_only(6).replace(n_trees=2))
    np.testing.assert_allclose(forest_weights(two_roots, x4[0]), np.full(6, 1 / 6), rtol=0, atol=1e-15)
    x, y = toy(n=100)
    one = Forest.fit(x, y, ForestConfig(n_trees=1, seed=4))
    np.testing.assert_array_equal(one.weights(x[5]), tree_weights(one.tree(0), x[5]))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 120), st.integers(1, 4), st.booleans(), st.booleans(), st.integers(0, 10_000))
def test_weights_nonnegative_sum_to_one(n, d, honest, bootstrap, seed):
    assume(not honest or n >= 4)
    x, y = toy(n, d, seed)
    forest = Forest.fit(x, y, ForestConfig(n_trees=8, honest=honest, bootstrap=bootstrap, min_node_size=2,
                                           seed=seed))
    for q in np.random.default_rng(seed).uniform(-0.5, 1.5, (5, d)):
        w = forest.weights(q)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) <= 1e-12


# -- quantiles and CDF --------------------------------------------------------


def test_uniform_quantile_examples():
    x = np.zeros((5, 1))
    y = np.array([4.0, 2.0, 5.0, 1.0, 3.0])
    forest = Forest.fit(x, y, root_only(5))
    assert forest.predict_quantile(x[0], 0.5) == 3.0
    assert forest.predict_quantile(x[0], 0.999) == 5.0
    assert predict_quantile(forest, x[0], 0.2) == 1.0
    assert predict_quantile(forest, x[0], 0.6) == 3.0
    assert predict_quantile(forest, x[0], 0.2000001) == 2.0


def test_cdf_examples():
    x, y = toy(n=50)
    forest = Forest.fit(x, y, ForestConfig(n_trees=10))
    assert predict_cdf(forest, x[0], y.min() - 1) == 0.0
    assert predict_cdf(forest, x[0], y.max() + 1) == 1.0
    assert predict_cdf(forest, x[0], y.max()) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**32 - 1), st.data())
def test_root_only_tree_equals_empirical_quantile(n, seed, data):
    rng = np.random.default_rng(seed)
    y = np.round(rng.standard_normal(n) * 10, int(rng.integers(0, 3)))
    x = rng.uniform(size=(n, 2))
    forest = Forest.fit(x, y, root_only(n))
    k = data.draw(st.integers(1, n))
    alphas = [rng.uniform(1e-6, 1 - 1e-6), min(k / n, 0.999999)]
    for a in alphas:
        assert forest.predict_quantile(x[0], a) == empirical_quantile(y, a)


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 150), st.integers(0, 10_000))
def test_quantile_monotone_in_level_and_cdf_consistent(n, seed):
    x, y = toy(n, 2, seed)
    forest = Forest.fit(x, y, ForestConfig(n_trees=10, seed=seed))
    alphas = np.sort(np.random.default_rng(seed).uniform(0.01, 0.99, 6))
    q = forest.predict_quantile(x[:7], alphas)
    assert np.all(np.diff(q, axis=1) >= 0)
    for j, a in enumerate(alphas):
        assert np.all(forest.predict_cdf(x[:7], q[:, j]) >= a - 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 150), st.integers(-1000, 1000), st.booleans(), st.integers(0, 10_000))
def test_shift_equivariance(n, shift, honest, seed):
    assume(not honest or n >= 20)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 3))
    y = rng.integers(-50, 50, n).astype(float) / 4
    cfg = ForestConfig(n_trees=6, honest=honest, min_node_size=3, seed=seed)
    queries = rng.uniform(size=(6, 3))
    base = Forest.fit(x, y, cfg).predict_quantile(queries, [0.1, 0.5, 0.95])
    moved = Forest.fit(x, y + shift, cfg).predict_quantile(queries, [0.1, 0.5, 0.95])
    np.testing.assert_array_equal(moved, base + shift)


def test_deterministic_and_thread_invariant():
    x, y = toy(n=500, d=4)
    cfg = ForestConfig(n_trees=40, seed=11)
    a = Forest.fit(x, y, cfg, threads=1)
    b = Forest.fit(x, y, cfg, threads=4)
    for name in ("feature", "threshold", "members"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    q = x[:37]
    np.testing.assert_array_equal(a.predict_quantile(q, [0.9, 0.99], threads=1),
                                  b.predict_quantile(q, [0.9, 0.99], threads=3))
    assert not np.array_equal(a.feature, Forest.fit(x, y, cfg.replace(seed=12)).feature)


def test_caller_arrays_untouched():
    x, y = toy(n=50)
    Forest.fit(x, y, ForestConfig(n_trees=2))
    x[0, 0] = 1.0
    y[0] = 1.0


def test_prediction_shapes_and_dimension_check():
    x, y = toy(n=60)
    forest = Forest.fit(x, y, ForestConfig(n_trees=5))
    assert np.ndim(forest.predict_quantile(x[0], 0.9)) == 0
    assert forest.predict_quantile(x[:4], 0.9).shape == (4,)
    assert forest.predict_quantile(x[:4], [0.9, 0.5]).shape == (4, 2)
    assert forest.predict_quantile(x[0], [0.9, 0.5]).shape == (2,)
    unsorted = forest.predict_quantile(x[:4], [0.9, 0.5])
    np.testing.assert_array_equal(unsorted[:, 0], forest.predict_quantile(x[:4], 0.9))
    with pytest.raises(DimensionMismatch):
        forest.predict_quantile(np.zeros(2), 0.9)
    with pytest.raises(ValueError):
        forest.predict_quantile(x[0], 1.0)


def test_forest_tracks_conditional_quantile():
    rng = np.random.default_rng(0)
    x = rng.uniform(1, 2, (4000, 1))
    y = x[:, 0] * rng.standard_normal(4000)
    # zero conditional mean: adaptive splits chase noise, honest leaves do not
    forest = Forest.fit(x, y, ForestConfig(n_trees=100, min_node_size=40, honest=True))
    grid = np.array([[1.2], [1.5], [1.8]])
    truth = grid[:, 0] * 1.6448536269514722
    np.testing.assert_allclose(forest.predict_quantile(grid, 0.95), truth, atol=0.25)
    assert math.isclose(forest.predict_cdf(grid[1], 1.5 * 1.6448536269514722), 0.95, abs_tol=0.05)
