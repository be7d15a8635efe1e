"""Quantile regression forest.

A fitted forest keeps, for every leaf, the indices of the training points it
holds. A query point gets weight ``1/k`` from each of the ``k`` members of the
leaf it falls into, averaged over trees. Conditional quantiles are read off
the resulting weighted empirical CDF of the training losses.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, DimensionMismatch
from .streams import FOREST, stream


@dataclass(frozen=True)
class ForestConfig:
    """Forest growth parameters.

    ``mtry`` defaults to ``ceil(d/3)`` and ``min_node_size`` to 5 (10 when
    honest). With ``leaf_scale > 0`` the minimum leaf size grows with the
    training set size n as ``max(min_node_size, ceil(leaf_scale * n**leaf_exponent))``,
    which lets leaves diverge while staying a vanishing fraction of n.
    ``max_leaf_fraction`` caps leaf size as a fraction of n: an oversized node
    that has no split meeting ``min_child_fraction`` is split without that
    balance requirement.
    """

    n_trees: int = 500
    mtry: int | None = None
    min_node_size: int | None = None
    max_leaf_fraction: float = 1.0
    min_child_fraction: float = 0.1
    leaf_scale: float = 0.0
    leaf_exponent: float = 0.5
    honest: bool = False
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        def _int(name, lo):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < lo:
                raise ConfigError(name, f"must be an integer >= {lo}, got {v!r}")

        _int("n_trees", 1)
        if self.mtry is not None:
            _int("mtry", 1)
        if self.min_node_size is not None:
            _int("min_node_size", 1)
        if not 0.0 < self.min_child_fraction <= 0.5:
            raise ConfigError("min_child_fraction", f"must lie in (0, 0.5], got {self.min_child_fraction}")
        if not 0.0 < self.max_leaf_fraction <= 1.0:
            raise ConfigError("max_leaf_fraction", f"must lie in (0, 1], got {self.max_leaf_fraction}")
        if not self.leaf_scale >= 0.0:
            raise ConfigError("leaf_scale", f"must be >= 0, got {self.leaf_scale}")
        if not 0.0 <= self.leaf_exponent < 1.0:
            raise ConfigError("leaf_exponent", f"must lie in [0, 1), got {self.leaf_exponent}")
        for name in ("honest", "bootstrap"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(name, "must be true or false")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError("seed", f"must be a non-negative integer, got {self.seed!r}")

    def resolved_mtry(self, d):
        mtry = math.ceil(d / 3) if self.mtry is None else self.mtry
        if not 1 <= mtry <= d:
            raise ConfigError("mtry", f"must lie in [1, {d}], got {mtry}")
        return mtry

    def resolved_min_node_size(self, n):
        base = self.min_node_size
        if base is None:
            base = 10 if self.honest else 5
        if self.leaf_scale > 0:
            base = max(base, math.ceil(self.leaf_scale * n**self.leaf_exponent))
        return base

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("forest", "config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        return ForestConfig(**{**asdict(self), **changes})


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat view of one fitted tree (see ``_kernels`` for the layout)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_start: np.ndarray
    leaf_count: np.ndarray
    members: np.ndarray
    n_train: int
    structure: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    @property
    def n_nodes(self):
        return self.feature.shape[0]

    def is_leaf(self, node):
        return self.feature[node] < 0

    @property
    def leaves(self):
        return np.flatnonzero(self.feature < 0)

    def leaf_members(self, node):
        start = self.leaf_start[node]
        return self.members[start : start + self.leaf_count[node]]

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        return int(_kernels.apply_tree(self.feature, self.threshold, self.left, self.right, 0, x))

    def weights(self, x):
        return tree_weights(self, x)


def _tree_samples(n, config, rng):
    """Structure and estimation index arrays for one tree."""
    if config.honest:
        perm = rng.permutation(n)
        half = n // 2
        struct, est = perm[:half], perm[half:]
        if config.bootstrap:
            if struct.size:
                struct = struct[rng.integers(0, struct.size, struct.size)]
            est = est[rng.integers(0, est.size, est.size)]
        return struct.astype(np.int64), est.astype(np.int64)
    if config.bootstrap:
        idx = rng.integers(0, n, n)
    else:
        idx = np.arange(n)
    return idx.astype(np.int64), np.empty(0, np.int64)


def _fit_tree_arrays(x, y, config, tree_index):
    n, d = x.shape
    rng = stream(config.seed, FOREST, tree_index)
    struct, est = _tree_samples(n, config, rng)
    keys = rng.random((2 * max(struct.size, 1) + 1, d))
    max_leaf = int(math.floor(config.max_leaf_fraction * n))
    arrays = _kernels.build_tree(
        x,
        y,
        struct,
        est,
        config.honest,
        config.resolved_mtry(d),
        config.resolved_min_node_size(n),
        float(config.min_child_fraction),
        max_leaf,
        keys,
    )
    structure = np.sort(struct) if config.honest else np.empty(0, np.int64)
    return arrays, structure


def _check_training(x, y):
    x = np.array(x, dtype=float, order="C")
    y = np.array(y, dtype=float, order="C")
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training set is empty")
    if y.shape != (x.shape[0],):
        raise ValueError("x and y lengths differ")
    return x, y


def fit_tree(dataset, config, tree_index=0):
    x, y = _check_training(dataset.x, dataset.loss)
    arrays, structure = _fit_tree_arrays(x, y, config, tree_index)
    return Tree(*arrays, n_train=x.shape[0], structure=structure)


def tree_weights(tree, x):
    w = np.zeros(tree.n_train)
    leaf = tree.apply(x)
    members = tree.leaf_members(leaf)
    if members.size:
        np.add.at(w, members, 1.0 / members.size)
    return w


class Forest:
    """Fitted quantile regression forest over training points ``x`` with losses ``y``."""

    def __init__(self, config, x, y, feature, threshold, left, right, leaf_start, leaf_count,
                 node_offset, members, member_offset, structure, structure_offset):
        self.config = config
        self.x = x
        self.y = y
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.leaf_start = leaf_start
        self.leaf_count = leaf_count
        self.node_offset = node_offset
        self.members = members
        self.member_offset = member_offset
        self.structure = structure
        self.structure_offset = structure_offset
        self.order = np.argsort(y, kind="stable")
        for arr in (x, y, feature, threshold, left, right, leaf_start, leaf_count,
                    node_offset, members, member_offset, structure, structure_offset):
            arr.flags.writeable = False

    @classmethod
    def fit(cls, x, y, config=None, threads=1):
        config = ForestConfig() if config is None else config
        x, y = _check_training(x, y)

        def one(b):
            return _fit_tree_arrays(x, y, config, b)

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                fitted = list(pool.map(one, range(config.n_trees)))
        else:
            fitted = [one(b) for b in range(config.n_trees)]

        def offsets(sizes):
            return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

        trees = [f[0] for f in fitted]
        cat = [np.concatenate([t[k] for t in trees]) for k in range(7)]
        structures = [f[1] for f in fitted]
        return cls(
            config, x, y, *cat[:6],
            node_offset=offsets([t[0].size for t in trees]),
            members=cat[6],
            member_offset=offsets([t[6].size for t in trees]),
            structure=np.concatenate(structures).astype(np.int64),
            structure_offset=offsets([s.size for s in structures]),
        )

    @property
    def n_trees(self):
        return self.node_offset.size - 1

    @property
    def n_train(self):
        return self.y.size

    @property
    def d(self):
        return self.x.shape[1]

    def tree(self, b):
        lo, hi = self.node_offset[b], self.node_offset[b + 1]
        mlo, mhi = self.member_offset[b], self.member_offset[b + 1]
        slo, shi = self.structure_offset[b], self.structure_offset[b + 1]
        return Tree(self.feature[lo:hi], self.threshold[lo:hi], self.left[lo:hi], self.right[lo:hi],
                    self.leaf_start[lo:hi], self.leaf_count[lo:hi], self.members[mlo:mhi],
                    self.n_train, self.structure[slo:shi])

    def leaf_sizes(self):
        return self.leaf_count[self.feature < 0]

    def _kernel_args(self):
        return (self.feature, self.threshold, self.left, self.right, self.leaf_start,
                self.leaf_count, self.node_offset, self.members, self.member_offset)

    def _queries(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.ascontiguousarray(np.atleast_2d(X))
        if X.shape[1] != self.d:
            raise DimensionMismatch(f"query has {X.shape[1]} features, model was trained on {self.d}")
        return X, single

    def weights(self, x):
        x, _ = self._queries(x)
        if x.shape[0] != 1:
            raise ValueError("weights() takes a single query point")
        return _kernels.forest_weights(x[0], self.n_train, *self._kernel_args())

    def predict_quantile(self, X, alpha, threads=1):
        """Conditional quantile(s) at ``alpha`` for query row(s) ``X``.

        Returns shape ``(q,)`` for scalar ``alpha`` and ``(q, len(alpha))``
        otherwise; a 1-d ``X`` drops the leading axis. The cumulative weight
        must reach ``alpha - 1e-12``, so a level that coincides with a mass
        step (0.2 with five equal weights) resolves to that step.
        """
        X, single = self._queries(X)
        alphas = np.asarray(alpha, dtype=float)
        scalar_alpha = alphas.ndim == 0
        alphas = np.atleast_1d(alphas)
        if np.any((alphas <= 0) | (alphas >= 1)):
            raise ValueError("alpha must lie in (0, 1)")
        perm = np.argsort(alphas, kind="stable")
        sorted_alphas = np.ascontiguousarray(alphas[perm])
        args = self._kernel_args()

        def run(chunk):
            return _kernels.predict_quantiles(chunk, sorted_alphas, self.order, self.y, *args)

        out = _map_chunks(run, X, threads)
        result = np.empty_like(out)
        result[:, perm] = out
        if scalar_alpha:
            result = result[:, 0]
        return result[0] if single else result

    def predict_cdf(self, X, y, threads=1):
        X, single = self._queries(X)
        yq = np.broadcast_to(np.asarray(y, dtype=float), (X.shape[0],)).copy()
        args = self._kernel_args()
        rows = np.arange(X.shape[0])

        def run(chunk):
            return _kernels.predict_cdf(X[chunk], yq[chunk], self.order, self.y, *args)

        out = _map_chunks(run, rows, threads)
        return out[0] if single else out


def _chunk_bounds(q, threads):
    k = max(1, min(int(threads), q))
    edges = np.linspace(0, q, k + 1).astype(int)
    return [(edges[i], edges[i + 1]) for i in range(k)]


def _map_chunks(fn, X, threads):
    bounds = _chunk_bounds(X.shape[0], threads)
    if len(bounds) > 1:
        with ThreadPoolExecutor(len(bounds)) as pool:
            parts = list(pool.map(lambda ab: fn(X[ab[0]:ab[1]]), bounds))
    else:
        parts = [fn(X)]
    return np.concatenate(parts, axis=0)


def fit_forest(dataset, config=None, threads=1):
    return Forest.fit(dataset.x, dataset.loss, config, threads=threads)


def forest_weights(forest, x):
    return forest.weights(x)


def predict_quantile(forest, x, alpha):
    return forest.predict_quantile(x, alpha)


def predict_cdf(forest, x, y):
    return forest.predict_cdf(x, y)
