"""Split-conformal calibration of a one-sided conditional quantile estimate.

The base model is fit on one part of the data. Signed residuals
``loss - prediction`` on the held-out part give the conformity scores, and
every prediction is shifted by an order statistic of those scores.
"""

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import CalibrationSetTooSmall
from .forest import Forest

CORRECTION_MODES = ("finite_sample", "plain")


@dataclass(frozen=True, eq=False)
class SplitPlan:
    train_indices: np.ndarray
    calib_indices: np.ndarray
    train_fraction: float = 0.7


def split_dataset(n, train_fraction=0.7, seed=0):
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(math.floor(train_fraction * n + 0.5))
    if n < 2 or not 0 < n_train < n:
        raise ValueError(f"cannot split {n} samples at fraction {train_fraction} into two nonempty parts")
    perm = np.random.default_rng(seed).permutation(n)
    return SplitPlan(np.sort(perm[:n_train]), np.sort(perm[n_train:]), float(train_fraction))


class ConstantQuantileModel:
    """Predicts the same value at every point and level; a deliberately poor base model."""

    def __init__(self, value=0.0):
        self.value = float(value)

    def predict_quantile(self, X, alpha):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.full(X.shape[0], self.value)


def conformity_scores(base_model, calib_x, calib_loss, alpha):
    """Signed residuals; positive means the base model underestimated."""
    pred = np.asarray(base_model.predict_quantile(calib_x, alpha), dtype=float)
    return np.asarray(calib_loss, dtype=float) - pred


def _level(alpha):
    # the decimal the level prints as: 0.9 is 9/10, not the binary float just above it
    return Fraction(repr(float(alpha)))


def order_rank(alpha, m, correction_mode="finite_sample"):
    """1-based rank of the calibrating order statistic among ``m`` scores."""
    a = _level(alpha)
    size = m + 1 if correction_mode == "finite_sample" else m
    return max(1, math.ceil(a * size))


def min_calibration_size(alpha):
    """Smallest calibration set for which the finite-sample rank is attainable."""
    a = _level(alpha)
    return math.ceil(a / (1 - a))


def calibrated_offset(scores, alpha, correction_mode="finite_sample"):
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores must be a nonempty vector")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if correction_mode not in CORRECTION_MODES:
        raise ValueError(f"correction_mode must be one of {CORRECTION_MODES}")
    rank = order_rank(alpha, scores.size, correction_mode)
    if rank > scores.size:
        raise CalibrationSetTooSmall(alpha, scores.size, min_calibration_size(alpha))
    return float(np.partition(scores, rank - 1)[rank - 1])


@dataclass(frozen=True, eq=False)
class ConformalModel:
    base: object
    offset: float
    alpha: float
    scores: np.ndarray
    correction_mode: str = "finite_sample"

    def predict_base(self, X, threads=1):
        if isinstance(self.base, Forest):
            return self.base.predict_quantile(X, self.alpha, threads=threads)
        return self.base.predict_quantile(X, self.alpha)

    def predict(self, X, threads=1):
        return self.predict_base(X, threads) + self.offset


def calibrate(base_model, calib_x, calib_loss, alpha, correction_mode="finite_sample"):
    scores = conformity_scores(base_model, calib_x, calib_loss, alpha)
    offset = calibrated_offset(scores, alpha, correction_mode)
    return ConformalModel(base_model, offset, float(alpha), scores, correction_mode)


def conformal_predict(model, x):
    return model.predict(x)


def fit_conformal_forest(dataset, forest_config, alphas, train_fraction=0.7, split_seed=0,
                         correction_mode="finite_sample", threads=1):
    """Fit on the training part, calibrate one offset per level on the rest.

    Returns ``(forest, plan, {alpha: ConformalModel})``.
    """
    plan = split_dataset(dataset.n, train_fraction, split_seed)
    alphas = [float(a) for a in np.atleast_1d(alphas)]
    for a in alphas:
        if correction_mode == "finite_sample" and order_rank(a, plan.calib_indices.size) > plan.calib_indices.size:
            raise CalibrationSetTooSmall(a, plan.calib_indices.size, min_calibration_size(a))
    forest = Forest.fit(dataset.x[plan.train_indices], dataset.loss[plan.train_indices],
                        forest_config, threads=threads)
    calib_x = dataset.x[plan.calib_indices]
    calib_loss = dataset.loss[plan.calib_indices]
    preds = np.atleast_2d(forest.predict_quantile(calib_x, alphas, threads=threads))
    models = {}
    for j, a in enumerate(alphas):
        scores = calib_loss - preds[:, j]
        models[a] = ConformalModel(forest, calibrated_offset(scores, a, correction_mode), a, scores,
                                   correction_mode)
    return forest, plan, models
