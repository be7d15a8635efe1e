"""Evaluation metrics: MRISE, mean pinball loss and coverage rate."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError


def pinball(a, alpha):
    """Pinball loss of the signed error ``a = truth - estimate``."""
    a = np.asarray(a, dtype=float)
    out = np.where(a > 0, alpha * a, (alpha - 1.0) * a)
    return out[()] if out.ndim == 0 else out


def _pair(true_vals, est_vals):
    t = np.atleast_2d(np.asarray(true_vals, dtype=float))
    e = np.atleast_2d(np.asarray(est_vals, dtype=float))
    if t.shape != e.shape:
        raise ValueError(f"shape mismatch: truth {t.shape} vs estimates {e.shape}")
    return t, e


def rmse_per_replication(true_vals, est_vals):
    t, e = _pair(true_vals, est_vals)
    return np.array([math.sqrt(math.fsum(r) / r.size) for r in (t - e) ** 2])


def mrise(true_vals, est_vals):
    """Root mean square error within each replication (row), averaged over rows."""
    return math.fsum(rmse_per_replication(true_vals, est_vals)) / np.atleast_2d(true_vals).shape[0]


def mpl(true_vals, est_vals, alpha):
    t, e = _pair(true_vals, est_vals)
    losses = pinball(t - e, alpha)
    return math.fsum(losses.ravel()) / losses.size


def coverage_rate(estimates, loss_samples):
    """Fraction of loss samples at or below each point's estimate, averaged over points."""
    est = np.asarray(estimates, dtype=float)
    samples = np.asarray(loss_samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] != est.shape[0]:
        raise ValueError(f"shape mismatch: {est.shape[0]} estimates vs loss samples {samples.shape}")
    per_point = (samples <= est[:, None]).mean(axis=1)
    return math.fsum(per_point) / per_point.size


def coverage_rate_sorted(estimates, sorted_samples):
    """``coverage_rate`` for rows already sorted ascending; O(log M) per point."""
    est = np.asarray(estimates, dtype=float)
    m = sorted_samples.shape[1]
    hits = [np.searchsorted(row, v, side="right") for row, v in zip(sorted_samples, est)]
    return math.fsum(h / m for h in hits) / est.size


PAPER_ALPHAS = (0.90, 0.95, 0.99, 0.995)
DEFAULT_SIZES = (1000, 2000, 4000, 8000, 16000)

PROFILES = {
    "paper": dict(n_points=1000, n_reps=40, n_cov_samples=25_000),
    "desk": dict(n_points=100, n_reps=5, n_cov_samples=2_000),
}


@dataclass(frozen=True)
class EvalGrid:
    n_points: int = 1000
    n_reps: int = 40
    n_cov_samples: int = 25_000
    alphas: tuple = PAPER_ALPHAS
    offline_sizes: tuple = DEFAULT_SIZES

    def __post_init__(self):
        for name in ("n_points", "n_reps", "n_cov_samples"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas or any(not 0.0 < a < 1.0 for a in alphas):
            raise ConfigError("alphas", "need at least one level, each in (0, 1)")
        sizes = tuple(self.offline_sizes)
        if not sizes or any(isinstance(s, bool) or int(s) != s or s < 2 for s in sizes):
            raise ConfigError("offline_sizes", "need at least one integer size >= 2")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "offline_sizes", tuple(int(s) for s in sizes))

    @classmethod
    def from_dict(cls, data, profile=None):
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        if profile is not None:
            if profile not in PROFILES:
                raise ConfigError("profile", f"must be one of {sorted(PROFILES)}, got {profile!r}")
            data.update(PROFILES[profile])
        return cls(**data)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class MetricRecord:
    method: str
    alpha: float
    n_offline: int
    rep: int
    mrise: float
    mpl: float
    mcr: float
    fit_seconds: float | None
    predict_micros_per_point: float | None
    seed: int
