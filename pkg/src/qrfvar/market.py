"""Correlated GBM market, option portfolio pricing and nested loss simulation.

Asset prices follow a d-dimensional geometric Brownian motion with drift
``mu`` up to the risk horizon and drift ``r`` after it. The portfolio is a set
of European calls, so its time-tau value is available in closed form, which
the oracle routines exploit.
"""

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, FactorizationError
from .streams import INNER, OUTER, stream

LOSS_MODES = ("nested", "closed_form")

# outer paths per inner-simulation stream; fixed so results do not depend on threading
INNER_BLOCK = 256
# rows per Black-Scholes batch, bounds peak memory of closed-form valuation
PRICE_CHUNK = 65536


def _as_vector(name, value, d):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected numbers, got {value!r}") from None
    if arr.ndim == 0:
        arr = np.full(d, float(arr))
    if arr.shape != (d,):
        raise ConfigError(name, f"expected a scalar or a list of {d} values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(name, "values must be finite")
    return arr


def covariance_factor(sigma, rho):
    """Lower-triangular ``A`` with ``A @ A.T == diag(sigma) @ rho @ diag(sigma)``.

    ``A = diag(sigma) @ chol(rho)``, so only the correlation matrix has to be
    positive definite; zero volatilities give zero rows.
    """
    sigma = np.asarray(sigma, dtype=float)
    rho = np.asarray(rho, dtype=float)
    try:
        chol = np.linalg.cholesky(rho)
    except np.linalg.LinAlgError:
        for k in range(1, rho.shape[0] + 1):
            if np.linalg.eigvalsh(rho[:k, :k]).min() <= 0.0:
                break
        raise FactorizationError(
            k, f"correlation matrix is not positive definite (leading minor of order {k} fails)"
        ) from None
    if not np.all(np.isfinite(chol)):
        raise FactorizationError(rho.shape[0], "correlation matrix factorization produced non-finite entries")
    return sigma[:, None] * chol


@dataclass(frozen=True, eq=False)
class MarketConfig:
    d: int
    s0: np.ndarray
    mu: np.ndarray
    r: float
    sigma: np.ndarray
    rho: np.ndarray
    strikes: tuple
    u: float
    tau: float
    T: float
    loss_mode: str = "nested"
    m_inner: int = 500
    n_oracle: int = 200_000

    def __post_init__(self):
        if isinstance(self.d, bool) or not isinstance(self.d, (int, np.integer)) or self.d < 1:
            raise ConfigError("d", f"asset count must be an integer >= 1, got {self.d!r}")
        d = int(self.d)
        set_ = object.__setattr__
        set_(self, "d", d)
        s0 = _as_vector("s0", self.s0, d)
        if np.any(s0 <= 0):
            raise ConfigError("s0", "initial prices must be strictly positive")
        sigma = _as_vector("sigma", self.sigma, d)
        if np.any(sigma < 0):
            raise ConfigError("sigma", "volatilities must be non-negative")
        set_(self, "s0", s0)
        set_(self, "mu", _as_vector("mu", self.mu, d))
        set_(self, "sigma", sigma)
        try:
            r = float(self.r)
        except (TypeError, ValueError):
            raise ConfigError("r", f"expected a number, got {self.r!r}") from None
        if not math.isfinite(r):
            raise ConfigError("r", "must be finite")
        set_(self, "r", r)

        rho = np.asarray(self.rho, dtype=float)
        if rho.ndim == 0:
            rho = np.full((d, d), float(rho))
            np.fill_diagonal(rho, 1.0)
        if rho.shape != (d, d):
            raise ConfigError("rho", f"expected a scalar or a {d}x{d} matrix, got shape {rho.shape}")
        if not np.allclose(rho, rho.T, rtol=0.0, atol=1e-12):
            raise ConfigError("rho", "correlation matrix must be symmetric")
        if not np.allclose(np.diag(rho), 1.0, rtol=0.0, atol=1e-12):
            raise ConfigError("rho", "correlation matrix must have a unit diagonal")
        set_(self, "rho", rho)

        strikes = self.strikes
        try:
            flat = all(np.ndim(k) == 0 for k in strikes)
            per_asset = [list(strikes)] * d if flat else [list(k) for k in strikes]
        except TypeError:
            raise ConfigError("strikes", "expected a list of strikes or one list per asset") from None
        if len(per_asset) != d:
            raise ConfigError("strikes", f"expected {d} strike lists, got {len(per_asset)}")
        for ks in per_asset:
            if not ks or any(not (float(k) > 0 and math.isfinite(float(k))) for k in ks):
                raise ConfigError("strikes", "each asset needs at least one positive strike")
        set_(self, "strikes", tuple(tuple(float(k) for k in ks) for ks in per_asset))

        for name in ("u", "tau", "T"):
            try:
                set_(self, name, float(getattr(self, name)))
            except (TypeError, ValueError):
                raise ConfigError(name, f"expected a number, got {getattr(self, name)!r}") from None
        if not 0.0 < self.u < self.tau < self.T:
            raise ConfigError("u", f"time points must satisfy 0 < u < tau < T, got {self.u}, {self.tau}, {self.T}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError("loss_mode", f"must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        for name in ("m_inner", "n_oracle"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
            set_(self, name, int(v))

        set_(self, "_factor", covariance_factor(sigma, rho))
        assets = np.concatenate([np.full(len(ks), k) for k, ks in enumerate(self.strikes)])
        set_(self, "option_asset", assets.astype(np.intp))
        set_(self, "option_strike", np.array([k for ks in self.strikes for k in ks]))

    @property
    def factor(self):
        return self._factor

    @property
    def v0(self):
        return portfolio_value_0(self)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("market", "config must be a JSON object")
        required = ("d", "s0", "mu", "r", "sigma", "rho", "strikes", "u", "tau", "T")
        for name in required:
            if name not in data:
                raise ConfigError(name, "missing required field")
        optional = ("loss_mode", "m_inner", "n_oracle")
        unknown = set(data) - set(required) - set(optional)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        try:
            return cls(**{k: data[k] for k in required + optional if k in data})
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("market", str(exc)) from None

    def to_dict(self):
        return {
            "d": self.d,
            "s0": self.s0.tolist(),
            "mu": self.mu.tolist(),
            "r": self.r,
            "sigma": self.sigma.tolist(),
            "rho": self.rho.tolist(),
            "strikes": [list(ks) for ks in self.strikes],
            "u": self.u,
            "tau": self.tau,
            "T": self.T,
            "loss_mode": self.loss_mode,
            "m_inner": self.m_inner,
            "n_oracle": self.n_oracle,
        }

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def paper_market_config(**overrides):
    """Four identical assets, twenty calls struck at 90..110, one-day/one-week/one-month clock."""
    params = dict(
        d=4,
        s0=100.0,
        mu=0.08,
        r=0.05,
        sigma=0.15,
        rho=0.3,
        strikes=[90.0, 95.0, 100.0, 105.0, 110.0],
        u=1 / 252,
        tau=1 / 52,
        T=1 / 12,
    )
    params.update(overrides)
    return MarketConfig(**params)


def build_covariance_factor(config):
    return config.factor


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    x: np.ndarray
    loss: np.ndarray
    seed: int = 0

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=float)
        loss = np.ascontiguousarray(self.loss, dtype=float)
        if x.ndim != 2:
            raise ValueError("x must be a 2-d array")
        if loss.shape != (x.shape[0],):
            raise ValueError(f"loss has shape {loss.shape}, expected ({x.shape[0]},)")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "loss", loss)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    def subset(self, indices):
        return OfflineDataset(self.x[indices], self.loss[indices], self.seed)


# -- pricing -----------------------------------------------------------------


def bs_call(s, k, r, sigma, t):
    """Black-Scholes price of a European call; broadcasts over array inputs.

    ``t == 0`` returns the payoff and ``sigma == 0`` the discounted forward
    intrinsic value.
    """
    s, k, sigma, t = (np.asarray(a, dtype=float) for a in (s, k, sigma, t))
    if np.any(s < 0) or np.any(k < 0) or np.any(sigma < 0) or np.any(t < 0):
        raise ValueError("bs_call requires non-negative price, strike, volatility and time")
    disc_k = k * np.exp(-r * t)
    vt = sigma * np.sqrt(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(s / k) + (r + 0.5 * sigma * sigma) * t) / vt
        price = s * ndtr(d1) - disc_k * ndtr(d1 - vt)
    price = np.where(vt > 0, price, np.maximum(s - disc_k, 0.0))
    return price[()] if price.ndim == 0 else price


def portfolio_value(config, s, t):
    """Value of the call portfolio at prices ``s`` (d-vector or rows) with ``t`` to maturity."""
    s = np.asarray(s, dtype=float)
    rows = np.atleast_2d(s)
    out = np.empty(rows.shape[0])
    sig = config.sigma[config.option_asset]
    for lo in range(0, rows.shape[0], PRICE_CHUNK):
        block = rows[lo : lo + PRICE_CHUNK, config.option_asset]
        out[lo : lo + PRICE_CHUNK] = bs_call(block, config.option_strike, config.r, sig, t).sum(axis=1)
    return out[0] if s.ndim == 1 else out


def portfolio_value_0(config):
    return float(portfolio_value(config, config.s0, config.T))


def portfolio_payoff(config, s_T):
    s_T = np.asarray(s_T, dtype=float)
    return np.maximum(s_T[..., config.option_asset] - config.option_strike, 0.0).sum(axis=-1)


# -- simulation --------------------------------------------------------------


def _gbm_step(config, s, drift, dt, z):
    sig2 = config.sigma**2
    return s * np.exp((drift - 0.5 * sig2) * dt + math.sqrt(dt) * (z @ config.factor.T))


def simulate_to_horizon(config, rng, size=None):
    """Sample ``(S(u), S(tau))`` on one path under the real-world drift.

    Uses the exact log-normal transition for both legs. With ``size`` the
    results are ``(size, d)`` arrays.
    """
    rng = np.random.default_rng(rng)
    m = 1 if size is None else int(size)
    z = rng.standard_normal((m, 2, config.d))
    x_u = _gbm_step(config, config.s0, config.mu, config.u, z[:, 0])
    s_tau = _gbm_step(config, x_u, config.mu, config.tau - config.u, z[:, 1])
    if size is None:
        return x_u[0], s_tau[0]
    return x_u, s_tau


def simulate_bridge(x_u, config, rng, size):
    """``size`` draws of S(tau) given S(u) = x_u."""
    rng = np.random.default_rng(rng)
    z = rng.standard_normal((int(size), config.d))
    return _gbm_step(config, np.asarray(x_u, dtype=float), config.mu, config.tau - config.u, z)


def _inner_values(s_tau, config, m_inner, rng):
    """Discounted portfolio payoffs of ``m_inner`` risk-neutral paths per row of ``s_tau``."""
    dt = config.T - config.tau
    z = rng.standard_normal((s_tau.shape[0], m_inner, config.d))
    s_T = _gbm_step(config, s_tau[:, None, :], config.r, dt, z)
    return math.exp(-config.r * dt) * portfolio_payoff(config, s_T)


def loss_nested(s_tau, config, m_inner, rng, return_stderr=False):
    """Loss ``V(0) - mean`` of ``m_inner`` discounted inner payoffs started at ``s_tau``."""
    if m_inner < 1:
        raise ValueError("m_inner must be >= 1")
    rng = np.random.default_rng(rng)
    values = _inner_values(np.asarray(s_tau, dtype=float)[None, :], config, int(m_inner), rng)[0]
    loss = portfolio_value_0(config) - values.mean()
    if not return_stderr:
        return loss
    stderr = values.std(ddof=1) / math.sqrt(m_inner) if m_inner > 1 else math.inf
    return loss, stderr


def nested_losses(s_tau, config, m_inner, seed, threads=1):
    """Nested losses for each row of ``s_tau``; row block ``b`` uses inner stream ``b``."""
    s_tau = np.atleast_2d(np.asarray(s_tau, dtype=float))
    v0 = portfolio_value_0(config)
    out = np.empty(s_tau.shape[0])
    starts = range(0, s_tau.shape[0], INNER_BLOCK)

    def run(lo):
        rng = stream(seed, INNER, lo // INNER_BLOCK)
        block = s_tau[lo : lo + INNER_BLOCK]
        # bound memory: each sub-batch holds rows * m_inner * d normals
        step = max(1, 2_000_000 // (int(m_inner) * config.d))
        for a in range(0, block.shape[0], step):
            vals = _inner_values(block[a : a + step], config, int(m_inner), rng)
            out[lo + a : lo + a + vals.shape[0]] = v0 - vals.mean(axis=1)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, starts))
    else:
        for lo in starts:
            run(lo)
    return out


def loss_closed_form(s_tau, config):
    """Exact loss ``V(0) - V(tau)`` using Black-Scholes prices at the horizon."""
    return portfolio_value_0(config) - portfolio_value(config, s_tau, config.T - config.tau)


def generate_offline_dataset(config, n, m_inner=None, loss_mode=None, seed=0, threads=1):
    """Draw ``n`` independent pairs ``(S(u), L(tau))``."""
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise ConfigError("n", f"sample count must be an integer >= 1, got {n!r}")
    n = int(n)
    m_inner = config.m_inner if m_inner is None else int(m_inner)
    loss_mode = config.loss_mode if loss_mode is None else loss_mode
    if loss_mode not in LOSS_MODES:
        raise ConfigError("loss_mode", f"must be one of {LOSS_MODES}, got {loss_mode!r}")
    if m_inner < 1:
        raise ConfigError("m_inner", "must be >= 1")
    x_u, s_tau = simulate_to_horizon(config, stream(seed, OUTER), size=n)
    if loss_mode == "nested":
        loss = nested_losses(s_tau, config, m_inner, seed, threads=threads)
    else:
        loss = loss_closed_form(s_tau, config)
    return OfflineDataset(x_u, loss, seed)


def conditional_losses(x_u, config, M, loss_mode="closed_form", rng=None, m_inner=None):
    """``M`` losses at the horizon conditional on ``S(u) = x_u``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    x_u = np.asarray(x_u, dtype=float)
    if x_u.shape != (config.d,) or np.any(x_u <= 0):
        raise ValueError(f"x_u must be a positive vector of length {config.d}")
    rng = np.random.default_rng(rng)
    s_tau = simulate_bridge(x_u, config, rng, M)
    if loss_mode == "closed_form":
        return loss_closed_form(s_tau, config)
    if loss_mode != "nested":
        raise ValueError(f"unknown loss_mode {loss_mode!r}")
    m_inner = config.m_inner if m_inner is None else int(m_inner)
    v0 = portfolio_value_0(config)
    out = np.empty(int(M))
    step = max(1, 2_000_000 // (m_inner * config.d))
    for a in range(0, int(M), step):
        out[a : a + step] = v0 - _inner_values(s_tau[a : a + step], config, m_inner, rng).mean(axis=1)
    return out


def ground_truth_var(x_u, alpha, config, n_oracle=None, rng=None):
    """Empirical conditional VaR at ``alpha`` (scalar or array) from closed-form losses."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any((alpha <= 0) | (alpha >= 1)):
        raise ValueError("alpha must lie in (0, 1)")
    n_oracle = config.n_oracle if n_oracle is None else int(n_oracle)
    losses = conditional_losses(x_u, config, n_oracle, "closed_form", rng)
    return np.quantile(losses, alpha, method="inverted_cdf")
