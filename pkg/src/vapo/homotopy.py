"""Gaussian data-likelihood homotopy between the prior and the posterior.

The prior is ``q(x) = N(0, omega^2 I)`` and the per-datum likelihood is
``p(xbar | x) = N(xbar; x, sigma^2 I)``.  Tempering the likelihood by
``t in [0, 1]`` gives a Gaussian conditional homotopy whose statistics are
available in closed form, so every operation here is a pure function of its
(array) inputs.  Randomness is always passed in by the caller.

Functions accept a single point of shape ``(D,)`` or a batch of shape
``(B, D)``; ``t`` may be a scalar or a ``(B,)`` array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class HomotopyParams:
    """Scalar hyperparameters of the homotopy and the time law.

    Attributes:
        omega: Prior standard deviation (isotropic).
        sigma: Likelihood standard deviation (isotropic).
        eps_sharp: Sharpness of the log-uniform time law, in (0, 1).
        dim: Data dimension.
    """

    omega: float = 1.0
    sigma: float = 0.01
    eps_sharp: float = 1e-4
    dim: int = 2

    def __post_init__(self):
        if not (self.omega > 0 and math.isfinite(self.omega)):
            raise ValueError(f"omega must be positive, got {self.omega}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 < self.eps_sharp < 1.0:
            raise ValueError(f"eps_sharp must lie in (0, 1), got {self.eps_sharp}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")


@dataclass(frozen=True)
class CondStats:
    """Mean and (scalar, diagonal) variance of the conditional homotopy."""

    mean: np.ndarray
    var: np.ndarray | float
    t: np.ndarray | float


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    return t


def _check_points(params: HomotopyParams, x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.dim:
        raise ValueError(f"{name} must have trailing dimension {params.dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")
    return x


def cond_var(params: HomotopyParams, t):
    """Diagonal entry of Sigma(t) = (1/omega^2 + t/sigma^2)^-1."""
    t = _check_t(t)
    return 1.0 / (1.0 / params.omega**2 + t / params.sigma**2)


def cond_stats(params: HomotopyParams, xbar, t) -> CondStats:
    """Closed-form statistics of rho(x; xbar, t).

    ``mean = t * var / sigma^2 * xbar`` and ``var = (1/omega^2 + t/sigma^2)^-1``.
    """
    xbar = _check_points(params, xbar, "xbar")
    t = _check_t(t)
    var = cond_var(params, t)
    scale = t * var / params.sigma**2
    if xbar.ndim == 2:
        scale = np.broadcast_to(scale, xbar.shape[:1])[:, None]
    mean = scale * xbar
    if np.ndim(var) == 0:
        var, t = float(var), float(t)
    return CondStats(mean=mean, var=var, t=t)


def sample_cond(params: HomotopyParams, xbar, t, noise):
    """Reparameterized draw ``mean + sqrt(var) * noise`` from rho(x; xbar, t)."""
    stats = cond_stats(params, xbar, t)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != stats.mean.shape:
        raise ValueError(f"noise shape {noise.shape} does not match xbar shape {stats.mean.shape}")
    sd = np.sqrt(stats.var)
    if np.ndim(sd) == 1:
        sd = sd[:, None]
    return stats.mean + sd * noise


def innovation(params: HomotopyParams, x, xbar):
    """Precision-weighted squared residual ``||x - xbar||^2 / sigma^2``."""
    x = np.asarray(x, dtype=np.float64)
    xbar = np.asarray(xbar, dtype=np.float64)
    if x.shape != xbar.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xbar.shape}")
    r = x - xbar
    return np.sum(r * r, axis=-1) / params.sigma**2


def innovation_cond_mean(params: HomotopyParams, xbar, t):
    """Exact expectation of the innovation under rho(x; xbar, t).

    For a diagonal Gaussian this is ``D * var / sigma^2 + ||mean - xbar||^2 / sigma^2``.
    """
    stats = cond_stats(params, xbar, t)
    xbar = np.asarray(xbar, dtype=np.float64)
    r = stats.mean - xbar
    return (params.dim * np.asarray(stats.var) + np.sum(r * r, axis=-1)) / params.sigma**2


def sample_time(params: HomotopyParams, u):
    """Map uniform draws ``u`` to times whose shift ``t + eps`` is log-uniform on [eps, 1 + eps]."""
    u = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(u)) or np.any(u < 0.0) or np.any(u > 1.0):
        raise ValueError("u must lie in [0, 1]")
    eps = params.eps_sharp
    lo, hi = math.log(eps), math.log1p(eps)
    t = np.exp(lo + u * (hi - lo)) - eps
    # exp/log rounding strays by an ulp at the ends; pin them exactly
    t = np.where(u == 0.0, 0.0, np.where(u == 1.0, 1.0, np.clip(t, 0.0, 1.0)))
    return float(t) if t.ndim == 0 else t


def time_cdf(params: HomotopyParams, t):
    """CDF of the sampled time: ``ln((t + eps)/eps) / ln((1 + eps)/eps)``."""
    eps = params.eps_sharp
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    return np.log((t + eps) / eps) / (math.log1p(eps) - math.log(eps))


def cond_log_density(params: HomotopyParams, x, xbar, t):
    """Log density of N(x; mean(xbar, t), var(t) I)."""
    x = _check_points(params, x)
    stats = cond_stats(params, xbar, t)
    if x.shape != stats.mean.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {stats.mean.shape}")
    var = np.asarray(stats.var)
    r = x - stats.mean
    return -0.5 * (params.dim * (LOG_2PI + np.log(var)) + np.sum(r * r, axis=-1) / var)


def marginal_log_density(params: HomotopyParams, dataset, x, t):
    """Log of rho_bar(x; t), the uniform mixture of conditional homotopies over ``dataset``.

    ``x`` may be a batch ``(M, D)``; returns shape ``(M,)`` (or a scalar for one point).
    """
    data = _check_points(params, dataset, "dataset")
    data = np.atleast_2d(data)
    x = _check_points(params, x)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    stats = cond_stats(params, data, t)
    var = float(cond_var(params, t))
    d2 = ((xs[:, None, :] - stats.mean[None, :, :]) ** 2).sum(-1)
    logc = -0.5 * (params.dim * (LOG_2PI + math.log(var)) + d2 / var)
    m = logc.max(axis=1, keepdims=True)
    out = (m + np.log(np.mean(np.exp(logc - m), axis=1, keepdims=True)))[:, 0]
    return out[0] if single else out


def marginal_homotopy_dt_oracle(params: HomotopyParams, dataset, x, t):
    """Time derivative of rho_bar(x; t) from the homotopy PDE.

    Evaluates ``-1/2 * mean_i rho(x; xbar_i, t) * (gamma(x, xbar_i) - gamma_bar(xbar_i, t))``
    over the empirical data distribution.  Intended for small problems
    (``D <= 2``, at most 64 data points) where it serves as a test oracle.
    """
    data = np.atleast_2d(_check_points(params, dataset, "dataset"))
    if params.dim > 2 or len(data) > 64:
        raise ValueError("oracle is restricted to dim <= 2 and at most 64 data points")
    t = float(_check_t(t))
    if not 0.0 < t < 1.0:
        raise ValueError("t must lie in the open interval (0, 1)")
    x = _check_points(params, x)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    n, m = len(data), len(xs)
    xx = np.repeat(xs, n, axis=0)
    bb = np.tile(data, (m, 1))
    tt = np.full(len(bb), t)
    rho = np.exp(cond_log_density(params, xx, bb, tt))
    g = innovation(params, xx, bb)
    gbar = innovation_cond_mean(params, bb, tt)
    out = -0.5 * np.mean((rho * (g - gbar)).reshape(m, n), axis=1)
    return float(out[0]) if single else out
