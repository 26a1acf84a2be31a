"""Sampling by integrating the potential flow ``dx/dt = grad Phi(x)``.

The adaptive integrator is Dormand-Prince 5(4) with per-trajectory step-size
control: a batch of starting points is advanced together (one network call per
stage) but every row keeps its own time, step size and acceptance decision, so
results do not depend on which other rows share the batch.

A potential is anything exposing ``value_and_grad(X) -> (values, grads)`` for
``X`` of shape ``(B, D)``; :class:`~vapo.potential.PotentialModel` qualifies,
as do the closed-form potentials defined below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

METHODS = ("rk45_adaptive", "rk4_fixed", "euler_fixed")

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

_SAFETY, _MIN_FACTOR, _MAX_FACTOR = 0.9, 0.2, 10.0


class IntegrationError(RuntimeError):
    """The flow could not be integrated (step budget exhausted or non-finite state)."""


@dataclass(frozen=True)
class OdeConfig:
    t_end: float = 1.625
    rtol: float = 1e-5
    atol: float = 1e-6
    max_steps: int = 10_000
    method: str = "rk45_adaptive"
    fixed_step: float = 1e-2

    def __post_init__(self):
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.fixed_step > 0:
            raise ValueError("fixed_step must be positive")
        if self.method != "rk45_adaptive" and self.fixed_step > self.t_end:
            raise ValueError("fixed_step must not exceed t_end")


class ZeroPotential:
    def __init__(self, dim):
        self.dim = dim

    def value_and_grad(self, X):
        X = np.atleast_2d(X)
        return np.zeros(len(X)), np.zeros_like(X)


class QuadraticPotential:
    """``Phi(x) = 0.5 * k * ||x||^2``; the flow is ``x0 * exp(k t)``."""

    def __init__(self, dim, k=-1.0):
        self.dim, self.k = dim, k

    def value_and_grad(self, X):
        X = np.atleast_2d(X)
        return 0.5 * self.k * np.sum(X * X, axis=1), self.k * X


class LinearPotential:
    """``Phi(x) = w . x``; the flow is ``x0 + t w``."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)
        self.dim = len(self.w)

    def value_and_grad(self, X):
        X = np.atleast_2d(X)
        return X @ self.w, np.broadcast_to(self.w, X.shape).copy()


def _field(model, X):
    v, g = model.value_and_grad(X)
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    return v, g


def _rms(a):
    return np.sqrt(np.mean(a * a, axis=1))


def _initial_step(model, y0, f0, cfg):
    scale = cfg.atol + cfg.rtol * np.abs(y0)
    d0, d1 = _rms(y0 / scale), _rms(f0 / scale)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    h0 = np.minimum(h0, cfg.t_end)
    _, f1 = _field(model, y0 + h0[:, None] * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    dmax = np.maximum(d1, d2)
    h1 = np.where(dmax <= 1e-15, np.maximum(1e-6, h0 * 1e-3),
                  (0.01 / np.maximum(dmax, 1e-300)) ** 0.2)
    return np.minimum(np.minimum(100 * h0, h1), cfg.t_end)


def _integrate_adaptive(model, y, cfg, track_energy):
    B = len(y)
    t = np.zeros(B)
    phi, f = _field(model, y)
    if not np.all(np.isfinite(f)):
        raise IntegrationError("non-finite state encountered; the potential field diverges")
    h = _initial_step(model, y, f, cfg)
    steps = np.zeros(B, dtype=np.int64)
    rejected = np.zeros(B, dtype=np.int64)
    f_evals = np.full(B, 2, dtype=np.int64)
    energy_drop = np.full(B, -np.inf)
    active = np.ones(B, dtype=bool)

    while active.any():
        idx = np.flatnonzero(active)
        if np.any(steps[idx] + rejected[idx] >= cfg.max_steps):
            raise IntegrationError(f"step budget of {cfg.max_steps} exhausted before t_end={cfg.t_end}")
        yi, ti, fi = y[idx], t[idx], f[idx]
        hi = np.minimum(h[idx], cfg.t_end - ti)
        H = hi[:, None]
        k = [fi]
        for s in range(1, 7):
            ys = yi + H * sum(a * k[j] for j, a in enumerate(_A[s]) if a != 0.0)
            v_s, k_s = _field(model, ys)
            k.append(k_s)
        y_new = ys  # stage 7 is evaluated at the 5th-order solution
        phi_new = v_s
        f_evals[idx] += 6
        if not (np.all(np.isfinite(y_new)) and np.all(np.isfinite(k[6]))):
            raise IntegrationError("non-finite state encountered; the potential field diverges")
        err_vec = H * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(yi), np.abs(y_new))
        err = _rms(err_vec / scale)
        ok = err <= 1.0
        with np.errstate(divide="ignore"):
            fac = np.where(err == 0.0, _MAX_FACTOR,
                           np.clip(_SAFETY * err ** -0.2, _MIN_FACTOR, _MAX_FACTOR))
        fac = np.where(ok, fac, np.minimum(fac, 1.0))

        acc = idx[ok]
        if track_energy and acc.size:
            energy_drop[acc] = np.maximum(energy_drop[acc], phi[acc] - phi_new[ok])
        y[acc] = y_new[ok]
        f[acc] = k[6][ok]
        phi[acc] = phi_new[ok]
        # land exactly on t_end when the step was clipped to it
        t_new = ti + hi
        t[acc] = np.where(hi[ok] >= cfg.t_end - ti[ok], cfg.t_end, t_new[ok])
        steps[acc] += 1
        rejected[idx[~ok]] += 1
        h[idx] = hi * fac
        active[acc] = t[acc] < cfg.t_end

    stats = {"steps": steps, "rejected_steps": rejected, "f_evals": f_evals}
    if track_energy:
        stats["energy_drop"] = energy_drop
    return y, stats


def _integrate_fixed(model, y, cfg, track_energy):
    n = max(1, math.ceil(round(cfg.t_end / cfg.fixed_step, 9)))
    h = cfg.t_end / n
    B = len(y)
    energy_drop = np.full(B, -np.inf)
    phi, _ = _field(model, y)
    evals = 0
    for _ in range(n):
        if cfg.method == "euler_fixed":
            _, k1 = _field(model, y)
            y = y + h * k1
            evals += 1
        else:
            _, k1 = _field(model, y)
            _, k2 = _field(model, y + 0.5 * h * k1)
            _, k3 = _field(model, y + 0.5 * h * k2)
            _, k4 = _field(model, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            evals += 4
        if not np.all(np.isfinite(y)):
            raise IntegrationError("non-finite state encountered; the potential field diverges")
        if track_energy:
            phi_new, _ = _field(model, y)
            energy_drop = np.maximum(energy_drop, phi - phi_new)
            phi = phi_new
    stats = {"steps": np.full(B, n), "rejected_steps": np.zeros(B, dtype=np.int64),
             "f_evals": np.full(B, evals)}
    if track_energy:
        stats["energy_drop"] = energy_drop
    return y, stats


def integrate_batch(model, X0, cfg: OdeConfig = OdeConfig(), track_energy=False):
    """Integrate each row of ``X0`` independently from ``t=0`` to ``cfg.t_end``.

    Returns:
        ``(X_final, stats)`` where ``stats`` holds per-row arrays ``steps``,
        ``rejected_steps``, ``f_evals`` and, when ``track_energy`` is set,
        ``energy_drop`` (largest decrease of ``Phi`` between accepted steps).
    """
    X0 = np.asarray(X0, dtype=np.float64)
    if X0.ndim != 2:
        raise ValueError("X0 must be a (B, D) array")
    if not np.all(np.isfinite(X0)):
        raise ValueError("initial state must be finite")
    if len(X0) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return X0.copy(), {"steps": empty, "rejected_steps": empty, "f_evals": empty}
    y = X0.copy()
    if cfg.method == "rk45_adaptive":
        return _integrate_adaptive(model, y, cfg, track_energy)
    return _integrate_fixed(model, y, cfg, track_energy)


def integrate(model, x0, cfg: OdeConfig = OdeConfig(), track_energy=False):
    """Integrate one trajectory; returns ``(x_final, stats)`` with scalar stats."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1:
        raise ValueError("x0 must be a single point")
    X, stats = integrate_batch(model, x0[None, :], cfg, track_energy)
    return X[0], {k: v[0].item() for k, v in stats.items()}


def prior_draws(params, n, rng):
    return params.omega * np.random.default_rng(rng).standard_normal((n, params.dim))


def sample(model, n, params, cfg: OdeConfig = OdeConfig(), rng=None):
    """Draw ``n`` prior points ``N(0, omega^2 I)`` and push them through the flow."""
    if n < 0:
        raise ValueError("n must be non-negative")
    X0 = prior_draws(params, n, rng)
    X, _ = integrate_batch(model, X0, cfg)
    return X


def slerp(a, b, alpha):
    """Spherical interpolation between ``a`` and ``b``; linear when they are nearly parallel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("slerp endpoints must be nonzero")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    cos = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    phi = math.acos(cos)
    if phi < 1e-6:
        return (1.0 - alpha) * a + alpha * b
    s = math.sin(phi)
    return math.sin((1.0 - alpha) * phi) / s * a + math.sin(alpha * phi) / s * b


def slerp_path(a, b, k):
    if k < 2:
        raise ValueError("need at least two interpolation points")
    return np.stack([slerp(a, b, j / (k - 1)) for j in range(k)])


def interpolate_images(model, x0_a, x0_b, k, cfg: OdeConfig = OdeConfig()):
    """Integrate ``k`` slerp points between two prior seeds; endpoints are the seeds' flows."""
    path = slerp_path(x0_a, x0_b, k)
    X, _ = integrate_batch(model, path, cfg)
    return X
