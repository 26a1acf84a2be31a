"""Numerical oracle suites: quadrature, finite differences and closed-form flows.

Each check returns a :class:`Check`; a suite passes when all of its checks do.
The oracles never reuse the code path they test: Bayes posteriors come from
grid quadrature, derivatives from central differences, flows from their
closed forms.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from . import homotopy as H
from . import ode
from .loss import draw_batch, loss_on_draw
from .potential import ACTIVATIONS, forward, grad_theta_gradnormsq, grad_theta_value, init

SUITES = ("homotopy", "gradients", "ode")


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tol: float
    detail: str = ""
    seconds: float = 0.0

    def line(self):
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.value:.3g} (tol {self.tol:.3g}) {self.detail}".rstrip()


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        chk = fn(*args, **kwargs)
        chk.seconds = time.perf_counter() - t0
        return chk
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# --------------------------------------------------------------------------
# homotopy


def bayes_quadrature(params, xbar, t, grid):
    """Normalized log posterior of q(x) * p(xbar|x)^t on a 1-D grid, plus its mean and variance."""
    log_prior = -0.5 * grid**2 / params.omega**2 - 0.5 * math.log(2 * math.pi * params.omega**2)
    log_lik = -0.5 * (xbar - grid) ** 2 / params.sigma**2 - 0.5 * math.log(2 * math.pi * params.sigma**2)
    logu = log_prior + t * log_lik
    dx = grid[1] - grid[0]
    w = np.full_like(grid, dx)
    w[0] = w[-1] = dx / 2
    logz = logsumexp(logu, b=w)
    logp = logu - logz
    p = np.exp(logp) * w
    mean = float(np.sum(p * grid))
    var = float(np.sum(p * (grid - mean) ** 2))
    return logp, mean, var


@_timed
def check_bayes_quadrature(times=(0.0, 0.25, 0.5, 1.0), sigmas=(1.0, 0.3, 0.01), xbar=2.0, tol=1e-6):
    """Closed-form conditional log density against brute-force 1-D Bayes quadrature."""
    grid = np.linspace(-10.0, 10.0, 100_001)
    worst = 0.0
    for sigma in sigmas:
        params = H.HomotopyParams(omega=1.0, sigma=sigma, eps_sharp=1e-4, dim=1)
        for t in times:
            logp, mean, var = bayes_quadrature(params, xbar, t, grid)
            st = H.cond_stats(params, np.array([xbar]), t)
            sd = math.sqrt(st.var)
            # compare where the density is non-negligible
            sel = np.abs(grid - st.mean[0]) <= 5 * sd
            ours = H.cond_log_density(params, grid[sel][:, None], np.full((sel.sum(), 1), xbar),
                                      np.full(sel.sum(), t))
            worst = max(worst, float(np.max(np.abs(ours - logp[sel]))),
                        abs(st.mean[0] - mean), abs(st.var - var))
    return Check("homotopy.bayes_quadrature", worst <= tol, worst, tol,
                 f"t in {list(times)}, sigma in {list(sigmas)}")


@_timed
def check_endpoint_prior(tol=1e-12):
    """At t=0 the conditional density is the prior for every datum."""
    params = H.HomotopyParams(omega=1.3, sigma=0.2, eps_sharp=1e-4, dim=2)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 2))
    prior = -0.5 * (2 * math.log(2 * math.pi * params.omega**2) + np.sum(x * x, 1) / params.omega**2)
    worst = 0.0
    for xbar in (np.zeros(2), np.array([3.0, -1.0]), np.array([-7.0, 0.5])):
        ours = H.cond_log_density(params, x, np.tile(xbar, (50, 1)), np.zeros(50))
        worst = max(worst, float(np.max(np.abs(ours - prior))))
    return Check("homotopy.prior_endpoint", worst <= tol, worst, tol)


def pde_dataset(n=16, seed=7):
    return np.random.default_rng(seed).normal(0.0, 1.5, size=(n, 1))


@_timed
def check_homotopy_pde(times=(0.1, 0.5, 0.9), sigma=0.5, h=1e-4, tol=1e-5, mass_tol=1e-6):
    """Finite-difference time derivative of the marginal homotopy against the PDE right-hand side.

    The relative error is taken against the largest magnitude of the
    right-hand side on the grid, since the derivative crosses zero.
    """
    params = H.HomotopyParams(omega=1.0, sigma=sigma, eps_sharp=1e-4, dim=1)
    data = pde_dataset()
    x = np.linspace(-6.0, 6.0, 241)[:, None]
    fine = np.linspace(-12.0, 12.0, 24_001)[:, None]
    worst_rel, worst_mass = 0.0, 0.0
    for t in times:
        rhs = H.marginal_homotopy_dt_oracle(params, data, x, t)
        fd = (np.exp(H.marginal_log_density(params, data, x, t + h))
              - np.exp(H.marginal_log_density(params, data, x, t - h))) / (2 * h)
        worst_rel = max(worst_rel, float(np.max(np.abs(fd - rhs)) / np.max(np.abs(rhs))))
        mass = np.trapezoid(H.marginal_homotopy_dt_oracle(params, data, fine, t), fine[:, 0])
        worst_mass = max(worst_mass, abs(float(mass)))
    ok = worst_rel <= tol and worst_mass <= mass_tol
    return Check("homotopy.pde_finite_difference", ok, worst_rel, tol,
                 f"mass integral max |.| = {worst_mass:.2e} (tol {mass_tol:g})")


def ks_critical(n, alpha=0.01):
    return float(stats.kstwo.ppf(1.0 - alpha, n))


@_timed
def check_time_law(n=100_000, eps=1e-4, seed=0, alpha=0.01):
    """KS statistic of sampled times against the reciprocal CDF on [eps, 1 + eps]."""
    params = H.HomotopyParams(omega=1.0, sigma=0.01, eps_sharp=eps, dim=1)
    u = np.random.default_rng(seed).random(n)
    t = H.sample_time(params, u)
    # reciprocal law of s = t + eps, written out independently of time_cdf
    a, b = eps, 1.0 + eps
    res = stats.kstest(t + eps, lambda s: np.log(np.clip(s, a, b) / a) / np.log(b / a))
    crit = ks_critical(n, alpha)
    return Check("homotopy.time_law_ks", res.statistic < crit, float(res.statistic), crit,
                 f"n={n}, alpha={alpha}")


# --------------------------------------------------------------------------
# gradients


def random_model(rng, max_dim=8, max_hidden=3, max_width=16):
    dim = int(rng.integers(1, max_dim + 1))
    n_hidden = int(rng.integers(1, max_hidden + 1))
    sizes = [dim] + [int(rng.integers(2, max_width + 1)) for _ in range(n_hidden)] + [1]
    act = ACTIVATIONS[int(rng.integers(len(ACTIVATIONS)))]
    model = init(sizes, rng, act, final_scale=1.0)
    model.theta += 0.3 * rng.standard_normal(model.theta.shape)
    return model


def rel_err(approx, exact):
    approx, exact = np.asarray(approx, float), np.asarray(exact, float)
    return float(np.linalg.norm(approx - exact) / max(np.linalg.norm(exact), 1e-8))


def fd_theta(f, theta, h=1e-5):
    out = np.empty_like(theta)
    for i in range(len(theta)):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        out[i] = (f(tp) - f(tm)) / (2 * h)
    return out


def fd_input(f, x, h=1e-5):
    out = np.empty_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (2 * h)
    return out


@_timed
def check_network_gradients(n_configs=100, seed=0, tol=1e-4):
    """Input, parameter and double-backprop gradients against central differences."""
    rng = np.random.default_rng(seed)
    worst = {"input": 0.0, "theta": 0.0, "gradnormsq": 0.0}
    for _ in range(n_configs):
        model = random_model(rng)
        x = rng.standard_normal(model.dim)
        worst["input"] = max(worst["input"], rel_err(
            fd_input(lambda z: forward(model, z).value, x), forward(model, x).input_grad))
        worst["theta"] = max(worst["theta"], rel_err(
            fd_theta(lambda th: forward(model.copy(th), x).value, model.theta),
            grad_theta_value(model, x)))
        worst["gradnormsq"] = max(worst["gradnormsq"], rel_err(
            fd_theta(lambda th: float(np.sum(forward(model.copy(th), x).input_grad ** 2)), model.theta),
            grad_theta_gradnormsq(model, x)))
    value = max(worst.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    return Check("gradients.network", value <= tol, value, tol, f"{n_configs} configs; {detail}")


@_timed
def check_loss_gradient(n_configs=20, seed=1, batch=8, tol=1e-4):
    """Full batch-loss gradient against central differences on frozen draws."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        model = random_model(rng)
        sigma = float(rng.choice([0.01, 0.1, 1.0]))
        params = H.HomotopyParams(omega=1.0, sigma=sigma, eps_sharp=1e-4, dim=model.dim)
        draw = draw_batch(params, rng.standard_normal((batch, model.dim)), rng)
        lam = 1e-3
        _, g = loss_on_draw(model, params, draw, lam)
        fd = fd_theta(lambda th: loss_on_draw(model.copy(th), params, draw, lam, with_grad=False)[0].total,
                      model.theta, h=1e-6)
        worst = max(worst, rel_err(fd, g))
    return Check("gradients.batch_loss", worst <= tol, worst, tol, f"{n_configs} configs, B={batch}")


# --------------------------------------------------------------------------
# ode


@_timed
def check_quadratic_flow(t_end=1.625, rtol=1e-5):
    """Adaptive flow of Phi = -||x||^2/2 against x0 * exp(-t)."""
    cfg = ode.OdeConfig(t_end=t_end, rtol=rtol, atol=1e-6)
    x0 = np.random.default_rng(3).standard_normal((64, 3)) * 2.0
    X, _ = ode.integrate_batch(ode.QuadraticPotential(3, -1.0), x0, cfg)
    exact = x0 * math.exp(-t_end)
    err = float(np.max(np.abs(X - exact) / np.maximum(np.abs(exact), 1.0)))
    return Check("ode.quadratic_closed_form", err <= 10 * rtol, err, 10 * rtol, f"t_end={t_end}")


@_timed
def check_rk4_order(steps=(0.1, 0.05, 0.025), lo=12.0, hi=20.0):
    """Error ratio of fixed-step RK4 under step halving on the quadratic flow."""
    x0 = np.array([[1.0, -2.0, 0.5]])
    exact = x0 * math.exp(-1.625)
    errs = []
    for h in steps:
        X, _ = ode.integrate_batch(ode.QuadraticPotential(3, -1.0), x0,
                                   ode.OdeConfig(method="rk4_fixed", fixed_step=h))
        errs.append(float(np.max(np.abs(X - exact))))
    ratios = [a / b for a, b in zip(errs[:-1], errs[1:])]
    ok = all(lo <= r <= hi for r in ratios)
    return Check("ode.rk4_order", ok, min(ratios), lo, f"ratios={[round(r, 2) for r in ratios]} in [{lo}, {hi}]")


@_timed
def check_energy_ascent(seed=5):
    """Phi never decreases between accepted steps by more than 10 * atol."""
    cfg = ode.OdeConfig()
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(5):
        model = init([2, 16, 16, 1], rng, "gelu", final_scale=1.0)
        _, st = ode.integrate_batch(model, rng.standard_normal((32, 2)), cfg, track_energy=True)
        worst = max(worst, float(np.max(st["energy_drop"])))
    _, st = ode.integrate_batch(ode.QuadraticPotential(2, -1.0), rng.standard_normal((32, 2)), cfg,
                                track_energy=True)
    worst = max(worst, float(np.max(st["energy_drop"])))
    return Check("ode.energy_ascent", worst <= 10 * cfg.atol, worst, 10 * cfg.atol)


SUITE_CHECKS = {
    "homotopy": (check_bayes_quadrature, check_endpoint_prior, check_homotopy_pde, check_time_law),
    "gradients": (check_network_gradients, check_loss_gradient),
    "ode": (check_quadratic_flow, check_rk4_order, check_energy_ascent),
}


def run_suite(name):
    if name == "all":
        return [c for s in SUITES for c in run_suite(s)]
    if name not in SUITE_CHECKS:
        raise ValueError(f"unknown suite {name!r}")
    return [fn() for fn in SUITE_CHECKS[name]]
