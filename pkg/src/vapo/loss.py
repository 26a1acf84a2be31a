"""Variational energy loss over the data-likelihood homotopy.

Per datum ``xbar_i`` one time ``t_i`` (log-uniform law) and one perturbed
point ``x_i ~ rho(x; xbar_i, t_i)`` are drawn.  With ``phi_i = Phi(x_i)``:

    cov    = mean_i phi_i * (gamma(x_i, xbar_i) - gamma_bar(xbar_i, t_i))
    gradsq = mean_i ||grad_x Phi(x_i)||^2
    l2     = mean_i phi_i^2
    total  = 0.5 * (cov + gradsq + lambda * l2)

The covariance is centred per sample with the analytic conditional mean of
the innovation, so the estimator is well defined for any batch size and for
mixed times within a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import homotopy
from .homotopy import HomotopyParams
from .potential import PotentialModel, forward, vjp_theta


@dataclass(frozen=True)
class LossBreakdown:
    cov_term: float
    gradsq_term: float
    l2_term: float
    total: float
    lam: float
    batch_size: int


@dataclass(frozen=True)
class BatchDraw:
    """The random quantities of one loss evaluation, kept so it can be replayed."""

    xbar: np.ndarray
    t: np.ndarray
    x: np.ndarray


def draw_batch(params: HomotopyParams, xbar, rng) -> BatchDraw:
    """Draw ``(t_i, x_i)`` for each datum in ``xbar`` using ``rng``."""
    xbar = np.atleast_2d(np.asarray(xbar, dtype=np.float64))
    if len(xbar) == 0:
        raise ValueError("empty batch")
    if xbar.shape[1] != params.dim:
        raise ValueError(f"batch dimension {xbar.shape[1]} != params.dim {params.dim}")
    rng = np.random.default_rng(rng)
    u = rng.random(len(xbar))
    noise = rng.standard_normal(xbar.shape)
    t = homotopy.sample_time(params, u)
    t = np.atleast_1d(t)
    x = homotopy.sample_cond(params, xbar, t, noise)
    return BatchDraw(xbar=xbar, t=t, x=x)


def cov_estimator_centered(phi, gamma, gamma_bar) -> float:
    """Mean of ``phi * (gamma - gamma_bar)``; ``phi`` itself is not centred."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.size == 0:
        raise ValueError("empty input")
    return float(np.mean(phi * (np.asarray(gamma) - np.asarray(gamma_bar))))


def loss_on_draw(model: PotentialModel, params: HomotopyParams, draw: BatchDraw, lam: float,
                 with_grad=True):
    """Evaluate the loss (and optionally its exact theta-gradient) on fixed draws."""
    if model.dim != params.dim:
        raise ValueError(f"model dimension {model.dim} != params.dim {params.dim}")
    B = len(draw.x)
    rec = forward(model, draw.x)
    phi = rec.value
    resid = homotopy.innovation(params, draw.x, draw.xbar) - homotopy.innovation_cond_mean(
        params, draw.xbar, draw.t)
    gsq = np.sum(rec.input_grad**2, axis=1)
    cov = cov_estimator_centered(phi, resid, 0.0)
    gradsq = float(np.mean(gsq))
    l2 = float(np.mean(phi * phi))
    total = 0.5 * (cov + gradsq + lam * l2)
    loss = LossBreakdown(cov, gradsq, l2, total, lam, B)
    if not with_grad:
        return loss, None
    c_value = (0.5 / B) * (resid + 2.0 * lam * phi)
    c_gradsq = np.full(B, 0.5 / B)
    grad = vjp_theta(model, draw.x, c_value=c_value, c_gradsq=c_gradsq, record=rec)
    return loss, grad


def batch_loss(model: PotentialModel, params: HomotopyParams, batch, rng, lam: float = 1e-3):
    """Draw times and perturbed points for ``batch`` and return ``(LossBreakdown, grad_theta)``."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    draw = draw_batch(params, batch, rng)
    return loss_on_draw(model, params, draw, lam)
