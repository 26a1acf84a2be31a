"""Training loop: minibatching, the variational loss, and the optimizer update."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .homotopy import HomotopyParams
from .loss import LossBreakdown, batch_loss
from .potential import PotentialModel

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_momentum")
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
SGD_MOMENTUM = 0.9


class TrainingError(RuntimeError):
    """Training aborted; ``model`` holds the last parameters with a finite loss."""

    def __init__(self, msg, model=None, step=None):
        super().__init__(msg)
        self.model = model
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    steps: int = 20_000
    lr: float = 1e-3
    optimizer: str = "adam"
    lam: float = 1e-3
    eps_sharp: float = 1e-4
    omega: float = 1.0
    sigma: float = 0.01
    seed: int = 0
    checkpoint_every: int = 1000
    grad_clip: float | None = None
    weight_decay: float = 0.0
    hidden: tuple = (128, 128)
    activation: str = "gelu"
    n_data: int = 20_000
    standardize: bool = True

    def __post_init__(self):
        for name in ("batch_size", "checkpoint_every", "n_data"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        for name in ("lr", "lam", "eps_sharp", "omega", "sigma"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def homotopy_params(self, dim) -> HomotopyParams:
        return HomotopyParams(omega=self.omega, sigma=self.sigma, eps_sharp=self.eps_sharp, dim=dim)

    def layer_sizes(self, dim):
        return [dim, *self.hidden, 1]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        d["hidden"] = list(self.hidden)
        return d


# config-file key -> (attribute, parser)
def _parse_bool(s):
    s = s.strip().lower()
    if s in ("true", "yes", "1", "on"):
        return True
    if s in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_opt_float(s):
    return None if s.strip().lower() in ("none", "") else float(s)


_KEYS = {
    "batch_size": ("batch_size", int),
    "steps": ("steps", int),
    "lr": ("lr", float),
    "optimizer": ("optimizer", str),
    "lambda": ("lam", float),
    "eps_sharp": ("eps_sharp", float),
    "omega": ("omega", float),
    "sigma": ("sigma", float),
    "seed": ("seed", int),
    "checkpoint_every": ("checkpoint_every", int),
    "grad_clip": ("grad_clip", _parse_opt_float),
    "weight_decay": ("weight_decay", float),
    "hidden": ("hidden", lambda s: tuple(int(v) for v in s.split(",") if v.strip())),
    "activation": ("activation", str),
    "n_data": ("n_data", int),
    "standardize": ("standardize", _parse_bool),
}


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        attr, conv = _KEYS[key]
        try:
            values[attr] = conv(val)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return dataclasses.replace(base or TrainConfig(), **values)


def format_config(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for key in _KEYS:
        v = d[key]
        if isinstance(v, list):
            v = ",".join(str(i) for i in v)
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class OptimizerState:
    kind: str
    count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def arrays(self):
        return np.stack([self.m, self.v]) if self.kind == "adam" else self.m[None, :]

    @classmethod
    def from_arrays(cls, kind, count, arr):
        if kind == "adam":
            return cls(kind, count, arr[0].copy(), arr[1].copy())
        return cls(kind, count, arr[0].copy())


def init_optimizer(cfg: TrainConfig, n_params: int) -> OptimizerState:
    if cfg.optimizer == "adam":
        return OptimizerState("adam", 0, np.zeros(n_params), np.zeros(n_params))
    return OptimizerState("sgd_momentum", 0, np.zeros(n_params))


def clip_grad(grad, max_norm):
    norm = float(np.linalg.norm(grad))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def optimizer_step(state: OptimizerState, theta, grad, cfg: TrainConfig):
    """One Adam (bias-corrected) or SGD-with-momentum update.

    Clipping by global norm happens here, before the moments are updated.
    Returns ``(new_state, new_theta)``; inputs are not modified.
    """
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError("shape mismatch between theta, grad and optimizer state")
    grad = clip_grad(grad, cfg.grad_clip)
    count = state.count + 1
    if state.kind == "adam":
        m = ADAM_BETA1 * state.m + (1 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * state.v + (1 - ADAM_BETA2) * grad * grad
        mhat = m / (1 - ADAM_BETA1**count)
        vhat = v / (1 - ADAM_BETA2**count)
        return OptimizerState("adam", count, m, v), theta - cfg.lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    m = SGD_MOMENTUM * state.m + grad
    return OptimizerState("sgd_momentum", count, m), theta - cfg.lr * m


@dataclass(frozen=True)
class TrainLogRecord:
    step: int
    loss: LossBreakdown
    grad_norm: float
    wall_ms: float


def epoch_permutation(seed, epoch, n):
    return np.random.default_rng([seed, 1, epoch]).permutation(n)


def step_rng(seed, step):
    return np.random.default_rng([seed, 2, step])


def batch_indices(seed, step, n, batch_size):
    """Indices for 1-based ``step``: consecutive slices of per-epoch permutations."""
    start = (step - 1) * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start, n)
        perm = epoch_permutation(seed, epoch, n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset:offset + take].tolist())
        start += take
    return np.array(out)


@dataclass
class TrainState:
    model: PotentialModel
    opt: OptimizerState
    step: int = 0
    history: list = field(default_factory=list)


def train(data, model: PotentialModel, cfg: TrainConfig, on_step=None, on_checkpoint=None,
          start: TrainState | None = None):
    """Run ``cfg.steps`` iterations of the variational training loop.

    Args:
        data: ``(N, D)`` array of training points (already in model space).
        model: Initial potential; not modified.
        cfg: Training configuration.
        on_step: Optional callback ``f(record)`` per step.
        on_checkpoint: Optional callback ``f(step, model, opt_state)`` every
            ``cfg.checkpoint_every`` steps and at the final step.
        start: Resume point; its ``step`` counts already completed iterations.

    Returns:
        ``(model, records)``.

    Raises:
        TrainingError: if a loss term or the gradient becomes non-finite.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise ValueError(f"data dimension {data.shape} does not match model dimension {model.dim}")
    params = cfg.homotopy_params(model.dim)
    if start is None:
        start = TrainState(model.copy(), init_optimizer(cfg, len(model.theta)))
    state_model, opt = start.model.copy(), start.opt
    records = []
    n = len(data)
    for step in range(start.step + 1, cfg.steps + 1):
        t0 = time.perf_counter()
        idx = batch_indices(cfg.seed, step, n, cfg.batch_size)
        loss, grad = batch_loss(state_model, params, data[idx], step_rng(cfg.seed, step), cfg.lam)
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * state_model.theta
        gnorm = float(np.linalg.norm(grad))
        if not (math.isfinite(loss.total) and math.isfinite(gnorm)):
            raise TrainingError(f"non-finite loss at step {step}", model=state_model, step=step - 1)
        opt, theta = optimizer_step(opt, state_model.theta, grad, cfg)
        state_model = state_model.copy(theta)
        rec = TrainLogRecord(step, loss, gnorm, (time.perf_counter() - t0) * 1e3)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
        if on_checkpoint is not None and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
            on_checkpoint(step, state_model, opt)
    return state_model, records
