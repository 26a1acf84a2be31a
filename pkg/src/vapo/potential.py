"""Scalar potential-energy MLP with exact first and mixed second derivatives.

The network maps ``R^D -> R`` through fully-connected hidden layers with a
C^2 activation and a linear scalar output.  All parameters live in one flat
``theta`` vector; :meth:`PotentialModel.layout` gives the ``(W, b)`` slices.

Besides the value and the input gradient ``grad_x Phi`` (the flow field of the
sampler), the model provides a single vector-Jacobian routine,
:func:`vjp_theta`, that differentiates

    sum_i c_i * Phi(x_i) + sum_i d_i * ||grad_x Phi(x_i)||^2

with respect to ``theta``.  The second sum is the double-backprop path needed
by the gradient penalty of the training loss; it is computed by
reverse-over-reverse differentiation of the explicit backward sweep.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

ACTIVATIONS = ("gelu", "tanh")
_ACT_ID = {"gelu": 0, "tanh": 1}

CKPT_MAGIC = b"VAPO"
CKPT_VERSION = 1

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or corrupt."""


def _act(name, z):
    """Return activation value, first and second derivative at ``z``."""
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
        return z * cdf, cdf + z * pdf, pdf * (2.0 - z * z)
    if name == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class PotentialModel:
    """MLP potential ``Phi_theta``.

    Attributes:
        layer_sizes: ``[D, h_1, ..., h_L, 1]`` with at least one hidden layer.
        theta: Flat float64 parameter vector, per layer ``W`` (out x in,
            row-major) followed by ``b``.
        activation: ``"gelu"`` or ``"tanh"``.
    """

    layer_sizes: list[int]
    theta: np.ndarray
    activation: str = "gelu"
    _layout: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        validate_layer_sizes(self.layer_sizes)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        n = num_params(self.layer_sizes)
        if self.theta.shape != (n,):
            raise ValueError(f"theta must have shape ({n},), got {self.theta.shape}")
        self._layout = _make_layout(self.layer_sizes)

    @property
    def dim(self) -> int:
        return self.layer_sizes[0]

    def layout(self):
        """List of ``((w_start, w_stop, out, in), (b_start, b_stop))`` per layer."""
        return list(self._layout)

    def weights(self, theta=None):
        theta = self.theta if theta is None else theta
        out = []
        for (w0, w1, o, i), (b0, b1) in self._layout:
            out.append((theta[w0:w1].reshape(o, i), theta[b0:b1]))
        return out

    def copy(self, theta=None) -> "PotentialModel":
        return PotentialModel(list(self.layer_sizes), self.theta.copy() if theta is None else theta,
                              self.activation)

    # convenience wrappers used by the sampler and evaluation code
    def value(self, x):
        return forward(self, x).value

    def grad(self, x):
        return forward(self, x).input_grad

    def value_and_grad(self, x):
        rec = forward(self, x)
        return rec.value, rec.input_grad


@dataclass
class EvalRecord:
    """Output of :func:`forward`; ``cache`` is only valid for the ``x`` that produced it."""

    value: np.ndarray | float
    input_grad: np.ndarray
    cache: dict = field(repr=False)


def validate_layer_sizes(sizes):
    if len(sizes) < 3:
        raise ValueError("need at least one hidden layer: [D, h_1, ..., 1]")
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    if sizes[-1] != 1:
        raise ValueError("output layer must have size 1")


def num_params(sizes) -> int:
    return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))


def _make_layout(sizes):
    layout, pos = [], 0
    for i, o in zip(sizes[:-1], sizes[1:]):
        w = (pos, pos + i * o, o, i)
        pos += i * o
        b = (pos, pos + o)
        pos += o
        layout.append((w, b))
    return layout


def init(layer_sizes, rng, activation="gelu", final_scale=0.01) -> PotentialModel:
    """He-normal weights, zero biases, output weights scaled by ``final_scale``.

    Args:
        layer_sizes: ``[D, h_1, ..., h_L, 1]``.
        rng: Seed or ``numpy.random.Generator``.
    """
    sizes = [int(s) for s in layer_sizes]
    validate_layer_sizes(sizes)
    rng = np.random.default_rng(rng)
    theta = np.zeros(num_params(sizes))
    layout = _make_layout(sizes)
    for k, ((w0, w1, o, i), _) in enumerate(layout):
        w = rng.standard_normal((o, i)) * np.sqrt(2.0 / i)
        if k == len(layout) - 1:
            w *= final_scale
        theta[w0:w1] = w.ravel()
    return PotentialModel(sizes, theta, activation)


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"expected inputs of dimension {model.dim}, got shape {x.shape}")
    return X, single


def _forward_batch(model, X, theta=None):
    layers = model.weights(theta)
    hs, zs, d1s, d2s = [X], [], [], []
    h = X
    for W, b in layers[:-1]:
        z = h @ W.T + b
        a, d1, d2 = _act(model.activation, z)
        zs.append(z)
        d1s.append(d1)
        d2s.append(d2)
        hs.append(a)
        h = a
    w_out, b_out = layers[-1]
    value = h @ w_out[0] + b_out[0]
    # reverse sweep for grad_x: gs[l] is dPhi/dh_l
    gs = [None] * len(hs)
    gs[-1] = np.broadcast_to(w_out[0], h.shape)
    ds = [None] * len(zs)
    for l in range(len(zs) - 1, -1, -1):
        ds[l] = gs[l + 1] * d1s[l]
        gs[l] = ds[l] @ layers[l][0]
    cache = {"layers": layers, "hs": hs, "zs": zs, "d1s": d1s, "d2s": d2s, "gs": gs, "ds": ds}
    return value, gs[0], cache


def forward(model: PotentialModel, x) -> EvalRecord:
    """Evaluate ``Phi(x)`` and its exact input gradient.

    ``x`` is ``(D,)`` or ``(B, D)``; outputs follow the same batching.
    """
    X, single = _as_batch(model, x)
    value, g, cache = _forward_batch(model, X)
    if single:
        return EvalRecord(float(value[0]), g[0].copy(), cache)
    return EvalRecord(value, np.array(g), cache)


def vjp_theta(model: PotentialModel, x, c_value=None, c_gradsq=None, record=None):
    """Gradient over theta of ``sum c_value * Phi(x) + sum c_gradsq * ||grad_x Phi(x)||^2``.

    Args:
        model: The potential.
        x: Batch ``(B, D)`` (or a single point).
        c_value: Per-sample weights on the value, shape ``(B,)``; ``None`` means zero.
        c_gradsq: Per-sample weights on the squared input-gradient norm.
        record: Optional :class:`EvalRecord` from ``forward(model, x)`` to reuse.

    Returns:
        Flat array with the same layout as ``model.theta``.
    """
    X, _ = _as_batch(model, x)
    B = len(X)
    cache = record.cache if record is not None else _forward_batch(model, X)[2]
    layers, hs, d1s, d2s, gs, ds = (cache[k] for k in ("layers", "hs", "d1s", "d2s", "gs", "ds"))
    L = len(layers) - 1
    cv = np.zeros(B) if c_value is None else np.broadcast_to(np.asarray(c_value, float), (B,))
    cg = None if c_gradsq is None else np.broadcast_to(np.asarray(c_gradsq, float), (B,))

    grads = [[np.zeros_like(W), np.zeros_like(b)] for W, b in layers]
    # adjoints of pre-activations z_l coming from the backward sweep
    zbar_bw = [np.zeros_like(d) for d in d1s]
    if cg is not None and np.any(cg != 0.0):
        gbar = 2.0 * cg[:, None] * gs[0]
        for l in range(L):
            W = layers[l][0]
            # g_l = d_l W_l ; d_l = g_{l+1} * a'(z_l)
            grads[l][0] += ds[l].T @ gbar
            dbar = gbar @ W.T
            zbar_bw[l] = dbar * gs[l + 1] * d2s[l]
            gbar = dbar * d1s[l]
        # g_L = broadcast(w_out)
        grads[L][0][0] += gbar.sum(axis=0)

    # output layer value path
    grads[L][0][0] += cv @ hs[L]
    grads[L][1][0] += cv.sum()
    hbar = cv[:, None] * layers[L][0][0]
    for l in range(L - 1, -1, -1):
        zbar = hbar * d1s[l] + zbar_bw[l]
        grads[l][0] += zbar.T @ hs[l]
        grads[l][1] += zbar.sum(axis=0)
        hbar = zbar @ layers[l][0]

    out = np.empty_like(model.theta)
    for ((w0, w1, _, _), (b0, b1)), (gW, gb) in zip(model.layout(), grads):
        out[w0:w1] = gW.ravel()
        out[b0:b1] = gb
    return out


def grad_theta_value(model: PotentialModel, x):
    """Exact ``dPhi(x)/dtheta`` for a single point."""
    X, _ = _as_batch(model, x)
    if len(X) != 1:
        raise ValueError("grad_theta_value takes a single point; use vjp_theta for batches")
    return vjp_theta(model, X, c_value=np.ones(1))


def grad_theta_gradnormsq(model: PotentialModel, x):
    """Exact ``d||grad_x Phi(x)||^2/dtheta`` for a single point (double backprop)."""
    X, _ = _as_batch(model, x)
    if len(X) != 1:
        raise ValueError("grad_theta_gradnormsq takes a single point; use vjp_theta for batches")
    return vjp_theta(model, X, c_gradsq=np.ones(1))


def save_checkpoint(model: PotentialModel, path) -> None:
    """Write ``model`` in the little-endian VAPO checkpoint format.

    Layout: magic ``VAPO``, u32 version, u32 D, u32 number of entries in
    ``layer_sizes``, u32[] layer sizes, u32 activation id, float64 theta,
    u32 CRC32 of the theta bytes.
    """
    sizes = model.layer_sizes
    header = CKPT_MAGIC + struct.pack(f"<III{len(sizes)}II", CKPT_VERSION, sizes[0], len(sizes),
                                      *sizes, _ACT_ID[model.activation])
    body = model.theta.astype("<f8").tobytes()
    Path(path).write_bytes(header + body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> PotentialModel:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4
    if len(data) < pos + 12:
        raise CheckpointError(f"{path}: truncated header")
    version, dim, n_sizes = struct.unpack_from("<III", data, pos)
    pos += 12
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(data) < pos + 4 * n_sizes + 4:
        raise CheckpointError(f"{path}: truncated header")
    sizes = list(struct.unpack_from(f"<{n_sizes}I", data, pos))
    pos += 4 * n_sizes
    (act_id,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if not sizes or sizes[0] != dim:
        raise CheckpointError(f"{path}: dimension field disagrees with layer sizes")
    try:
        validate_layer_sizes(sizes)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    acts = {v: k for k, v in _ACT_ID.items()}
    if act_id not in acts:
        raise CheckpointError(f"{path}: unknown activation id {act_id}")
    n = num_params(sizes)
    if len(data) != pos + 8 * n + 4:
        raise CheckpointError(f"{path}: truncated or oversized body "
                              f"(expected {pos + 8 * n + 4} bytes, got {len(data)})")
    body = data[pos:pos + 8 * n]
    (crc,) = struct.unpack_from("<I", data, pos + 8 * n)
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return PotentialModel(sizes, theta, acts[act_id])
