"""Velocity-field network: a small SiLU MLP with exactly the derivative
support the flow loss needs.

Three computations matter:
  * forward(net, c)            velocity prediction,
  * jvp_input(net, c, t)       directional derivative w.r.t. the input
                               (the divergence is assembled from d of these),
  * backprop through both      reverse-mode parameter gradients of a scalar
                               loss built from forward values *and* JVPs.

The tangent chain of an affine+SiLU layer is itself an affine chain modulated
by silu'(z), so reverse mode over it needs silu'' but nothing deeper.  All of
it is implemented directly on numpy arrays; finite-difference tests pin every
path down.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ._rng import derive_rng

__all__ = [
    "FlowNetwork",
    "OptimizerState",
    "init",
    "init_optimizer",
    "forward",
    "jvp_input",
    "forward_tape",
    "backprop",
    "loss_gradient",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"PINF"
CHECKPOINT_VERSION = 1
_ACTIVATION_IDS = {"silu": 0}
_FEATURE_MODE_IDS = {"full": 0, "no_gradients": 1}


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _silu_terms(z):
    """silu(z) with first and second derivatives, sharing the sigmoid eval."""
    s = _sigmoid(z)
    a = z * s
    sp = s * (1.0 + z * (1.0 - s))       # d/dz [z * sigmoid(z)]
    spp = s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
    return a, sp, spp


@dataclass
class FlowNetwork:
    """MLP parameters; weights[l] has shape (fan_in, fan_out), biases[l] (fan_out,)."""

    weights: list
    biases: list
    activation: str = "silu"
    feature_mode: str = "full"
    trained_epochs: int = 0

    @property
    def widths(self) -> tuple:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[1]

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init(widths, seed) -> FlowNetwork:
    """Fan-in-scaled uniform weights, zero biases.

    The +-1/sqrt(fan_in) bound keeps the layer gain below one even when
    large-magnitude features push the activations into their linear regime,
    so freshly initialized velocity fields stay O(1) and the Euler
    integration cannot run away before training shapes the field.
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ValueError(f"invalid layer widths {widths}")
    weights, biases = [], []
    for layer, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        rng = derive_rng(seed, "init", layer)
        limit = 1.0 / np.sqrt(n_in)
        weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return FlowNetwork(weights=weights, biases=biases)


class _Tape:
    """Cached intermediates of one forward(+tangent) pass."""

    __slots__ = ("out", "jvp", "inputs_a", "inputs_t", "sp", "spp", "zt")

    def __init__(self):
        self.out = None
        self.jvp = None
        self.inputs_a = []   # layer inputs, post-activation
        self.inputs_t = []   # tangent layer inputs
        self.sp = []         # silu' at hidden pre-activations
        self.spp = []        # silu'' at hidden pre-activations
        self.zt = []         # tangent pre-activations at hidden layers


def _forward_pass(Ws, bs, C, T=None, keep=False):
    """Shared forward: C (R, F), optional tangents T (R, K, F)."""
    tape = _Tape() if keep else None
    n_layers = len(Ws)
    a = C
    t = T
    for layer in range(n_layers):
        W = Ws[layer]
        b = bs[layer]
        if keep:
            tape.inputs_a.append(a)
            tape.inputs_t.append(t)
        z = a @ W + b
        zt = t @ W if t is not None else None
        if layer < n_layers - 1:
            a, sp, spp = _silu_terms(z)
            if t is not None:
                t = sp[:, None, :] * zt
            if keep:
                tape.sp.append(sp)
                tape.spp.append(spp)
                tape.zt.append(zt)
        else:
            a = z
            t = zt
    if keep:
        tape.out = a
        tape.jvp = t
        return tape
    return a, t


def _check_input(net: FlowNetwork, C):
    C = np.asarray(C)
    if C.shape[-1] != net.input_width:
        raise ValueError(f"feature width {C.shape[-1]} does not match network input width {net.input_width}")
    return C


def forward(net: FlowNetwork, c):
    """Velocity for feature vector(s) c: (F,) -> (d,), (R, F) -> (R, d)."""
    c = _check_input(net, c)
    single = c.ndim == 1
    out, _ = _forward_pass(net.weights, net.biases, np.atleast_2d(c))
    return out[0] if single else out


def jvp_input(net: FlowNetwork, c, tangent):
    """Directional derivative of forward w.r.t. the input, exact and linear."""
    c = _check_input(net, c)
    tangent = np.asarray(tangent)
    if tangent.shape != c.shape:
        raise ValueError("tangent shape must match feature shape")
    single = c.ndim == 1
    C = np.atleast_2d(c)
    T = np.atleast_2d(tangent)[:, None, :]
    _, jvp = _forward_pass(net.weights, net.biases, C, T)
    return jvp[0, 0] if single else jvp[:, 0, :]


def forward_tape(net: FlowNetwork, C, T=None, weights=None, biases=None):
    """Forward(+tangent) pass retaining intermediates for backprop.

    weights/biases override the network parameters (used by the trainer to
    run the heavy passes in float32 working copies).
    """
    Ws = net.weights if weights is None else weights
    bs = net.biases if biases is None else biases
    C = np.asarray(C)
    if T is not None:
        T = np.asarray(T)
    return _forward_pass(Ws, bs, C, T, keep=True)


def backprop(net: FlowNetwork, tape: _Tape, d_out, d_jvp=None, weights=None):
    """Parameter gradients given cotangents of the outputs and the JVPs.

    Returns a list of (dW, db) in layer order.  The tangent chain couples
    back into the primal pre-activations through silu'', which is what makes
    gradients of divergence terms exact.
    """
    Ws = net.weights if weights is None else weights
    n_layers = len(Ws)
    dzp = np.asarray(d_out)
    dzt = None if d_jvp is None else np.asarray(d_jvp)
    grads = [None] * n_layers
    for layer in range(n_layers - 1, -1, -1):
        in_a = tape.inputs_a[layer]
        dW = in_a.T @ dzp
        db = dzp.sum(axis=0)
        if dzt is not None:
            in_t = tape.inputs_t[layer]
            dW += in_t.reshape(-1, in_t.shape[-1]).T @ dzt.reshape(-1, dzt.shape[-1])
        grads[layer] = (dW, db)
        if layer == 0:
            break
        W = Ws[layer]
        da = dzp @ W.T
        dt = dzt @ W.T if dzt is not None else None
        sp = tape.sp[layer - 1]
        if dzt is not None:
            spp = tape.spp[layer - 1]
            zt = tape.zt[layer - 1]
            dzp = sp * da + spp * np.sum(zt * dt, axis=1)
            dzt = sp[:, None, :] * dt
        else:
            dzp = sp * da
    return grads


def loss_gradient(net: FlowNetwork, C, T, loss_fn):
    """Reverse-mode gradient of a scalar loss built from forward and JVP values.

    loss_fn(out, jvp) must return (value, d_out, d_jvp); d_jvp may be None
    when the loss ignores the JVPs.  Raises on non-finite loss, pointing at
    the first offending row.
    """
    C = _check_input(net, C)
    tape = forward_tape(net, C, T)
    value, d_out, d_jvp = loss_fn(tape.out, tape.jvp)
    if not np.isfinite(value):
        bad = np.flatnonzero(~np.isfinite(tape.out).all(axis=-1))
        where = f" (first non-finite output at particle {bad[0]})" if bad.size else ""
        raise FloatingPointError(f"non-finite loss {value!r}{where}")
    return value, backprop(net, tape, d_out, d_jvp)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments plus the step-decay learning-rate schedule."""

    m: list
    v: list
    step: int = 0
    lr: float = 0.004
    decay: float = 0.8
    decay_every: int = 300
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def effective_lr(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.decay_every)


def init_optimizer(net: FlowNetwork, lr=0.004, decay=0.8, decay_every=300, clip=1.0) -> OptimizerState:
    zeros = lambda: [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
    return OptimizerState(m=zeros(), v=zeros(), lr=lr, decay=decay, decay_every=decay_every, clip=clip)


def global_grad_norm(grads) -> float:
    total = 0.0
    for dW, db in grads:
        total += float(np.sum(np.asarray(dW, dtype=np.float64) ** 2))
        total += float(np.sum(np.asarray(db, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def adam_step(net: FlowNetwork, grads, opt: OptimizerState, epoch: int = 0):
    """One Adam update with global-norm clipping; returns (net, opt) updated."""
    for dW, db in grads:
        if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
            raise FloatingPointError("non-finite gradient")
    norm = global_grad_norm(grads)
    scale = opt.clip / norm if norm > opt.clip else 1.0
    lr_t = opt.effective_lr(epoch)
    t = opt.step + 1
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    new_w, new_b, new_m, new_v = [], [], [], []
    for (W, b), (dW, db), (mW, mb), (vW, vb) in zip(
        zip(net.weights, net.biases), grads, opt.m, opt.v
    ):
        gW = np.asarray(dW, dtype=W.dtype) * scale
        gb = np.asarray(db, dtype=b.dtype) * scale
        mW = opt.beta1 * mW + (1.0 - opt.beta1) * gW
        mb = opt.beta1 * mb + (1.0 - opt.beta1) * gb
        vW = opt.beta2 * vW + (1.0 - opt.beta2) * gW * gW
        vb = opt.beta2 * vb + (1.0 - opt.beta2) * gb * gb
        new_w.append(W - lr_t * (mW / bc1) / (np.sqrt(vW / bc2) + opt.eps))
        new_b.append(b - lr_t * (mb / bc1) / (np.sqrt(vb / bc2) + opt.eps))
        new_m.append((mW, mb))
        new_v.append((vW, vb))
    net2 = FlowNetwork(
        weights=new_w,
        biases=new_b,
        activation=net.activation,
        feature_mode=net.feature_mode,
        trained_epochs=net.trained_epochs,
    )
    opt2 = OptimizerState(
        m=new_m, v=new_v, step=t,
        lr=opt.lr, decay=opt.decay, decay_every=opt.decay_every, clip=opt.clip,
        beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
    )
    return net2, opt2


# ---------------------------------------------------------------------------
# checkpoint wire format
# ---------------------------------------------------------------------------
#
#   "PINF" | u32 version | u32 activation id | u32 feature mode | u64 epochs
#   | u32 n_widths | u32 widths[] | per layer: f64 W row-major, f64 b
#   | u32 CRC32 of everything before it
#
# little-endian throughout; weights are (fan_in, fan_out) row-major.


def save_checkpoint(net: FlowNetwork, path) -> None:
    widths = net.widths
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", _ACTIVATION_IDS[net.activation]),
        struct.pack("<I", _FEATURE_MODE_IDS[net.feature_mode]),
        struct.pack("<Q", int(net.trained_epochs)),
        struct.pack("<I", len(widths)),
        struct.pack(f"<{len(widths)}I", *widths),
    ]
    for W, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path) -> FlowNetwork:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a PINF checkpoint")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checkpoint CRC mismatch")
    off = 4
    version, act_id, mode_id = struct.unpack_from("<III", payload, off)
    off += 12
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (epochs,) = struct.unpack_from("<Q", payload, off)
    off += 8
    (n_widths,) = struct.unpack_from("<I", payload, off)
    off += 4
    widths = struct.unpack_from(f"<{n_widths}I", payload, off)
    off += 4 * n_widths
    activation = {v: k for k, v in _ACTIVATION_IDS.items()}[act_id]
    feature_mode = {v: k for k, v in _FEATURE_MODE_IDS.items()}[mode_id]
    weights, biases = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        W = np.frombuffer(payload, dtype="<f8", count=n_in * n_out, offset=off).reshape(n_in, n_out)
        off += 8 * n_in * n_out
        b = np.frombuffer(payload, dtype="<f8", count=n_out, offset=off)
        off += 8 * n_out
        weights.append(W.copy())
        biases.append(b.copy())
    if off != len(payload):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return FlowNetwork(
        weights=weights, biases=biases, activation=activation,
        feature_mode=feature_mode, trained_epochs=int(epochs),
    )
