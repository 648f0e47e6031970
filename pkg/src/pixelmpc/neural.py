"""Minimal feedforward network engine: ReLU MLP, dropout, MSE, Adam.

Just enough machinery to train and run the pixel-flow regressor
(widths [10, 128, 128, 128, 2]). Weights are float32 for deployment;
the gradient-check tests rebuild tiny networks in float64.

Dropout uses inverted scaling (activations divided by the keep
probability at train time) so inference needs no rescale, and is applied
after each hidden ReLU. Batch math is a fixed sequence of matmuls, so
results are deterministic for a given seed and data order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class CorruptWeightsFile(ValueError):
    """Weights file failed magic/version/shape validation."""


@dataclass(frozen=True)
class NetworkSpec:
    widths: tuple = (10, 128, 128, 128, 2)
    dropout: float = 0.10

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError("need at least two positive layer widths")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


@dataclass
class NetworkWeights:
    W: list  # per-layer (fan_in, fan_out) matrices
    b: list  # per-layer bias vectors

    def copy(self) -> "NetworkWeights":
        return NetworkWeights([w.copy() for w in self.W], [b.copy() for b in self.b])

    def check_finite(self):
        for w in self.W + self.b:
            if not np.all(np.isfinite(w)):
                raise FloatingPointError("non-finite network parameters")


def init_weights(spec: NetworkSpec, seed: int, dtype=np.float32) -> NetworkWeights:
    """He-style uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in)), seeded."""
    rng = np.random.default_rng(seed)
    W, b = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        W.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
        b.append(np.zeros(fan_out, dtype))
    return NetworkWeights(W, b)


def zero_weights(spec: NetworkSpec, dtype=np.float32) -> NetworkWeights:
    W = [np.zeros((a, c), dtype) for a, c in zip(spec.widths[:-1], spec.widths[1:])]
    b = [np.zeros(c, dtype) for c in spec.widths[1:]]
    return NetworkWeights(W, b)


def _dropout_masks(spec: NetworkSpec, shapes, rng, dtype):
    keep = 1.0 - spec.dropout
    return [(rng.random(s) < keep).astype(dtype) / keep for s in shapes]


def forward(weights: NetworkWeights, spec: NetworkSpec, x, *, train=False,
            rng: np.random.Generator | None = None):
    """Run the network on x of shape (d,) or (N, d).

    Inference mode (default) is deterministic. Train mode applies dropout
    to hidden activations using ``rng`` and requires it.
    """
    x = np.asarray(x)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != spec.widths[0]:
        raise ValueError(f"input width {h.shape[1]} != {spec.widths[0]}")
    if train and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    h = h.astype(weights.W[0].dtype, copy=False)
    for i in range(spec.n_layers - 1):
        h = np.maximum(h @ weights.W[i] + weights.b[i], 0)
        if train and spec.dropout > 0:
            h = h * _dropout_masks(spec, [h.shape], rng, h.dtype)[0]
    out = h @ weights.W[-1] + weights.b[-1]
    return out[0] if single else out


def loss_and_grad(weights: NetworkWeights, spec: NetworkSpec, x, y,
                  rng: np.random.Generator | None = None):
    """Mean summed-squared-error loss over a batch and its weight gradient.

    loss = mean over rows of sum_j (out_j - y_j)^2, i.e. the two output
    channels' squared errors added per sample. Gradient is reverse-mode,
    same structure as the weights. ``rng`` enables train-mode dropout.
    """
    x = np.atleast_2d(np.asarray(x))
    y = np.atleast_2d(np.asarray(y))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    dtype = weights.W[0].dtype
    h = x.astype(dtype, copy=False)
    acts = [h]
    masks = []
    train = rng is not None and spec.dropout > 0
    for i in range(spec.n_layers - 1):
        h = np.maximum(h @ weights.W[i] + weights.b[i], 0)
        if train:
            m = _dropout_masks(spec, [h.shape], rng, dtype)[0]
            h = h * m
            masks.append(m)
        else:
            masks.append(None)
        acts.append(h)
    out = h @ weights.W[-1] + weights.b[-1]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite activations in forward pass")
    err = out - y.astype(dtype, copy=False)
    n = x.shape[0]
    loss = float(np.sum(err * err) / n)

    gW = [None] * spec.n_layers
    gb = [None] * spec.n_layers
    delta = (2.0 / n) * err
    gW[-1] = acts[-1].T @ delta
    gb[-1] = delta.sum(axis=0)
    for i in range(spec.n_layers - 2, -1, -1):
        delta = delta @ weights.W[i + 1].T
        if masks[i] is not None:
            delta = delta * masks[i]
        delta = delta * (acts[i + 1] > 0)  # post-dropout activation shares the ReLU support
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
    return loss, NetworkWeights(gW, gb)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)  # first moments, W then b per layer
    v: list = field(default_factory=list)  # second moments

    @classmethod
    def for_weights(cls, weights: NetworkWeights, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        params = weights.W + weights.b
        return cls(lr, beta1, beta2, eps, 0,
                   [np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params])


def adam_step(adam: AdamState, weights: NetworkWeights, grads: NetworkWeights):
    """One bias-corrected Adam update; returns (new AdamState, new weights)."""
    t = adam.step_count + 1
    params = weights.W + weights.b
    gs = grads.W + grads.b
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, gs, adam.m, adam.v):
        m = adam.beta1 * m + (1 - adam.beta1) * g
        v = adam.beta2 * v + (1 - adam.beta2) * (g * g)
        m_hat = m / (1 - adam.beta1**t)
        v_hat = v / (1 - adam.beta2**t)
        new_p.append((p - adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps)).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    k = len(weights.W)
    out = NetworkWeights(new_p[:k], new_p[k:])
    return AdamState(adam.lr, adam.beta1, adam.beta2, adam.eps, t, new_m, new_v), out


WEIGHTS_MAGIC = b"DOF1"
WEIGHTS_VERSION = 1


def save_weights(weights: NetworkWeights, spec: NetworkSpec, path):
    """Write the versioned little-endian float32 weights file."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(spec.widths)))
        f.write(struct.pack(f"<{len(spec.widths)}I", *spec.widths))
        f.write(struct.pack("<d", spec.dropout))
        for W, b in zip(weights.W, weights.b):
            f.write(np.ascontiguousarray(W, "<f4").tobytes())
            f.write(np.ascontiguousarray(b, "<f4").tobytes())


def load_weights(path):
    """Read a weights file; returns (NetworkWeights, NetworkSpec)."""
    with open(path, "rb") as f:
        data = f.read()
    try:
        if data[:4] != WEIGHTS_MAGIC:
            raise CorruptWeightsFile("bad magic")
        version, n_widths = struct.unpack_from("<II", data, 4)
        if version != WEIGHTS_VERSION:
            raise CorruptWeightsFile(f"unsupported version {version}")
        off = 12
        widths = struct.unpack_from(f"<{n_widths}I", data, off)
        off += 4 * n_widths
        (dropout,) = struct.unpack_from("<d", data, off)
        off += 8
        spec = NetworkSpec(widths, float(dropout))
        W, b = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            nbytes = 4 * fan_in * fan_out
            Wm = np.frombuffer(data, "<f4", fan_in * fan_out, off).reshape(fan_in, fan_out)
            off += nbytes
            bv = np.frombuffer(data, "<f4", fan_out, off)
            off += 4 * fan_out
            W.append(Wm.copy())
            b.append(bv.copy())
        if off != len(data):
            raise CorruptWeightsFile("trailing bytes")
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CorruptWeightsFile):
            raise
        raise CorruptWeightsFile(str(exc)) from exc
    return NetworkWeights(W, b), spec
