"""Tiny layered feedforward net with hand-written backprop, plus a toy dataset.

Small enough to train in seconds at desk scale while still having per-layer
structure (one dense layer + activation per model layer), which is what the
split protocol and the per-layer gradient statistics need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("identity", "tanh", "relu")
LOSSES = ("softmax_ce", "squared")


@dataclass(frozen=True)
class LayeredNet:
    """Architecture only; parameters are handled as explicit lists of (W, b)."""

    widths: tuple      # length L+1: input dim, then one width per layer
    activations: tuple # length L, each in ACTIVATIONS
    loss: str = "softmax_ce"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("widths must contain the input dim and at least one layer")
        if len(self.activations) != self.num_layers:
            raise ValueError("need one activation per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def num_layers(self):
        return len(self.widths) - 1


def init_params(net: LayeredNet, seed: int, scale: float = 1.0):
    """Fan-in scaled Gaussian init, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = []
    for j in range(net.num_layers):
        fan_in = net.widths[j]
        w = rng.normal(0.0, scale / np.sqrt(fan_in), size=(net.widths[j + 1], fan_in))
        b = np.zeros(net.widths[j + 1])
        params.append((w, b))
    return params


def clone_params(params):
    return [(w.copy(), b.copy()) for w, b in params]


def _act(kind, z):
    if kind == "identity":
        return z
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)  # relu


def _act_grad(kind, z):
    if kind == "identity":
        return np.ones_like(z)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.where(z > 0, 1.0, 0.0)  # relu subgradient at 0 fixed to 0


def forward(net: LayeredNet, params, x):
    """Returns (per-layer pre-activations, per-layer activations incl. input)."""
    pre, acts = [], [x]
    a = x
    for kind, (w, b) in zip(net.activations, params):
        z = a @ w.T + b
        a = _act(kind, z)
        pre.append(z)
        acts.append(a)
    return pre, acts


def _onehot(y, n_classes):
    out = np.zeros((len(y), n_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


def loss_and_grads(net: LayeredNet, params, x, y):
    """Mini-batch mean loss and per-layer parameter gradients."""
    pre, acts = forward(net, params, x)
    out = acts[-1]
    n = x.shape[0]
    target = _onehot(np.asarray(y), net.widths[-1])
    if net.loss == "softmax_ce":
        shifted = out - out.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        probs = expd / expd.sum(axis=1, keepdims=True)
        loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300))))
        d_out = (probs - target) / n
    else:
        diff = out - target
        loss = float(0.5 * np.sum(diff * diff) / n)
        d_out = diff / n

    grads = [None] * net.num_layers
    delta = d_out
    for j in range(net.num_layers - 1, -1, -1):
        dz = delta * _act_grad(net.activations[j], pre[j])
        grads[j] = (dz.T @ acts[j], dz.sum(axis=0))
        if j > 0:
            delta = dz @ params[j][0]
    return loss, grads


def predict(net: LayeredNet, params, x):
    _, acts = forward(net, params, x)
    return np.argmax(acts[-1], axis=1)


def evaluate(net: LayeredNet, params, x, y):
    """Forward-only (loss, accuracy) on a labelled set."""
    _, acts = forward(net, params, x)
    out = acts[-1]
    n = x.shape[0]
    y = np.asarray(y)
    target = _onehot(y, net.widths[-1])
    if net.loss == "softmax_ce":
        shifted = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logz - shifted[np.arange(n), y]))
    else:
        diff = out - target
        loss = float(0.5 * np.sum(diff * diff) / n)
    acc = float(np.mean(np.argmax(out, axis=1) == y))
    return loss, acc


def accuracy(net: LayeredNet, params, x, y):
    return float(np.mean(predict(net, params, x) == np.asarray(y)))


def gradient_check(net: LayeredNet, params, x, y, step: float = 1e-5) -> float:
    """Max relative error of analytic gradients vs central finite differences."""
    _, grads = loss_and_grads(net, params, x, y)
    worst = 0.0
    for j, (w, b) in enumerate(params):
        for arr, g in ((w, grads[j][0]), (b, grads[j][1])):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                k = it.multi_index
                orig = arr[k]
                arr[k] = orig + step
                lp, _ = loss_and_grads(net, params, x, y)
                arr[k] = orig - step
                lm, _ = loss_and_grads(net, params, x, y)
                arr[k] = orig
                numeric = (lp - lm) / (2 * step)
                denom = max(abs(g[k]) + abs(numeric), 1e-8)
                worst = max(worst, abs(g[k] - numeric) / denom)
    return worst


def make_blobs(n_samples: int, n_classes: int, dim: int, seed: int,
               spread: float = 0.8, radius: float = 3.0):
    """Seeded Gaussian-blob classification data with exactly equal class counts.

    Class means sit on a circle in the first two dimensions; labels come out
    in contiguous blocks (partitioning decides any shuffling).
    """
    if n_samples % n_classes != 0:
        raise ValueError("n_samples must be divisible by n_classes")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    rng = np.random.default_rng(seed)
    per = n_samples // n_classes
    means = np.zeros((n_classes, dim))
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    y = np.repeat(np.arange(n_classes), per)
    x = means[y] + rng.normal(0.0, spread, size=(n_samples, dim))
    return x, y
