"""Dense feed-forward network with manual forward/backward passes and plain SGD.

The network is a stack of linear layers with ReLU on the hidden layers and an
identity (linear) feature output, so features live in an unbounded space.
Gradients from several loss terms are accumulated into a shared
:class:`GradientTape` before a single SGD step applies and zeroes them.
Everything is float64.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import (
    ContractError,
    NonFiniteGradientError,
    NotFoundError,
    ShapeError,
)

LOG_EPS = 1e-12


def _glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ActivationCache:
    """Activations recorded by one forward pass, consumed by backward.

    ``version`` pins the cache to the parameter state it was computed under;
    backward refuses caches from before the last SGD step.
    """

    __slots__ = ("layer_inputs", "relu_masks", "batch", "version")

    def __init__(self, layer_inputs, relu_masks, batch, version):
        self.layer_inputs = layer_inputs
        self.relu_masks = relu_masks
        self.batch = batch
        self.version = version


class Network:
    """Multi-layer perceptron mapping raw inputs to feature vectors.

    ``layer_dims`` chains input width, hidden sizes, and the feature
    dimension, e.g. ``[32, 64, 32]``.
    """

    def __init__(self, layer_dims: Sequence[int], seed: int | Sequence[int] = 0):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ShapeError(f"layer_dims must be >= 2 positive integers, got {layer_dims}")
        self.layer_dims = dims
        rng = np.random.default_rng(seed)
        self.weights = [_glorot_uniform(rng, dims[l], dims[l + 1]) for l in range(len(dims) - 1)]
        self.biases = [np.zeros(dims[l + 1]) for l in range(len(dims) - 1)]
        self._version = 0

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    def forward(self, X) -> tuple[np.ndarray, ActivationCache]:
        """Return ``(features, cache)`` for a batch of rows.

        Never mutates parameters; the cache supports one or more backward
        calls until the next SGD step.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.layer_dims[0]:
            raise ShapeError(
                f"input must be (B, {self.layer_dims[0]}), got {X.shape}"
            )
        n_layers = len(self.weights)
        a = X
        layer_inputs = []
        relu_masks = []
        for l in range(n_layers):
            layer_inputs.append(a)
            z = a @ self.weights[l] + self.biases[l]
            if l < n_layers - 1:
                mask = z > 0.0
                relu_masks.append(mask)
                a = np.where(mask, z, 0.0)
            else:
                a = z
        cache = ActivationCache(layer_inputs, relu_masks, X.shape[0], self._version)
        return a, cache

    def features(self, X) -> np.ndarray:
        """Forward pass without keeping activations (evaluation helper)."""
        return self.forward(X)[0]

    def backward(self, cache: ActivationCache | None, d_features, tape: "GradientTape") -> None:
        """Accumulate parameter gradients for upstream feature gradients.

        Gradients are added into ``tape`` (never overwritten) so several loss
        terms can share one tape before an SGD step.
        """
        if cache is None:
            raise ContractError("backward called without an activation cache")
        if cache.version != self._version:
            raise ContractError(
                "stale activation cache: parameters were updated after the forward pass"
            )
        d = np.asarray(d_features, dtype=np.float64)
        if d.shape != (cache.batch, self.layer_dims[-1]):
            raise ShapeError(
                f"upstream gradient must be ({cache.batch}, {self.layer_dims[-1]}), got {d.shape}"
            )
        for l in reversed(range(len(self.weights))):
            tape.net_w[l] += cache.layer_inputs[l].T @ d
            tape.net_b[l] += d.sum(axis=0)
            if l > 0:
                d = (d @ self.weights[l].T) * cache.relu_masks[l - 1]

    def parameters(self):
        """Yield ``(name, array)`` pairs for every trainable array."""
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            yield f"w{l}", W
            yield f"b{l}", b


class TaskHead:
    """Per-task linear classifier on top of the shared feature extractor."""

    def __init__(self, task_id: int, feature_dim: int, n_classes: int,
                 seed: int | Sequence[int] = 0):
        if n_classes < 1:
            raise ShapeError("a head needs at least one class")
        self.task_id = task_id
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        self.weight = _glorot_uniform(rng, feature_dim, n_classes)
        self.bias = np.zeros(n_classes)

    def classify(self, features) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(logits, probabilities)``; probability rows sum to one."""
        F = np.asarray(features, dtype=np.float64)
        if F.ndim != 2 or F.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                f"features must be (B, {self.weight.shape[0]}), got {F.shape}"
            )
        logits = F @ self.weight + self.bias
        return logits, softmax(logits)

    def backward(self, features, d_logits, tape: "GradientTape") -> np.ndarray:
        """Accumulate head gradients; return the gradient w.r.t. features."""
        F = np.asarray(features, dtype=np.float64)
        d = np.asarray(d_logits, dtype=np.float64)
        tape.ensure_head(self)
        tape.head_w[self.task_id] += F.T @ d
        tape.head_b[self.task_id] += d.sum(axis=0)
        return d @ self.weight.T


class GradientTape:
    """Accumulated gradient buffers mirroring network and head parameters."""

    def __init__(self, net: Network):
        self.net_w = [np.zeros_like(W) for W in net.weights]
        self.net_b = [np.zeros_like(b) for b in net.biases]
        self.head_w: dict[int, np.ndarray] = {}
        self.head_b: dict[int, np.ndarray] = {}

    def ensure_head(self, head: TaskHead) -> None:
        if head.task_id not in self.head_w:
            self.head_w[head.task_id] = np.zeros_like(head.weight)
            self.head_b[head.task_id] = np.zeros_like(head.bias)

    def zero(self) -> None:
        for g in self.net_w:
            g[...] = 0.0
        for g in self.net_b:
            g[...] = 0.0
        for g in self.head_w.values():
            g[...] = 0.0
        for g in self.head_b.values():
            g[...] = 0.0

    def buffers(self):
        for l, (gW, gb) in enumerate(zip(self.net_w, self.net_b)):
            yield f"net.w{l}", gW
            yield f"net.b{l}", gb
        for tid in self.head_w:
            yield f"head{tid}.w", self.head_w[tid]
            yield f"head{tid}.b", self.head_b[tid]


def softmax(logits) -> np.ndarray:
    """Row-wise stable softmax."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    ``probs`` must be softmax outputs; the logit gradient is then
    ``(p - onehot) / B``. Probabilities are clamped at ``LOG_EPS`` inside the
    log only.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ShapeError(f"probs {p.shape} and labels {y.shape} do not align")
    if y.min(initial=0) < 0 or y.max(initial=0) >= p.shape[1]:
        raise ShapeError(f"labels must lie in [0, {p.shape[1]})")
    B = p.shape[0]
    picked = p[np.arange(B), y]
    loss = float(-np.log(np.maximum(picked, LOG_EPS)).mean())
    grad = p.copy()
    grad[np.arange(B), y] -= 1.0
    grad /= B
    return loss, grad


def sgd_step(net: Network, heads: dict[int, TaskHead], tape: GradientTape, lr: float) -> None:
    """Apply ``p -= lr * grad`` to every parameter, then zero the tape.

    Aborts without touching any parameter if a gradient buffer is non-finite.
    """
    for name, g in tape.buffers():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteGradientError(
                f"aborting step: {bad} non-finite gradient entries in {name}"
            )
    for l in range(len(net.weights)):
        net.weights[l] -= lr * tape.net_w[l]
        net.biases[l] -= lr * tape.net_b[l]
    for tid in tape.head_w:
        if tid not in heads:
            raise NotFoundError(f"no head for task {tid}")
        heads[tid].weight -= lr * tape.head_w[tid]
        heads[tid].bias -= lr * tape.head_b[tid]
    tape.zero()
    net._version += 1
