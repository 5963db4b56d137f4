"""Client-side model: a small MLP stored as one flat float64 vector.

Forward and backward passes are written out by hand so the server can ask
for the exact gradient of a client's test loss with respect to the
personalized parameters it just received.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from pfedgat.data import Dataset
from pfedgat.numerics import leaky_relu, leaky_relu_grad

HIDDEN_SLOPE = 0.01
_TAG_CLIENT = 0x434C


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    hidden_slope: float = HIDDEN_SLOPE

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least two positive widths, got {widths}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        """(out, in) per layer."""
        w = self.layer_widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def unflatten(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (W, b) per layer; W is row-major (out, in), followed by b."""
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {flat.shape}")
        layers, off = [], 0
        for o, i in self.shapes:
            W = flat[off:off + o * i].reshape(o, i)
            off += o * i
            b = flat[off:off + o]
            off += o
            layers.append((W, b))
        return layers


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    flat = np.zeros(spec.n_params)
    for W, _ in spec.unflatten(flat):
        fan_out, fan_in = W.shape
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-lim, lim, size=W.shape)
    return flat


def _check_batch(spec: MlpSpec, X: np.ndarray, y: np.ndarray) -> None:
    if len(X) == 0:
        raise ValueError("empty batch")
    if X.ndim != 2 or X.shape[1] != spec.n_inputs:
        raise ValueError(f"batch features {X.shape} do not match input width {spec.n_inputs}")
    if len(y) != len(X):
        raise ValueError("features and labels differ in length")


def _forward(spec: MlpSpec, params: np.ndarray, X: np.ndarray):
    layers = spec.unflatten(params)
    acts, pres = [X], []
    a = X
    for li, (W, b) in enumerate(layers):
        pre = a @ W.T + b
        pres.append(pre)
        a = leaky_relu(pre, spec.hidden_slope) if li < len(layers) - 1 else pre
        acts.append(a)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return layers, acts, pres, log_probs


def forward_loss(spec: MlpSpec, params: np.ndarray, X, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and the softmax probability rows."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_batch(spec, X, y)
    _, _, _, log_probs = _forward(spec, params, X)
    loss = -float(np.mean(log_probs[np.arange(len(y)), y]))
    return loss, np.exp(log_probs)


def loss_and_grad(spec: MlpSpec, params: np.ndarray, X, y) -> tuple[float, np.ndarray]:
    loss, grad, _ = _loss_grad_probs(spec, params, X, y)
    return loss, grad


def _loss_grad_probs(spec: MlpSpec, params: np.ndarray, X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_batch(spec, X, y)
    layers, acts, pres, log_probs = _forward(spec, params, X)
    rows = np.arange(len(y))
    loss = -float(np.mean(log_probs[rows, y]))

    grad = np.zeros_like(params)
    glayers = spec.unflatten(grad)
    probs = np.exp(log_probs)
    delta = probs.copy()
    delta[rows, y] -= 1.0
    delta /= len(y)
    for li in range(len(layers) - 1, -1, -1):
        gW, gb = glayers[li]
        gW[...] = delta.T @ acts[li]
        gb[...] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ layers[li][0]) * leaky_relu_grad(pres[li - 1], spec.hidden_slope)
    return loss, grad, probs


def loss_gradient_wrt_params(spec: MlpSpec, params: np.ndarray, X, y) -> np.ndarray:
    """Exact gradient of the mean loss over (X, y)."""
    return loss_and_grad(spec, params, X, y)[1]


def evaluate(spec: MlpSpec, params: np.ndarray, X, y) -> tuple[float, float]:
    """Mean loss and top-1 accuracy; ties in argmax go to the lowest class index."""
    loss, probs = forward_loss(spec, params, X, y)
    acc = float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))
    return loss, acc


@dataclass
class ClientFeedback:
    loss: float
    grad_wrt_received: np.ndarray
    test_accuracy: float

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise ValueError("client loss is not finite")


@dataclass
class ClientState:
    cid: int
    spec: MlpSpec
    params: np.ndarray
    dataset: Dataset
    train_idx: np.ndarray
    test_idx: np.ndarray
    val_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rng: Optional[np.random.Generator] = None
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.rng is None:
            self.rng = client_rng(0, self.cid)

    @property
    def n_train(self) -> int:
        return len(self.train_idx)

    def view(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "test": self.test_idx, "val": self.val_idx}[which]
        return self.dataset.features[idx], self.dataset.labels[idx]


def client_rng(seed: int, cid: int) -> np.random.Generator:
    """Per-client stream that depends only on (experiment seed, client id)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _TAG_CLIENT, int(cid)])


def local_train(state: ClientState, epochs: int, lr: float, batch_size: int) -> np.ndarray:
    """Mini-batch SGD over the client's shuffled training set.

    The trailing partial batch is kept. ``state.params`` is replaced by the
    result and ``state.epoch_losses`` holds the sample-weighted mean batch
    loss of each epoch.
    """
    if state.n_train == 0:
        raise ValueError(f"client {state.cid} has no training data")
    X, y = state.view("train")
    params = state.params.copy()
    state.epoch_losses = []
    for _ in range(epochs):
        order = state.rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(order), batch_size):
            b = order[start:start + batch_size]
            loss, g = loss_and_grad(state.spec, params, X[b], y[b])
            params -= lr * g
            total += loss * len(b)
        state.epoch_losses.append(total / len(y))
    state.params = params
    return params


def client_feedback(state: ClientState, received: np.ndarray, split: str = "test") -> ClientFeedback:
    """Evaluate received parameters on a held-out view and report loss, gradient, accuracy."""
    X, y = state.view(split)
    if len(y) == 0:
        raise ValueError(f"client {state.cid} has an empty {split} view")
    loss, grad, probs = _loss_grad_probs(state.spec, received, X, y)
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    return ClientFeedback(loss, grad, acc)

