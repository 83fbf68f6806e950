"""Small ReLU MLP with hand-written backprop over a flat parameter vector.

Flattening order: layers in forward order; for each layer the ``(in, out)``
weight matrix in row-major order, then the bias vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output size")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]


class LabeledBatch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray


def unflatten(w: np.ndarray, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(W, b)`` views (no copy)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != spec.num_params:
        raise ValueError(f"parameter vector has shape {w.shape}, spec needs ({spec.num_params},)")
    layers = []
    offset = 0
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        W = w[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = w[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])


def init_model(spec: MlpSpec) -> np.ndarray:
    """Glorot-uniform weights, zero biases, drawn from a Philox stream keyed by ``spec.seed``."""
    rng = np.random.Generator(np.random.Philox(key=int(spec.seed)))
    layers = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return flatten(layers)


def _check_inputs(inputs, spec: MlpSpec) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.layer_sizes[0]:
        raise ValueError(f"inputs have shape {x.shape}, expected (batch, {spec.layer_sizes[0]})")
    return x


def forward(w, spec: MlpSpec, inputs) -> np.ndarray:
    x = _check_inputs(inputs, spec)
    layers = unflatten(w, spec)
    h = x
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def predict(w, spec: MlpSpec, inputs) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(forward(w, spec, inputs), axis=1)


def accuracy(w, spec: MlpSpec, inputs, labels) -> float:
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(predict(w, spec, inputs) == labels))


def ce_loss_and_grad(w, spec: MlpSpec, batch: LabeledBatch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the flat weights."""
    x = _check_inputs(batch.inputs, spec)
    y = np.asarray(batch.labels, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != x.shape[0] or x.shape[0] == 0:
        raise ValueError("labels must be a non-empty vector matching the batch size")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    layers = unflatten(w, spec)

    acts = [x]
    h = x
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    logits = acts[-1]

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(x.shape[0])
    loss = float(np.mean(log_norm - shifted[rows, y]))

    delta = np.exp(shifted - log_norm[:, None])
    delta[rows, y] -= 1.0
    delta /= x.shape[0]

    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W.T) * (acts[i] > 0)
    return loss, flatten(grads)
