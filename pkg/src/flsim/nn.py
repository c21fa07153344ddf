"""Small feed-forward networks with exact backpropagation over flat parameter vectors.

Every model in the simulator (the task classifier and the RL policy net) is an
:class:`MlpSpec` plus a flat float64 vector. Layout is layer-major: for each layer
the weight matrix of shape ``(fan_in, fan_out)`` in row-major order, then its bias.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from flsim.errors import ConfigurationError


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


class Head(str, enum.Enum):
    SOFTMAX_CE = "softmax_ce"
    LINEAR = "linear"


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network.

    ``activations`` holds one entry per hidden layer; a single value is broadcast.
    The output layer is always affine; the head only decides whether :func:`output`
    returns class probabilities or raw scores. Losses are cross-entropy either way.
    """

    layer_sizes: tuple[int, ...]
    activations: tuple[Activation, ...] = ()
    head: Head = Head.SOFTMAX_CE

    def __init__(self, layer_sizes: Sequence[int], activations=Activation.RELU,
                 head: Head | str = Head.SOFTMAX_CE):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2:
            raise ConfigurationError("an MLP needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must be positive, got {sizes}")
        n_hidden = len(sizes) - 2
        if isinstance(activations, (str, Activation)):
            acts = (Activation(activations),) * n_hidden
        else:
            acts = tuple(Activation(a) for a in activations)
            if len(acts) != n_hidden:
                raise ConfigurationError(
                    f"expected {n_hidden} hidden activations, got {len(acts)}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "head", Head(head))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.int64)
        if x.ndim != 2:
            raise ConfigurationError(f"inputs must be a matrix, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ConfigurationError(
                f"{x.shape[0]} input rows but {y.shape} targets")
        if not np.all(np.isfinite(x)):
            raise ConfigurationError("batch inputs contain NaN or Inf")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return self.inputs.shape[0]


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.shapes():
        s = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-s, s, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def unflatten(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into ``(W, b)`` views (no copies)."""
    params = _check_params(spec, params)
    layers = []
    pos = 0
    for fan_in, fan_out in spec.shapes():
        w = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos:pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers])


def _check_params(spec: MlpSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ConfigurationError(
            f"parameter vector has shape {params.shape}, spec needs ({spec.n_params},)")
    return params


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def _activation_grad(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    if kind is Activation.TANH:
        return 1.0 - a * a
    return np.ones_like(z)


def _forward_cached(spec: MlpSpec, params, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigurationError(
            f"inputs of shape {x.shape} do not match input dim {spec.input_dim}")
    layers = unflatten(spec, params)
    pre, post = [], [x]
    a = x
    for idx, (w, b) in enumerate(layers):
        z = a @ w + b
        if idx < len(layers) - 1:
            a = _activate(spec.activations[idx], z)
        else:
            a = z
        pre.append(z)
        post.append(a)
    return layers, pre, post


def forward(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Raw scores (logits) of the output layer, one row per input row."""
    return _forward_cached(spec, params, inputs)[2][-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def output(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    logits = forward(spec, params, inputs)
    if spec.head is Head.SOFTMAX_CE:
        return softmax(logits)
    return logits


def _check_targets(spec: MlpSpec, batch: Batch):
    if len(batch) == 0:
        raise ConfigurationError("empty batch")
    t = batch.targets
    if t.min() < 0 or t.max() >= spec.output_dim:
        raise ConfigurationError(
            f"targets must lie in [0, {spec.output_dim}), got range [{t.min()}, {t.max()}]")


def forward_loss(spec: MlpSpec, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and argmax predictions."""
    _check_targets(spec, batch)
    logits = forward(spec, params, batch.inputs)
    logp = log_softmax(logits)
    n = len(batch)
    loss = -logp[np.arange(n), batch.targets].mean()
    return float(max(loss, 0.0)), logits.argmax(axis=1)


def vjp(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray,
        d_logits: np.ndarray) -> np.ndarray:
    """Pull a cotangent on the output logits back to the parameter vector."""
    layers, pre, post = _forward_cached(spec, params, inputs)
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != pre[-1].shape:
        raise ConfigurationError(
            f"cotangent shape {d_logits.shape} != output shape {pre[-1].shape}")
    return _backprop(spec, layers, pre, post, d_logits)


def _backprop(spec, layers, pre, post, dz):
    grads = [None] * len(layers)
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        grads[idx] = (post[idx].T @ dz, dz.sum(axis=0))
        if idx > 0:
            da = dz @ w.T
            dz = da * _activation_grad(spec.activations[idx - 1], pre[idx - 1], post[idx])
    return flatten(grads)


def backward(spec: MlpSpec, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its exact gradient in ParamVector layout."""
    _check_targets(spec, batch)
    layers, pre, post = _forward_cached(spec, params, batch.inputs)
    logits = pre[-1]
    n = len(batch)
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), batch.targets].mean()
    dz = np.exp(logp)
    dz[np.arange(n), batch.targets] -= 1.0
    dz /= n
    return float(max(loss, 0.0)), _backprop(spec, layers, pre, post, dz)
