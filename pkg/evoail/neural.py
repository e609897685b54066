"""Dense feedforward networks with analytic gradients and Adam.

Weights are stored as (fan_in, fan_out) matrices so a batch of row vectors
is propagated with ``x @ W + b``. Hidden layers use relu, the output layer is
linear. Everything is float64.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from packaging.version import InvalidVersion
from packaging.version import Version
from pydantic import BaseModel
from pydantic import ValidationError

from .exceptions import CheckpointError
from .exceptions import DimensionMismatchError
from .exceptions import NonFiniteSignalError
from .utils import write_file

CHECKPOINT_FORMAT = "evoail-densenet"
CHECKPOINT_VERSION = Version("1.0")

HIDDEN_GAIN = float(np.sqrt(2.0))
OUTPUT_GAIN = 0.01


@dataclass
class DenseNet:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> DenseNet:
        return DenseNet(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass
class ForwardCache:
    """Layer inputs and pre-activations recorded by `forward`."""

    inputs: List[np.ndarray]
    pre: List[np.ndarray]


@dataclass
class GradBundle:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: Optional[np.ndarray] = None

    @classmethod
    def zeros_like(cls, net: DenseNet) -> GradBundle:
        return cls(
            weights=[np.zeros_like(w) for w in net.weights],
            biases=[np.zeros_like(b) for b in net.biases],
        )

    def global_norm(self) -> float:
        total = sum(float(np.sum(g * g)) for g in self.weights)
        total += sum(float(np.sum(g * g)) for g in self.biases)
        return float(np.sqrt(total))

    def scaled(self, factor: float) -> GradBundle:
        return GradBundle(
            weights=[g * factor for g in self.weights],
            biases=[g * factor for g in self.biases],
            inputs=None if self.inputs is None else self.inputs * factor,
        )

    def add(self, other: GradBundle, scale: float = 1.0) -> GradBundle:
        """Parameter gradients of self + scale * other. Input gradients are dropped."""
        return GradBundle(
            weights=[a + scale * b for a, b in zip(self.weights, other.weights)],
            biases=[a + scale * b for a, b in zip(self.biases, other.biases)],
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.weights + self.biases)


@dataclass
class AdamState:
    m_weights: List[np.ndarray]
    m_biases: List[np.ndarray]
    v_weights: List[np.ndarray]
    v_biases: List[np.ndarray]
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, net: DenseNet, lr: float) -> AdamState:
        return cls(
            m_weights=[np.zeros_like(w) for w in net.weights],
            m_biases=[np.zeros_like(b) for b in net.biases],
            v_weights=[np.zeros_like(w) for w in net.weights],
            v_biases=[np.zeros_like(b) for b in net.biases],
            lr=lr,
        )

    def with_lr(self, lr: float) -> AdamState:
        return dataclasses.replace(self, lr=lr)


def _orthogonal(
    rng: np.random.Generator, n_in: int, n_out: int, gain: float
) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if n_in < n_out:
        q = q.T
    return gain * q


def init_net(widths: Sequence[int], seed: Union[int, np.random.SeedSequence]) -> DenseNet:
    """Orthogonal init, gain sqrt(2) on hidden layers and 0.01 on the output layer."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"Need at least input and output width, all >= 1, got {widths}")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    n_layers = len(widths) - 1
    for k in range(n_layers):
        gain = OUTPUT_GAIN if k == n_layers - 1 else HIDDEN_GAIN
        weights.append(_orthogonal(rng, widths[k], widths[k + 1], gain))
        biases.append(np.zeros(widths[k + 1]))
    return DenseNet(weights=weights, biases=biases)


def _check_inputs(net: DenseNet, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.widths[0]:
        raise DimensionMismatchError(
            f"Expected inputs of shape (batch, {net.widths[0]}), got {x.shape}"
        )
    return x


def forward(net: DenseNet, inputs: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    a = _check_inputs(net, inputs)
    cache = ForwardCache(inputs=[], pre=[])
    last = net.n_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        cache.inputs.append(a)
        z = a @ w + b
        cache.pre.append(z)
        a = np.maximum(z, 0.0) if k < last else z
    return a, cache


def _layer_signals(
    net: DenseNet, cache: ForwardCache, output_grads: np.ndarray
) -> Tuple[List[np.ndarray], np.ndarray]:
    """Gradient w.r.t. each layer's pre-activation, and w.r.t. the inputs."""
    g = np.asarray(output_grads, dtype=np.float64)
    if g.shape != cache.pre[-1].shape:
        raise DimensionMismatchError(
            f"Output gradients have shape {g.shape}, expected {cache.pre[-1].shape}"
        )
    signals: List[np.ndarray] = [np.empty(0)] * net.n_layers
    for k in range(net.n_layers - 1, -1, -1):
        signals[k] = g
        g = g @ net.weights[k].T
        if k > 0:
            g = g * (cache.pre[k - 1] > 0)
    return signals, g


def backward(
    net: DenseNet, cache: ForwardCache, output_grads: np.ndarray
) -> GradBundle:
    """Gradients of sum(output_grads * outputs) for the batch in `cache`."""
    signals, input_grads = _layer_signals(net, cache, output_grads)
    return GradBundle(
        weights=[a.T @ dz for a, dz in zip(cache.inputs, signals)],
        biases=[dz.sum(axis=0) for dz in signals],
        inputs=input_grads,
    )


def tangent_param_grads(
    net: DenseNet, cache: ForwardCache, directions: np.ndarray
) -> GradBundle:
    """Parameter gradient of sum_i directions_i . grad_x out(x_i) for a scalar-output net.

    With relu masks held fixed, the directional derivative is linear in each
    weight matrix along the tangent path, so its gradient w.r.t. W_k is the
    outer product of the forward tangent entering layer k and the ordinary
    backward signal at layer k. Biases do not enter the tangent path.
    """
    if net.widths[-1] != 1:
        raise DimensionMismatchError("Tangent gradients need a single output unit")
    v = np.asarray(directions, dtype=np.float64)
    if v.shape != cache.inputs[0].shape:
        raise DimensionMismatchError(
            f"Directions have shape {v.shape}, expected {cache.inputs[0].shape}"
        )
    signals, _ = _layer_signals(net, cache, np.ones_like(cache.pre[-1]))
    tangents = [v]
    for k in range(net.n_layers - 1):
        tangents.append((tangents[-1] @ net.weights[k]) * (cache.pre[k] > 0))
    return GradBundle(
        weights=[t.T @ e for t, e in zip(tangents, signals)],
        biases=[np.zeros_like(b) for b in net.biases],
    )


def clip_grads(grads: GradBundle, max_grad_norm: Optional[float]) -> Tuple[GradBundle, float]:
    norm = grads.global_norm()
    if max_grad_norm is not None and norm > max_grad_norm:
        return grads.scaled(max_grad_norm / norm), norm
    return grads, norm


def adam_step(
    net: DenseNet,
    adam: AdamState,
    grads: GradBundle,
    max_grad_norm: Optional[float] = None,
) -> Tuple[DenseNet, AdamState]:
    """One bias-corrected Adam update after global-norm clipping.

    Returns new objects; `net` and `adam` are left untouched.
    """
    if not grads.is_finite():
        raise NonFiniteSignalError("gradient")
    grads, _ = clip_grads(grads, max_grad_norm)

    step = adam.step + 1
    b1, b2 = adam.beta1, adam.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step

    def _update(params, m_prev, v_prev, gs):
        new_params, new_m, new_v = [], [], []
        for p, m, v, g in zip(params, m_prev, v_prev, gs):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            new_params.append(p - adam.lr * (m / c1) / (np.sqrt(v / c2) + adam.eps))
            new_m.append(m)
            new_v.append(v)
        return new_params, new_m, new_v

    weights, m_w, v_w = _update(net.weights, adam.m_weights, adam.v_weights, grads.weights)
    biases, m_b, v_b = _update(net.biases, adam.m_biases, adam.v_biases, grads.biases)
    new_adam = dataclasses.replace(
        adam, m_weights=m_w, m_biases=m_b, v_weights=v_w, v_biases=v_b, step=step
    )
    return DenseNet(weights=weights, biases=biases), new_adam


def flatten_params(net: DenseNet) -> np.ndarray:
    """Weights (row-major) then bias, layer by layer."""
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def unflatten_params(widths: Sequence[int], flat: np.ndarray) -> DenseNet:
    widths = tuple(int(w) for w in widths)
    flat = np.asarray(flat, dtype=np.float64)
    expected = sum(widths[k] * widths[k + 1] + widths[k + 1] for k in range(len(widths) - 1))
    if flat.shape != (expected,):
        raise DimensionMismatchError(
            f"Widths {widths} need {expected} parameters, got {flat.size}"
        )
    weights, biases = [], []
    pos = 0
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        weights.append(flat[pos : pos + n_in * n_out].reshape(n_in, n_out).copy())
        pos += n_in * n_out
        biases.append(flat[pos : pos + n_out].copy())
        pos += n_out
    return DenseNet(weights=weights, biases=biases)


class NetCheckpoint(BaseModel):
    format: str = CHECKPOINT_FORMAT
    format_version: str = str(CHECKPOINT_VERSION)
    widths: List[int]
    params: List[float]


def save_checkpoint(net: DenseNet, path: Union[str, Path]) -> None:
    params = flatten_params(net)
    if not np.all(np.isfinite(params)):
        raise NonFiniteSignalError("network parameters")
    checkpoint = NetCheckpoint(widths=list(net.widths), params=params.tolist())
    write_file(path, checkpoint.model_dump_json(indent=2))


def load_checkpoint(path: Union[str, Path]) -> DenseNet:
    try:
        with open(path) as f:
            checkpoint = NetCheckpoint.model_validate_json(f.read())
    except ValidationError as e:
        raise CheckpointError(f"Invalid checkpoint {path}: {e}") from e
    if checkpoint.format != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path} is not a network checkpoint (format {checkpoint.format!r})"
        )
    try:
        version = Version(checkpoint.format_version)
    except InvalidVersion as e:
        raise CheckpointError(f"Invalid format version in {path}: {e}") from e
    if version.major != CHECKPOINT_VERSION.major:
        raise CheckpointError(
            f"Checkpoint {path} has format version {version}, "
            f"this version reads {CHECKPOINT_VERSION.major}.x"
        )
    if version > CHECKPOINT_VERSION:
        logging.warning(
            "Checkpoint '%s' has newer format version %s, reading as %s",
            path,
            version,
            CHECKPOINT_VERSION,
        )
    try:
        return unflatten_params(checkpoint.widths, np.array(checkpoint.params))
    except DimensionMismatchError as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}") from e
