"""
Dense networks with hand-written backpropagation, Adam, and a finite-difference gradient checker.

All arithmetic is float64.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from loadsynth.exceptions import NonFiniteGradientError, ShapeMismatchError

logger = logging.getLogger(__name__)


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


class OutputActivation(str, Enum):
    IDENTITY = "identity"
    SOFTPLUS = "softplus"


SeedLike = Union[int, np.random.Generator, None]


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


class DenseNet:
    def __init__(
        self,
        sizes: Sequence[int],
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        activations: Sequence[Activation],
        output_activation: OutputActivation = OutputActivation.IDENTITY,
    ):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise ShapeMismatchError(f"invalid layer sizes {self.sizes}")
        n_layers = len(self.sizes) - 1
        if len(weights) != n_layers or len(biases) != n_layers:
            raise ShapeMismatchError("need one weight matrix and one bias vector per layer")
        if len(activations) != n_layers - 1:
            raise ShapeMismatchError("need one activation per hidden layer")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ShapeMismatchError(
                    f"layer {i}: expected weights {(self.sizes[i], self.sizes[i + 1])}, got {w.shape}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
        self.activations = tuple(Activation(a) for a in activations)
        self.output_activation = OutputActivation(output_activation)

    @classmethod
    def initialize(
        cls,
        sizes: Sequence[int],
        activation: Activation = Activation.RELU,
        output_activation: OutputActivation = OutputActivation.IDENTITY,
        seed: SeedLike = 0,
    ) -> "DenseNet":
        """He-uniform for relu layers, Glorot-uniform for tanh and output layers, zero biases."""
        rng = as_generator(seed)
        activation = Activation(activation)
        n_layers = len(sizes) - 1
        weights, biases = [], []
        for i in range(n_layers):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            if i < n_layers - 1 and activation is Activation.RELU:
                limit = np.sqrt(6.0 / fan_in)
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(sizes, weights, biases, [activation] * (n_layers - 1), output_activation)

    @property
    def in_features(self) -> int:
        return self.sizes[0]

    @property
    def out_features(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in declaration order (W0, b0, W1, b1, ...), by reference."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def copy(self) -> "DenseNet":
        return DenseNet(self.sizes, self.weights, self.biases, self.activations, self.output_activation)

    def _check_input(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.in_features:
            raise ShapeMismatchError(f"expected batch of width {self.in_features}, got shape {batch.shape}")
        return batch

    def forward_cached(self, batch: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        h = self._check_input(batch)
        cache = ForwardCache(inputs=[], pre_activations=[])
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache.inputs.append(h)
            a = h @ w + b
            cache.pre_activations.append(a)
            if i < last:
                h = np.maximum(a, 0.0) if self.activations[i] is Activation.RELU else np.tanh(a)
            elif self.output_activation is OutputActivation.SOFTPLUS:
                h = np.logaddexp(0.0, a)
            else:
                h = a
        return h, cache

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return self.forward_cached(batch)[0]

    def backward(self, cache: ForwardCache, upstream: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """Returns parameter gradients (declaration order) and the gradient w.r.t. the input batch."""
        last = len(self.weights) - 1
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != cache.pre_activations[last].shape:
            raise ShapeMismatchError(
                f"upstream gradient shape {upstream.shape} does not match output {cache.pre_activations[last].shape}"
            )
        grads: List[np.ndarray] = [None] * (2 * len(self.weights))
        delta = upstream
        if self.output_activation is OutputActivation.SOFTPLUS:
            delta = delta * expit(cache.pre_activations[last])
        for i in range(last, -1, -1):
            grads[2 * i] = cache.inputs[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            d_input = delta @ self.weights[i].T
            if i > 0:
                a = cache.pre_activations[i - 1]
                if self.activations[i - 1] is Activation.RELU:
                    delta = d_input * (a > 0)
                else:
                    delta = d_input * (1.0 - np.tanh(a) ** 2)
        return grads, d_input

    def activation_pattern(self, cache: ForwardCache) -> bytes:
        """Relu on/off pattern; constant pattern means the network is affine in its parameters' neighbourhood."""
        masks = [
            np.packbits(a > 0)
            for a, act in zip(cache.pre_activations[:-1], self.activations)
            if act is Activation.RELU
        ]
        return b"".join(m.tobytes() for m in masks)


def forward(net: DenseNet, batch: np.ndarray) -> np.ndarray:
    return net.forward(batch)


def backward(net: DenseNet, batch: np.ndarray, upstream_grad: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    _, cache = net.forward_cached(batch)
    return net.backward(cache, upstream_grad)


# --- optimizer -----------------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyperparameters) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **hyperparameters,
        )


def adam_step(
    params: List[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> Tuple[List[np.ndarray], AdamState]:
    """Updates params in place; a non-finite gradient aborts the step before anything changes."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeMismatchError("params, grads and optimizer state must have the same length")
    for i, (p, g, m) in enumerate(zip(params, grads, state.first_moment)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatchError(f"parameter {i}: shape {p.shape} vs gradient {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {i} at step {state.step + 1}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params, state


# --- gradient verification -----------------------------------------------------------------------

@dataclass(frozen=True)
class GradientCheckReport:
    max_relative_error: float
    checked: int
    skipped: int
    worst: Optional[Tuple[int, int]] = field(default=None)


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(
    objective: Callable[[], float],
    params: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    h: float = 1e-5,
    region: Optional[Callable[[], Hashable]] = None,
    floor: float = 1e-5,
) -> GradientCheckReport:
    """
    Compares analytic gradients with central differences, perturbing params in place.

    For piecewise-smooth objectives, region() returns an identifier of the smooth piece the current
    parameters sit in; entries whose +h or -h perturbation changes it straddle a breakpoint and
    are skipped.
    """
    base_region = region() if region is not None else None
    worst_error, worst, checked, skipped = 0.0, None, 0, 0
    for i, (p, g) in enumerate(zip(params, analytic)):
        flat, grad_flat = p.reshape(-1), np.asarray(g).reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + h
            f_plus = objective()
            r_plus = region() if region is not None else None
            flat[j] = original - h
            f_minus = objective()
            r_minus = region() if region is not None else None
            flat[j] = original
            if region is not None and (r_plus != base_region or r_minus != base_region):
                skipped += 1
                continue
            error = relative_error(grad_flat[j], (f_plus - f_minus) / (2.0 * h), floor)
            checked += 1
            if error > worst_error:
                worst_error, worst = error, (i, j)
    logger.debug(f"Gradient check: max rel error {worst_error:.2e}, {checked} checked, {skipped} skipped")
    return GradientCheckReport(worst_error, checked, skipped, worst)
