"""Dense feedforward engine: layers, forward/replay, gradients and training.

Layer indexing follows the layered-network convention used throughout the
package: layer 0 is the input layer, dense layer ``k`` (1-based) maps the
activations of layer ``k - 1`` to the neural inputs ``Z^k`` and activations
``A^k`` of layer ``k``.  A network with ``L`` dense layers therefore has
layers ``0..L``.

Neural inputs are accumulated in a fixed order (bias first, then ascending
input index) so that a value captured from one forward pass is reproduced
bit-for-bit by any later pass over the same input, batched or not.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

logger = logging.getLogger(__name__)

REGRESSION = "regression"
CLASSIFICATION = "classification"
OUTPUT_HEADS = (REGRESSION, CLASSIFICATION)

PROB_CLAMP = 1e-12


class DimensionError(ValueError):
    """Raised when a vector or matrix does not fit the layer it is fed to."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in an intermediate value."""


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sigmoid:
    name = "sigmoid"

    def apply(self, z):
        return 1.0 / (1.0 + np.exp(-z))

    def derivative(self, z, a):
        return a * (1.0 - a)


@dataclass(frozen=True)
class Identity:
    name = "identity"

    def apply(self, z):
        return np.array(z, dtype=np.float64, copy=True)

    def derivative(self, z, a):
        return np.ones_like(z)


@dataclass(frozen=True)
class BinaryStep:
    """1 where ``z >= threshold``, else 0."""

    threshold: float = 0.0
    name = "binary_step"

    def apply(self, z):
        return np.where(z >= self.threshold, 1.0, 0.0)

    def derivative(self, z, a):
        return np.zeros_like(z)


@dataclass(frozen=True)
class Pulse:
    """1 where ``|z - threshold| <= epsilon``, else 0.

    With ``epsilon == 0`` this is the exact-equality pulse.
    """

    threshold: float = 0.0
    epsilon: float = 0.0
    name = "pulse"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"pulse epsilon must be >= 0, got {self.epsilon}")

    def apply(self, z):
        return np.where(np.abs(z - self.threshold) <= self.epsilon, 1.0, 0.0)

    def derivative(self, z, a):
        return np.zeros_like(z)


@dataclass(frozen=True)
class Softmax:
    """Whole-layer normalisation; never mixed with per-neuron kinds."""

    name = "softmax"

    def apply(self, z):
        shifted = z - np.max(z, axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=-1, keepdims=True)

    def derivative(self, z, a):
        raise TypeError("softmax has a Jacobian, use softmax_vjp")


Activation = Union[Sigmoid, Identity, BinaryStep, Pulse, Softmax]
NEURON_KINDS = (Sigmoid, Identity, BinaryStep, Pulse)


def softmax_vjp(p, upstream):
    """Vector-Jacobian product of softmax at output ``p``."""
    return p * (upstream - np.sum(upstream * p, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# layers and networks
# ---------------------------------------------------------------------------


def _frozen(array, shape=None):
    arr = np.array(array, dtype=np.float64, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class DenseLayer:
    """Weights are ``(out_dim, in_dim)``; activation is one kind or one per neuron."""

    weights: np.ndarray
    biases: np.ndarray
    activation: Union[Activation, tuple] = Sigmoid()

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 2:
            raise DimensionError(f"weights must be 2-D, got shape {w.shape}")
        b = _frozen(self.biases)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"biases shape {b.shape} does not match out_dim {w.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NonFiniteError("layer parameters must be finite")
        act = self.activation
        if isinstance(act, (list, tuple)):
            act = tuple(act)
            if len(act) != w.shape[0]:
                raise DimensionError(f"{len(act)} activations for {w.shape[0]} neurons")
            if any(not isinstance(a, NEURON_KINDS) for a in act):
                raise TypeError("per-neuron activations must be sigmoid/identity/binary_step/pulse")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "activation", act)

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    @property
    def is_softmax(self):
        return isinstance(self.activation, Softmax)

    def neural_inputs(self, a):
        return weighted_sum(self.weights, self.biases, a)

    def activate(self, z):
        if isinstance(self.activation, tuple):
            out = np.empty_like(z)
            for j, kind in enumerate(self.activation):
                out[..., j] = kind.apply(z[..., j])
            return out
        return self.activation.apply(z)

    def activation_derivative(self, z, a):
        if isinstance(self.activation, tuple):
            out = np.empty_like(z)
            for j, kind in enumerate(self.activation):
                out[..., j] = kind.derivative(z[..., j], a[..., j])
            return out
        return self.activation.derivative(z, a)


def weighted_sum(weights, biases, a):
    """``biases + sum_i weights[:, i] * a[..., i]`` accumulated in ascending ``i``.

    Works for a single vector or a batch (leading axes).  Each output element
    sees exactly the same sequence of roundings in both cases.
    """
    a = np.asarray(a, dtype=np.float64)
    z = np.broadcast_to(biases, a.shape[:-1] + (weights.shape[0],)).copy()
    for i in range(weights.shape[1]):
        z += a[..., i : i + 1] * weights[:, i]
    return z


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    output_head: str = REGRESSION

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a network needs at least one dense layer")
        if self.output_head not in OUTPUT_HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise DimensionError(
                    f"in_dim {layers[k].in_dim} != previous out_dim {layers[k - 1].out_dim}",
                    layer=k + 1,
                )
        for k, layer in enumerate(layers[:-1], start=1):
            if layer.is_softmax:
                raise ValueError(f"softmax is only allowed on the output layer (found on layer {k})")
        if (self.output_head == CLASSIFICATION) != layers[-1].is_softmax:
            raise ValueError("classification head requires a softmax output layer and vice versa")
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self):
        """Number of dense layers ``L``; layers are indexed ``0..L``."""
        return len(self.layers)

    @property
    def widths(self):
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    def layer(self, k):
        """Dense layer producing layer ``k`` (1-based)."""
        if not 1 <= k <= self.depth:
            raise IndexError(f"layer index {k} outside 1..{self.depth}")
        return self.layers[k - 1]

    def replace_layers(self, layers):
        return Network(tuple(layers), self.output_head)


@dataclass
class ActivationSnapshot:
    """Per-layer activations ``A^k`` and neural inputs ``Z^k``, k = 0..L.

    For the input layer both entries hold the input itself.
    """

    activations: list = field(default_factory=list)
    neural_inputs: list = field(default_factory=list)

    def __len__(self):
        return len(self.activations)


def _check_finite(arr, layer):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values at layer {layer}")


def forward(net, x):
    """Evaluate ``net`` on ``x`` (one vector or a batch of row vectors).

    Returns ``(output, snapshot)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise DimensionError(f"expected input of width {net.input_dim}, got shape {x.shape}", layer=0)
    _check_finite(x, 0)
    snap = ActivationSnapshot([x.copy()], [x.copy()])
    a = x
    for k, layer in enumerate(net.layers, start=1):
        z = layer.neural_inputs(a)
        a = layer.activate(z)
        _check_finite(a, k)
        snap.neural_inputs.append(z)
        snap.activations.append(a)
    return a, snap


def forward_from(net, layer_index, neural_inputs, snapshot=None):
    """Continue a forward pass from given neural inputs of layer ``layer_index``.

    The layer's own activation is applied to ``neural_inputs`` and the chain
    proceeds normally.  If ``snapshot`` is an :class:`ActivationSnapshot` it
    is filled with layers ``layer_index..L``.
    """
    k0 = int(layer_index)
    if not 1 <= k0 <= net.depth:
        raise IndexError(f"layer index {k0} outside 1..{net.depth}")
    z = np.asarray(neural_inputs, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] != net.layer(k0).out_dim:
        raise DimensionError(
            f"expected neural inputs of width {net.layer(k0).out_dim}, got shape {z.shape}", layer=k0
        )
    _check_finite(z, k0)
    a = net.layer(k0).activate(z)
    _check_finite(a, k0)
    if snapshot is not None:
        snapshot.neural_inputs.append(z.copy())
        snapshot.activations.append(a)
    for k in range(k0 + 1, net.depth + 1):
        z = net.layer(k).neural_inputs(a)
        a = net.layer(k).activate(z)
        _check_finite(a, k)
        if snapshot is not None:
            snapshot.neural_inputs.append(z)
            snapshot.activations.append(a)
    return a


def predict_labels(net, x):
    out, _ = forward(net, x)
    return np.argmax(out, axis=-1)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AbsoluteTargetLoss:
    """``L = |target - output[index]|``.

    ``output[index]`` is the predicted value for a regression head or the
    probability of label ``index`` for a softmax head.
    """

    target: float
    index: int = 0

    def value(self, output):
        return abs(self.target - float(output[self.index]))

    def output_gradient(self, output):
        g = np.zeros_like(output)
        residual = self.target - float(output[self.index])
        # subgradient 0 at the kink
        g[self.index] = -np.sign(residual)
        return g


def gradient_wrt_neural_inputs(net, layer_index, neural_inputs, loss):
    """Reverse-mode ``dL/dZ^k`` of ``loss`` through :func:`forward_from`."""
    k0 = int(layer_index)
    trace = ActivationSnapshot()
    out = forward_from(net, k0, neural_inputs, snapshot=trace)
    if not 0 <= loss.index < out.shape[-1]:
        raise DimensionError(f"loss index {loss.index} outside output width {out.shape[-1]}")
    grad_a = loss.output_gradient(out)
    grad_z = None
    for pos in range(len(trace) - 1, -1, -1):
        k = k0 + pos
        layer = net.layer(k)
        z, a = trace.neural_inputs[pos], trace.activations[pos]
        if layer.is_softmax:
            grad_z = softmax_vjp(a, grad_a)
        else:
            grad_z = grad_a * layer.activation_derivative(z, a)
        if pos > 0:
            grad_a = layer.weights.T @ grad_z
    if not np.all(np.isfinite(grad_z)):
        raise NonFiniteError(f"non-finite gradient at layer {k0}")
    return grad_z


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

MAE = "mae"
CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    max_epochs: int = 20000
    loss_threshold: float = 0.01
    lr_decay: float = 1.0
    train_biases: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.max_epochs < 0 or self.loss_threshold < 0:
            raise ValueError("learning_rate must be > 0, max_epochs and loss_threshold >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")


@dataclass
class TrainResult:
    network: Network
    loss: float
    epochs: int
    converged: bool


def mae_loss(pred, target):
    return float(np.mean(np.abs(np.asarray(target) - pred)))


def cross_entropy_loss(prob, target):
    """Two-term cross entropy summed over classes, averaged over samples."""
    p = np.clip(prob, PROB_CLAMP, 1 - PROB_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    per_sample = -np.sum(t * np.log(p) + (1 - t) * np.log(1 - p), axis=-1)
    return float(np.mean(per_sample))


def dataset_loss(net, inputs, targets, loss):
    out, _ = forward(net, inputs)
    return _loss_value(out, np.asarray(targets, dtype=np.float64), loss)


def _loss_value(out, targets, loss):
    if loss == MAE:
        return mae_loss(out, targets)
    if loss == CROSS_ENTROPY:
        return cross_entropy_loss(out, targets)
    raise ValueError(f"unknown loss {loss!r}")


def _output_delta(out, targets, loss):
    n = out.shape[0]
    if loss == MAE:
        return -np.sign(targets - out) / (n * out.shape[1])
    p = np.clip(out, PROB_CLAMP, 1 - PROB_CLAMP)
    grad_p = (-targets / p + (1 - targets) / (1 - p)) / n
    return softmax_vjp(out, grad_p)


def train(net, inputs, targets, loss, config=TrainConfig()):
    """Full-batch gradient descent on a copy of ``net``.

    ``targets`` has shape ``(N, out_dim)`` (scalar regression targets may be
    passed as a flat vector).  Stops as soon as the mean loss is at or below
    ``config.loss_threshold``; otherwise returns after ``max_epochs`` with
    ``converged=False``.
    """
    if loss not in (MAE, CROSS_ENTROPY):
        raise ValueError(f"unknown loss {loss!r}")
    if (loss == CROSS_ENTROPY) != (net.output_head == CLASSIFICATION):
        raise ValueError(f"loss {loss!r} does not match output head {net.output_head!r}")
    x = np.asarray(inputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    if x.ndim != 2 or t.shape != (x.shape[0], net.output_dim):
        raise DimensionError(f"inputs {x.shape} / targets {t.shape} do not match the network")

    weights = [np.array(layer.weights) for layer in net.layers]
    biases = [np.array(layer.biases) for layer in net.layers]
    work = net
    lr = config.learning_rate
    epoch = 0
    while True:
        out, snap = forward(work, x)
        current = _loss_value(out, t, loss)
        if not np.isfinite(current):
            raise NonFiniteError(f"training loss became non-finite at epoch {epoch}")
        if current <= config.loss_threshold or epoch >= config.max_epochs:
            break
        delta = _output_delta(out, t, loss)
        for k in range(work.depth, 0, -1):
            layer = work.layer(k)
            if k < work.depth:
                z, a = snap.neural_inputs[k], snap.activations[k]
                delta = delta * layer.activation_derivative(z, a)
            grad_w = delta.T @ snap.activations[k - 1]
            grad_b = delta.sum(axis=0)
            if k > 1:
                delta = delta @ layer.weights
            weights[k - 1] -= lr * grad_w
            if config.train_biases:
                biases[k - 1] -= lr * grad_b
        work = net.replace_layers(
            DenseLayer(w, b, layer.activation) for w, b, layer in zip(weights, biases, net.layers)
        )
        lr *= config.lr_decay
        epoch += 1
    converged = current <= config.loss_threshold
    if not converged:
        logger.info("training stopped after %d epochs with loss %.6g", epoch, current)
    return TrainResult(work, current, epoch, converged)


def init_network(widths, hidden=Sigmoid(), output_head=REGRESSION, seed=0, scale=0.5):
    """Seeded uniform(-scale, scale) weights, zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ValueError(f"invalid layer widths {widths}")
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(1, len(widths)):
        last = k == len(widths) - 1
        if last:
            act = Softmax() if output_head == CLASSIFICATION else Identity()
        else:
            act = hidden
        w = rng.uniform(-scale, scale, size=(widths[k], widths[k - 1]))
        layers.append(DenseLayer(w, np.zeros(widths[k]), act))
    return Network(tuple(layers), output_head)


def copy_network(net):
    return copy.deepcopy(net)
