"""Neuron-level trojans: trigger design, insertion and the composite evaluator.

A trojan sits at layer ``n`` of a host.  Its trigger synapses read the
activations of layer ``n - 1``; when it fires (activation 1) its payload
synapses add ``xi_j`` to the neural input of neuron ``j`` of layer ``n + 1``.
The host's own weights and biases are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (
    ActivationSnapshot,
    BinaryStep,
    DenseLayer,
    DimensionError,
    Network,
    Pulse,
    forward,
    weighted_sum,
)

SINGLE = "single"
MULTI = "multi"
KINDS = (SINGLE, MULTI)

DEFAULT_SIGMA = 0.0001

_ZERO_BIAS = np.zeros(1)


class InsertionError(ValueError):
    """The requested trojan does not fit the host."""


def trigger_sum(activations, weights):
    """Neural input of a trigger neuron: ``sum_i w_i * a_i`` in ascending ``i``.

    Same accumulation as a host neuron with zero bias, so a threshold captured
    here is reproduced exactly on replay.  Accepts a batch of activation rows.
    """
    w = np.asarray(weights, dtype=np.float64)
    return weighted_sum(w[None, :], _ZERO_BIAS, activations)[..., 0]


def _as_weights(weights, width):
    if weights is None:
        w = np.ones(width)
    else:
        w = np.array(weights, dtype=np.float64, copy=True).ravel()
    if w.shape != (width,):
        raise DimensionError(f"expected {width} trigger weights, got {w.size}")
    if not np.all(np.isfinite(w)):
        raise ValueError("trigger weights must be finite")
    w.flags.writeable = False
    return w


def _check_activations(a, width):
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1:] != (width,):
        raise DimensionError(f"trigger reads {width} activations, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class SingleNeuronTrigger:
    """One pulse neuron: fires iff ``|sum(w * A) - theta| <= epsilon``."""

    layer: int
    weights: np.ndarray
    theta: float
    epsilon: float = 0.0
    kind = SINGLE

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        object.__setattr__(self, "weights", _as_weights(self.weights, np.size(self.weights)))
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def width(self):
        return self.weights.size

    def fires(self, activations):
        """1 or 0 per activation vector (scalar for a single vector)."""
        a = _check_activations(activations, self.width)
        z = trigger_sum(a, self.weights)
        out = (np.abs(z - self.theta) <= self.epsilon).astype(np.int64)
        return int(out) if out.ndim == 0 else out

    def thresholds(self):
        return {"theta_T": self.theta}


@dataclass(frozen=True, eq=False)
class MultiNeuronTrigger:
    """Tri1/Tri2/T binary-step trio firing on a window of width ``sigma``.

    Tri1 reads ``w`` with threshold ``theta_tri1``; Tri2 reads ``-w`` with
    threshold ``-(theta_tri1 + sigma)``; T sums ``omega_tri1 * A_Tri1 +
    omega_tri2 * A_Tri2`` against ``omega_tri1 + omega_tri2``.
    """

    layer: int
    weights: np.ndarray
    theta_tri1: float
    sigma: float = DEFAULT_SIGMA
    omega_tri1: float = 1.0
    omega_tri2: float = 1.0
    kind = MULTI

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not (self.omega_tri1 > 0 and self.omega_tri2 > 0):
            raise ValueError("omega_tri1 and omega_tri2 must be positive")
        if not all(np.isfinite([self.theta_tri1, self.sigma, self.omega_tri1, self.omega_tri2])):
            raise ValueError("trigger parameters must be finite")
        total = float(self.omega_tri1) + float(self.omega_tri2)
        if total <= max(self.omega_tri1, self.omega_tri2):
            raise ValueError("omega_tri1 + omega_tri2 is not larger than either term in floating point")
        object.__setattr__(self, "weights", _as_weights(self.weights, np.size(self.weights)))
        for name in ("theta_tri1", "sigma", "omega_tri1", "omega_tri2"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def width(self):
        return self.weights.size

    @property
    def theta_tri2(self):
        return -(self.theta_tri1 + self.sigma)

    @property
    def theta_T(self):
        return self.omega_tri1 + self.omega_tri2

    def neuron_states(self, activations):
        """``(A_Tri1, A_Tri2, A_T)`` as float arrays (or scalars)."""
        a = _check_activations(activations, self.width)
        a_tri1 = BinaryStep(self.theta_tri1).apply(trigger_sum(a, self.weights))
        a_tri2 = BinaryStep(self.theta_tri2).apply(trigger_sum(a, -self.weights))
        z_t = weighted_sum(
            np.array([[self.omega_tri1, self.omega_tri2]]),
            _ZERO_BIAS,
            np.stack([a_tri1, a_tri2], axis=-1),
        )[..., 0]
        return a_tri1, a_tri2, BinaryStep(self.theta_T).apply(z_t)

    def fires(self, activations):
        out = self.neuron_states(activations)[2].astype(np.int64)
        return int(out) if out.ndim == 0 else out

    def thresholds(self):
        return {"theta_Tri1": self.theta_tri1, "theta_Tri2": self.theta_tri2, "theta_T": self.theta_T}


def _check_insertion_layer(host, n):
    if not 1 <= n <= host.depth - 1:
        raise InsertionError(
            f"insertion layer {n} is not eligible: need 1 <= n <= {host.depth - 1} "
            "(a previous and a next layer must exist)"
        )


def _trigger_activations(host, n, trigger_input):
    _check_insertion_layer(host, n)
    x = np.asarray(trigger_input, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"trigger input must be a single vector, got shape {x.shape}")
    _, snap = forward(host, x)
    return snap.activations[n - 1]


def design_single_neuron(host, n, trigger_input, trigger_weights=None, epsilon=0.0):
    """Pulse trojan at layer ``n`` whose threshold is the trigger's captured sum."""
    a = _trigger_activations(host, n, trigger_input)
    w = _as_weights(trigger_weights, a.size)
    return SingleNeuronTrigger(n, w, float(trigger_sum(a, w)), epsilon)


def design_multi_neuron(
    host, n, trigger_input, trigger_weights=None, sigma=DEFAULT_SIGMA, omega_tri1=1.0, omega_tri2=1.0
):
    """Three-neuron binary-step trojan firing on ``[theta_tri1, theta_tri1 + sigma]``."""
    a = _trigger_activations(host, n, trigger_input)
    w = _as_weights(trigger_weights, a.size)
    return MultiNeuronTrigger(n, w, float(trigger_sum(a, w)), sigma, omega_tri1, omega_tri2)


def _frozen_vector(values, what):
    v = np.array(values, dtype=np.float64, copy=True).ravel()
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what} must be finite")
    v.flags.writeable = False
    return v


@dataclass(frozen=True, eq=False)
class TrojanSpec:
    """Trigger plus payload synapses into layer ``n + 1``.

    ``residual`` is added right after the payload when the trojan fires; it
    defaults to the residual carried by a payload vector, if any.
    """

    trigger: object
    payload: np.ndarray
    label: str = ""
    residual: np.ndarray = None

    def __post_init__(self):
        residual = self.residual if self.residual is not None else getattr(self.payload, "residual", None)
        xi = _frozen_vector(np.asarray(self.payload), "payload weights")
        if residual is not None:
            residual = _frozen_vector(residual, "payload residual")
            if residual.shape != xi.shape:
                raise DimensionError("payload residual must match the payload width")
            if not np.any(residual):
                residual = None
        object.__setattr__(self, "payload", xi)
        object.__setattr__(self, "residual", residual)

    @property
    def layer(self):
        return self.trigger.layer


def _check_spec(host, spec):
    n = spec.layer
    _check_insertion_layer(host, n)
    p = host.widths[n - 1]
    q = host.widths[n + 1]
    if spec.trigger.width != p:
        raise InsertionError(f"trigger reads {spec.trigger.width} activations but layer {n - 1} has {p}")
    if spec.payload.size != q:
        raise InsertionError(f"payload has {spec.payload.size} weights but layer {n + 1} has {q} neurons")


def _deliver(z, spec):
    # fired trojan: activation 1 times each payload synapse
    z = z + spec.payload * 1.0
    if spec.residual is not None:
        z = z + spec.residual * 1.0
    return z


@dataclass(frozen=True, eq=False)
class TrojanedNetwork:
    """Host plus trojans, evaluated without altering any host parameter."""

    host: Network
    trojans: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "trojans", tuple(self.trojans))
        for spec in self.trojans:
            _check_spec(self.host, spec)

    @property
    def output_head(self):
        return self.host.output_head

    def forward(self, x):
        """Composite ``(output, snapshot)``; batches are accepted like :func:`forward`.

        Payloads of fired trojans are added to the freshly computed neural
        inputs of layer ``n + 1``; dormant trojans leave them untouched.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.host.input_dim:
            raise DimensionError(f"expected input of width {self.host.input_dim}, got shape {x.shape}", layer=0)
        snap = ActivationSnapshot([x.copy()], [x.copy()])
        a = x
        for k, layer in enumerate(self.host.layers, start=1):
            z = layer.neural_inputs(a)
            for spec in self.trojans:
                if spec.layer + 1 != k:
                    continue
                fired = spec.trigger.fires(snap.activations[spec.layer - 1])
                if z.ndim == 1:
                    if fired:
                        z = _deliver(z, spec)
                elif np.any(fired):
                    mask = np.asarray(fired, dtype=bool)
                    z[mask] = _deliver(z[mask], spec)
            a = layer.activate(z)
            snap.neural_inputs.append(z)
            snap.activations.append(a)
        return a, snap

    def __call__(self, x):
        return self.forward(x)[0]

    def fired(self, x):
        """Firing state of each trojan for input(s) ``x`` on the composite chain."""
        _, snap = self.forward(x)
        return [spec.trigger.fires(snap.activations[spec.layer - 1]) for spec in self.trojans]


def insert(host, spec):
    """Attach ``spec`` to ``host`` (a Network or an existing TrojanedNetwork)."""
    if isinstance(host, TrojanedNetwork):
        return TrojanedNetwork(host.host, host.trojans + (spec,))
    return TrojanedNetwork(host, (spec,))


def as_plain_network(trojaned):
    """Enlarged ordinary network equivalent to a composite of single-neuron trojans.

    Each trojan becomes an extra pulse neuron appended to layer ``n`` and an
    extra payload column appended to layer ``n + 1``; a payload residual
    needs a second copy of the pulse neuron.  Multi-neuron trojans need a
    neuron-to-neuron link inside one layer and cannot be flattened.
    """
    host = trojaned.host
    if any(spec.trigger.kind != SINGLE for spec in trojaned.trojans):
        raise InsertionError("only single-neuron trojans can be flattened into a plain network")
    # per layer: one (spec, outgoing weights) entry per extra neuron
    extra = {k: [] for k in range(host.depth + 1)}
    for spec in trojaned.trojans:
        extra[spec.layer].append((spec, spec.payload))
        if spec.residual is not None:
            extra[spec.layer].append((spec, spec.residual))

    layers = []
    for k, layer in enumerate(host.layers, start=1):
        w, b = np.array(layer.weights), np.array(layer.biases)
        act = layer.activation
        incoming = extra[k - 1]
        if incoming:
            w = np.hstack([w, np.stack([out for _, out in incoming], axis=1)])
        rows = extra[k]
        if rows:
            if layer.is_softmax:
                raise InsertionError("cannot append pulse neurons to a softmax layer")
            # trigger weights only see host neurons of layer k-1
            new_rows = [np.concatenate([spec.trigger.weights, np.zeros(len(incoming))]) for spec, _ in rows]
            w = np.vstack([w, np.stack(new_rows)])
            b = np.concatenate([b, np.zeros(len(rows))])
            base = act if isinstance(act, tuple) else (act,) * layer.out_dim
            act = base + tuple(Pulse(spec.trigger.theta, spec.trigger.epsilon) for spec, _ in rows)
        layers.append(DenseLayer(w, b, act))
    return Network(tuple(layers), host.output_head)
