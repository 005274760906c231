"""Payload weights for a fired trojan.

All three constructions work on the neural inputs of layer ``n + 1``:

* with a target instance, the payload is the difference between the target's
  and the trigger's neural inputs there;
* without one, the target neural inputs are found by descending
  ``|V* - V_hat|`` with respect to them, then differenced the same way;
* for a softmax head, a single large weight on the target logit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    CLASSIFICATION,
    AbsoluteTargetLoss,
    DimensionError,
    NonFiniteError,
    forward,
    forward_from,
    gradient_wrt_neural_inputs,
)

logger = logging.getLogger(__name__)

NORMALIZED = "normalized"
RAW = "raw"


class PayloadError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """Reverse engineering stopped without meeting the tolerance."""

    def __init__(self, result):
        super().__init__(
            f"reverse engineering did not converge: loss {result.loss:.6g} after {result.iterations} iterations"
        )
        self.result = result


# ---------------------------------------------------------------------------
# goals and configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegressionGoal:
    target_value: float
    output_index: int = 0

    def loss(self):
        return AbsoluteTargetLoss(float(self.target_value), self.output_index)


@dataclass(frozen=True)
class ClassificationGoal:
    target_label: int
    confidence: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise ValueError(f"target confidence must lie strictly in (0, 1), got {self.confidence}")
        if self.target_label < 0:
            raise ValueError("target label must be non-negative")

    def loss(self):
        return AbsoluteTargetLoss(float(self.confidence), int(self.target_label))


@dataclass(frozen=True)
class ReverseConfig:
    """Step size ``alpha``, tolerance ``tau`` and iteration cap.

    ``step="raw"`` moves by ``alpha * gradient`` exactly as written in the
    original procedure.  ``step="normalized"`` moves a distance ``alpha``
    along the gradient direction, which keeps making progress where the
    gradient of a saturated softmax is vanishingly small.  Whenever the
    residual ``V* - V_hat`` changes sign the step is multiplied by
    ``shrink`` (1.0 disables this).
    """

    alpha: float = 0.1
    tau: float = 1e-4
    max_iters: int = 10000
    step: str = NORMALIZED
    shrink: float = 0.5

    def __post_init__(self):
        if not (self.alpha > 0 and self.tau > 0 and self.max_iters > 0):
            raise ValueError("alpha, tau and max_iters must all be positive")
        if self.step not in (NORMALIZED, RAW):
            raise ValueError(f"unknown step rule {self.step!r}")
        if not 0 < self.shrink <= 1:
            raise ValueError("shrink must lie in (0, 1]")


REVERSE_PRESETS = {
    "desk": ReverseConfig(alpha=0.1, tau=1e-4, max_iters=10000),
    # large logits of ImageNet-scale classifiers
    "imagenet": ReverseConfig(alpha=10e8, tau=10e-5, max_iters=10000, step=RAW, shrink=1.0),
}


@dataclass
class ReverseResult:
    z: np.ndarray
    loss: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)

    def write_trace(self, path):
        """CSV with columns ``iteration,loss``."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iteration,loss\n")
            for i, value in self.trace:
                fh.write(f"{i},{value!r}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _next_layer(host, n):
    if not 0 <= n <= host.depth - 1:
        raise PayloadError(f"layer {n} has no next layer (network has layers 0..{host.depth})")
    return n + 1


def trigger_neural_inputs(host, n, x):
    """Clean-host neural inputs of layer ``n + 1`` for input ``x``."""
    k = _next_layer(host, n)
    _, snap = forward(host, np.asarray(x, dtype=np.float64))
    return snap.neural_inputs[k]


def exact_difference(target, base):
    """``target - base`` adjusted by at most a few ulps so that ``base + d == target``.

    Plain subtraction can be off by one rounding, in which case adding the
    difference back would miss ``target``.  Elements where no such ``d``
    exists keep the plain difference.
    """
    target = np.asarray(target, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    d = np.array(target - base, dtype=np.float64)
    for j in np.ndindex(d.shape):
        for _ in range(8):
            s = base[j] + d[j]
            if s == target[j]:
                break
            d[j] = np.nextafter(d[j], np.inf if s < target[j] else -np.inf)
        else:
            d[j] = target[j] - base[j]
    return d


class PayloadVector(np.ndarray):
    """Payload weights plus an optional residual delivered right after them.

    A single float added to a neural input cannot land on every target
    value, so constructions aiming at exact neural inputs also carry a small
    ``residual`` (``None`` when the weights alone already hit the target).
    Results of arithmetic on a PayloadVector carry no residual.
    """

    def __new__(cls, weights, residual=None):
        obj = np.asarray(weights, dtype=np.float64).view(cls)
        if residual is not None:
            residual = np.asarray(residual, dtype=np.float64)
            if residual.shape != obj.shape:
                raise DimensionError("residual must match the payload shape")
            if not np.any(residual):
                residual = None
        obj.residual = residual
        return obj

    def __array_finalize__(self, obj):
        self.residual = None


def split_difference(target, base):
    """``(d, r)`` with ``(base + d) + r == target`` exactly; ``r`` is zero when ``d`` suffices."""
    d = exact_difference(target, base)
    return d, exact_difference(target, np.asarray(base, dtype=np.float64) + d)


def _payload_to(target, base):
    d, r = split_difference(target, base)
    return PayloadVector(d, r)


def _check_label(host, goal):
    if host.output_head == CLASSIFICATION:
        if not isinstance(goal, ClassificationGoal):
            raise PayloadError("a softmax head needs a ClassificationGoal")
        if goal.target_label >= host.output_dim:
            raise PayloadError(f"target label {goal.target_label} outside 0..{host.output_dim - 1}")
    elif not isinstance(goal, RegressionGoal):
        raise PayloadError("a regression head needs a RegressionGoal")
    elif not 0 <= goal.output_index < host.output_dim:
        raise PayloadError(f"output index {goal.output_index} outside 0..{host.output_dim - 1}")


# ---------------------------------------------------------------------------
# payload constructions
# ---------------------------------------------------------------------------


def payload_with_access(host, n, trigger_input, target_instance, trigger=None):
    """Payload moving the trigger's layer-``n+1`` neural inputs onto the target's.

    Returns a :class:`PayloadVector` whose weights are ``Z_target - Z_trigger``.

    If ``trigger`` (a designed trigger) is given it must fire on
    ``trigger_input``; otherwise the payload would never be delivered.
    """
    if trigger is not None:
        _, snap = forward(host, np.asarray(trigger_input, dtype=np.float64))
        if not trigger.fires(snap.activations[trigger.layer - 1]):
            raise PayloadError("trojan does not fire on the trigger input; payload undefined")
    z_dot = trigger_neural_inputs(host, n, trigger_input)
    z_ddot = trigger_neural_inputs(host, n, target_instance)
    return _payload_to(z_ddot, z_dot)


def reverse_neural_inputs(host, n, goal, z_start, cfg=ReverseConfig()):
    """Descend ``|V* - V_hat(Z)|`` over the neural inputs ``Z`` of layer ``n + 1``.

    Returns a :class:`ReverseResult`.  On success ``z`` is the iterate that met
    the tolerance; otherwise it is the best iterate seen.
    """
    k = _next_layer(host, n)
    _check_label(host, goal)
    z = np.array(z_start, dtype=np.float64, copy=True)
    if z.shape != (host.layer(k).out_dim,):
        raise DimensionError(f"z_start must have {host.layer(k).out_dim} elements, got shape {z.shape}", layer=k)
    loss = goal.loss()

    out = forward_from(host, k, z)
    current = loss.value(out)
    trace = [(0, current)]
    best_z, best_loss = z.copy(), current
    alpha = cfg.alpha
    prev_sign = np.sign(loss.target - out[loss.index])
    i = 0
    while current > cfg.tau and i < cfg.max_iters:
        i += 1
        try:
            delta = gradient_wrt_neural_inputs(host, k, z, loss)
        except NonFiniteError as exc:
            raise NonFiniteError(f"iteration {i}: {exc}") from exc
        if cfg.step == NORMALIZED:
            norm = np.linalg.norm(delta)
            if norm == 0.0:
                logger.info("zero gradient at iteration %d, stopping", i)
                break
            delta = delta / norm
        elif not np.any(delta):
            logger.info("zero gradient at iteration %d, stopping", i)
            break
        z = z - delta * alpha
        try:
            out = forward_from(host, k, z)
        except NonFiniteError as exc:
            raise NonFiniteError(f"iteration {i}: {exc}") from exc
        current = loss.value(out)
        if not np.isfinite(current):
            raise NonFiniteError(f"iteration {i}: non-finite loss")
        trace.append((i, current))
        sign = np.sign(loss.target - out[loss.index])
        if sign != 0 and prev_sign != 0 and sign != prev_sign:
            alpha *= cfg.shrink
        prev_sign = sign
        if current < best_loss:
            best_z, best_loss = z.copy(), current

    if current <= cfg.tau:
        return ReverseResult(z, current, i, True, trace)
    return ReverseResult(best_z, best_loss, i, False, trace)


def payload_without_access(host, n, trigger_input, goal, cfg=ReverseConfig(), trace_path=None):
    """Payload from reverse-engineered layer-``n+1`` neural inputs.

    Raises :class:`ConvergenceError` (carrying the result) when the descent
    does not reach the tolerance.
    """
    z_dot = trigger_neural_inputs(host, n, trigger_input)
    result = reverse_neural_inputs(host, n, goal, z_dot, cfg)
    if trace_path is not None:
        result.write_trace(trace_path)
    if not result.converged:
        raise ConvergenceError(result)
    return _payload_to(result.z, z_dot)


def dominance_magnitude(host, reference_inputs, factor=10.0):
    """``factor`` times the largest absolute pre-softmax neural input seen."""
    _, snap = forward(host, np.atleast_2d(np.asarray(reference_inputs, dtype=np.float64)))
    return factor * float(np.max(np.abs(snap.neural_inputs[host.depth])))


def dominance_payload(host, n, target_label, magnitude=None, reference_inputs=None):
    """All payload weight on the target logit, zero elsewhere."""
    if host.output_head != CLASSIFICATION or n + 1 != host.depth:
        raise PayloadError("dominance payload needs layer n+1 to be the pre-softmax output layer")
    q = host.output_dim
    if not 0 <= target_label < q:
        raise PayloadError(f"target label {target_label} outside 0..{q - 1}")
    if magnitude is None:
        if reference_inputs is None:
            raise PayloadError("give a magnitude or reference inputs to derive one")
        magnitude = dominance_magnitude(host, reference_inputs)
    xi = np.zeros(q)
    xi[target_label] = float(magnitude)
    return xi


def flip_margin(z, target_label):
    """Smallest logit boost making ``target_label`` the strict argmax: ``max_other - z_t``."""
    z = np.asarray(z, dtype=np.float64)
    others = np.delete(z, target_label)
    return float(np.max(others) - z[target_label])


def confidence_margin(z, target_label, confidence):
    """Logit boost at which the softmax probability of ``target_label`` reaches ``confidence``."""
    z = np.asarray(z, dtype=np.float64)
    others = np.delete(z, target_label)
    m = np.max(others)
    lse = m + np.log(np.sum(np.exp(others - m)))
    return float(lse - z[target_label] + np.log(confidence / (1.0 - confidence)))
