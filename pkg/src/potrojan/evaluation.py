"""Stealth and harm measurements over sweeps of hosts, layers, kinds and triggers."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import __version__
from .nn import CLASSIFICATION, forward
from .payload import (
    ClassificationGoal,
    PayloadError,
    RegressionGoal,
    ReverseConfig,
    dominance_magnitude,
    dominance_payload,
    PayloadVector,
    split_difference,
    payload_with_access,
    reverse_neural_inputs,
    trigger_neural_inputs,
)
from .trojan import (
    DEFAULT_SIGMA,
    KINDS,
    SINGLE,
    TrojanSpec,
    design_multi_neuron,
    design_single_neuron,
    insert,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "host",
    "layer",
    "kind",
    "trigger_id",
    "fired",
    "accident_fires",
    "pool_size",
    "D",
    "clean_invariant",
    "target_confidence",
)


class PoolOverlapError(ValueError):
    """A trigger input also appears in the non-trigger pool."""


class Rate(NamedTuple):
    count: int
    total: int

    @property
    def value(self):
        return self.count / self.total

    def __str__(self):
        return f"{self.count}/{self.total}"


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def averaged_distance(eta_star, etas):
    """Mean Euclidean distance from ``eta_star`` to each row of ``etas``, per element.

    ``D = sum_i ||eta* - eta_i|| / (len(etas) * eta_star.size)``.
    """
    eta_star = np.asarray(eta_star, dtype=np.float64).ravel()
    if np.size(etas) == 0:
        raise ValueError("distance metric needs a non-empty pool")
    diff = np.asarray(etas, dtype=np.float64).reshape(-1, eta_star.size) - eta_star
    # scale rows first so tiny or huge activations neither underflow nor overflow
    scale = np.max(np.abs(diff), axis=1)
    safe = np.where(scale > 0, scale, 1.0)
    dists = scale * np.linalg.norm(diff / safe[:, None], axis=1)
    return float(np.sum(dists) / (len(diff) * eta_star.size))


def distance_metric(host, n, trigger_input, nontrigger_pool, weights=None):
    """Averaged distance between layer ``n - 1`` activations of trigger and pool.

    Activations are weighted element-wise by the trigger synapse weights
    (all ones by default), i.e. what the trojan neuron actually sees.
    """
    pool = np.atleast_2d(np.asarray(nontrigger_pool, dtype=np.float64))
    if pool.size == 0:
        raise ValueError("distance metric needs a non-empty pool")
    _, trig = forward(host, np.asarray(trigger_input, dtype=np.float64))
    _, snap = forward(host, pool)
    w = np.ones(host.widths[n - 1]) if weights is None else np.asarray(weights, dtype=np.float64)
    return averaged_distance(trig.activations[n - 1] * w, snap.activations[n - 1] * w)


def invariance_violations(host, trojaned, probe_pool):
    """Indices of probes whose composite output differs (bitwise) from the host's."""
    probes = np.atleast_2d(np.asarray(probe_pool, dtype=np.float64))
    clean, _ = forward(host, probes)
    dirty = trojaned(probes)
    return [i for i in range(len(probes)) if clean[i].tobytes() != dirty[i].tobytes()]


def clean_invariance(host, trojaned, probe_pool):
    return not invariance_violations(host, trojaned, probe_pool)


def check_disjoint(triggers, pool):
    seen = {np.asarray(t, dtype=np.float64).tobytes() for t in np.atleast_2d(triggers)}
    for i, row in enumerate(np.atleast_2d(np.asarray(pool, dtype=np.float64))):
        if row.tobytes() in seen:
            raise PoolOverlapError(f"non-trigger pool row {i} equals a trigger input")


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

ZERO = "zero"
REVERSE = "reverse"
DOMINANCE = "dominance"
INSTANCE = "instance"
PAYLOAD_MODES = (ZERO, REVERSE, DOMINANCE, INSTANCE)


@dataclass
class SweepHost:
    """One host with its pools.

    ``payload`` overrides the plan's payload mode for this host; it may also
    be an explicit weight vector.  ``target_labels`` (one per trigger) and
    ``target_instances`` (for ``instance`` payloads) are optional.
    """

    name: str
    network: object
    triggers: np.ndarray
    nontriggers: np.ndarray
    layers: Optional[list] = None
    payload: object = None
    target_labels: Optional[list] = None
    target_instances: Optional[np.ndarray] = None
    target_values: Optional[list] = None

    def __post_init__(self):
        self.triggers = np.atleast_2d(np.asarray(self.triggers, dtype=np.float64))
        self.nontriggers = np.atleast_2d(np.asarray(self.nontriggers, dtype=np.float64))
        check_disjoint(self.triggers, self.nontriggers)

    def eligible_layers(self):
        return list(range(1, self.network.depth)) if self.layers is None else list(self.layers)


@dataclass
class SweepPlan:
    hosts: list
    kinds: tuple = KINDS
    payload: object = REVERSE
    confidence: float = 0.99
    reverse: ReverseConfig = field(default_factory=lambda: ReverseConfig(alpha=0.1, tau=1e-3))
    sigma: float = DEFAULT_SIGMA
    epsilon: float = 0.0
    probe_clean: bool = True
    seed: int = 0

    def __post_init__(self):
        for kind in self.kinds:
            if kind not in KINDS:
                raise ValueError(f"unknown trojan kind {kind!r}")


@dataclass
class CellResult:
    host: str
    layer: int
    kind: str
    trigger_id: int
    fired: bool
    accident_fires: int
    pool_size: int
    D: float
    clean_invariant: Optional[bool] = None
    target_confidence: Optional[float] = None
    target_label: Optional[int] = None
    payload_converged: Optional[bool] = None
    violations: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.accident_fires <= self.pool_size:
            raise ValueError("accident_fires must lie in [0, pool_size]")


def _targets_for(host, plan):
    net = host.network
    m = len(host.triggers)
    if host.target_labels is not None:
        return list(host.target_labels)
    if net.output_head != CLASSIFICATION:
        return [None] * m
    rng = np.random.default_rng([plan.seed, len(host.name), *host.name.encode()])
    clean = np.argmax(forward(net, host.triggers)[0], axis=1)
    labels = []
    for c in clean:
        label = int(rng.integers(net.output_dim - 1))
        labels.append(label + 1 if label >= c else label)
    return labels


def _payload_for(host, plan, n, t_idx, target):
    """``(xi, converged)`` for one (layer, trigger); shared by both kinds."""
    net = host.network
    mode = plan.payload if host.payload is None else host.payload
    q = net.widths[n + 1]
    trigger = host.triggers[t_idx]
    if not isinstance(mode, str):
        return np.asarray(mode, dtype=np.float64), None
    if mode == ZERO:
        return np.zeros(q), None
    if mode == INSTANCE:
        if host.target_instances is None:
            raise PayloadError(f"host {host.name}: instance payload needs target_instances")
        return payload_with_access(net, n, trigger, host.target_instances[t_idx]), None
    if mode == DOMINANCE:
        # only meaningful right before the softmax; elsewhere the trojan is inert
        if n + 1 != net.depth:
            return np.zeros(q), None
        mag = dominance_magnitude(net, np.vstack([host.triggers, host.nontriggers]))
        return dominance_payload(net, n, target, mag), None
    if mode == REVERSE:
        if net.output_head == CLASSIFICATION:
            goal = ClassificationGoal(target, plan.confidence)
        else:
            value = 0.0 if host.target_values is None else host.target_values[t_idx]
            goal = RegressionGoal(value)
        z_dot = trigger_neural_inputs(net, n, trigger)
        result = reverse_neural_inputs(net, n, goal, z_dot, plan.reverse)
        if not result.converged:
            logger.info("%s layer %d trigger %d: reverse payload stopped at loss %.4g", host.name, n, t_idx, result.loss)
        return PayloadVector(*split_difference(result.z, z_dot)), result.converged
    raise ValueError(f"unknown payload mode {mode!r}")


def run_sweep(plan):
    """Evaluate every (host, layer, kind, trigger) cell of ``plan``."""
    results = []
    for host in plan.hosts:
        net = host.network
        pool = host.nontriggers
        _, pool_snap = forward(net, pool)
        clean_pool_out = pool_snap.activations[-1]
        targets = _targets_for(host, plan)
        for n in host.eligible_layers():
            for t_idx, trig in enumerate(host.triggers):
                xi, converged = _payload_for(host, plan, n, t_idx, targets[t_idx])
                for kind in plan.kinds:
                    if kind == SINGLE:
                        design = design_single_neuron(net, n, trig, epsilon=plan.epsilon)
                    else:
                        design = design_multi_neuron(net, n, trig, sigma=plan.sigma)
                    tn = insert(net, TrojanSpec(design, xi, f"{host.name}/{n}/{kind}/{t_idx}"))
                    out, snap = tn.forward(trig)
                    fired = bool(design.fires(snap.activations[n - 1]))
                    accidents = int(np.sum(design.fires(pool_snap.activations[n - 1])))
                    d = averaged_distance(
                        snap.activations[n - 1] * design.weights, pool_snap.activations[n - 1] * design.weights
                    )
                    invariant, violations = None, []
                    if plan.probe_clean:
                        dirty = tn(pool)
                        violations = [
                            i for i in range(len(pool)) if dirty[i].tobytes() != clean_pool_out[i].tobytes()
                        ]
                        invariant = not violations
                    target = targets[t_idx]
                    if net.output_head == CLASSIFICATION:
                        confidence = float(out[target]) if target is not None else None
                    else:
                        confidence = float(out[0])
                    results.append(
                        CellResult(
                            host.name, n, kind, t_idx, fired, accidents, len(pool), d,
                            invariant, confidence, target, converged, violations,
                        )
                    )
    return results


def triggering_rate(results):
    """``{(host, kind, trigger_id): Rate(fired layers, layers)}``; absent when no layers."""
    rates = {}
    for r in results:
        key = (r.host, r.kind, r.trigger_id)
        count, total = rates.get(key, (0, 0))
        rates[key] = Rate(count + int(r.fired), total + 1)
    return rates


def accident_rate(results):
    """``{(host, layer, kind, trigger_id): Rate(accidental fires, pool size)}``."""
    return {(r.host, r.layer, r.kind, r.trigger_id): Rate(r.accident_fires, r.pool_size) for r in results}


def accident_layer_rate(results):
    """``{(host, kind, trigger_id): Rate(layers with any accidental fire, layers)}``."""
    rates = {}
    for r in results:
        key = (r.host, r.kind, r.trigger_id)
        count, total = rates.get(key, (0, 0))
        rates[key] = Rate(count + int(r.accident_fires > 0), total + 1)
    return rates


def distance_curve(results):
    """Mean ``D`` per (host, layer), averaged over triggers (and kinds)."""
    acc = {}
    for r in results:
        acc.setdefault((r.host, r.layer), {})[(r.trigger_id)] = r.D
    return {key: float(np.mean(list(v.values()))) for key, v in sorted(acc.items())}


def best_insertion_layer(results, host):
    curve = {layer: d for (h, layer), d in distance_curve(results).items() if h == host}
    return max(curve, key=curve.get) if curve else None


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _num(x):
    return None if x is None else float(f"{x:.9g}")


def _csv_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _cell_dict(r):
    d = asdict(r)
    d["D"] = _num(r.D)
    d["target_confidence"] = _num(r.target_confidence)
    return d


def emit_report(results, out_dir, seed=None, config=None, curve=True):
    """Write ``cells.csv``, ``summary.json`` and (optionally) ``d_curve.csv``.

    Returns the written paths keyed by short name.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    paths = {"csv": out / "cells.csv", "json": out / "summary.json"}

    try:
        with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in results:
                writer.writerow([_csv_value(getattr(r, c)) for c in CSV_COLUMNS])

        summary = {
            "metadata": {
                "seed": seed,
                "config_hash": config_hash(config or {}),
                "engine_version": __version__,
            },
            "cells": [_cell_dict(r) for r in results],
            "triggering_rates": [
                {"host": h, "kind": k, "trigger_id": t, "rate": str(v), "value": _num(v.value)}
                for (h, k, t), v in triggering_rate(results).items()
            ],
            "accident_rates": [
                {"host": h, "kind": k, "trigger_id": t, "rate": str(v), "value": _num(v.value)}
                for (h, k, t), v in accident_layer_rate(results).items()
            ],
        }
        with open(paths["json"], "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")

        if curve:
            paths["curve"] = out / "d_curve.csv"
            with open(paths["curve"], "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(("host", "layer", "D_mean"))
                for (h, layer), d in distance_curve(results).items():
                    writer.writerow((h, layer, f"{d:.9g}"))
    except OSError as exc:
        raise OSError(f"failed writing report in {out}: {exc}") from exc
    return paths


def read_report(path):
    """Load ``summary.json``; returns ``(metadata, [CellResult, ...])``."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    names = {f.name for f in fields(CellResult)}
    cells = [CellResult(**{k: v for k, v in c.items() if k in names}) for c in data["cells"]]
    return data["metadata"], cells
