"""Toy 4-bit models and seeded synthetic MLP hosts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (
    CLASSIFICATION,
    CROSS_ENTROPY,
    MAE,
    REGRESSION,
    TrainConfig,
    forward,
    init_network,
    train,
)

TOY_WIDTHS = (4, 5, 1)
TOY_CLASS_WIDTHS = (4, 5, 16)

TOY_REGRESSION_TRAINING = TrainConfig(
    learning_rate=0.05, max_epochs=40000, loss_threshold=0.005, lr_decay=0.9998
)
TOY_CLASSIFICATION_TRAINING = TrainConfig(learning_rate=1.0, max_epochs=30000, loss_threshold=0.05)


@dataclass(frozen=True)
class ToyDataset:
    inputs: np.ndarray
    targets: np.ndarray
    mode: str

    def __len__(self):
        return len(self.inputs)

    @property
    def labels(self):
        if self.mode != CLASSIFICATION:
            raise AttributeError("regression datasets have no labels")
        return np.argmax(self.targets, axis=1)


def bits(value, width=4):
    """Most significant bit first, as 0.0/1.0 floats."""
    return np.array([(value >> (width - 1 - b)) & 1 for b in range(width)], dtype=np.float64)


def parse_bits(text):
    """``"1010"`` -> ``[1., 0., 1., 0.]``."""
    if not text or set(text) - {"0", "1"}:
        raise ValueError(f"not a bit string: {text!r}")
    return np.array([float(c) for c in text])


def _four_bit_inputs():
    return np.stack([bits(v) for v in range(16)])


def build_toy_regression(seed=0):
    """Untrained 4-5-1 sigmoid/identity network and the binary-to-decimal data."""
    net = init_network(TOY_WIDTHS, output_head=REGRESSION, seed=seed)
    data = ToyDataset(_four_bit_inputs(), np.arange(16, dtype=np.float64)[:, None], REGRESSION)
    return net, data


def build_toy_classification(seed=0):
    """Untrained 4-5-16 network with a softmax head and one-hot targets."""
    net = init_network(TOY_CLASS_WIDTHS, output_head=CLASSIFICATION, seed=seed)
    data = ToyDataset(_four_bit_inputs(), np.eye(16), CLASSIFICATION)
    return net, data


def train_toy(kind, seed=0, config=None):
    """Build and train one of the toys; returns ``(TrainResult, ToyDataset)``."""
    if kind == REGRESSION:
        net, data = build_toy_regression(seed)
        result = train(net, data.inputs, data.targets, MAE, config or TOY_REGRESSION_TRAINING)
    elif kind == CLASSIFICATION:
        net, data = build_toy_classification(seed)
        result = train(net, data.inputs, data.targets, CROSS_ENTROPY, config or TOY_CLASSIFICATION_TRAINING)
    else:
        raise ValueError(f"unknown toy {kind!r}")
    return result, data


# ---------------------------------------------------------------------------
# synthetic hosts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticModelSpec:
    """Seeded recipe for a desk-scale host and its input pools.

    Inputs are drawn uniformly from ``[low, high]^d``.  With ``pretrain`` the
    network is fitted for a few epochs to labels produced by a random teacher
    so its hidden activations are not degenerate.
    """

    layer_widths: tuple = (8, 16, 16, 8)
    seed: int = 0
    low: float = 0.0
    high: float = 1.0
    output_head: str = CLASSIFICATION
    n_trigger: int = 5
    n_nontrigger: int = 1000
    pretrain: bool = True
    pretrain_samples: int = 256
    pretrain_epochs: int = 200
    pretrain_lr: float = 0.5
    init_scale: float = 1.0
    n_perturbed: int = 0
    perturbation_scale: float = 1e-3
    name: str = field(default="", compare=False)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 3 or any(w <= 0 for w in widths):
            raise ValueError(f"synthetic hosts need >= 3 positive layer widths, got {self.layer_widths}")
        if self.output_head == CLASSIFICATION and widths[-1] < 2:
            raise ValueError("a classification head needs at least 2 outputs")
        if not self.high > self.low:
            raise ValueError("input domain must satisfy high > low")
        if self.n_trigger < 1 or self.n_nontrigger < 0:
            raise ValueError("pool sizes must be n_trigger >= 1, n_nontrigger >= 0")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        object.__setattr__(self, "layer_widths", widths)


@dataclass
class SyntheticHost:
    network: object
    trigger_pool: np.ndarray
    nontrigger_pool: np.ndarray
    spec: SyntheticModelSpec
    perturbation_pool: np.ndarray = None

    @property
    def name(self):
        return self.spec.name or f"mlp{'-'.join(map(str, self.spec.layer_widths))}-s{self.spec.seed}"


def _disjoint_rows(candidates, exclude):
    seen = {row.tobytes() for row in exclude}
    keep = []
    for row in candidates:
        key = row.tobytes()
        if key not in seen:
            seen.add(key)
            keep.append(row)
    return keep


def build_synthetic(spec):
    """Network plus disjoint trigger / non-trigger pools, a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    d = spec.layer_widths[0]
    net = init_network(spec.layer_widths, output_head=spec.output_head, seed=rng, scale=spec.init_scale)

    if spec.pretrain:
        teacher = init_network(spec.layer_widths, output_head=spec.output_head, seed=rng, scale=2.0)
        x = rng.uniform(spec.low, spec.high, size=(spec.pretrain_samples, d))
        t, _ = forward(teacher, x)
        if spec.output_head == CLASSIFICATION:
            t = np.eye(spec.layer_widths[-1])[np.argmax(t, axis=1)]
            loss = CROSS_ENTROPY
        else:
            loss = MAE
        cfg = TrainConfig(learning_rate=spec.pretrain_lr, max_epochs=spec.pretrain_epochs, loss_threshold=0.0)
        net = train(net, x, t, loss, cfg).network

    triggers = _disjoint_rows(rng.uniform(spec.low, spec.high, size=(spec.n_trigger, d)), [])
    while len(triggers) < spec.n_trigger:
        triggers += _disjoint_rows(rng.uniform(spec.low, spec.high, size=(1, d)), triggers)
    others = []
    while len(others) < spec.n_nontrigger:
        need = spec.n_nontrigger - len(others)
        others += _disjoint_rows(rng.uniform(spec.low, spec.high, size=(need, d)), triggers + others)
    trigger_pool = np.array(triggers).reshape(-1, d)
    nontrigger_pool = np.array(others).reshape(-1, d)

    perturbed = None
    if spec.n_perturbed:
        perturbed = perturbation_pool(trigger_pool, spec.n_perturbed, spec.perturbation_scale, rng)
    return SyntheticHost(net, trigger_pool, nontrigger_pool, spec, perturbed)


def perturbation_pool(triggers, n_per_trigger, scale, rng):
    """Near-duplicates of each trigger (uniform noise of width ``scale``), never equal to one."""
    triggers = np.atleast_2d(triggers)
    rows = []
    for trig in triggers:
        noise = rng.uniform(-scale, scale, size=(n_per_trigger, trig.size))
        rows += _disjoint_rows(trig + noise, triggers)
    return np.array(rows).reshape(-1, triggers.shape[1])
