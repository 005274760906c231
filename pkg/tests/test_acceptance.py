"""Exit criteria, each at its stated tolerance; one verdict line per criterion."""

import math
import time

import numpy as np
import pytest

from conftest import random_net
from potrojan.cli import DESK_HOSTS, DESK_INIT_SCALE, DESK_SIGMA
from potrojan.evaluation import SweepHost, SweepPlan, averaged_distance, run_sweep
from potrojan.nn import REGRESSION, AbsoluteTargetLoss, forward, forward_from, gradient_wrt_neural_inputs
from potrojan.payload import (
    ClassificationGoal,
    ReverseConfig,
    dominance_payload,
    payload_with_access,
    reverse_neural_inputs,
    split_difference,
    trigger_neural_inputs,
)
from potrojan.serialization import dumps_model, layers_bytes
from potrojan.trojan import DEFAULT_SIGMA, TrojanSpec, design_multi_neuron, design_single_neuron, insert
from potrojan.zoo import SyntheticModelSpec, build_synthetic, parse_bits, train_toy

pytestmark = pytest.mark.acceptance

TRIGGER = parse_bits("1111")


@pytest.fixture(scope="module")
def desk_hosts():
    hosts = []
    for i, raw in enumerate(DESK_HOSTS):
        spec = SyntheticModelSpec(
            layer_widths=tuple(raw["layer_widths"]), name=raw["name"], seed=i, init_scale=DESK_INIT_SCALE
        )
        hosts.append(build_synthetic(spec))
    return hosts


def test_1_toy_regression_fit(criterion):
    start = time.perf_counter()
    result, data = train_toy(REGRESSION, seed=0)
    elapsed = time.perf_counter() - start
    out, _ = forward(result.network, data.inputs)
    worst = float(np.max(np.abs(out - data.targets)))
    ok = worst <= 0.15 and elapsed < 10.0
    criterion(1, ok, f"max |pred - target| = {worst:.4f} (<= 0.15) in {elapsed:.2f} s (< 10 s)")
    assert ok


def test_2_exact_payload_shift(criterion, toy_regression):
    net, data = toy_regression
    tn = insert(net, TrojanSpec(design_single_neuron(net, 1, TRIGGER), [-1.0]))
    clean, _ = forward(net, data.inputs)
    dirty = tn(data.inputs)
    shift = dirty[15, 0] - clean[15, 0]
    exact = dirty[15, 0] == clean[15, 0] - 1.0 and shift == -1.0
    others = dirty[:15].tobytes() == clean[:15].tobytes()
    ok = bool(exact and others)
    criterion(
        2, ok,
        f"1111: {float(clean[15, 0])!r} -> {float(dirty[15, 0])!r} (shift {float(shift)!r}); other 15 bit-identical: {others}",
    )
    assert ok


def test_3_toy_classification_mislabel(criterion, toy_classification):
    net, data = toy_classification
    xi = dominance_payload(net, 1, 0, reference_inputs=data.inputs)
    tn = insert(net, TrojanSpec(design_single_neuron(net, 1, TRIGGER), xi))
    clean, _ = forward(net, data.inputs)
    dirty = tn(data.inputs)
    label = int(np.argmax(dirty[15]))
    others = dirty[:15].tobytes() == clean[:15].tobytes()
    same_labels = np.array_equal(np.argmax(dirty[:15], axis=1), np.argmax(clean[:15], axis=1))
    ok = label == 0 and others and same_labels
    criterion(3, ok, f"1111 labelled {label} (clean {int(np.argmax(clean[15]))}); other 15 unchanged: {others}")
    assert ok


def test_4_trigger_and_accident_rates(criterion, desk_hosts):
    start = time.perf_counter()
    hosts = [SweepHost(h.name, h.network, h.trigger_pool, h.nontrigger_pool) for h in desk_hosts]
    cells = run_sweep(SweepPlan(hosts, sigma=DESK_SIGMA, seed=0))
    elapsed = time.perf_counter() - start
    expected = sum((h.network.depth - 1) * 2 * 5 for h in desk_hosts)
    fired = sum(c.fired for c in cells)
    accidents = sum(c.accident_fires for c in cells)
    ok = (
        all(len(h.network.widths) >= 4 for h in desk_hosts)
        and len(cells) == expected
        and all(c.pool_size == 1000 for c in cells)
        and fired == expected
        and accidents == 0
        and elapsed < 120.0
    )
    criterion(
        4, ok,
        f"{len(cells)} cells: triggering {fired}/{expected}, accidental fires {accidents} over 1000 inputs each "
        f"(sigma {DESK_SIGMA:g}), {elapsed:.1f} s (< 120 s)",
    )
    # for reference: the same multi-neuron cells at the library default window
    wide = 0
    for h in desk_hosts:
        _, snap = forward(h.network, h.nontrigger_pool)
        for n in range(1, h.network.depth):
            for trig in h.trigger_pool:
                design = design_multi_neuron(h.network, n, trig, sigma=DEFAULT_SIGMA)
                wide += int(np.sum(design.fires(snap.activations[n - 1])))
    criterion.note(4, f"same multi-neuron cells with sigma {DEFAULT_SIGMA:g}: {wide} accidental fires (not asserted)")
    assert ok


def sequential_dot(a, w):
    s = 0.0
    for ai, wi in zip(a, w):
        s = s + ai * wi
    return s


def window_vectors(a_star, sigma, w, rng, count):
    """Mostly points near the trigger's window plus uniform background."""
    p = a_star.size
    near = count * 3 // 4
    amp = sigma * 10.0 ** rng.uniform(-3, 1.5, size=(near, 1)) / np.sum(np.abs(w))
    close = a_star + rng.uniform(-1, 1, size=(near, p)) * amp
    far = rng.uniform(0, 1, size=(count - near, p))
    return np.vstack([close, far])


def test_5_multi_neuron_window(criterion, desk_hosts):
    rng = np.random.default_rng(5)
    designs = []
    for h in desk_hosts:
        net = h.network
        for n in range(1, net.depth):
            w = None if n % 2 else rng.uniform(0.2, 2.0, size=net.widths[n - 1])
            designs.append((net, design_multi_neuron(net, n, h.trigger_pool[n % 5], w), h.trigger_pool[n % 5]))
    disagreements = inside = total = 0
    for net, design, trig in designs:
        _, snap = forward(net, trig)
        a_star = snap.activations[design.layer - 1]
        vectors = window_vectors(a_star, design.sigma, design.weights, rng, 100_000)
        fires = design.fires(vectors)
        w = [float(v) for v in design.weights]
        lo, hi = design.theta_tri1, design.theta_tri1 + design.sigma
        for row, f in zip(vectors.tolist(), fires.tolist()):
            s = sequential_dot(row, w)
            expected = lo <= s and -s >= -hi
            inside += expected
            disagreements += int(expected) != f
        total += len(vectors)
    ok = disagreements == 0 and inside > 0
    criterion(
        5, ok,
        f"{len(designs)} designs x 100000 vectors: {disagreements} disagreements, {inside} inside the window",
    )
    assert ok


def test_6_with_access_replay(criterion, toy_classification, desk_hosts):
    checks = failures = 0
    net, _ = toy_classification
    target = parse_bits("0000")
    xi = payload_with_access(net, 1, TRIGGER, target)
    for make in (design_single_neuron, design_multi_neuron):
        tn = insert(net, TrojanSpec(make(net, 1, TRIGGER), xi))
        checks += 1
        failures += tn(TRIGGER).tobytes() != forward(net, target)[0].tobytes()
    for h in desk_hosts:
        host = h.network
        for n in range(1, host.depth):
            for t_idx, trig in enumerate(h.trigger_pool):
                target = h.nontrigger_pool[t_idx]
                xi = payload_with_access(host, n, trig, target)
                for make in (design_single_neuron, design_multi_neuron):
                    tn = insert(host, TrojanSpec(make(host, n, trig), xi))
                    checks += 1
                    failures += tn(trig).tobytes() != forward(host, target)[0].tobytes()
    ok = failures == 0
    criterion(6, ok, f"{checks - failures}/{checks} composites bit-equal to the clean target output")
    assert ok


def independent_confidence(host, n, trig, z, label):
    xi, residual = split_difference(z, trigger_neural_inputs(host, n, trig))
    tn = insert(host, TrojanSpec(design_single_neuron(host, n, trig), xi, residual=residual))
    return float(tn(trig)[label])


def test_7_reverse_convergence(criterion, toy_classification, desk_hosts):
    cfg = ReverseConfig(alpha=0.1, tau=1e-3, max_iters=10000)
    rng = np.random.default_rng(7)
    runs = []
    net, _ = toy_classification
    runs.append(("toy", net, 1, TRIGGER, 0))
    for h in desk_hosts:
        host = h.network
        for trig in h.trigger_pool:
            clean = int(np.argmax(forward(host, trig)[0]))
            label = int(rng.choice([c for c in range(host.output_dim) if c != clean]))
            runs.append((h.name, host, host.depth - 1, trig, label))
    worst, most_iters, bad = 1.0, 0, []
    for name, host, n, trig, label in runs:
        res = reverse_neural_inputs(host, n, ClassificationGoal(label, 0.99), trigger_neural_inputs(host, n, trig), cfg)
        conf = independent_confidence(host, n, trig, res.z, label)
        worst = min(worst, conf)
        most_iters = max(most_iters, res.iterations)
        if not (res.converged and res.iterations <= 10000 and conf >= 0.989):
            bad.append(name)
    ok = not bad
    criterion(
        7, ok,
        f"{len(runs) - len(bad)}/{len(runs)} runs converged (max {most_iters} iterations), "
        f"lowest re-evaluated confidence {worst:.6f} (>= 0.989)",
    )
    # hidden layers for reference; reachability there depends on the host
    reached = total = 0
    for h in desk_hosts:
        host = h.network
        for n in range(1, host.depth - 1):
            trig = h.trigger_pool[0]
            clean = int(np.argmax(forward(host, trig)[0]))
            label = (clean + 1) % host.output_dim
            res = reverse_neural_inputs(
                host, n, ClassificationGoal(label, 0.99), trigger_neural_inputs(host, n, trig),
                ReverseConfig(alpha=0.1, tau=1e-3, max_iters=2000),
            )
            total += 1
            reached += res.converged
    criterion.note(7, f"hidden-layer reverse payloads reaching 0.99 within 2000 iterations: {reached}/{total} (not asserted)")
    assert ok


def test_8_gradient_finite_differences(criterion):
    rng = np.random.default_rng(8)
    h = 1e-5
    worst = 0.0
    failures = 0
    for _ in range(100):
        net = random_net(rng, n_layers=int(rng.integers(1, 5)), max_width=16)
        k = int(rng.integers(1, net.depth + 1))
        z = rng.normal(0, 1.0, size=net.layer(k).out_dim)
        index = int(rng.integers(net.output_dim))
        out = float(forward_from(net, k, z)[index])
        shift = 0.3 if net.output_head == REGRESSION else 0.2
        target = out + shift if (net.output_head == REGRESSION or out < 0.5) else out - shift
        loss = AbsoluteTargetLoss(target, index)
        g = gradient_wrt_neural_inputs(net, k, z, loss)
        fd = np.zeros_like(z)
        for j in range(z.size):
            up, down = z.copy(), z.copy()
            up[j] += h
            down[j] -= h
            fd[j] = (loss.value(forward_from(net, k, up)) - loss.value(forward_from(net, k, down))) / (2 * h)
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
        worst = max(worst, float(rel.max()))
        failures += bool(np.any(rel > 1e-4))
    ok = failures == 0
    criterion(8, ok, f"100 random nets: {failures} failing, worst relative error {worst:.2e} (<= 1e-4)")
    assert ok


def test_9_distance_metric(criterion):
    d = averaged_distance([1.0, 0.0], [[0.0, 1.0], [2.0, 1.0]])
    # hand arithmetic: (sqrt 2 + sqrt 2) / (2 * 2); 0.70710678 is that value cut to 8 decimals
    exact = (math.sqrt(2) + math.sqrt(2)) / (2 * 2)
    hand = abs(d - exact) <= 1e-9
    zero = averaged_distance([0.3, 0.7, 0.1], [[0.3, 0.7, 0.1]] * 5) == 0.0
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        n, m = int(rng.integers(1, 20)), int(rng.integers(1, 50))
        eta, pool = rng.uniform(0, 1, size=n), rng.uniform(0, 1, size=(m, n))
        c = float(rng.uniform(0, 10))
        base = averaged_distance(eta, pool)
        oracle = sum(math.sqrt(sum((a - b) ** 2 for a, b in zip(eta, row))) for row in pool) / (m * n)
        scaled = averaged_distance(c * eta, c * pool)
        worst = max(worst, abs(scaled - c * base) / max(c * base, 1e-300), abs(base - oracle) / oracle)
    linear = worst <= 1e-12
    ok = hand and zero and linear
    criterion(9, ok, f"D = {d:.10f} (|D - 0.70710678| = {abs(d - 0.70710678):.2e}); identical pool D = 0: {zero}; 100 scaling cases worst rel. error {worst:.1e}")
    assert ok


def test_10_clean_model_preservation(criterion, desk_hosts):
    preserved = dormant = True
    cells = 0
    for h in desk_hosts:
        host = h.network
        before = layers_bytes(host)
        host_text = dumps_model(host).rstrip()[:-1].rstrip()
        clean, _ = forward(host, h.nontrigger_pool)
        for n in range(1, host.depth):
            for trig in h.trigger_pool:
                for design in (design_single_neuron(host, n, trig), design_multi_neuron(host, n, trig, sigma=DESK_SIGMA)):
                    tn = insert(host, TrojanSpec(design, np.full(host.widths[n + 1], 2.5)))
                    # the trojaned file repeats the host file and appends the trojan block
                    preserved &= layers_bytes(tn.host) == before and dumps_model(tn).startswith(host_text)
                    dormant &= tn(h.nontrigger_pool).tobytes() == clean.tobytes()
                    cells += 1
        preserved &= layers_bytes(host) == before
    ok = bool(preserved and dormant)
    criterion(
        10, ok,
        f"{cells} insertions: original layers byte-identical {preserved}; "
        f"dormant composite bit-identical on 1000 inputs {dormant}",
    )
    assert ok
