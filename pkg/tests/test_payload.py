import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from potrojan.nn import DenseLayer, Identity, Network, REGRESSION, forward, forward_from
from potrojan.payload import (
    REVERSE_PRESETS,
    ClassificationGoal,
    ConvergenceError,
    PayloadVector,
    PayloadError,
    RegressionGoal,
    ReverseConfig,
    confidence_margin,
    dominance_payload,
    exact_difference,
    flip_margin,
    payload_with_access,
    payload_without_access,
    reverse_neural_inputs,
    split_difference,
    trigger_neural_inputs,
)
from potrojan.trojan import TrojanSpec, design_multi_neuron, design_single_neuron, insert
from potrojan.zoo import parse_bits

TRIGGER = parse_bits("1111")


def test_difference_example():
    d = exact_difference([0.3, 0.2], [0.1, 0.4])
    assert d == pytest.approx([0.2, -0.2], abs=1e-15)
    assert np.array_equal(np.array([0.1, 0.4]) + d, [0.3, 0.2])


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6),
    st.integers(0, 2**32 - 1),
    st.floats(1e-8, 1e4),
)
def test_split_difference_adds_back_exactly(target, seed, scale):
    target = np.array(target)
    base = np.random.default_rng(seed).normal(0, scale, size=target.size)
    d, r = split_difference(target, base)
    assert np.array_equal((base + d) + r, target)


def test_residual_needed_for_fine_targets():
    # 1 + 2**-52 cannot absorb a difference that lands on 1e-20
    d = exact_difference([1e-20], [1.0 + 2**-52])
    assert (1.0 + 2**-52) + d[0] != 1e-20
    vec = PayloadVector(*split_difference([1e-20], [1.0 + 2**-52]))
    assert vec.residual is not None
    assert ((1.0 + 2**-52) + vec[0]) + vec.residual[0] == 1e-20
    assert (vec * 2).residual is None


def test_with_access_replays_target(toy_classification):
    net, data = toy_classification
    target = parse_bits("0000")
    xi = payload_with_access(net, 1, TRIGGER, target)
    for design in (design_single_neuron(net, 1, TRIGGER), design_multi_neuron(net, 1, TRIGGER)):
        tn = insert(net, TrojanSpec(design, xi))
        assert tn(TRIGGER).tobytes() == forward(net, target)[0].tobytes()


def test_with_access_self_target_is_zero(toy_classification):
    net, _ = toy_classification
    xi = payload_with_access(net, 1, TRIGGER, TRIGGER)
    assert not np.any(xi)
    tn = insert(net, TrojanSpec(design_single_neuron(net, 1, TRIGGER), xi))
    assert tn.fired(TRIGGER) == [1]
    assert tn(TRIGGER).tobytes() == forward(net, TRIGGER)[0].tobytes()


def test_with_access_requires_firing_trigger(toy_classification):
    net, _ = toy_classification
    design = design_single_neuron(net, 1, parse_bits("0001"))
    with pytest.raises(PayloadError):
        payload_with_access(net, 1, TRIGGER, parse_bits("0000"), trigger=design)


def test_hidden_layer_with_access(small_host):
    net = small_host.network
    trig, target = small_host.trigger_pool[0], small_host.nontrigger_pool[0]
    for n in range(1, net.depth):
        xi = payload_with_access(net, n, trig, target)
        tn = insert(net, TrojanSpec(design_single_neuron(net, n, trig), xi))
        assert tn(trig).tobytes() == forward(net, target)[0].tobytes()


# -- reverse engineering -----------------------------------------------------


def scalar_identity_net():
    return Network((DenseLayer([[1.0]], [0.0], Identity()), DenseLayer([[1.0]], [0.0], Identity())), REGRESSION)


def test_reverse_goal_already_met():
    net = scalar_identity_net()
    res = reverse_neural_inputs(net, 0, RegressionGoal(2.0), np.array([2.0]), ReverseConfig(tau=1e-3))
    assert res.converged and res.iterations == 0 and res.z.tolist() == [2.0]


@pytest.mark.parametrize("step", ["normalized", "raw"])
def test_reverse_scalar_identity(step):
    net = scalar_identity_net()
    cfg = ReverseConfig(alpha=0.5, tau=1e-3, step=step)
    res = reverse_neural_inputs(net, 0, RegressionGoal(5.0), np.array([0.0]), cfg)
    # by hand: gradient is -1 until z reaches 5, each step adds 0.5
    z, iters = 0.0, 0
    while abs(5.0 - z) > 1e-3:
        z += 0.5
        iters += 1
    assert res.converged
    assert res.z.tolist() == [z] and res.iterations == iters == 10


def test_reverse_shrinks_on_overshoot():
    net = scalar_identity_net()
    cfg = ReverseConfig(alpha=0.3, tau=1e-6, shrink=0.5)
    res = reverse_neural_inputs(net, 0, RegressionGoal(1.0), np.array([0.0]), cfg)
    assert res.converged and abs(res.z[0] - 1.0) <= 1e-6


def test_reverse_without_shrink_stalls():
    net = scalar_identity_net()
    cfg = ReverseConfig(alpha=0.3, tau=1e-6, shrink=1.0, max_iters=50)
    res = reverse_neural_inputs(net, 0, RegressionGoal(1.0), np.array([0.0]), cfg)
    assert not res.converged and res.iterations == 50
    assert res.loss == pytest.approx(0.1)


def test_reverse_toy_classification(toy_classification):
    net, _ = toy_classification
    z0 = trigger_neural_inputs(net, 1, TRIGGER)
    res = reverse_neural_inputs(net, 1, ClassificationGoal(0, 0.99), z0, ReverseConfig(tau=1e-3))
    assert res.converged and res.iterations <= 10000
    p = forward_from(net, 2, res.z)
    assert p[0] >= 0.989
    assert abs(0.99 - p[0]) <= 1e-3


def test_reverse_trace(tmp_path, toy_classification):
    net, _ = toy_classification
    z0 = trigger_neural_inputs(net, 1, TRIGGER)
    res = reverse_neural_inputs(net, 1, ClassificationGoal(0, 0.99), z0, ReverseConfig(tau=1e-3))
    path = tmp_path / "trace.csv"
    res.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,loss"
    assert len(lines) == res.iterations + 2
    assert float(lines[-1].split(",")[1]) == res.loss


def test_without_access_composite(toy_classification):
    net, data = toy_classification
    cfg = ReverseConfig(tau=1e-3)
    xi = payload_without_access(net, 1, TRIGGER, ClassificationGoal(0, 0.99), cfg)
    tn = insert(net, TrojanSpec(design_single_neuron(net, 1, TRIGGER), xi))
    out = tn(TRIGGER)
    assert abs(0.99 - out[0]) <= 1e-3
    clean, _ = forward(net, data.inputs[:15])
    assert tn(data.inputs[:15]).tobytes() == clean.tobytes()


def test_without_access_goal_met_gives_zero(toy_classification):
    net, _ = toy_classification
    p = forward(net, TRIGGER)[0][15]
    xi = payload_without_access(net, 1, TRIGGER, ClassificationGoal(15, float(p)), ReverseConfig(tau=1e-3))
    assert not np.any(xi)


def test_without_access_regression_toy(toy_regression):
    net, _ = toy_regression
    cfg = ReverseConfig(tau=1e-3)
    xi = payload_without_access(net, 1, TRIGGER, RegressionGoal(0.0), cfg)
    tn = insert(net, TrojanSpec(design_single_neuron(net, 1, TRIGGER), xi))
    assert abs(tn(TRIGGER)[0]) <= 1e-3


def test_without_access_raises_on_failure(toy_classification):
    net, _ = toy_classification
    cfg = ReverseConfig(tau=1e-3, max_iters=3)
    with pytest.raises(ConvergenceError) as exc:
        payload_without_access(net, 1, TRIGGER, ClassificationGoal(0, 0.99), cfg)
    assert exc.value.result.iterations == 3 and not exc.value.result.converged


def test_goal_validation(toy_classification, toy_regression):
    with pytest.raises(ValueError):
        ClassificationGoal(0, 1.0)
    net, _ = toy_classification
    z0 = trigger_neural_inputs(net, 1, TRIGGER)
    with pytest.raises(PayloadError):
        reverse_neural_inputs(net, 1, RegressionGoal(1.0), z0)
    with pytest.raises(PayloadError):
        reverse_neural_inputs(net, 1, ClassificationGoal(16), z0)


def test_presets():
    big = REVERSE_PRESETS["imagenet"]
    assert big.alpha == 1e9 and big.tau == 1e-4 and big.step == "raw"
    desk = REVERSE_PRESETS["desk"]
    assert (desk.alpha, desk.tau, desk.max_iters) == (0.1, 1e-4, 10000)


# -- dominance ---------------------------------------------------------------


def test_dominance_construction(toy_classification):
    net, _ = toy_classification
    xi = dominance_payload(net, 1, 0, magnitude=50)
    assert xi.tolist() == [50.0] + [0.0] * 15


def test_dominance_toy(toy_classification):
    net, data = toy_classification
    xi = dominance_payload(net, 1, 0, reference_inputs=data.inputs)
    tn = insert(net, TrojanSpec(design_single_neuron(net, 1, TRIGGER), xi))
    out = tn(data.inputs)
    clean, _ = forward(net, data.inputs)
    assert int(np.argmax(out[15])) == 0
    assert np.array_equal(np.argmax(out[:15], axis=1), np.argmax(clean[:15], axis=1))


def test_dominance_zero_magnitude(toy_classification):
    net, _ = toy_classification
    tn = insert(net, TrojanSpec(design_single_neuron(net, 1, TRIGGER), dominance_payload(net, 1, 0, magnitude=0.0)))
    assert tn(TRIGGER).tobytes() == forward(net, TRIGGER)[0].tobytes()


def test_dominance_needs_output_layer(small_host):
    with pytest.raises(PayloadError):
        dominance_payload(small_host.network, 1, 0, magnitude=5.0)


def test_dominance_sweep_monotone(toy_classification):
    net, _ = toy_classification
    design = design_single_neuron(net, 1, TRIGGER)
    z = trigger_neural_inputs(net, 1, TRIGGER)
    flips = []
    for m in np.linspace(0, 40, 401):
        tn = insert(net, TrojanSpec(design, dominance_payload(net, 1, 0, magnitude=m)))
        flips.append(int(np.argmax(tn(TRIGGER))) == 0)
    first = flips.index(True)
    assert all(flips[first:])
    # the flip point agrees with the logit margin
    step = 0.1
    assert (first - 1) * step <= flip_margin(z, 0) <= first * step + 1e-12


def test_confidence_margin(toy_classification):
    net, _ = toy_classification
    z = trigger_neural_inputs(net, 1, TRIGGER)
    m = confidence_margin(z, 0, 0.99)
    tn = insert(net, TrojanSpec(design_single_neuron(net, 1, TRIGGER), dominance_payload(net, 1, 0, magnitude=m)))
    assert tn(TRIGGER)[0] == pytest.approx(0.99, abs=1e-9)
