import numpy as np
import pytest

from potrojan.nn import CLASSIFICATION, REGRESSION
from potrojan.zoo import SyntheticModelSpec, build_synthetic, train_toy


@pytest.fixture(scope="session")
def toy_regression():
    result, data = train_toy(REGRESSION, seed=0)
    assert result.converged
    return result.network, data


@pytest.fixture(scope="session")
def toy_classification():
    result, data = train_toy(CLASSIFICATION, seed=0)
    assert result.converged
    return result.network, data


@pytest.fixture(scope="session")
def small_host():
    spec = SyntheticModelSpec(layer_widths=(6, 10, 8, 5), seed=3, n_nontrigger=200, init_scale=2.0)
    return build_synthetic(spec)


def random_net(rng, n_layers=None, max_width=16, head=None):
    """Random small sigmoid net with nonzero biases."""
    from potrojan.nn import DenseLayer, Identity, Network, Sigmoid, Softmax

    n_layers = n_layers or int(rng.integers(1, 5))
    widths = [int(w) for w in rng.integers(1, max_width + 1, size=n_layers + 1)]
    head = head or (CLASSIFICATION if rng.random() < 0.5 else REGRESSION)
    if head == CLASSIFICATION:
        widths[-1] = max(widths[-1], 2)
    layers = []
    for k in range(1, len(widths)):
        last = k == len(widths) - 1
        act = (Softmax() if head == CLASSIFICATION else Identity()) if last else Sigmoid()
        w = rng.normal(0, 1.0, size=(widths[k], widths[k - 1]))
        b = rng.normal(0, 0.5, size=widths[k])
        layers.append(DenseLayer(w, b, act))
    return Network(tuple(layers), head)


@pytest.fixture
def make_net():
    return random_net


def as_rng(seed):
    return np.random.default_rng(seed)


_CRITERIA = {}


class _Verdicts:
    def __init__(self, capsys):
        self.capsys = capsys

    def __call__(self, number, passed, detail):
        """Record and print one verdict line for criterion ``number``."""
        line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = [line]
        with self.capsys.disabled():
            print("\n" + line)
        return passed

    def note(self, number, text):
        """Informational line under a verdict; never affects the outcome."""
        line = f"      note: {text}"
        _CRITERIA.setdefault(number, []).append(line)
        with self.capsys.disabled():
            print(line)


@pytest.fixture
def criterion(capsys):
    return _Verdicts(capsys)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            for line in _CRITERIA[number]:
                terminalreporter.write_line(line)
