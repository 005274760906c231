"""Neuron-level trojans for dense feedforward networks.

Insert dormant trigger neurons into a trained network without touching its
parameters, derive payload weights that force a chosen output, and measure
how often the trojan fires on its trigger and on everything else.
"""

__version__ = "0.1.0"

from .nn import (  # noqa: E402
    ActivationSnapshot,
    DenseLayer,
    Network,
    TrainConfig,
    forward,
    forward_from,
    gradient_wrt_neural_inputs,
    train,
)
from .trojan import (  # noqa: E402
    MultiNeuronTrigger,
    SingleNeuronTrigger,
    TrojanedNetwork,
    TrojanSpec,
    design_multi_neuron,
    design_single_neuron,
    insert,
)

__all__ = [
    "ActivationSnapshot",
    "DenseLayer",
    "MultiNeuronTrigger",
    "Network",
    "SingleNeuronTrigger",
    "TrainConfig",
    "TrojanSpec",
    "TrojanedNetwork",
    "design_multi_neuron",
    "design_single_neuron",
    "forward",
    "forward_from",
    "gradient_wrt_neural_inputs",
    "insert",
    "train",
]
