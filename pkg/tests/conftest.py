import numpy as np
import pytest

from fdpoison.nn import DenseNet, Layer


def random_net(rng, widths, arch_id="T"):
    """Small ReLU MLP with random weights and biases."""
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        act = "linear" if i == len(widths) - 2 else "relu"
        layers.append(Layer(rng.normal(0, 0.8, (a, b)), rng.normal(0, 0.3, b), act))
    return DenseNet(arch_id, layers)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
