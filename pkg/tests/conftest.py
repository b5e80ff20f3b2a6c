import numpy as np
import pytest
import torch

from wgpnn.graph import Quadruple

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_quads():
    # pair (0, 0): {1} at t=1, {1, 2} at t=3; pair (2, 1) at t=2
    return [
        Quadruple(0, 0, 1, 1),
        Quadruple(2, 1, 0, 2),
        Quadruple(0, 0, 1, 3),
        Quadruple(0, 0, 2, 3),
        Quadruple(1, 0, 2, 3),
    ]
