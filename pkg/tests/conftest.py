import numpy as np
import pytest

from spikeckpt import NetworkConfig, Weights
from spikeckpt.harness.task import gen_task


@pytest.fixture
def tiny():
    return NetworkConfig(num_layers=2, neurons_per_layer=8, batch_size=4, seq_len=32, virtual_tiles=2)


def make_instance(cfg, rate=0.3, seed=None):
    seed = cfg.seed if seed is None else seed
    inputs, targets = gen_task(seed, cfg, rate)
    return Weights.init(cfg), inputs, targets


def bits_equal(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and (a.view(f"u{a.itemsize}") == b.view(f"u{b.itemsize}")).all()
