"""Synthetic Poisson task and a plain gradient-descent loop."""

from __future__ import annotations

import numpy as np

from ..engine import run_training_step
from ..errors import ConfigError
from ..memory import CostModel
from ..schedule import CheckpointPolicy
from ..snn import NetworkConfig, SpikeRecord, Weights, dense_to_events

TARGET_RANGE = (0.05, 0.3)


def gen_task(seed: int, cfg: NetworkConfig, poisson_rate: float) -> tuple[SpikeRecord, np.ndarray]:
    """Independent Bernoulli(rate) input events per (t, batch, input neuron), plus target rates.

    Targets are uniform in ``TARGET_RANGE``, one per output neuron, drawn from
    the same seeded generator after the inputs.
    """
    if not 0.0 <= poisson_rate <= 1.0:
        raise ConfigError(f"poisson_rate must lie in [0, 1], got {poisson_rate!r}")
    rng = np.random.default_rng(seed)
    draws = rng.random((cfg.seq_len, cfg.batch_size, cfg.n_inputs))
    inputs = SpikeRecord(1, [[dense_to_events(mask)] for mask in draws < poisson_rate])
    targets = rng.uniform(*TARGET_RANGE, size=cfg.neurons_per_layer)
    return inputs, targets


def train(
    weights: Weights,
    inputs: SpikeRecord,
    cfg: NetworkConfig,
    policy: CheckpointPolicy,
    target_rates,
    steps: int = 50,
    lr: float = 1e-2,
    cost_model: CostModel | None = None,
) -> tuple[list[float], Weights, list[str]]:
    """Full-batch gradient descent; returns per-step losses, final weights and gradient checksums."""
    w = weights.copy()
    step = cfg.np_dtype.type(lr)
    losses, checksums = [], []
    for _ in range(steps):
        loss, grads, _ = run_training_step(w, inputs, cfg, policy, cost_model, target_rates=target_rates)
        losses.append(loss)
        checksums.append(grads.checksum())
        for (_, p), (_, g) in zip(w.named(), grads.named()):
            p -= step * g
    return losses, w, checksums
