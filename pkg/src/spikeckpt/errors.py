"""Exception hierarchy shared by the simulator, the executor and the CLI."""

from __future__ import annotations


class SpikeCkptError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SpikeCkptError, ValueError):
    """Invalid network, policy or experiment configuration."""


class NumericOverflowError(SpikeCkptError, ArithmeticError):
    def __init__(self, layer: int, timestep: int):
        super().__init__(f"non-finite state in layer {layer} at timestep {timestep}")
        self.layer = layer
        self.timestep = timestep


class PlanRejected(ConfigError):
    """A checkpoint policy violates one of its invariants for the given sequence length."""


class ScheduleError(SpikeCkptError, RuntimeError):
    """The executor asked for a state the schedule never made resident."""


class DeterminismViolation(SpikeCkptError, RuntimeError):
    def __init__(self, timestep: int, detail: str = ""):
        msg = f"replayed state at timestep {timestep} differs from the stored checkpoint"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.timestep = timestep


class LedgerCorruption(SpikeCkptError, RuntimeError):
    """Double free, unknown handle or negative balance in the memory ledger."""


class SimulatedOOM(SpikeCkptError, MemoryError):
    def __init__(self, requested: int, peak: int, capacity: int, timestep: int | None):
        where = "before the first step" if timestep is None else f"at timestep {timestep}"
        super().__init__(
            f"local capacity of {capacity} slots exceeded {where}: "
            f"{requested} slots requested, peak would be {peak}"
        )
        self.requested = requested
        self.peak = peak
        self.capacity = capacity
        self.timestep = timestep


class NoFeasiblePolicy(SpikeCkptError, ValueError):
    def __init__(self, budget: float, minimal_memory: float):
        super().__init__(
            f"no policy fits a budget of {budget} slots; the minimum achievable is {minimal_memory}"
        )
        self.budget = budget
        self.minimal_memory = minimal_memory
