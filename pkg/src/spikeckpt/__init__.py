"""Memory-efficient BPTT for spiking networks: checkpoint schedules on a simulated two-tier device."""

from .engine import measure_m_others, recompute_chunk, run_training_step
from .errors import (
    ConfigError,
    DeterminismViolation,
    LedgerCorruption,
    NoFeasiblePolicy,
    NumericOverflowError,
    PlanRejected,
    ScheduleError,
    SimulatedOOM,
    SpikeCkptError,
)
from .memory import LEDGER_COLUMNS, CostModel, MemoryLedger, predict_memory, predict_time, predict_transfers
from .planner import (
    ParetoPoint,
    enumerate_pareto,
    knee,
    optimal_chunk_remote,
    optimal_chunk_standard,
    optimal_double,
)
from .schedule import CheckpointPolicy, Schedule, Strategy, plan
from .snn import (
    Gradients,
    NetworkConfig,
    NetworkState,
    SpikeCountLoss,
    SpikeRecord,
    Weights,
    bptt,
    forward_sequence,
    lif_step,
    spike_generate,
)

__version__ = "0.1.0"
