"""Schedule executor: forward with checkpointing, backward with exact recomputation.

Local memory is modelled the way a statically allocated accelerator program
lays it out. Every checkpointing strategy owns a chunk buffer of
``chunk_size`` states for the whole step; it is the forward working storage
and the landing area of every replay. Checkpoints, fetched batches and (for
Base) the stored trajectory are charged state by state as they come and go.
Non-checkpointable tensors are charged once up front (see
:func:`spikeckpt.memory.others_slots`); the spike cache is reported
separately as ``spike_cache_slots``.
"""

from __future__ import annotations

from typing import Callable, Collection

import numpy as np

from .errors import DeterminismViolation, ScheduleError
from .memory import CostModel, MemoryLedger, others_slots
from .schedule import CheckpointPolicy, Schedule, Strategy, plan
from .snn import (
    Adjoint,
    Gradients,
    Loss,
    NetworkConfig,
    NetworkState,
    OpCounters,
    SpikeCountLoss,
    SpikeRecord,
    Weights,
    _own_spikes,
    backward_chunk,
    forward_sequence,
    lif_step,
)


def recompute_chunk(
    source: NetworkState,
    spikes: SpikeRecord,
    inputs: SpikeRecord,
    t0: int,
    t1: int,
    weights: Weights,
    cfg: NetworkConfig,
    *,
    keep: Collection[int] | None = None,
    expected: dict[int, str] | None = None,
    counters: OpCounters | None = None,
) -> dict[int, NetworkState]:
    """Replay steps ``[t0, t1)`` from ``source`` (the state at ``t0``).

    Firing decisions come from the spike cache; no thresholding or encoding is
    performed. Returns the states ``S[t0+1] .. S[t1]``, or only those listed in
    ``keep``. Any replayed state with an entry in ``expected`` (timestep to
    digest) is cross-checked against it.
    """
    out: dict[int, NetworkState] = {}
    state = source
    for t in range(t0, t1):
        state = lif_step(state, inputs[t][0], _own_spikes(spikes, t, cfg.num_layers), weights, cfg, t, counters)
        n = t + 1
        if expected is not None and n in expected and state.digest() != expected[n]:
            raise DeterminismViolation(n, "spike cache or replay source was altered")
        if keep is None or n in keep:
            out[n] = state
    return out


class _Resident:
    """Checkpoints currently held in local memory, with their ledger handles."""

    def __init__(self, ledger: MemoryLedger, slots: int):
        self.ledger = ledger
        self.slots = slots
        self.states: dict[int, NetworkState] = {}
        self.handles: dict[int, int] = {}

    def put(self, t: int, state: NetworkState, tag: str) -> None:
        if t in self.states:
            raise ScheduleError(f"state {t} stored twice")
        self.handles[t] = self.ledger.alloc(self.slots, tag)
        self.states[t] = state

    def pop(self, t: int) -> NetworkState:
        try:
            state = self.states.pop(t)
        except KeyError:
            raise ScheduleError(f"checkpoint {t} is not resident in local memory") from None
        self.ledger.free(self.handles.pop(t))
        return state

    def __contains__(self, t: int) -> bool:
        return t in self.states

    def release(self) -> None:
        for t in list(self.states):
            self.pop(t)


class _Recorder:
    """Forward-pass storage policy: decides what each produced state turns into."""

    def __init__(self, schedule: Schedule, cfg: NetworkConfig, ledger: MemoryLedger):
        self.schedule = schedule
        self.policy = schedule.policy
        self.cfg = cfg
        self.ledger = ledger
        self.T = schedule.T
        self.m_s = cfg.state_slots
        self.local = _Resident(ledger, self.m_s)
        self.remote: dict[int, NetworkState] = {}
        self.digests: dict[int, str] = {}
        self.chunk_buffer: int | None = None
        self.ckpt_times = set(schedule.checkpoint_times())
        self.batch_end: dict[int, list[int]] = {b[-1]: b for b in schedule.batches}

    def begin(self, initial: NetworkState) -> None:
        if self.policy.strategy is not Strategy.BASE:
            self.chunk_buffer = self.ledger.alloc(self.m_s * self.policy.chunk_size, "chunk buffer")
            self._checkpoint(0, initial)

    def offer(self, t: int, state: NetworkState) -> None:
        self.ledger.timestep = t
        if self.policy.strategy is Strategy.BASE:
            self.local.put(t, state, "trajectory")
        elif t in self.ckpt_times:
            self._checkpoint(t, state)

    def _checkpoint(self, t: int, state: NetworkState) -> None:
        self.digests[t] = state.digest()
        s = self.policy.strategy
        if s is Strategy.STANDARD:
            self.local.put(t, state, "checkpoint")
        elif s in (Strategy.REMOTE, Strategy.DOUBLE):
            self.remote[t] = state
            self.ledger.communicate(1, self.m_s, "out")
        elif s is Strategy.HIERARCHICAL:
            self.local.put(t, state, "checkpoint batch")
            batch = self.batch_end.get(t)
            if batch is not None:
                for tb in batch:
                    self.remote[tb] = self.local.pop(tb)
                self.ledger.communicate(len(batch), self.m_s, "out")

    def release(self) -> None:
        self.local.release()
        if self.chunk_buffer is not None:
            self.ledger.free(self.chunk_buffer)
            self.chunk_buffer = None


def backward_with_schedule(
    recorder: _Recorder,
    spikes: SpikeRecord,
    weights: Weights,
    cfg: NetworkConfig,
    loss: Loss,
    inputs: SpikeRecord,
) -> Gradients:
    """Walk the schedule's backward chunks in reverse time, rematerialising states as needed."""
    sched = recorder.schedule
    ledger = recorder.ledger
    counters = ledger.op_counters
    local = recorder.local
    m_s = recorder.m_s
    grads = Gradients.zeros(cfg)
    carry = Adjoint.zeros(cfg)
    s = sched.policy.strategy

    def backward(states: dict[int, NetworkState], t0: int, t1: int) -> None:
        nonlocal carry
        ledger.timestep = t0
        _, carry = backward_chunk(
            states, spikes, weights, cfg, carry,
            inputs=inputs, t0=t0, t1=t1, loss=loss, grads=grads, counters=counters,
        )

    def replay(src: NetworkState, t0: int, t1: int, keep=None) -> dict[int, NetworkState]:
        ledger.timestep = t0
        return recompute_chunk(
            src, spikes, inputs, t0, t1, weights, cfg,
            keep=keep, expected=recorder.digests, counters=counters,
        )

    if s is Strategy.BASE:
        backward(local.states, 0, sched.T)
        for t in sorted(local.states, reverse=True):
            local.pop(t)
        return grads

    if s is Strategy.DOUBLE:
        c = sched.policy.chunk_size
        for r0, r1 in sched.remote_chunks:
            ledger.timestep = r0
            local.put(r0, recorder.remote[r0], "fetched remote checkpoint")
            ledger.communicate(1, m_s, "in")
            strided = set(range(r0 + c, r1, c))
            for t, st in replay(local.states[r0], r0, r1, keep=strided).items():
                recorder.digests[t] = st.digest()
                local.put(t, st, "local checkpoint")
            for t0 in reversed(range(r0, r1, c)):
                states = replay(local.states[t0], t0, t0 + c)
                local.pop(t0)
                backward(states, t0, t0 + c)
        return grads

    batch_of = {t: b for b in sched.batches for t in b}
    for t0, t1 in sched.chunks:
        if s is Strategy.STANDARD:
            src = local.pop(t0)
        elif s is Strategy.REMOTE:
            ledger.timestep = t0
            local.put(t0, recorder.remote[t0], "fetched checkpoint")
            ledger.communicate(1, m_s, "in")
            src = local.pop(t0)
        else:
            if t0 not in local:
                batch = batch_of[t0]
                ledger.timestep = t0
                for tb in batch:
                    local.put(tb, recorder.remote[tb], "fetched batch")
                ledger.communicate(len(batch), m_s, "in")
            src = local.pop(t0)
        states = replay(src, t0, t1)
        backward(states, t0, t1)
    return grads


def run_training_step(
    weights: Weights,
    inputs: SpikeRecord,
    cfg: NetworkConfig,
    policy: CheckpointPolicy,
    cost_model: CostModel | None = None,
    *,
    target_rates=None,
    loss: Loss | None = None,
    capacity_slots: int | None = None,
    spike_fault: Callable[[SpikeRecord], None] | None = None,
) -> tuple[float, Gradients, MemoryLedger]:
    """One forward/backward pass of ``cfg.seq_len`` steps under ``policy``.

    The loss defaults to :class:`SpikeCountLoss` on ``target_rates``.
    ``spike_fault`` may mutate the spike cache between the passes (fault
    injection for the verifier). Raises :class:`SimulatedOOM` when
    ``capacity_slots`` is exceeded.
    """
    T = cfg.seq_len
    schedule = plan(policy, T)
    if loss is None:
        if target_rates is None:
            raise ValueError("either target_rates or loss is required")
        loss = SpikeCountLoss(target_rates)
    costs = cost_model or CostModel()
    ledger = MemoryLedger(cfg.virtual_tiles, capacity_slots, cfg.np_dtype.itemsize)
    others = ledger.alloc(others_slots(cfg), "others")
    recorder = _Recorder(schedule, cfg, ledger)
    _, spikes, value = forward_sequence(weights, inputs, cfg, recorder, loss, ledger.op_counters)
    ledger.spike_cache_slots = spikes.num_events()
    if spike_fault is not None:
        spike_fault(spikes)
    grads = backward_with_schedule(recorder, spikes, weights, cfg, loss, inputs)
    recorder.release()
    ledger.free(others)
    if ledger.live_allocations():
        raise ScheduleError(f"allocations leaked past the step: {ledger.live_allocations()}")
    ledger.finalize(costs, cfg.state_slots)
    return value, grads, ledger


def measure_m_others(cfg: NetworkConfig) -> int:
    """Base-strategy peak minus ``M_s * T`` on a one-step reference run of the same network."""
    ref = cfg.with_(seq_len=1)
    inputs = SpikeRecord(1, [[np.zeros((0, 2), np.int32)]])
    _, _, ledger = run_training_step(
        Weights.init(ref), inputs, ref, CheckpointPolicy.base(),
        target_rates=np.zeros(ref.neurons_per_layer),
    )
    return ledger.peak_local_slots - ref.state_slots
