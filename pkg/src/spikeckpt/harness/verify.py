"""Oracle battery: every strategy against Base and against the closed-form predictors."""

from __future__ import annotations

from dataclasses import dataclass

from ..engine import measure_m_others, run_training_step
from ..errors import ConfigError, DeterminismViolation
from ..memory import CostModel, others_slots, predict_memory, predict_time, predict_transfers, predicted_tally
from ..schedule import CheckpointPolicy, Strategy
from ..snn import NetworkConfig, SpikeRecord, Weights
from .config import AUTO, ExperimentConfig, PolicySpec
from .task import gen_task

MAX_VERIFY_T = 512

DEFAULT_SPECS = (
    PolicySpec(Strategy.BASE),
    PolicySpec(Strategy.STANDARD, AUTO),
    PolicySpec(Strategy.REMOTE, AUTO),
    PolicySpec(Strategy.HIERARCHICAL, AUTO, nb_local=1),
    PolicySpec(Strategy.DOUBLE, AUTO, remote_chunk_size=AUTO),
)


@dataclass
class Check:
    policy: str
    name: str
    passed: bool
    measured: object
    predicted: object
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        out = f"{tag} {self.policy} {self.name}: measured={self.measured} predicted={self.predicted}"
        return f"{out} ({self.detail})" if self.detail else out


def drop_one_spike(record: SpikeRecord) -> tuple[int, int] | None:
    """Remove the first cached event of the earliest non-empty slice; returns (t, layer) or None."""
    for t, sl in enumerate(record):
        for layer, ev in enumerate(sl):
            if len(ev):
                sl[layer] = ev[1:]
                return t, layer
    return None


def verify_policies(exp: ExperimentConfig) -> list[PolicySpec]:
    """The five default policies, with the configured policy replacing the default of its strategy."""
    specs = list(DEFAULT_SPECS)
    if exp.policy is not None:
        specs = [exp.policy if s.strategy is exp.policy.strategy else s for s in specs]
    return specs


def _eq(policy, name, measured, predicted, detail="") -> Check:
    return Check(policy, name, measured == predicted, measured, predicted, detail)


def run_verify(exp: ExperimentConfig, inject_fault: bool = False) -> list[Check]:
    cfg: NetworkConfig = exp.network_config()
    T = cfg.seq_len
    if T > MAX_VERIFY_T:
        raise ConfigError(f"config error at network.seq_len: verify is limited to T <= {MAX_VERIFY_T}, got {T}")
    costs: CostModel = exp.cost_model
    inputs, targets = gen_task(exp.task_seed(cfg), cfg, exp.task.poisson_rate)
    given = exp.targets_for(cfg)
    if given is not None:
        targets = given
    weights = Weights.init(cfg)
    policies = [s.resolve(cfg, exp.capacity_slots) for s in verify_policies(exp)]
    m_others = measure_m_others(cfg)
    checks = [_eq("-", "m_others", m_others, others_slots(cfg))]

    ref_loss, ref_grads, _ = run_training_step(weights, inputs, cfg, CheckpointPolicy.base(), costs, target_rates=targets)
    for policy in policies:
        name = str(policy)
        seen: dict[str, str] = {}

        def hook(record: SpikeRecord) -> None:
            if inject_fault and policy.strategy is not Strategy.BASE:
                hit = drop_one_spike(record)
                seen["fault"] = "none" if hit is None else f"t={hit[0]} layer={hit[1]}"
            seen["digest"] = record.digest()
            seen["record"] = record

        try:
            loss, grads, ledger = run_training_step(
                weights, inputs, cfg, policy, costs, target_rates=targets, spike_fault=hook
            )
        except DeterminismViolation as exc:
            checks.append(Check(name, "determinism", False, f"violation at t={exc.timestep}", "bit-identical replay",
                                f"dropped cached spike at {seen.get('fault')}"))
            continue
        if inject_fault and policy.strategy is not Strategy.BASE:
            checks.append(Check(name, "determinism", False, "fault not detected", "violation",
                                f"dropped cached spike at {seen.get('fault')}"))
        diff = grads.first_difference(ref_grads)
        checks.append(Check(name, "grad_bits", diff is None,
                            "identical" if diff is None else f"{diff[0]}{list(diff[1])}", "identical"))
        checks.append(_eq(name, "loss_bits", float(loss).hex(), float(ref_loss).hex()))
        checks.append(_eq(name, "peak_local_slots", ledger.peak_local_slots, predict_memory(policy, cfg, m_others)))
        checks.append(_eq(name, "n_transfers", ledger.n_transfers, predict_transfers(policy, T)))
        checks.append(_eq(name, "n_syncs", ledger.n_syncs, predict_transfers(policy, T)))
        checks.append(_eq(name, "modeled_time", ledger.modeled_time, predict_time(policy, cfg, costs)))
        tally = predicted_tally(policy, T)
        ops = ledger.op_counters
        checks.append(_eq(name, "lif_steps", ops.lif_steps, tally["lif_steps"]))
        checks.append(_eq(name, "spike_gen_calls", ops.spike_gen_calls, T, "no thresholding during replay"))
        checks.append(_eq(name, "encode_calls", ops.encode_calls, T, "no encoding during replay"))
        checks.append(_eq(name, "spike_cache_digest", seen["record"].digest(), seen["digest"], "cache unchanged by backward"))
    return checks


def default_verify_config() -> dict:
    """A small instance on which every check holds."""
    return {
        "network": {"num_layers": 2, "neurons_per_layer": 8, "batch_size": 4, "seq_len": 64, "virtual_tiles": 2},
        "task": {"poisson_rate": 0.3},
    }
