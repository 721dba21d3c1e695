"""Row producers for ``run`` and ``sweep`` plus the CSV writer they share."""

from __future__ import annotations

import csv
import io
import itertools
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, Sequence

from ..engine import measure_m_others, run_training_step
from ..errors import SimulatedOOM, SpikeCkptError
from ..memory import LEDGER_COLUMNS, predict_memory, predict_time, predict_transfers
from ..schedule import CheckpointPolicy
from ..snn import NetworkConfig, Weights
from .config import ExperimentConfig, PolicySpec
from .task import gen_task

RUN_COLUMNS = LEDGER_COLUMNS + ("repetition", "loss", "grad_checksum", "oom")
SWEEP_COLUMNS = (
    ("point", "axis_values")
    + RUN_COLUMNS
    + ("predicted_peak_local_slots", "predicted_n_transfers", "predicted_modeled_time", "failed", "error")
)
# maps a sweep axis to the section of the config it overrides
SWEEP_AXES = {
    "T": ("network", "seq_len"),
    "neurons_per_layer": ("network", "neurons_per_layer"),
    "chunk_size": ("policy", "chunk_size"),
    "nb_local": ("policy", "nb_local"),
    "remote_chunk_size": ("policy", "remote_chunk_size"),
}


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(columns: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def write_atomic(path: str | Path, text: str) -> None:
    """Write ``text`` so that readers only ever see the complete file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _policy_cells(policy: CheckpointPolicy, T: int) -> dict:
    row = {c: "" for c in LEDGER_COLUMNS}
    row.update(strategy=policy.strategy.value, T=T, chunk_size=policy.chunk_size,
               nb_local=policy.nb_local, remote_chunk_size=policy.remote_chunk_size)
    return row


def run_once(
    exp: ExperimentConfig,
    cfg: NetworkConfig,
    policy: CheckpointPolicy,
    repetition: int,
    capacity_slots: int | None,
) -> dict:
    """One training step as a CSV row; a simulated OOM becomes a row with ``oom`` set."""
    inputs, targets = gen_task(exp.task_seed(cfg) + repetition, cfg, exp.task.poisson_rate)
    given = exp.targets_for(cfg)
    if given is not None:
        targets = given
    weights = Weights.init(cfg)
    try:
        loss, grads, ledger = run_training_step(
            weights, inputs, cfg, policy, exp.cost_model,
            target_rates=targets, capacity_slots=capacity_slots,
        )
    except SimulatedOOM as exc:
        row = _policy_cells(policy, cfg.seq_len)
        row.update(peak_local_slots=exc.peak, repetition=repetition, oom=True)
        return row
    row = ledger.as_row(policy, cfg.seq_len)
    row.update(repetition=repetition, loss=loss, grad_checksum=grads.checksum(), oom=False)
    return row


def run_rows(exp: ExperimentConfig, capacity_slots: int | None = None) -> list[dict]:
    cfg = exp.network_config()
    policy = exp.policy.resolve(cfg, capacity_slots)
    return [run_once(exp, cfg, policy, rep, capacity_slots) for rep in range(exp.repetitions)]


def parse_axis(text: str) -> tuple[str, list]:
    """``name=v1,v2,...`` into the axis name and its integer values (``auto`` allowed for policy axes)."""
    name, sep, values = text.partition("=")
    name = name.strip()
    if not sep or name not in SWEEP_AXES:
        raise ValueError(f"bad axis {text!r}; expected name=v1,v2,... with name in {', '.join(SWEEP_AXES)}")
    out = []
    for v in values.split(","):
        v = v.strip()
        if v == "auto" and SWEEP_AXES[name][0] == "policy":
            out.append(v)
            continue
        try:
            out.append(int(v))
        except ValueError:
            raise ValueError(f"axis {name}: {v!r} is not an integer") from None
    if not out:
        raise ValueError(f"axis {name} has no values")
    return name, out


def sweep_grid(axes: Sequence[tuple[str, list]]) -> list[dict]:
    names = [n for n, _ in axes]
    if len(set(names)) != len(names):
        raise ValueError("each axis may appear once")
    return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in axes))]


def _sweep_point(args) -> list[dict]:
    index, point, exp, capacity_slots = args
    label = ";".join(f"{k}={v}" for k, v in point.items())
    head = {"point": index, "axis_values": label}
    try:
        net = {SWEEP_AXES[k][1]: v for k, v in point.items() if SWEEP_AXES[k][0] == "network"}
        pol = {SWEEP_AXES[k][1]: v for k, v in point.items() if SWEEP_AXES[k][0] == "policy"}
        cfg = exp.network_config(**net)
        spec: PolicySpec = exp.policy.with_(**pol)
        policy = spec.resolve(cfg, capacity_slots)
        m_others = measure_m_others(cfg)
        predicted = {
            "predicted_peak_local_slots": predict_memory(policy, cfg, m_others),
            "predicted_n_transfers": predict_transfers(policy, cfg.seq_len),
            "predicted_modeled_time": predict_time(policy, cfg, exp.cost_model),
        }
        rows = []
        for rep in range(exp.repetitions):
            row = run_once(exp, cfg, policy, rep, capacity_slots)
            rows.append({**head, **row, **predicted, "failed": bool(row["oom"]), "error": "simulated OOM" if row["oom"] else ""})
        return rows
    except (SpikeCkptError, ValueError, TypeError) as exc:
        return [{**head, "failed": True, "error": f"{type(exc).__name__}: {exc}"}]


def sweep_rows(
    exp: ExperimentConfig,
    axes: Sequence[tuple[str, list]],
    capacity_slots: int | None = None,
    jobs: int = 1,
) -> list[dict]:
    """Cross product of the axes; rows come back in grid order whatever the worker count."""
    grid = sweep_grid(axes)
    tasks = [(i, p, exp, capacity_slots) for i, p in enumerate(grid)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_sweep_point, tasks))
    else:
        chunks = [_sweep_point(t) for t in tasks]
    return [row for chunk in chunks for row in chunk]
