"""Experiment configuration: strict JSON parsing and validation.

Every key is checked before anything runs. Unknown keys, duplicate keys,
wrong types and missing required fields all raise :class:`ConfigError`
with the dotted path of the offending field (or the line and column of a
JSON syntax error).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import ConfigError
from ..memory import CostModel, others_slots
from ..planner import best_inner_chunk, optimal_chunk_remote, optimal_chunk_standard, optimal_double
from ..schedule import CheckpointPolicy, Strategy
from ..snn import NetworkConfig

AUTO = "auto"

_NETWORK_REQUIRED = ("num_layers", "neurons_per_layer", "batch_size", "seq_len")
_NETWORK_INT = _NETWORK_REQUIRED + ("n_inputs", "virtual_tiles", "seed")
_NETWORK_FLOAT = ("decay_v", "decay_i", "threshold", "surrogate_beta")
_COST_FIELDS = tuple(f.name for f in dataclasses.fields(CostModel))
_TOP_LEVEL = ("network", "policy", "cost_model", "task", "repetitions", "capacity_slots", "output_path")


def _fail(path: str, msg: str) -> ConfigError:
    return ConfigError(f"config error at {path}: {msg}")


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _object(value, path: str, allowed, required=()) -> dict:
    if not isinstance(value, dict):
        raise _fail(path, f"expected an object, got {type(value).__name__}")
    for key in value:
        if key not in allowed:
            raise _fail(f"{path}.{key}", f"unknown key (allowed: {', '.join(allowed)})")
    for key in required:
        if key not in value:
            raise _fail(f"{path}.{key}", "missing required field")
    return value


def _int(value, path: str, minimum: int = 1) -> int:
    if not _is_int(value):
        raise _fail(path, f"expected an integer, got {value!r}")
    if value < minimum:
        raise _fail(path, f"must be >= {minimum}, got {value}")
    return value


@dataclass(frozen=True)
class PolicySpec:
    """A checkpoint policy whose hyperparameters may be left to the planner rules (``"auto"``)."""

    strategy: Strategy
    chunk_size: int | str | None = None
    nb_local: int | None = None
    remote_chunk_size: int | str | None = None

    def with_(self, **changes) -> "PolicySpec":
        return dataclasses.replace(self, **changes)

    def resolve(self, cfg: NetworkConfig, capacity_slots: int | None = None) -> CheckpointPolicy:
        """Concrete policy for ``cfg.seq_len``; raises PlanRejected if the values do not fit."""
        T = cfg.seq_len
        s = self.strategy
        if s is Strategy.BASE:
            policy = CheckpointPolicy.base()
        elif s is Strategy.DOUBLE:
            c, rc = self.chunk_size, self.remote_chunk_size
            if rc == AUTO:
                if c not in (AUTO, None):
                    raise ConfigError("double: an explicit chunk_size needs an explicit remote_chunk_size")
                policy = optimal_double(T)
            else:
                policy = CheckpointPolicy.double(best_inner_chunk(rc) if c == AUTO else c, rc)
        else:
            c = self.chunk_size
            if c == AUTO:
                if s is Strategy.REMOTE and capacity_slots is not None:
                    c = optimal_chunk_remote(T, capacity_slots, cfg.state_slots, others_slots(cfg))
                else:
                    c = optimal_chunk_standard(T)
            policy = CheckpointPolicy(s, c, nb_local=self.nb_local if s is Strategy.HIERARCHICAL else None)
        policy.validate(T)
        return policy


def parse_policy(raw, path: str = "policy") -> PolicySpec:
    raw = _object(raw, path, ("strategy", "chunk_size", "nb_local", "remote_chunk_size"), ("strategy",))
    if not isinstance(raw["strategy"], str):
        raise _fail(f"{path}.strategy", f"expected a string, got {raw['strategy']!r}")
    try:
        s = Strategy.parse(raw["strategy"])
    except ConfigError as exc:
        raise _fail(f"{path}.strategy", str(exc)) from None
    allowed = {
        Strategy.BASE: (),
        Strategy.STANDARD: ("chunk_size",),
        Strategy.REMOTE: ("chunk_size",),
        Strategy.HIERARCHICAL: ("chunk_size", "nb_local"),
        Strategy.DOUBLE: ("chunk_size", "remote_chunk_size"),
    }[s]
    for key in ("chunk_size", "nb_local", "remote_chunk_size"):
        if key in raw and key not in allowed:
            raise _fail(f"{path}.{key}", f"not a hyperparameter of the {s.value} strategy")
    values: dict[str, Any] = {}
    for key in allowed:
        if key == "nb_local":
            if key not in raw:
                raise _fail(f"{path}.nb_local", "missing required field")
            values[key] = _int(raw[key], f"{path}.nb_local")
            continue
        v = raw.get(key, AUTO)
        values[key] = v if v == AUTO else _int(v, f"{path}.{key}")
    return PolicySpec(s, **values)


@dataclass(frozen=True)
class TaskSpec:
    poisson_rate: float
    target_rates: tuple[float, ...] | None = None
    seed: int | None = None


@dataclass
class ExperimentConfig:
    network: dict  # raw validated fields; NetworkConfig is built per sweep point
    policy: PolicySpec | None
    task: TaskSpec
    cost_model: CostModel = field(default_factory=CostModel)
    repetitions: int = 1
    capacity_slots: int | None = None
    output_path: str | None = None

    def network_config(self, **overrides) -> NetworkConfig:
        fields = {**self.network, **overrides}
        return NetworkConfig(**fields)

    def task_seed(self, cfg: NetworkConfig) -> int:
        return cfg.seed if self.task.seed is None else self.task.seed

    def targets_for(self, cfg: NetworkConfig) -> np.ndarray | None:
        if self.task.target_rates is None:
            return None
        if len(self.task.target_rates) != cfg.neurons_per_layer:
            raise _fail("task.target_rates", f"needs {cfg.neurons_per_layer} entries, got {len(self.task.target_rates)}")
        return np.asarray(self.task.target_rates, dtype=np.float64)


def _parse_network(raw) -> dict:
    raw = _object(raw, "network", _NETWORK_INT + _NETWORK_FLOAT + ("dtype",), _NETWORK_REQUIRED)
    out = {}
    for key, value in raw.items():
        path = f"network.{key}"
        if key in _NETWORK_INT:
            out[key] = _int(value, path, minimum=0 if key == "seed" else 1)
        elif key in _NETWORK_FLOAT:
            if not _is_num(value):
                raise _fail(path, f"expected a number, got {value!r}")
            out[key] = float(value)
        else:
            if not isinstance(value, str):
                raise _fail(path, f"expected a string, got {value!r}")
            out[key] = value
    try:
        NetworkConfig(**out)
    except ConfigError as exc:
        raise _fail("network", str(exc)) from None
    return out


def _parse_task(raw) -> TaskSpec:
    raw = _object(raw, "task", ("poisson_rate", "target_rates", "seed"), ("poisson_rate",))
    rate = raw["poisson_rate"]
    if not _is_num(rate) or not 0.0 <= rate <= 1.0:
        raise _fail("task.poisson_rate", f"expected a number in [0, 1], got {rate!r}")
    targets = raw.get("target_rates")
    if targets is not None:
        if not isinstance(targets, list) or not targets:
            raise _fail("task.target_rates", "expected a non-empty list of numbers")
        for i, x in enumerate(targets):
            if not _is_num(x) or not 0.0 <= x <= 1.0:
                raise _fail(f"task.target_rates[{i}]", f"expected a rate in [0, 1], got {x!r}")
        targets = tuple(float(x) for x in targets)
    seed = raw.get("seed")
    if seed is not None:
        seed = _int(seed, "task.seed", minimum=0)
    return TaskSpec(float(rate), targets, seed)


def _parse_costs(raw) -> CostModel:
    raw = _object(raw, "cost_model", _COST_FIELDS)
    for key, value in raw.items():
        if not (_is_num(value) or (key == "t_c_override" and value is None)):
            raise _fail(f"cost_model.{key}", f"expected a number, got {value!r}")
    try:
        return CostModel(**raw)
    except ConfigError as exc:
        raise _fail("cost_model", str(exc)) from None


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ConfigError(f"config error: duplicate key {key!r}")
        out[key] = value
    return out


def parse_config(text: str, *, require_policy: bool = True, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    raw = _object(raw, "config", _TOP_LEVEL, ("network", "task"))
    policy = None
    if "policy" in raw:
        policy = parse_policy(raw["policy"])
    elif require_policy:
        raise _fail("config.policy", "missing required field")
    cfg = ExperimentConfig(
        network=_parse_network(raw["network"]),
        policy=policy,
        task=_parse_task(raw["task"]),
    )
    if "cost_model" in raw:
        cfg.cost_model = _parse_costs(raw["cost_model"])
    if "repetitions" in raw:
        cfg.repetitions = _int(raw["repetitions"], "config.repetitions")
    if raw.get("capacity_slots") is not None:
        cfg.capacity_slots = _int(raw["capacity_slots"], "config.capacity_slots")
    if raw.get("output_path") is not None:
        if not isinstance(raw["output_path"], str):
            raise _fail("config.output_path", "expected a string")
        cfg.output_path = raw["output_path"]
    # fail now on anything that only shows up once the network is built
    net = cfg.network_config()
    cfg.targets_for(net)
    if policy is not None:
        policy.resolve(net, cfg.capacity_slots)
    return cfg


def load_config(path: str | Path, *, require_policy: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, require_policy=require_policy, source=str(path))
