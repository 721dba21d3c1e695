"""Hyperparameter rules and Pareto enumeration over the analytic predictors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, NoFeasiblePolicy
from .memory import CostModel, predict_memory, predict_time, predict_transfers
from .schedule import CheckpointPolicy, Strategy, isqrt_candidates
from .snn import NetworkConfig


@dataclass(frozen=True)
class ParetoPoint:
    policy: CheckpointPolicy
    mem: int
    time: float

    def dominates(self, other: "ParetoPoint") -> bool:
        return self.mem <= other.mem and self.time <= other.time and (self.mem < other.mem or self.time < other.time)


def divisors(n: int) -> list[int]:
    small = [d for d in range(1, math.isqrt(n) + 1) if n % d == 0]
    return sorted(set(small + [n // d for d in small]))


def powers_of_two(upto: int) -> list[int]:
    return [1 << k for k in range(upto.bit_length()) if 1 << k <= upto]


def chunk_grid(T: int) -> list[int]:
    return sorted(set(powers_of_two(T)) | set(divisors(T)))


def optimal_chunk_standard(T: int) -> int:
    """The chunk next to sqrt(T) that minimises ``chunk + ceil(T / chunk)`` (smaller on ties)."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    return min(isqrt_candidates(T), key=lambda c: (c + -(-T // c), c))


def optimal_chunk_remote(T: int, budget: int, m_s: int = 1, m_others: int = 0) -> int:
    """Largest chunk whose remote-checkpointing footprint ``m_s*(chunk+1) + m_others`` fits ``budget``."""
    c = min(T, (budget - m_others) // m_s - 1)
    if c < 1:
        raise NoFeasiblePolicy(budget, 2 * m_s + m_others)
    return c


def double_grid(T: int) -> list[tuple[int, int]]:
    """Every (remote_chunk_size, chunk_size) pair with chunk | remote_chunk | T."""
    return [(rc, c) for rc in divisors(T) for c in divisors(rc)]


def best_inner_chunk(rc: int) -> int:
    return min(divisors(rc), key=lambda c: (c + rc // c, c))


def optimal_double(
    T: int,
    objective: str = "min_memory",
    budget: float | None = None,
    m_s: int = 1,
    m_others: int = 0,
) -> CheckpointPolicy:
    """Pick double-checkpointing hyperparameters.

    ``min_memory`` minimises the local term ``chunk + remote_chunk/chunk``
    over the divisor grid with a balanced outer tier, i.e. no more remote
    checkpoints than steps per remote chunk (``remote_chunk**2 >= T``).
    Without that constraint the optimum degenerates to one remote checkpoint
    per step. On integral roots this gives ``remote_chunk = sqrt(T)`` and
    ``chunk = T**(1/4)``. Ties go to fewer remote communications, then to
    the smaller chunk.

    ``min_time_under_budget`` returns the largest remote chunk whose best
    inner chunk fits ``budget`` slots (time only falls as the remote chunk
    grows).
    """
    if T < 4:
        raise ConfigError(f"double checkpointing needs T >= 4, got {T}")
    if objective == "min_memory":
        grid = [(rc, c) for rc, c in double_grid(T) if rc * rc >= T]
        rc, c = min(grid, key=lambda p: (p[1] + p[0] // p[1], T // p[0], p[1]))
        return CheckpointPolicy.double(c, rc)
    if objective == "min_time_under_budget":
        if budget is None:
            raise ConfigError("min_time_under_budget needs a budget")
        for rc in reversed(divisors(T)):
            c = best_inner_chunk(rc)
            if m_s * (c + rc // c) + m_others <= budget:
                return CheckpointPolicy.double(c, rc)
        floor = min(m_s * (c + rc // c) + m_others for rc, c in double_grid(T))
        raise NoFeasiblePolicy(budget, floor)
    raise ConfigError(f"unknown objective {objective!r}")


def policy_grid(T: int, strategies: Iterable[Strategy | str]) -> list[CheckpointPolicy]:
    out: list[CheckpointPolicy] = []
    for s in map(Strategy.parse, strategies):
        if s is Strategy.BASE:
            out.append(CheckpointPolicy.base())
        elif s in (Strategy.STANDARD, Strategy.REMOTE):
            out.extend(CheckpointPolicy(s, c) for c in chunk_grid(T))
        elif s is Strategy.HIERARCHICAL:
            for c in chunk_grid(T):
                nb = -(-T // c)
                for k in sorted(set(powers_of_two(nb)) | set(divisors(nb))):
                    out.append(CheckpointPolicy.hierarchical(c, k))
        elif s is Strategy.DOUBLE:
            out.extend(CheckpointPolicy.double(c, rc) for rc, c in double_grid(T))
    return out


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated subset sorted by (mem, time); exact duplicates keep the lexicographically first policy."""
    ordered = sorted(points, key=lambda p: (p.mem, p.time, p.policy.sort_key()))
    front: list[ParetoPoint] = []
    best_time = math.inf
    for p in ordered:
        if p.time < best_time:
            front.append(p)
            best_time = p.time
    return front


def enumerate_pareto(
    T: int,
    cfg: NetworkConfig,
    costs: CostModel,
    strategy_set: Iterable[Strategy | str] = tuple(Strategy),
    m_others: int = 0,
    grid: Sequence[CheckpointPolicy] | None = None,
) -> list[ParetoPoint]:
    policies = list(grid) if grid is not None else policy_grid(T, strategy_set)
    if not policies:
        raise ConfigError("empty search grid")
    points = [
        ParetoPoint(p, predict_memory(p, cfg, m_others, T=T), predict_time(p, cfg, costs, T=T))
        for p in policies
    ]
    return pareto_front(points)


def double_remote_sweep(T: int, cfg: NetworkConfig, costs: CostModel, m_others: int = 0) -> list[ParetoPoint]:
    """Double checkpointing over power-of-two remote chunks dividing T, each with its best inner chunk."""
    pts = []
    for rc in powers_of_two(T):
        if T % rc:
            continue
        p = CheckpointPolicy.double(best_inner_chunk(rc), rc)
        pts.append(ParetoPoint(p, predict_memory(p, cfg, m_others, T=T), predict_time(p, cfg, costs, T=T)))
    return pts


def knee(points: Sequence[ParetoPoint], baseline_time: float) -> ParetoPoint:
    """Knee of a memory/time trade-off curve.

    Works on log memory against log time overhead over ``baseline_time``
    and returns the point farthest from the chord joining the two ends.
    """
    if len(points) < 3:
        raise ValueError("need at least three points")
    x = np.log([p.mem for p in points])
    y = np.log([max(p.time - baseline_time, 1e-300) for p in points])
    x = (x - x.min()) / (np.ptp(x) or 1.0)
    y = (y - y.min()) / (np.ptp(y) or 1.0)
    dx, dy = x[-1] - x[0], y[-1] - y[0]
    dist = np.abs(dy * (x - x[0]) - dx * (y - y[0])) / math.hypot(dx, dy)
    return points[int(dist.argmax())]


def predicted_row(point: ParetoPoint, cfg: NetworkConfig, T: int) -> dict:
    """A planner result in the ledger CSV schema with ``predicted`` set."""
    p = point.policy
    n_c = predict_transfers(p, T)
    tiles = cfg.virtual_tiles
    return {
        "strategy": p.strategy.value,
        "T": T,
        "chunk_size": p.chunk_size,
        "nb_local": p.nb_local,
        "remote_chunk_size": p.remote_chunk_size,
        "peak_local_slots": point.mem,
        "mean_tile_peak": point.mem / tiles,
        "max_tile_peak": -(-point.mem // tiles),
        "n_transfers": n_c,
        "n_syncs": n_c,
        "modeled_time": point.time,
        "spike_cache_slots": "",
        "predicted": True,
    }


__all__ = [
    "ParetoPoint",
    "chunk_grid",
    "best_inner_chunk",
    "divisors",
    "double_grid",
    "double_remote_sweep",
    "enumerate_pareto",
    "knee",
    "optimal_chunk_remote",
    "optimal_chunk_standard",
    "optimal_double",
    "pareto_front",
    "policy_grid",
    "powers_of_two",
    "predicted_row",
]
