"""Checkpoint policies and the static schedules derived from them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .errors import PlanRejected


class Strategy(str, Enum):
    BASE = "base"
    STANDARD = "standard"
    REMOTE = "remote"
    HIERARCHICAL = "hierarchical"
    DOUBLE = "double"

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise PlanRejected(f"unknown strategy {value!r}; expected one of {names}") from None


class Tier(str, Enum):
    LOCAL = "local"
    REMOTE = "remote"


@dataclass(frozen=True)
class CheckpointPolicy:
    strategy: Strategy
    chunk_size: int | None = None
    nb_local: int | None = None
    remote_chunk_size: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))

    @classmethod
    def base(cls) -> "CheckpointPolicy":
        return cls(Strategy.BASE)

    @classmethod
    def standard(cls, chunk_size: int) -> "CheckpointPolicy":
        return cls(Strategy.STANDARD, chunk_size)

    @classmethod
    def remote(cls, chunk_size: int) -> "CheckpointPolicy":
        return cls(Strategy.REMOTE, chunk_size)

    @classmethod
    def hierarchical(cls, chunk_size: int, nb_local: int) -> "CheckpointPolicy":
        return cls(Strategy.HIERARCHICAL, chunk_size, nb_local=nb_local)

    @classmethod
    def double(cls, chunk_size: int, remote_chunk_size: int) -> "CheckpointPolicy":
        return cls(Strategy.DOUBLE, chunk_size, remote_chunk_size=remote_chunk_size)

    def nb_checkpoints(self, T: int) -> int:
        """``ceil(T / chunk_size)``; the final chunk is shorter when the division is inexact."""
        if self.strategy is Strategy.BASE:
            return 0
        return -(-T // self.chunk_size)

    def validate(self, T: int) -> None:
        if T < 1:
            raise PlanRejected(f"sequence length must be >= 1, got {T}")
        s = self.strategy
        if s is Strategy.BASE:
            return
        c = self.chunk_size
        if not isinstance(c, int) or c < 1:
            raise PlanRejected(f"{s.value}: chunk_size must be an integer >= 1, got {c!r}")
        if s is not Strategy.DOUBLE and c > T:
            raise PlanRejected(f"{s.value}: chunk_size={c} exceeds T={T}")
        if s is Strategy.HIERARCHICAL:
            nb, k = self.nb_checkpoints(T), self.nb_local
            if not isinstance(k, int) or not 1 <= k <= nb:
                raise PlanRejected(f"hierarchical: nb_local must satisfy 1 <= nb_local <= nb_checkpoints={nb}, got {k!r}")
        if s is Strategy.DOUBLE:
            rc = self.remote_chunk_size
            if not isinstance(rc, int) or rc < 1:
                raise PlanRejected(f"double: remote_chunk_size must be an integer >= 1, got {rc!r}")
            if rc % c:
                raise PlanRejected(f"double: chunk_size={c} does not divide remote_chunk_size={rc}")
            if T % rc:
                raise PlanRejected(f"double: remote_chunk_size={rc} does not divide T={T}")

    def as_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "chunk_size": self.chunk_size,
            "nb_local": self.nb_local,
            "remote_chunk_size": self.remote_chunk_size,
        }

    def sort_key(self) -> tuple:
        return (self.strategy.value, self.chunk_size or 0, self.nb_local or 0, self.remote_chunk_size or 0)

    def __str__(self) -> str:
        parts = [self.strategy.value]
        for name in ("chunk_size", "nb_local", "remote_chunk_size"):
            value = getattr(self, name)
            if value is not None:
                parts.append(f"{name}={value}")
        return "(" + ", ".join(parts) + ")"


@dataclass(frozen=True)
class Checkpoint:
    t: int
    tier: Tier


@dataclass
class Schedule:
    """Where each checkpoint lives and how the backward pass walks the sequence.

    ``chunks`` lists the backward chunks ``(t0, t1)`` in execution order
    (descending time); each one is replayed from the state at ``t0``. For the
    double strategy ``remote_chunks`` holds the outer ranges whose first pass
    regenerates the local checkpoints. For the hierarchical strategy ``batches``
    groups checkpoint timesteps per remote communication and ``local_batch``
    holds the final checkpoints that never leave local memory.
    """

    policy: CheckpointPolicy
    T: int
    checkpoints: list[Checkpoint]
    chunks: list[tuple[int, int]]
    remote_chunks: list[tuple[int, int]] = field(default_factory=list)
    batches: list[list[int]] = field(default_factory=list)
    local_batch: list[int] = field(default_factory=list)

    @property
    def nb_checkpoints(self) -> int:
        return self.policy.nb_checkpoints(self.T)

    def checkpoint_times(self, tier: Tier | None = None) -> list[int]:
        return [c.t for c in self.checkpoints if tier is None or c.tier is tier]

    def check(self) -> None:
        """Assert the structural invariants (full coverage, bounded replay ranges)."""
        steps = sorted(t for t0, t1 in self.chunks for t in range(t0, t1))
        if steps != list(range(self.T)):
            raise PlanRejected("backward chunks do not cover every step exactly once")
        p = self.policy
        if p.strategy is not Strategy.BASE:
            if any(t1 - t0 > p.chunk_size for t0, t1 in self.chunks):
                raise PlanRejected("a replay range exceeds chunk_size")
        if p.strategy is Strategy.DOUBLE:
            if any(t1 - t0 > p.remote_chunk_size for t0, t1 in self.remote_chunks):
                raise PlanRejected("a first-pass replay range exceeds remote_chunk_size")


def plan(policy: CheckpointPolicy, T: int) -> Schedule:
    policy.validate(T)
    s = policy.strategy
    if s is Strategy.BASE:
        sched = Schedule(policy, T, [], [(0, T)])
        sched.check()
        return sched

    c = policy.chunk_size
    if s is Strategy.DOUBLE:
        rc = policy.remote_chunk_size
        starts = list(range(0, T, rc))
        ckpts = [Checkpoint(t, Tier.REMOTE) for t in starts]
        remote_chunks = [(r, r + rc) for r in reversed(starts)]
        chunks = [(t, t + c) for r0, r1 in remote_chunks for t in reversed(range(r0, r1, c))]
        sched = Schedule(policy, T, ckpts, chunks, remote_chunks=remote_chunks)
        sched.check()
        return sched

    starts = list(range(0, T, c))
    chunks = [(t0, min(t0 + c, T)) for t0 in reversed(starts)]
    tier = Tier.LOCAL if s is Strategy.STANDARD else Tier.REMOTE
    sched = Schedule(policy, T, [Checkpoint(t, tier) for t in starts], chunks)
    if s is Strategy.HIERARCHICAL:
        k = policy.nb_local
        local = starts[-k:]
        rest = starts[:-k]
        batches = []
        end = len(rest)
        while end > 0:
            batches.insert(0, rest[max(0, end - k):end])
            end -= k
        sched.local_batch = local
        sched.batches = batches
        local_set = set(local)
        sched.checkpoints = [Checkpoint(t, Tier.LOCAL if t in local_set else Tier.REMOTE) for t in starts]
    sched.check()
    return sched


def isqrt_candidates(x: int) -> list[int]:
    """Integers adjacent to sqrt(x): floor and ceil (deduplicated, >= 1)."""
    lo = math.isqrt(x)
    return sorted({max(1, lo), max(1, lo + (lo * lo < x))})
