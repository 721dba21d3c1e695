"""Recurrent leaky integrate-and-fire network with sparse spikes and surrogate-gradient BPTT.

Time convention. ``S[t]`` is the network state at timestep ``t`` (``S[0]`` is the
all-zero initial state). Step ``t`` maps ``S[t]`` to ``S[t+1]``; it consumes the
external input slice ``inputs[t]`` and the spikes of ``S[t]``, and its output
spikes (the spikes of ``S[t+1]``) are stored at ``record[t]``. Every layer fires
with a one-step delay, both recurrently and towards the next layer.

Per layer ``l`` one step computes::

    i' = decay_i * i + (s_pre @ W_in + s_l @ W_rec)
    v' = decay_v * v + i' - threshold * s_l

where ``s_pre`` is the input spikes (layer 0) or the spikes of layer ``l-1``,
and ``s_l`` are the layer's own spikes at ``t``. A neuron fires iff
``v >= threshold``.

The gradient of step ``t`` needs only ``S[t+1]`` (for the surrogate slope) and
the cached spikes, so a backward chunk over steps ``[t0, t1)`` consumes the
states ``S[t0+1] .. S[t1]``.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Iterator, Mapping, Protocol, Sequence

import numpy as np

from .errors import ConfigError, NumericOverflowError, ScheduleError

_EMPTY = np.zeros((0, 2), dtype=np.int32)


@dataclass(frozen=True)
class NetworkConfig:
    num_layers: int
    neurons_per_layer: int
    batch_size: int
    seq_len: int
    n_inputs: int | None = None  # defaults to neurons_per_layer
    virtual_tiles: int = 1
    decay_v: float = 0.9
    decay_i: float = 0.8
    threshold: float = 1.0
    surrogate_beta: float = 10.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.n_inputs is None:
            object.__setattr__(self, "n_inputs", self.neurons_per_layer)
        for name in ("num_layers", "neurons_per_layer", "batch_size", "seq_len", "n_inputs", "virtual_tiles"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.neurons_per_layer % self.virtual_tiles:
            raise ConfigError(
                f"neurons_per_layer={self.neurons_per_layer} is not divisible by "
                f"virtual_tiles={self.virtual_tiles}"
            )
        for name in ("decay_v", "decay_i"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value!r}")
        if not self.threshold > 0:
            raise ConfigError(f"threshold must be positive, got {self.threshold!r}")
        if not self.surrogate_beta > 0:
            raise ConfigError(f"surrogate_beta must be positive, got {self.surrogate_beta!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def state_slots(self) -> int:
        """Scalars in one NetworkState (membrane + current for every layer)."""
        return 2 * self.num_layers * self.batch_size * self.neurons_per_layer

    def weight_shapes(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        n = self.neurons_per_layer
        return [((self.n_inputs if l == 0 else n, n), (n, n)) for l in range(self.num_layers)]

    def with_(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class OpCounters:
    lif_steps: int = 0
    spike_gen_calls: int = 0
    encode_calls: int = 0
    matmul_events: int = 0
    bwd_steps: int = 0

    def snapshot(self) -> dict[str, int]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class NetworkState:
    v: tuple[np.ndarray, ...]
    i: tuple[np.ndarray, ...]

    @classmethod
    def zeros(cls, cfg: NetworkConfig) -> "NetworkState":
        shape = (cfg.batch_size, cfg.neurons_per_layer)
        return cls(
            tuple(np.zeros(shape, cfg.np_dtype) for _ in range(cfg.num_layers)),
            tuple(np.zeros(shape, cfg.np_dtype) for _ in range(cfg.num_layers)),
        )

    @property
    def slots(self) -> int:
        return sum(a.size for a in self.v) + sum(a.size for a in self.i)

    def copy(self) -> "NetworkState":
        return NetworkState(tuple(a.copy() for a in self.v), tuple(a.copy() for a in self.i))

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (*self.v, *self.i):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def bitwise_equal(self, other: "NetworkState") -> bool:
        return all(
            a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip((*self.v, *self.i), (*other.v, *other.i))
        )


SpikeSlice = list  # one (k, 2) int32 array of (batch, neuron) pairs per layer


class SpikeRecord:
    """Sparse spikes for a whole sequence: ``record[t][layer]`` is a sorted (k, 2) index array."""

    def __init__(self, n_layers: int, slices: Sequence[SpikeSlice] = ()):
        self.n_layers = n_layers
        self._slices: list[SpikeSlice] = []
        for s in slices:
            self.append(s)

    def append(self, spike_slice: SpikeSlice) -> None:
        if len(spike_slice) != self.n_layers:
            raise ValueError(f"slice has {len(spike_slice)} layers, record expects {self.n_layers}")
        self._slices.append([np.asarray(ev, dtype=np.int32).reshape(-1, 2) for ev in spike_slice])

    def __len__(self) -> int:
        return len(self._slices)

    def __getitem__(self, t: int) -> SpikeSlice:
        return self._slices[t]

    def __iter__(self) -> Iterator[SpikeSlice]:
        return iter(self._slices)

    def num_events(self) -> int:
        return sum(len(ev) for s in self._slices for ev in s)

    def copy(self) -> "SpikeRecord":
        return SpikeRecord(self.n_layers, [[ev.copy() for ev in s] for s in self._slices])

    def digest(self) -> str:
        h = hashlib.sha256()
        for t, s in enumerate(self._slices):
            for layer, ev in enumerate(s):
                h.update(f"{t}:{layer}:{len(ev)};".encode())
                h.update(ev.tobytes())
        return h.hexdigest()

    def validate(self) -> None:
        """Raise ValueError unless every list is strictly increasing in (batch, neuron) order."""
        for t, s in enumerate(self._slices):
            for layer, ev in enumerate(s):
                if len(ev) < 2:
                    continue
                keys = ev[:, 0].astype(np.int64) * (1 << 31) + ev[:, 1]
                if np.any(np.diff(keys) <= 0):
                    raise ValueError(f"spike list at t={t}, layer={layer} is not canonical")

    def to_dense(self, t: int, layer: int, shape: tuple[int, int], dtype=np.float32) -> np.ndarray:
        return events_to_dense(self._slices[t][layer], shape, dtype)


def events_to_dense(events: np.ndarray, shape: tuple[int, int], dtype=np.float32) -> np.ndarray:
    out = np.zeros(shape, dtype=dtype)
    if len(events):
        out[events[:, 0], events[:, 1]] = 1
    return out


def dense_to_events(mask: np.ndarray) -> np.ndarray:
    b, n = np.nonzero(mask)
    return np.stack([b, n], axis=1).astype(np.int32) if len(b) else _EMPTY.copy()


@dataclass
class Weights:
    w_in: list[np.ndarray]
    w_rec: list[np.ndarray]

    @classmethod
    def init(cls, cfg: NetworkConfig, seed: int | None = None) -> "Weights":
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        w_in, w_rec = [], []
        for shape_in, shape_rec in cfg.weight_shapes():
            for shape, dest in ((shape_in, w_in), (shape_rec, w_rec)):
                bound = 1.0 / np.sqrt(shape[0])
                dest.append(rng.uniform(-bound, bound, size=shape).astype(cfg.np_dtype))
        return cls(w_in, w_rec)

    @classmethod
    def zeros(cls, cfg: NetworkConfig) -> "Weights":
        return cls(
            [np.zeros(a, cfg.np_dtype) for a, _ in cfg.weight_shapes()],
            [np.zeros(b, cfg.np_dtype) for _, b in cfg.weight_shapes()],
        )

    def named(self) -> Iterator[tuple[str, np.ndarray]]:
        for l, (a, b) in enumerate(zip(self.w_in, self.w_rec)):
            yield f"w_in[{l}]", a
            yield f"w_rec[{l}]", b

    @property
    def slots(self) -> int:
        return sum(a.size for _, a in self.named())

    def copy(self):
        return type(self)([a.copy() for a in self.w_in], [b.copy() for b in self.w_rec])

    def checksum(self) -> str:
        """XOR of per-tensor SHA-256 digests; independent of tensor iteration order."""
        acc = 0
        for name, a in self.named():
            h = hashlib.sha256(name.encode() + str(a.dtype).encode() + np.ascontiguousarray(a).tobytes())
            acc ^= int.from_bytes(h.digest(), "big")
        return f"{acc:064x}"

    def first_difference(self, other: "Weights") -> tuple[str, tuple[int, ...]] | None:
        """Name and index of the first element whose bits differ, or None if identical."""
        for (name, a), (_, b) in zip(self.named(), other.named()):
            if a.shape != b.shape or a.dtype != b.dtype:
                return name, ()
            neq = a.view(f"u{a.itemsize}") != b.view(f"u{b.itemsize}")
            if neq.any():
                return name, tuple(int(x) for x in np.argwhere(neq)[0])
        return None

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for _, a in self.named())


class Gradients(Weights):
    """Loss gradients, laid out exactly like :class:`Weights`."""


def sparse_matmul(events: np.ndarray, w: np.ndarray, batch: int, out: np.ndarray | None = None) -> np.ndarray:
    """Sum rows of ``w`` selected by spike events into a (batch, post) array.

    Rows are accumulated per batch entry in ascending neuron order, one event per
    batch entry per round, so the summation order is fixed by the canonical
    event order alone.
    """
    if out is None:
        out = np.zeros((batch, w.shape[1]), dtype=w.dtype)
    if not len(events):
        return out
    b = events[:, 0]
    counts = np.bincount(b, minlength=batch)
    rank = np.arange(len(b)) - (np.cumsum(counts) - counts)[b]
    # group events by round; each round touches every batch entry at most once
    order = np.argsort(rank, kind="stable")
    bounds = np.cumsum(np.bincount(rank))
    lo = 0
    for hi in bounds:
        sel = order[lo:hi]
        out[b[sel]] += w[events[sel, 1]]
        lo = hi
    return out


def surrogate_grad(v_minus_theta, beta: float):
    """Fast-sigmoid derivative ``1 / (beta*|x| + 1)**2``; peaks at 1 for ``x == 0``."""
    x = np.asarray(v_minus_theta)
    beta = x.dtype.type(beta) if x.dtype.kind == "f" else beta
    return 1.0 / (beta * np.abs(x) + 1) ** 2


def empty_slice(n_layers: int) -> SpikeSlice:
    return [_EMPTY for _ in range(n_layers)]


def lif_step(
    state: NetworkState,
    input_spikes: np.ndarray,
    spikes: SpikeSlice,
    weights: Weights,
    cfg: NetworkConfig,
    t: int = 0,
    counters: OpCounters | None = None,
) -> NetworkState:
    """Advance one timestep.

    ``input_spikes`` is the external event array for step ``t``; ``spikes`` holds
    the per-layer events of ``state`` itself (the firing decisions, whether
    freshly generated or read from the cache).
    """
    dt = cfg.np_dtype.type
    decay_i, decay_v, theta = dt(cfg.decay_i), dt(cfg.decay_v), dt(cfg.threshold)
    B = cfg.batch_size
    new_v, new_i = [], []
    events = 0
    for l in range(cfg.num_layers):
        pre = input_spikes if l == 0 else spikes[l - 1]
        own = spikes[l]
        drive = sparse_matmul(pre, weights.w_in[l], B)
        drive = sparse_matmul(own, weights.w_rec[l], B, out=drive)
        events += len(pre) + len(own)
        i_next = decay_i * state.i[l] + drive
        v_next = decay_v * state.v[l] + i_next
        if len(own):
            v_next[own[:, 0], own[:, 1]] -= theta
        if not (np.isfinite(v_next).all() and np.isfinite(i_next).all()):
            raise NumericOverflowError(l, t)
        new_v.append(v_next)
        new_i.append(i_next)
    if counters is not None:
        counters.lif_steps += 1
        counters.matmul_events += events
    return NetworkState(tuple(new_v), tuple(new_i))


def spike_generate(state: NetworkState, cfg: NetworkConfig, counters: OpCounters | None = None) -> SpikeSlice:
    """Threshold every layer (``v >= threshold`` fires) and encode the events sparsely."""
    theta = cfg.np_dtype.type(cfg.threshold)
    out = [dense_to_events(v >= theta) for v in state.v]
    if counters is not None:
        counters.spike_gen_calls += 1
        counters.encode_calls += 1
    return out


class Loss(Protocol):
    def reset(self, cfg: NetworkConfig, T: int) -> None: ...

    def observe(self, t: int, state: NetworkState, spikes: SpikeSlice) -> None: ...

    def value(self) -> float: ...

    def spike_adjoint(self, t: int, layer: int) -> np.ndarray | None: ...

    def membrane_adjoint(self, t: int, layer: int) -> np.ndarray | None: ...


class SpikeCountLoss:
    """Mean squared error between last-layer firing rates and per-neuron target rates.

    Rates are spike counts over the ``T`` emitted slices divided by ``T``; the
    mean runs over batch entries and neurons.
    """

    def __init__(self, target_rates):
        self.target_rates = np.asarray(target_rates, dtype=np.float64)
        self._counts: np.ndarray | None = None

    def reset(self, cfg: NetworkConfig, T: int) -> None:
        if self.target_rates.shape != (cfg.neurons_per_layer,):
            raise ConfigError(
                f"target_rates has shape {self.target_rates.shape}, expected ({cfg.neurons_per_layer},)"
            )
        self._cfg, self._T = cfg, T
        self._counts = np.zeros((cfg.batch_size, cfg.neurons_per_layer), dtype=np.int64)
        self._coef = None

    def observe(self, t: int, state: NetworkState, spikes: SpikeSlice) -> None:
        ev = spikes[-1]
        if len(ev):
            np.add.at(self._counts, (ev[:, 0], ev[:, 1]), 1)

    def _error(self) -> np.ndarray:
        dt = self._cfg.np_dtype.type
        return (self._counts.astype(self._cfg.np_dtype) / dt(self._T)) - self.target_rates.astype(self._cfg.np_dtype)

    def value(self) -> float:
        err = self._error()
        return float(np.mean(err * err))

    def spike_adjoint(self, t: int, layer: int) -> np.ndarray | None:
        if layer != self._cfg.num_layers - 1:
            return None
        if self._coef is None:
            dt = self._cfg.np_dtype.type
            self._coef = dt(2) * self._error() / dt(self._T * self._counts.size)
        return self._coef

    def membrane_adjoint(self, t: int, layer: int) -> np.ndarray | None:
        return None


class MembraneMeanLoss:
    """Mean membrane potential over every state ``S[1..T]``, layer, batch entry and neuron.

    Smooth in the weights while nothing fires, which makes it the finite
    difference reference for the backward pass.
    """

    def reset(self, cfg: NetworkConfig, T: int) -> None:
        self._cfg, self._T = cfg, T
        self._total = 0.0
        n = T * cfg.num_layers * cfg.batch_size * cfg.neurons_per_layer
        self._coef = np.full((cfg.batch_size, cfg.neurons_per_layer), 1.0 / n, dtype=cfg.np_dtype)
        self._n = n

    def observe(self, t: int, state: NetworkState, spikes: SpikeSlice) -> None:
        self._total += sum(float(np.sum(v, dtype=np.float64)) for v in state.v)

    def value(self) -> float:
        return self._total / self._n

    def spike_adjoint(self, t: int, layer: int) -> np.ndarray | None:
        return None

    def membrane_adjoint(self, t: int, layer: int) -> np.ndarray | None:
        return self._coef


class StateRecorder(Protocol):
    def begin(self, initial: NetworkState) -> None: ...

    def offer(self, t: int, state: NetworkState) -> None:
        """Called with ``S[t]`` for t = 1..T; store it or let it go."""


class StoreAll:
    def begin(self, initial: NetworkState) -> None:
        self.states: dict[int, NetworkState] = {0: initial}

    def offer(self, t: int, state: NetworkState) -> None:
        self.states[t] = state


def forward_sequence(
    weights: Weights,
    inputs: SpikeRecord,
    cfg: NetworkConfig,
    recorder: StateRecorder | None = None,
    loss: Loss | None = None,
    counters: OpCounters | None = None,
    T: int | None = None,
) -> tuple[NetworkState, SpikeRecord, float]:
    T = cfg.seq_len if T is None else T
    if len(inputs) < T:
        raise ConfigError(f"inputs cover {len(inputs)} timesteps, need {T}")
    state = NetworkState.zeros(cfg)
    record = SpikeRecord(cfg.num_layers)
    if recorder is not None:
        recorder.begin(state)
    if loss is not None:
        loss.reset(cfg, T)
    spikes = empty_slice(cfg.num_layers)
    for t in range(T):
        state = lif_step(state, inputs[t][0], spikes, weights, cfg, t, counters)
        spikes = spike_generate(state, cfg, counters)
        record.append(spikes)
        if loss is not None:
            loss.observe(t + 1, state, spikes)
        if recorder is not None:
            recorder.offer(t + 1, state)
    return state, record, (loss.value() if loss is not None else float("nan"))


@dataclass
class Adjoint:
    """Adjoint of ``S[t]`` through every path except its own spikes' surrogate, plus the spike adjoint."""

    v: list[np.ndarray]
    i: list[np.ndarray]
    s: list[np.ndarray]

    @classmethod
    def zeros(cls, cfg: NetworkConfig) -> "Adjoint":
        shape = (cfg.batch_size, cfg.neurons_per_layer)
        mk = lambda: [np.zeros(shape, cfg.np_dtype) for _ in range(cfg.num_layers)]  # noqa: E731
        return cls(mk(), mk(), mk())

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in (*self.v, *self.i, *self.s))


def _own_spikes(record: SpikeRecord, step: int, n_layers: int) -> SpikeSlice:
    # spikes of S[step], i.e. emitted by step - 1
    return record[step - 1] if step > 0 else empty_slice(n_layers)


def backward_chunk(
    states: Mapping[int, NetworkState],
    spikes: SpikeRecord,
    weights: Weights,
    cfg: NetworkConfig,
    incoming: Adjoint,
    *,
    inputs: SpikeRecord,
    t0: int,
    t1: int,
    loss: Loss,
    grads: Gradients | None = None,
    counters: OpCounters | None = None,
) -> tuple[Gradients, Adjoint]:
    """Reverse-time pass over steps ``[t0, t1)``.

    ``states`` must contain ``S[t0+1] .. S[t1]``; ``incoming`` is the adjoint of
    ``S[t1]`` from later steps. Gradients are accumulated into ``grads`` (fresh
    zeros if omitted) step by step in descending time and ascending layer, so
    splitting a sequence into chunks does not change a single bit. Returns the
    accumulated gradients and the adjoint of ``S[t0]``.
    """
    dt = cfg.np_dtype.type
    decay_i, decay_v, theta = dt(cfg.decay_i), dt(cfg.decay_v), dt(cfg.threshold)
    L, B, N = cfg.num_layers, cfg.batch_size, cfg.neurons_per_layer
    if grads is None:
        grads = Gradients.zeros(cfg)
    carry = incoming
    for k in range(t1, t0, -1):
        try:
            st = states[k]
        except KeyError:
            raise ScheduleError(f"state S[{k}] is not resident for backward chunk [{t0}, {t1})") from None
        step = k - 1
        v_tot = []
        for l in range(L):
            s_bar = carry.s[l]
            extra = loss.spike_adjoint(k, l)
            if extra is not None:
                s_bar = s_bar + extra
            vt = carry.v[l] + s_bar * surrogate_grad(st.v[l] - theta, cfg.surrogate_beta)
            dv = loss.membrane_adjoint(k, l)
            if dv is not None:
                vt = vt + dv
            v_tot.append(vt)
        i_tot = [carry.i[l] + v_tot[l] for l in range(L)]
        own = _own_spikes(spikes, step, L)
        x = inputs[step][0]
        pre_dense = [events_to_dense(x, (B, cfg.n_inputs), cfg.np_dtype)] + [
            events_to_dense(own[l], (B, N), cfg.np_dtype) for l in range(L - 1)
        ]
        own_dense = [events_to_dense(own[l], (B, N), cfg.np_dtype) for l in range(L)]
        new_s = []
        for l in range(L):
            grads.w_in[l] += pre_dense[l].T @ i_tot[l]
            grads.w_rec[l] += own_dense[l].T @ i_tot[l]
            s_l = i_tot[l] @ weights.w_rec[l].T - theta * v_tot[l]
            if l + 1 < L:
                s_l = s_l + i_tot[l + 1] @ weights.w_in[l + 1].T
            new_s.append(s_l)
        carry = Adjoint([decay_v * a for a in v_tot], [decay_i * a for a in i_tot], new_s)
        if counters is not None:
            counters.bwd_steps += 1
    return grads, carry


def bptt(
    weights: Weights, inputs: SpikeRecord, cfg: NetworkConfig, loss: Loss
) -> tuple[float, Gradients, SpikeRecord, dict[int, NetworkState]]:
    """Store-all BPTT reference: keep every state, one backward chunk over the full sequence."""
    rec = StoreAll()
    _, spikes, value = forward_sequence(weights, inputs, cfg, rec, loss)
    grads, _ = backward_chunk(
        rec.states, spikes, weights, cfg, Adjoint.zeros(cfg),
        inputs=inputs, t0=0, t1=cfg.seq_len, loss=loss,
    )
    return value, grads, spikes, rec.states
