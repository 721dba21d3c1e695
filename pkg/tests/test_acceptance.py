"""Acceptance criteria, one test per criterion (criterion 2 is split by predictor).

Each test prints a single ``ACCEPTANCE <id> PASS|FAIL`` line with the measured
evidence, then asserts. Run alone with ``pytest tests/test_acceptance.py -s``
or ``python3 tests/test_acceptance.py``.
"""

import sys
import time

import numpy as np
import pytest

from conftest import make_instance
from spikeckpt import (
    CheckpointPolicy,
    CostModel,
    NetworkConfig,
    SpikeCountLoss,
    Strategy,
    bptt,
    optimal_chunk_remote,
    optimal_chunk_standard,
    optimal_double,
    predict_memory,
    predict_time,
    predict_transfers,
    run_training_step,
)
from spikeckpt.engine import measure_m_others, recompute_chunk
from spikeckpt.errors import SimulatedOOM
from spikeckpt.harness.task import gen_task, train
from spikeckpt.memory import memory_term, nearest_int_root
from spikeckpt.planner import chunk_grid, divisors, policy_grid
from spikeckpt.snn import OpCounters, StoreAll, Weights, forward_sequence

TINY = dict(num_layers=2, neurons_per_layer=8, batch_size=2)
DESK = dict(num_layers=3, neurons_per_layer=32, batch_size=8)


@pytest.fixture
def report(capsys):
    def emit(cid, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {cid} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


def _random_policies(rng, T):
    nb_c = optimal_chunk_standard(T)
    nb = -(-T // nb_c)
    rc = int(rng.choice(divisors(T)))
    return [
        CheckpointPolicy.standard(int(rng.integers(1, T + 1))),
        CheckpointPolicy.remote(int(rng.integers(1, T + 1))),
        CheckpointPolicy.hierarchical(nb_c, int(rng.integers(1, nb + 1))),
        CheckpointPolicy.double(int(rng.choice(divisors(rc))), rc),
    ]


def test_c1_gradient_equivalence(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = []
    for k in range(20):
        cfg = NetworkConfig(
            num_layers=int(rng.integers(2, 4)),
            neurons_per_layer=int(rng.integers(4, 33)),
            batch_size=int(rng.integers(2, 9)),
            seq_len=int(rng.choice([17, 32, 100, 257, 512])),
            seed=k,
        )
        w, x, tg = make_instance(cfg, rate=0.25)
        _, ref, _, _ = bptt(w, x, cfg, SpikeCountLoss(tg))
        for policy in _random_policies(rng, cfg.seq_len):
            _, grads, _ = run_training_step(w, x, cfg, policy, target_rates=tg)
            diff = grads.first_difference(ref)
            if diff is not None:
                mismatches.append((k, str(policy), diff))
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 60
    report(1, ok, f"20 instances x 4 strategies, {len(mismatches)} bit mismatches, {elapsed:.1f}s")
    assert ok, mismatches[:3]


def _grid_200():
    rng = np.random.default_rng(0)
    Ts = [17, 32, 64, 100, 128, 256, 257, 512]
    grid = [(T, CheckpointPolicy.base()) for T in Ts]
    for s in ("standard", "remote", "hierarchical", "double"):
        for T in Ts:
            options = policy_grid(T, [s])
            for i in rng.choice(len(options), size=6, replace=len(options) < 6):
                grid.append((T, options[int(i)]))
    assert len(grid) == 200
    return grid


@pytest.fixture(scope="module")
def formula_runs():
    rows = []
    m_others = {}
    for T, policy in _grid_200():
        cfg = NetworkConfig(**TINY, seq_len=T, virtual_tiles=2)
        if T not in m_others:
            m_others[T] = measure_m_others(cfg)
        w, x, tg = make_instance(cfg, rate=0.3)
        _, _, ledger = run_training_step(w, x, cfg, policy, target_rates=tg)
        rows.append((T, policy, ledger, predict_memory(policy, cfg, m_others[T]), predict_transfers(policy, T)))
    return rows


def test_c2a_memory_formulas_exact(report, formula_runs):
    bad = [(T, str(p), led.peak_local_slots, pred) for T, p, led, pred, _ in formula_runs if led.peak_local_slots != pred]
    report("2a", not bad, f"peak_local_slots == prediction on {len(formula_runs) - len(bad)}/{len(formula_runs)} grid points")
    assert not bad, bad[:5]


@pytest.mark.parametrize("strategy", ["remote", "double", "hierarchical"])
def test_c2b_transfer_formulas_exact(report, formula_runs, strategy):
    runs = [r for r in formula_runs if r[1].strategy.value == strategy]
    bad = [(T, str(p), led.n_transfers, n_c) for T, p, led, _, n_c in runs if led.n_transfers != n_c]
    label = {"remote": "2b-remote", "double": "2b-double", "hierarchical": "2b-hierarchical"}[strategy]
    detail = f"N_c == closed form on {len(runs) - len(bad)}/{len(runs)} {strategy} points"
    if bad:
        detail += "; first mismatches (T, policy, measured, formula): " + "; ".join(map(str, bad[:3]))
    report(label, not bad, detail)
    assert not bad


def test_c2c_standard_and_base_never_communicate(report, formula_runs):
    runs = [r for r in formula_runs if r[1].strategy in (Strategy.BASE, Strategy.STANDARD)]
    ok = all(led.n_transfers == 0 == n_c for _, _, led, _, n_c in runs)
    report("2c", ok, f"{len(runs)} base/standard points with zero communications")
    assert ok


def test_c3_standard_optimum(report):
    T = 4096
    cfg = NetworkConfig(**TINY, seq_len=T)
    m_o = measure_m_others(cfg)
    # exhaustive over every chunk with the predictor (exact, criterion 2a), measured on the grid
    analytic = min(range(1, T + 1), key=lambda c: (predict_memory(CheckpointPolicy.standard(c), cfg, m_o), c))
    grid = chunk_grid(T)
    w, x, tg = make_instance(cfg, rate=0.2)
    mem, times = [], []
    for c in grid:
        _, _, led = run_training_step(w, x, cfg, CheckpointPolicy.standard(c), target_rates=tg)
        mem.append(led.peak_local_slots)
        times.append(led.modeled_time)
    best = grid[int(np.argmin(mem))]
    spread = (max(times) - min(times)) / min(times)
    ok = abs(grid.index(best) - grid.index(64)) <= 1 and analytic == 64 and spread < 0.15
    report(3, ok, f"measured argmin chunk={best}, exhaustive argmin={analytic}, modeled time spread {spread:.1%}")
    assert ok


def test_c4_double_scaling_law(report):
    terms = {}
    for T in (256, 4096):
        cfg = NetworkConfig(**TINY, seq_len=T)
        rc, c = nearest_int_root(T, 2), nearest_int_root(T, 4)
        policy = CheckpointPolicy.double(c, rc)
        m_o = measure_m_others(cfg)
        w, x, tg = make_instance(cfg, rate=0.2)
        _, _, led = run_training_step(w, x, cfg, policy, target_rates=tg)
        terms[T] = (led.peak_local_slots - m_o, cfg.state_slots * memory_term(policy, T))
    ratio = terms[4096][0] / terms[256][0]
    predicted = terms[4096][1] / terms[256][1]
    ok = 1.8 <= ratio <= 2.2 and predicted == 2.0
    report(4, ok, f"(peak - M_others) ratio 256->4096 = {ratio:.3f} measured, {predicted:.3f} predicted")
    assert ok


def test_c5_ordinal_time_relationships(report):
    T = 4096
    cfg = NetworkConfig(**DESK, seq_len=T)
    costs = CostModel()
    m_o = measure_m_others(cfg)
    w, x, tg = make_instance(cfg, rate=0.2)
    double = CheckpointPolicy.double(16, 256)
    # remote checkpointing given the same local budget as double checkpointing
    remote = CheckpointPolicy.remote(optimal_chunk_remote(T, predict_memory(double, cfg, m_o), cfg.state_slots, m_o))
    policies = {
        "base": CheckpointPolicy.base(),
        "standard": CheckpointPolicy.standard(optimal_chunk_standard(T)),
        "double": double,
        "remote": remote,
    }
    t = {}
    for name, p in policies.items():
        _, _, led = run_training_step(w, x, cfg, p, costs, target_rates=tg)
        assert led.modeled_time == predict_time(p, cfg, costs)
        t[name] = led.modeled_time
    over = {k: t[k] / t["base"] - 1 for k in ("standard", "double", "remote")}
    ok = t["standard"] < t["double"] < t["remote"] and over["remote"] > 0.5 and over["double"] < 0.15
    report(5, ok, "overhead vs base: " + ", ".join(f"{k} {v:.1%}" for k, v in over.items())
           + f" (remote chunk {remote.chunk_size})")
    assert ok


def test_c6_recompute_discount(report):
    T = 256
    cfg = NetworkConfig(**DESK, seq_len=T)
    w, x, tg = make_instance(cfg, rate=0.2)
    rec = StoreAll()
    _, spikes, _ = forward_sequence(w, x, cfg, rec)
    ctr = OpCounters()
    recompute_chunk(rec.states[0], spikes, x, 0, T, w, cfg, counters=ctr)
    counts = {}
    for p in (CheckpointPolicy.standard(16), CheckpointPolicy.double(4, 16)):
        _, _, led = run_training_step(w, x, cfg, p, target_rates=tg)
        counts[p.strategy.value] = led.op_counters
    std, dbl = counts["standard"], counts["double"]
    ok = (
        ctr.spike_gen_calls == 0 == ctr.encode_calls
        and ctr.lif_steps == T
        and all(c.spike_gen_calls == T == c.encode_calls for c in counts.values())
        and std.lif_steps == 2 * T
        and dbl.lif_steps - std.lif_steps == T
        and dbl.lif_steps <= 3 * T
    )
    report(6, ok, f"replay gen/encode = {ctr.spike_gen_calls}/{ctr.encode_calls}; lif_steps standard {std.lif_steps}, double {dbl.lif_steps} (T={T})")
    assert ok


def test_c7_capacity_boundary(report):
    ref = NetworkConfig(**TINY, seq_len=400)
    cap = 400 * ref.state_slots + measure_m_others(ref)
    outcome = {}

    def attempt(name, T, policy_for):
        cfg = ref.with_(seq_len=T)
        w, x, tg = make_instance(cfg, rate=0.2)
        try:
            run_training_step(w, x, cfg, policy_for(T), target_rates=tg, capacity_slots=cap)
            outcome[name] = "fits"
        except SimulatedOOM:
            outcome[name] = "oom"

    attempt("base@400", 400, lambda T: CheckpointPolicy.base())
    attempt("base@401", 401, lambda T: CheckpointPolicy.base())
    attempt("standard@2000", 2000, lambda T: CheckpointPolicy.standard(optimal_chunk_standard(T)))
    attempt("double@4000", 4000, lambda T: optimal_double(T))
    ok = outcome == {"base@400": "fits", "base@401": "oom", "standard@2000": "fits", "double@4000": "fits"}
    report(7, ok, f"capacity {cap} slots: " + ", ".join(f"{k} {v}" for k, v in outcome.items()))
    assert ok


def test_c8_training_sanity(report):
    cfg = NetworkConfig(**DESK, seq_len=64, seed=0)
    inputs, targets = gen_task(0, cfg, 0.2)
    w0 = Weights.init(cfg)
    policies = [
        CheckpointPolicy.base(),
        CheckpointPolicy.standard(8),
        CheckpointPolicy.remote(8),
        CheckpointPolicy.hierarchical(8, 2),
        optimal_double(64),
    ]
    runs = [train(w0, inputs, cfg, p, targets, steps=50, lr=1e-2) for p in policies]
    losses, _, sums = runs[0]
    drop = 1 - losses[-1] / losses[0]
    identical = all(r[0] == losses and r[2] == sums and r[1].first_difference(runs[0][1]) is None for r in runs[1:])
    ok = drop >= 0.2 and identical
    report(8, ok, f"loss {losses[0]:.4f} -> {losses[-1]:.4f} ({drop:.1%} lower), trajectories identical across 5 policies: {identical}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
