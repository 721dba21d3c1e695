import numpy as np
import pytest

from conftest import bits_equal, make_instance
from oracles import dense_lif_step, dense_spikes, tape_bptt, threshold_scan
from spikeckpt import NetworkConfig, SpikeCountLoss, SpikeRecord, Weights, bptt, forward_sequence, lif_step, spike_generate
from spikeckpt.errors import ConfigError, NumericOverflowError, ScheduleError
from spikeckpt.snn import (
    Adjoint,
    MembraneMeanLoss,
    NetworkState,
    OpCounters,
    StoreAll,
    backward_chunk,
    dense_to_events,
    empty_slice,
    sparse_matmul,
    surrogate_grad,
)


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(0, 8, 2, 4)
    with pytest.raises(ConfigError):
        NetworkConfig(2, 8, 2, 4, virtual_tiles=3)
    with pytest.raises(ConfigError):
        NetworkConfig(2, 8, 2, 4, decay_v=1.0)
    with pytest.raises(ConfigError):
        NetworkConfig(2, 8, 2, 4, dtype="float16")
    cfg = NetworkConfig(3, 8, 2, 4)
    assert cfg.n_inputs == 8
    assert cfg.state_slots == 2 * 3 * 2 * 8


def test_zero_state_zero_input_is_a_fixed_point(tiny):
    w = Weights.init(tiny)
    s0 = NetworkState.zeros(tiny)
    s1 = lif_step(s0, np.zeros((0, 2), np.int32), empty_slice(2), w, tiny)
    assert s1.bitwise_equal(s0)
    assert all(len(ev) == 0 for ev in spike_generate(s1, tiny))


def test_pure_decay_without_input(tiny):
    w = Weights.zeros(tiny)
    v = [np.ones((4, 8), np.float32) for _ in range(2)]
    i = [np.zeros((4, 8), np.float32) for _ in range(2)]
    s1 = lif_step(NetworkState(tuple(v), tuple(i)), np.zeros((0, 2), np.int32), empty_slice(2), w, tiny)
    for a in s1.v:
        assert (a == np.float32(0.9)).all()


def test_lif_step_matches_dense_oracle():
    cfg = NetworkConfig(2, 4, 2, 1, seed=7)
    rng = np.random.default_rng(7)
    w = Weights.init(cfg)
    v = [rng.standard_normal((2, 4)).astype(np.float32) for _ in range(2)]
    i = [rng.standard_normal((2, 4)).astype(np.float32) for _ in range(2)]
    x = rng.random((2, 4)) < 0.5
    s = [rng.random((2, 4)) < 0.5 for _ in range(2)]
    out = lif_step(NetworkState(tuple(v), tuple(i)), dense_to_events(x), [dense_to_events(m) for m in s], w, cfg)
    ref_v, ref_i = dense_lif_step(v, i, x.astype(np.float32), [m.astype(np.float32) for m in s], w.w_in, w.w_rec, cfg)
    for a, b in zip(out.v + out.i, ref_v + ref_i):
        assert bits_equal(a, b)


def test_sparse_matmul_bitwise_against_dense_loop():
    rng = np.random.default_rng(5)
    for _ in range(50):
        B, K, P = rng.integers(1, 6, size=3) * 3
        mask = rng.random((B, K)) < rng.random()
        w = rng.standard_normal((K, P)).astype(np.float32)
        ref = np.zeros((B, P), np.float32)
        for b in range(B):
            for k in range(K):
                if mask[b, k]:
                    ref[b] += w[k]
        assert bits_equal(sparse_matmul(dense_to_events(mask), w, B), ref)


def test_spike_generate_matches_brute_force_scan_including_boundary():
    cfg = NetworkConfig(2, 7, 4, 1)
    rng = np.random.default_rng(11)
    v = [rng.uniform(0, 2, (4, 7)).astype(np.float32) for _ in range(2)]
    v[0][1, 3] = np.float32(1.0)  # exactly at threshold fires
    v[1][2, 2] = np.nextafter(np.float32(1.0), np.float32(0))
    state = NetworkState(tuple(v), tuple(np.zeros_like(a) for a in v))
    ctr = OpCounters()
    out = spike_generate(state, cfg, ctr)
    for l in range(2):
        assert [tuple(e) for e in out[l]] == threshold_scan(v[l], 1.0)
    assert (1, 3) in [tuple(e) for e in out[0]]
    assert (2, 2) not in [tuple(e) for e in out[1]]
    assert ctr.spike_gen_calls == 1 and ctr.encode_calls == 1


def test_surrogate_values():
    assert surrogate_grad(0.0, 10.0) == 1.0
    assert surrogate_grad(1.0, 1.0) == 0.25
    assert surrogate_grad(-1.0, 1.0) == 0.25
    xs = np.linspace(-3, 3, 61)
    g = surrogate_grad(xs, 10.0)
    assert np.allclose(g, g[::-1])
    assert (g > 0).all()


def test_all_below_threshold_emits_nothing():
    cfg = NetworkConfig(2, 5, 3, 1)
    v = tuple(np.full((3, 5), 0.999, np.float32) for _ in range(2))
    assert all(len(ev) == 0 for ev in spike_generate(NetworkState(v, v), cfg))


def test_overflow_raises():
    cfg = NetworkConfig(1, 2, 1, 1)
    w = Weights(
        [np.full((2, 2), np.finfo(np.float32).max, np.float32)],
        [np.full((2, 2), np.finfo(np.float32).max, np.float32)],
    )
    state = NetworkState.zeros(cfg)
    with np.errstate(over="ignore"), pytest.raises(NumericOverflowError) as exc:
        lif_step(state, np.array([[0, 0], [0, 1]], np.int32), [np.array([[0, 0], [0, 1]], np.int32)], w, cfg, t=5)
    assert exc.value.timestep == 5


def test_forward_is_deterministic(tiny):
    w, x, _ = make_instance(tiny)
    a = forward_sequence(w, x, tiny)
    b = forward_sequence(w, x, tiny)
    assert a[0].digest() == b[0].digest()
    assert a[1].digest() == b[1].digest()


def test_replay_from_cache_reproduces_states(tiny):
    w, x, _ = make_instance(tiny)
    rec = StoreAll()
    _, spikes, _ = forward_sequence(w, x, tiny, rec)
    spikes.validate()
    from spikeckpt.engine import recompute_chunk

    ctr = OpCounters()
    out = recompute_chunk(rec.states[8], spikes, x, 8, 20, w, tiny, counters=ctr)
    assert sorted(out) == list(range(9, 21))
    assert all(out[t].bitwise_equal(rec.states[t]) for t in out)
    assert ctr.lif_steps == 12 and ctr.spike_gen_calls == 0 and ctr.encode_calls == 0


def test_single_step_sequence():
    cfg = NetworkConfig(2, 4, 2, 1)
    w, x, tg = make_instance(cfg, rate=1.0)
    value, grads, spikes, states = bptt(w, x, cfg, SpikeCountLoss(tg))
    assert len(spikes) == 1 and sorted(states) == [0, 1]
    assert np.isfinite(value) and grads.all_finite()


def test_zero_loss_when_targets_are_realised(tiny):
    # a batch of one makes the realised per-neuron rate a valid target
    cfg = tiny.with_(batch_size=1)
    w1, x1, _ = make_instance(cfg, rate=0.5)
    _, sp1, _ = forward_sequence(w1, x1, cfg)
    c1 = np.zeros(8)
    for sl in sp1:
        for _, n in sl[-1]:
            c1[n] += 1
    value, grads, _, _ = bptt(w1, x1, cfg, SpikeCountLoss(c1 / cfg.seq_len))
    assert value == 0.0
    assert all(not g.any() for _, g in grads.named())


def test_zero_incoming_adjoint_gives_zero_gradients(tiny):
    class NoLoss(MembraneMeanLoss):
        def membrane_adjoint(self, t, layer):
            return None

    w, x, _ = make_instance(tiny)
    rec = StoreAll()
    loss = NoLoss()
    _, spikes, _ = forward_sequence(w, x, tiny, rec, loss)
    grads, carry = backward_chunk(rec.states, spikes, w, tiny, Adjoint.zeros(tiny), inputs=x, t0=0, t1=32, loss=loss)
    assert all(not g.any() for _, g in grads.named())
    assert all(not a.any() for a in carry.v + carry.i + carry.s)


def test_backward_chunk_needs_its_states(tiny):
    w, x, tg = make_instance(tiny)
    rec = StoreAll()
    loss = SpikeCountLoss(tg)
    _, spikes, _ = forward_sequence(w, x, tiny, rec, loss)
    del rec.states[5]
    with pytest.raises(ScheduleError):
        backward_chunk(rec.states, spikes, w, tiny, Adjoint.zeros(tiny), inputs=x, t0=0, t1=8, loss=loss)


def test_chunked_backward_is_bitwise_equal_to_one_pass(tiny):
    w, x, tg = make_instance(tiny)
    value, ref, spikes, states = bptt(w, x, tiny, SpikeCountLoss(tg))
    loss = SpikeCountLoss(tg)
    forward_sequence(w, x, tiny, None, loss)
    carry = Adjoint.zeros(tiny)
    grads = None
    for t0, t1 in ((25, 32), (9, 25), (0, 9)):
        grads, carry = backward_chunk(states, spikes, w, tiny, carry, inputs=x, t0=t0, t1=t1, loss=loss, grads=grads)
    assert grads.first_difference(ref) is None


def test_gradient_matches_finite_differences():
    # with an unreachable threshold nothing fires and the loss is smooth in the weights
    cfg = NetworkConfig(2, 4, 3, 10, n_inputs=3, threshold=1e6, dtype="float64", seed=2)
    w, x, _ = make_instance(cfg, rate=0.5)
    _, grads, _, _ = bptt(w, x, cfg, MembraneMeanLoss())
    eps = 1e-6
    for (name, p), (_, g) in zip(w.named(), grads.named()):
        for idx in [(0, 0), (1, 2), (p.shape[0] - 1, 3)]:
            orig = p[idx]
            p[idx] = orig + eps
            up = forward_sequence(w, x, cfg, loss=MembraneMeanLoss())[2]
            p[idx] = orig - eps
            down = forward_sequence(w, x, cfg, loss=MembraneMeanLoss())[2]
            p[idx] = orig
            fd = (up - down) / (2 * eps)
            assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-12), name


def test_surrogate_gradients_match_tape_oracle():
    for seed in range(4):
        cfg = NetworkConfig(3, 6, 3, 20, n_inputs=5, dtype="float64", seed=seed)
        w, x, tg = make_instance(cfg, rate=0.4)
        value, grads, _, _ = bptt(w, x, cfg, SpikeCountLoss(tg))
        ref_loss, gi, gr = tape_bptt(w, x, cfg, tg)
        assert value == pytest.approx(ref_loss, rel=1e-12)
        for a, b in zip(grads.w_in + grads.w_rec, gi + gr):
            np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-15)


def test_frozen_oracle_values():
    cfg = NetworkConfig(2, 5, 2, 12, n_inputs=4, dtype="float64", seed=3)
    w, x, tg = make_instance(cfg, rate=0.5)
    value, grads, _, _ = bptt(w, x, cfg, SpikeCountLoss(tg))
    assert value == pytest.approx(0.05928351942266595, rel=1e-12)
    np.testing.assert_allclose(
        grads.w_in[0][0, :3], [-0.0006682933038151664, 0.00019602259636615412, -0.0027691551448174065], rtol=1e-10
    )
    np.testing.assert_allclose(
        grads.w_rec[1][2, :3], [-3.5195871028871525e-05, -0.0012632269498453821, 0.014150539921068812], rtol=1e-10
    )


def test_checksum_is_order_free_xor_and_content_sensitive(tiny):
    import hashlib

    w = Weights.init(tiny)
    acc = 0
    for name, a in reversed(list(w.named())):
        acc ^= int.from_bytes(hashlib.sha256(name.encode() + b"float32" + a.tobytes()).digest(), "big")
    assert w.checksum() == f"{acc:064x}"
    other = w.copy()
    other.w_rec[1][3, 4] = np.nextafter(other.w_rec[1][3, 4], np.float32(10))
    assert other.checksum() != w.checksum()
    assert w.first_difference(other) == ("w_rec[1]", (3, 4))


def test_spike_record_round_trip():
    rng = np.random.default_rng(0)
    masks = [rng.random((3, 5)) < 0.3 for _ in range(4)]
    rec = SpikeRecord(1, [[dense_to_events(m)] for m in masks])
    rec.validate()
    for t, m in enumerate(masks):
        assert (rec.to_dense(t, 0, (3, 5)) == dense_spikes(rec[t][0], (3, 5), np.float32)).all()
        assert (rec.to_dense(t, 0, (3, 5)) == m).all()
    assert rec.num_events() == sum(int(m.sum()) for m in masks)
    assert rec.copy().digest() == rec.digest()
