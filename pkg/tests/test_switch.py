import numpy as np
import pytest

from netopt import wire
from netopt.fabric import SimFabric, SwitchNode
from netopt.kernel import SimKernel
from netopt.switch import OPTIMIZER, Switch, SwitchConfig, WindowViolation, worker_name
from netopt.wire import Packet, PacketKind

K = PacketKind


def grad(worker, seq, values):
    return Packet.data(K.GRAD_DATA, worker, seq, values)


def test_single_worker_passthrough():
    sw = Switch(SwitchConfig(1))
    out = sw.on_grad_packet(grad(0, 0, [1, 2, 3]))
    assert len(out) == 1 and out[0].values.tolist() == [1, 2, 3]


def test_two_workers_sum_on_completion():
    sw = Switch(SwitchConfig(2))
    assert sw.on_grad_packet(grad(0, 0, [3])) == []
    out = sw.on_grad_packet(grad(1, 0, [5]))
    assert [p.values.tolist() for p in out] == [[8]]
    assert out[0].worker_id == wire.OPTIMIZER_ID


def test_duplicate_before_completion_absorbed():
    sw = Switch(SwitchConfig(2))
    emitted = []
    for p in (grad(0, 0, [3]), grad(0, 0, [3]), grad(1, 0, [5])):
        emitted += sw.on_grad_packet(p)
    assert [p.values.tolist() for p in emitted] == [[8]]
    assert sw.metrics["duplicates_absorbed"] == 1


def test_duplicate_after_emission_reemits_shadow():
    sw = Switch(SwitchConfig(2, window=4))
    sw.on_grad_packet(grad(0, 0, [3]))
    first = sw.on_grad_packet(grad(1, 0, [5]))
    again = sw.on_grad_packet(grad(1, 0, [5]))
    assert wire.encode(first[0]) == wire.encode(again[0])


def test_window_violation():
    sw = Switch(SwitchConfig(1, window=4))
    with pytest.raises(WindowViolation):
        sw.on_grad_packet(grad(0, 4, [1]))


def test_zero_workers_rejected():
    with pytest.raises(ValueError):
        SwitchConfig(0)
    with pytest.raises(ValueError):
        SwitchConfig(2, leader_worker=2)


def _interleave(rng, n, seqs, window, payloads, dup_prob=0.0):
    """Feed per-worker in-order streams in a random interleaving that respects
    the window; optionally re-send an earlier packet as a duplicate."""
    sw = Switch(SwitchConfig(n, window=window, elems_per_packet=8))
    nxt = [0] * n
    out: dict[int, list] = {}
    while min(nxt) < seqs:
        ok = [i for i in range(n) if nxt[i] < seqs and nxt[i] <= sw.emitted_high + window]
        i = int(rng.choice(ok))
        s = nxt[i]
        if dup_prob and s > 0 and rng.random() < dup_prob:
            lo = max(0, sw.emitted_high + 1 - window, s - window)
            d = int(rng.integers(lo, s))
            for p in sw.on_grad_packet(grad(i, d, payloads[i][d])):
                out.setdefault(p.seq, []).append(wire.encode(p))
        for p in sw.on_grad_packet(grad(i, s, payloads[i][s])):
            out.setdefault(p.seq, []).append(wire.encode(p))
        nxt[i] += 1
    return sw, out


def test_random_interleaving_matches_sum_oracle():
    rng = np.random.default_rng(11)
    n, seqs, window = 4, 256, 16
    payloads = rng.integers(-2**20, 2**20, (n, seqs, 8)).astype(np.int32)
    _, out = _interleave(rng, n, seqs, window, payloads)
    assert sorted(out) == list(range(seqs))
    for s, emitted in out.items():
        assert len(emitted) == 1
        expected = payloads[:, s, :].astype(np.int64).sum(axis=0)
        assert wire.decode(emitted[0]).values.tolist() == expected.tolist()


def test_duplicates_reemit_identically():
    rng = np.random.default_rng(12)
    n, seqs, window = 3, 300, 8
    payloads = rng.integers(-1000, 1000, (n, seqs, 8)).astype(np.int32)
    sw, out = _interleave(rng, n, seqs, window, payloads, dup_prob=0.3)
    assert sorted(out) == list(range(seqs))
    for s, emitted in out.items():
        assert len(set(emitted)) == 1
        assert wire.decode(emitted[0]).values.tolist() == payloads[:, s, :].sum(axis=0).tolist()
    assert sw.metrics["duplicates_absorbed"] > 0


def test_idempotence_by_trace_replay():
    rng = np.random.default_rng(13)
    trace = [(0, 0, [3]), (0, 0, [3]), (1, 0, [5]), (1, 1, [1]), (0, 1, [2]), (0, 1, [2])]
    for _ in range(20):
        order = [trace[i] for i in rng.permutation(len(trace))]
        sw = Switch(SwitchConfig(2))
        emitted = [p for w, s, v in order for p in sw.on_grad_packet(grad(w, s, v))]
        firsts = {}
        for p in emitted:
            firsts.setdefault(p.seq, p.values.tolist())
        assert firsts == {0: [8], 1: [3]}
        assert all(p.values.tolist() == firsts[p.seq] for p in emitted)
    assert sw.metrics["aggregates_emitted"] == 2


def test_param_broadcast_is_byte_identical():
    sw = Switch(SwitchConfig(3))
    raw = wire.encode(Packet.data(K.PARAM_DATA, wire.OPTIMIZER_ID, 9, [1, 2]))
    out = sw.handle(raw)
    assert [d for d, _ in out] == [worker_name(i) for i in range(3)]
    assert all(b == raw for _, b in out)
    assert len(sw.on_param_packet(wire.decode(raw))) == 3


def test_grad_heartbeat_broadcast():
    sw = Switch(SwitchConfig(3))
    raw = wire.encode(Packet.heartbeat(K.GRAD_HEARTBEAT, wire.OPTIMIZER_ID, 4, 10))
    out = sw.handle(raw)
    assert len(out) == 3 and all(b == raw for _, b in out)
    assert len(sw.on_grad_heartbeat(wire.decode(raw))) == 3


def test_param_stream_fanout_over_fabric():
    kernel = SimKernel()
    fabric = SimFabric(kernel, seed=4)
    SwitchNode(fabric, Switch(SwitchConfig(4)))
    got = {worker_name(i): [] for i in range(4)}
    for name in got:
        fabric.attach(name, lambda src, data, name=name: got[name].append(data))
    fabric.attach(OPTIMIZER, lambda src, data: None)
    rng = np.random.default_rng(4)
    sent = [wire.encode(Packet.data(K.PARAM_DATA, wire.OPTIMIZER_ID, s,
                                    rng.integers(-99, 99, 5))) for s in range(100)]
    for raw in sent:
        fabric.send(OPTIMIZER, "switch", raw)
    kernel.run(lambda: all(len(v) == 100 for v in got.values()))
    assert all(v == sent for v in got.values())


def hb(worker, ack, credit):
    return Packet.heartbeat(K.PARAM_HEARTBEAT, worker, ack, credit)


def test_heartbeat_min_examples():
    sw = Switch(SwitchConfig(3))
    assert sw.on_param_heartbeat(hb(1, 5, 64)) == []
    assert sw.on_param_heartbeat(hb(2, 5, 64)) == []
    out = sw.on_param_heartbeat(hb(0, 5, 64))
    assert [(p.ack, p.credit) for p in out] == [(5, 64)]

    sw = Switch(SwitchConfig(3))
    for w, a, c in ((1, 7, 80), (2, 6, 90), (0, 5, 100)):
        out = sw.on_param_heartbeat(hb(w, a, c))
    assert [(p.ack, p.credit) for p in out] == [(5, 80)]


def test_no_emission_until_all_workers_seen():
    sw = Switch(SwitchConfig(2))
    assert sw.on_param_heartbeat(hb(0, 1, 10)) == []
    assert sw.on_param_heartbeat(hb(1, 1, 10)) == []  # not the leader
    assert len(sw.on_param_heartbeat(hb(0, 1, 10))) == 1


def test_heartbeat_interleavings_match_min_oracle():
    rng = np.random.default_rng(99)
    n = 5
    sw = Switch(SwitchConfig(n))
    table: dict[int, tuple[int, int]] = {}
    state = [[0, 10] for _ in range(n)]
    last_ack = -1
    emissions = 0
    for _ in range(10_000):
        w = int(rng.integers(n))
        state[w][0] += int(rng.integers(0, 3))
        state[w][1] = max(state[w][1], state[w][0] + int(rng.integers(0, 20)))
        ack, credit = state[w]
        table[w] = (ack, credit)
        out = sw.on_param_heartbeat(hb(w, ack, credit))
        if out:
            emissions += 1
            assert len(table) == n and w == 0
            assert (out[0].ack, out[0].credit) == (min(a for a, _ in table.values()),
                                                   min(c for _, c in table.values()))
            assert out[0].ack >= last_ack
            last_ack = out[0].ack
        else:
            assert w != 0 or len(table) < n
    assert emissions > 1000


def test_malformed_bytes_counted():
    sw = Switch(SwitchConfig(2))
    assert sw.handle(b"\x00\x01") == []
    assert sw.metrics["malformed"] == 1
