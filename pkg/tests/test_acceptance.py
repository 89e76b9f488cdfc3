"""Acceptance criteria 1-9.  Each test prints one PASS/FAIL line (see conftest)."""

import statistics
import time
from fractions import Fraction

import numpy as np
import pytest

from harness import Loopback
from netopt import cli, quant, wire
from netopt.cluster import SimCluster, model_config, read_metrics, run_sim, run_udp
from netopt.config import RunConfig
from netopt.fabric import ring_reference
from netopt.optimizer import Stage
from netopt.worker import random_grad
from test_wire import FIXTURES, GOLDEN
from test_worker import finite_difference_check

STATE_FILES = ("params.f32", "m.f32", "v.f32", "manifest.txt")


def state_bytes(directory):
    return {name: (directory / name).read_bytes() for name in STATE_FILES}


class Timer:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.limit, f"took {self.elapsed:.1f} s, limit {self.limit} s"


# Criteria 1 and 2 share a small model: 64 rounds x 4 worker counts x 3 fabrics.
# Four 72-element layers (two packets each) span 512 gradient sequence
# numbers, so both pools of the 256-slot switch table get recycled.
RANDOM_GRAD_RUN = {"model.layers": 4, "model.hidden": 8, "run.rounds": 64,
                   "model.grad_source": "random", "run.seed": 17}


@pytest.mark.criterion(1, "aggregation exactness, N in {1,2,4,8}, 64 rounds")
def test_c1_aggregation_exactness(tmp_path):
    with Timer(10):
        for n in (1, 2, 4, 8):
            cfg = RunConfig({**RANDOM_GRAD_RUN, "run.workers": n})
            cluster = SimCluster(cfg, tmp_path / f"n{n}")
            cluster.optimizer.received_grads = []
            cluster.run()
            received = cluster.optimizer.received_grads
            model = model_config(cfg)
            assert len(received) == 64 * model.layers
            _, grad_q = quant.QuantConfig(20, 1), quant.QuantConfig(20, n)
            for r, layer, ints in received:
                total = np.zeros(model.block_size, dtype=np.int64)
                for i in range(n):
                    g = random_grad(cfg.data_seed, r, i, layer, model.block_size)
                    total += quant.to_fixed(g, grad_q)[0]
                assert np.array_equal(ints, total), (n, r, layer)
            assert cluster.switch.switch.emitted_high + 1 >= 2 * cfg["switch.window"]


@pytest.mark.criterion(2, "lossless recovery, loss 0.01/0.05 with dup 0.01")
def test_c2_lossless_recovery(tmp_path):
    with Timer(60):
        for n in (1, 2, 4, 8):
            cfg = RunConfig({**RANDOM_GRAD_RUN, "run.workers": n})
            clean = state_bytes(run_sim(cfg, tmp_path / f"clean{n}").store_dir)
            for loss in (0.01, 0.05):
                lossy_cfg = cfg.updated({"fabric.loss_prob": loss, "fabric.dup_prob": 0.01})
                result = run_sim(lossy_cfg, tmp_path / f"lossy{n}_{loss}")
                assert state_bytes(result.store_dir) == clean, (n, loss)
                assert sum(r["packets_lost"] for r in result.rows) > 0
                assert sum(r["retransmissions"] for r in result.rows) > 0


@pytest.mark.criterion(3, "oracle equivalence, N in {1,2,4,8}, L=4, h=32, 50 rounds")
def test_c3_oracle_equivalence(tmp_path):
    with Timer(60):
        for n in (1, 2, 4, 8):
            common = ["--workers", str(n), "--rounds", "50", "--seed", "3",
                      "--set", "model.layers=4", "--set", "model.hidden=32"]
            assert cli.main(["train", "--out", str(tmp_path / f"t{n}"), *common]) == 0
            assert cli.main(["oracle", "--out", str(tmp_path / f"o{n}"), *common]) == 0
            train = state_bytes(tmp_path / f"t{n}" / "final_state")
            assert train == state_bytes(tmp_path / f"o{n}" / "final_state"), n
            losses = [read_metrics(tmp_path / d / "metrics.csv") for d in (f"t{n}", f"o{n}")]
            assert [r["loss"] for r in losses[0]] == [r["loss"] for r in losses[1]]


@pytest.mark.criterion(4, "traffic: S elements per collective, ratio N/(2(N-1))")
def test_c4_traffic_model(tmp_path):
    for n in (1, 2, 4, 8):
        cfg = RunConfig({"run.workers": n, "run.rounds": 3})
        rows = run_sim(cfg, tmp_path / f"n{n}").rows
        s = model_config(cfg).total
        for row in rows:
            assert row["push_elems_per_worker"] == s
            assert row["pull_elems_per_worker"] == s
            assert row["optimizer_push_elems"] == s
            ring = ring_reference(n, s)
            assert ring == Fraction(2 * (n - 1) * s, n)
            if n == 1:
                assert ring == 0 and row["traffic_ratio"] == ""
            else:
                measured = Fraction(int(row["push_elems_per_worker"])) / ring
                assert measured == Fraction(n, 2 * (n - 1))
                assert row["traffic_ratio"] == float(measured)
    assert Fraction(8, 14) == Fraction(4, 7)


def flow_control_stress(seed=0, n=4, messages=2000, msg_elems=640, window=128, ahead=16):
    """Producers run ahead of consumers that stall on a seeded schedule.

    Every endpoint both sends (up to ``ahead`` messages queued) and receives
    (one message at a time, then sometimes sleeps).  The first transmissions
    alone are ``(n + 1) * messages * msg_elems / 64`` data packets.
    """
    lb = Loopback(n, seed=seed, **{"transport.window": window, "switch.window": window,
                                   "fabric.loss_prob": 0.002, "fabric.dup_prob": 0.01,
                                   "fabric.jitter": 5})

    def stalls(k):
        r = np.random.default_rng([seed, k])
        return [float(r.exponential(600)) if r.random() < 0.1 else 0.0 for _ in range(messages)]

    grads = [np.random.default_rng([seed, 100 + i]).integers(-1000, 1000, msg_elems)
             .astype(np.float32) / 1024 for i in range(n)]
    params = np.arange(msg_elems, dtype=np.int32)
    grad_sum = np.sum([g.astype(np.float64) for g in grads], axis=0)
    param_values = params.astype(np.float32) / 2**20
    exact = [0]

    def producer(nic, payload):
        done = []
        for m in range(messages):
            if m >= ahead:
                yield done[m - ahead]
            done.append(nic.push(payload))
        yield done
        yield nic.wait_drained()

    def consumer(nic, k, expected, dtype):
        sleep = stalls(k)
        for m in range(messages):
            buf = np.empty(msg_elems, dtype=dtype)
            yield nic.pull(buf)
            exact[0] += np.array_equal(buf, expected)
            if sleep[m]:
                yield sleep[m]

    procs = [producer(lb.opt, params), consumer(lb.opt, 99, grad_sum, np.float64)]
    for i, nic in enumerate(lb.workers):
        procs += [producer(nic, grads[i]), consumer(nic, i, param_values, np.float32)]
    lb.run(procs)
    return lb, exact[0]


@pytest.mark.criterion(5, "flow-control safety under stalled consumers, 1e5 packets")
def test_c5_flow_control_safety():
    with Timer(30):
        lb, exact = flow_control_stress()
    nics = [lb.opt, *lb.workers]
    first_tx = sum(n.counters.data_bytes_tx for n in nics) // (4 * wire.ELEMS_PER_PACKET)
    assert first_tx >= 10**5
    assert exact == 5 * 2000
    for nic in nics:
        assert nic.endpoint.metrics["max_rx_occupancy"] <= nic.endpoint.rx.capacity
    # the stalls really did fill the receive rings
    assert max(n.endpoint.metrics["max_rx_occupancy"] for n in nics) == 128
    assert lb.switch.metrics["grad_packets_in"] >= 4 * 2000 * 10
    # completing at all means no WindowViolation was raised at the switch


# Store rates picked so every serialized stage of a layer costs about the same:
# 1056 params x 12 bytes at 1.5e8 B/s is 84.5 ticks for read_states and
# write_states; read_params moves 4 bytes per param, so its queue runs at
# a third of the rate; the update is 0.08 ticks per element.
OVERLAP_RUN = {"run.workers": 2, "run.rounds": 2, "model.layers": 8, "model.hidden": 32,
               "store.rate_limit_bytes_per_sec": 1.5e8, "store.read_params_bytes_per_sec": 5e7,
               "opt.update_ticks_per_elem": 0.08}
TIMED_STAGES = (Stage.READ_PARAMS, Stage.ACCEPT_GRADS, Stage.UPDATE_STATES, Stage.WRITE_STATES)


@pytest.mark.criterion(6, "pipeline overlap: bwd+opt <= 0.8 x serialized, L=8")
def test_c6_pipeline_overlap(tmp_path):
    with Timer(30):
        results = {}
        for pipe in (True, False):
            cfg = RunConfig({**OVERLAP_RUN, "opt.pipeline": pipe})
            results[pipe] = run_sim(cfg, tmp_path / str(pipe))
        serial_opt = results[False].extra["cluster"].optimizer
        means = {s: statistics.mean(serial_opt.stage_ticks[s]) for s in TIMED_STAGES}
        assert max(means.values()) <= 2 * min(means.values()), means
        for fast, slow in zip(results[True].rows, results[False].rows):
            assert fast["bwd_ticks"] <= 0.8 * slow["bwd_ticks"], (fast["bwd_ticks"], slow["bwd_ticks"])
        assert state_bytes(results[True].store_dir) == state_bytes(results[False].store_dir)


@pytest.mark.criterion(7, "quantization round trip <= 2^-21 on 1e6 values, no clamps")
def test_c7_quantization_bound():
    with Timer(5):
        cfg = quant.QuantConfig(20, 8)
        values = np.random.default_rng(77).uniform(-cfg.clamp_bound, cfg.clamp_bound, 10**6)
        values = values[np.abs(values) * cfg.scale <= cfg.max_int]
        assert len(values) > 999_990
        ints, clamps = quant.to_fixed(values, cfg)
        err = np.abs(quant.from_fixed(ints, cfg) - values)
        assert clamps == 0
        assert err.max() <= 2.0 ** (-cfg.frac_bits - 1)


@pytest.mark.criterion(8, "local_grad vs central differences, rel err <= 1e-4, 20 instances")
def test_c8_gradient_correctness():
    with Timer(10):
        worst = max(finite_difference_check(seed, layers=1 + seed % 3, hidden=2 + seed % 4,
                                            batch=1 + seed % 5) for seed in range(20))
        assert worst <= 1e-4, worst


@pytest.mark.criterion(9, "wire fixtures bit-exact; UDP loopback final_state == sim")
def test_c9_wire_stability(tmp_path):
    with Timer(60):
        for name, (packet, expected) in GOLDEN.items():
            raw = bytes.fromhex((FIXTURES / f"{name}.hex").read_text().strip())
            assert raw.hex() == expected
            assert wire.encode(packet) == raw and wire.decode(raw) == packet
        cfg = RunConfig({"run.workers": 2, "run.rounds": 3, "run.seed": 5})
        sim = run_sim(cfg, tmp_path / "sim")
        udp = run_udp(cfg.updated({"run.mode": "udp"}), tmp_path / "udp", timeout=50)
        assert state_bytes(udp.store_dir) == state_bytes(sim.store_dir)
        assert [r["loss"] for r in udp.rows] == [r["loss"] for r in sim.rows]
