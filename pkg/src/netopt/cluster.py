"""Assemble switch, optimizer and workers on a sim fabric or UDP sockets."""

from __future__ import annotations

import csv
import logging
import os
import signal
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import quant, wire
from .access import AccessModule, verbatim
from .config import RunConfig
from .fabric import (LinkParams, NicNode, SimFabric, SwitchNode, TrafficCounters, UdpNet,
                     read_manifest, traffic_ratio, write_manifest)
from .kernel import BaseKernel, RealtimeKernel, SimKernel
from .optimizer import AdamConfig, ModelStateStore, OptimizerNode
from .optimizer.store import QUEUES
from .switch import OPTIMIZER, Switch, SwitchConfig, worker_name
from .transport import TimingConfig, TransportEndpoint
from .wire import PacketKind
from .worker import Dataset, ModelConfig, Worker, init_params

log = logging.getLogger(__name__)

METRIC_FIELDS = [
    "round", "loss", "wall_ticks", "fwd_ticks", "bwd_ticks",
    "push_elems_per_worker", "pull_elems_per_worker", "optimizer_push_elems",
    "model_elems", "ring_reference_elems", "traffic_ratio",
    "retransmissions", "packets_lost", "clamp_count",
]


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(cfg["model.layers"], cfg["model.hidden"])


def quant_configs(cfg: RunConfig) -> tuple[quant.QuantConfig, quant.QuantConfig]:
    """``(param, grad)`` formats; parameters are never summed, so N=1 bounds them."""
    f = cfg["quant.frac_bits"]
    return quant.QuantConfig(f, 1), quant.QuantConfig(f, cfg["run.workers"])


def adam_config(cfg: RunConfig) -> AdamConfig:
    return AdamConfig(cfg["opt.lr"], cfg["opt.beta1"], cfg["opt.beta2"], cfg["opt.eps"])


def timing_config(cfg: RunConfig) -> TimingConfig:
    return TimingConfig(
        window=cfg["transport.window"],
        heartbeat_divisor=cfg["transport.heartbeat_divisor"],
        service_ticks=cfg["fabric.service_ticks"],
        loss_detect_period=cfg.loss_detect_period,
        resend_stagger_unit=cfg["transport.resend_stagger_unit"],
    )


def stall_limit(cfg: RunConfig) -> float:
    t = timing_config(cfg)
    worst = t.loss_detect_period + cfg["run.workers"] * t.resend_stagger_unit + cfg.round_trip_ticks
    return cfg["fabric.stall_factor"] * worst + 10 * cfg["model.compute_ticks"]


def initial_store(cfg: RunConfig, directory: Path) -> ModelStateStore:
    model = model_config(cfg)
    params = init_params(model, cfg["run.seed"], cfg["store.init"])
    return ModelStateStore.create(directory, model.counts, params)


def make_worker_nic(kernel: BaseKernel, net, cfg: RunConfig, i: int) -> NicNode:
    timing = timing_config(cfg)
    param_q, grad_q = quant_configs(cfg)
    ep = TransportEndpoint(i, PacketKind.GRAD_DATA, PacketKind.PARAM_HEARTBEAT, timing,
                           lambda: kernel.now, stagger_index=i)
    access = AccessModule(
        ep,
        encode=lambda chunk: quant.to_fixed(chunk, grad_q),
        decode=lambda ints: quant.from_fixed(ints, param_q),
        queue_depth=cfg["access.queue_depth"],
        max_message_elems=cfg["access.max_message_elems"],
        elems_per_packet=cfg["wire.elems_per_packet"],
    )
    return NicNode(kernel, net, worker_name(i), ep, access,
                   elems_per_packet=cfg["wire.elems_per_packet"])


def make_optimizer_nic(kernel: BaseKernel, net, cfg: RunConfig) -> NicNode:
    timing = timing_config(cfg)
    _, grad_q = quant_configs(cfg)
    if timing.window > cfg["switch.window"]:
        raise ValueError("optimizer RX capacity must not exceed the switch window")
    ep = TransportEndpoint(wire.OPTIMIZER_ID, PacketKind.PARAM_DATA, PacketKind.GRAD_HEARTBEAT,
                           timing, lambda: kernel.now, stagger_index=0)
    access = AccessModule(
        ep,
        encode=verbatim,
        decode=lambda ints: quant.from_fixed(ints, grad_q),
        queue_depth=cfg["access.queue_depth"],
        max_message_elems=cfg["access.max_message_elems"],
        elems_per_packet=cfg["wire.elems_per_packet"],
    )
    return NicNode(kernel, net, OPTIMIZER, ep, access,
                   elems_per_packet=cfg["wire.elems_per_packet"])


def make_switch(net, cfg: RunConfig) -> SwitchNode:
    return SwitchNode(net, Switch(SwitchConfig(cfg["run.workers"], cfg["switch.window"],
                                               cfg["switch.leader"], cfg["wire.elems_per_packet"])))


def make_optimizer(kernel: BaseKernel, nic: NicNode, store: ModelStateStore,
                   cfg: RunConfig) -> OptimizerNode:
    param_q, grad_q = quant_configs(cfg)
    tick = _tick_seconds(cfg)
    store.attach(kernel, cfg["store.rate_limit_bytes_per_sec"] * tick,
                 queue_rates={q: cfg[f"store.{q}_bytes_per_sec"] * tick for q in QUEUES})
    return OptimizerNode(kernel, nic, store, adam_config(cfg), param_q, grad_q,
                         pipeline=cfg["opt.pipeline"], buffer_layers=cfg["opt.buffer_layers"],
                         update_ticks_per_elem=cfg["opt.update_ticks_per_elem"])


def make_dataset(cfg: RunConfig) -> Dataset:
    return Dataset(cfg["model.hidden"], cfg.data_seed, cfg["data.samples"], cfg["data.targets"])


def make_worker(kernel: BaseKernel, nic: NicNode, cfg: RunConfig, i: int,
                data: Dataset | None = None) -> Worker:
    model = model_config(cfg)
    data = data or make_dataset(cfg)
    return Worker(kernel, nic, i, model, data, cfg["run.workers"], cfg["data.batch_per_worker"],
                  compute_ticks=cfg["model.compute_ticks"], overlap=cfg["worker.overlap"],
                  grad_source=cfg["model.grad_source"], grad_seed=cfg.data_seed)


def _tick_seconds(cfg: RunConfig) -> float:
    return cfg["fabric.tick_seconds"] if cfg["run.mode"] == "sim" else cfg["fabric.udp_tick_seconds"]


# -- sim mode ----------------------------------------------------------------------


@dataclass
class RunResult:
    rows: list[dict]
    store_dir: Path
    extra: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.rows]


class SimCluster:
    """Every role in one process on a deterministic fabric."""

    def __init__(self, cfg: RunConfig, store_dir: Path):
        self.cfg = cfg
        self.kernel = SimKernel()
        self.fabric = SimFabric(
            self.kernel, seed=cfg["run.seed"], trace=cfg["fabric.trace"],
            default=LinkParams(cfg["fabric.latency"], cfg["fabric.jitter"], cfg["fabric.loss_prob"],
                               cfg["fabric.dup_prob"], cfg["fabric.service_ticks"]))
        self.switch = make_switch(self.fabric, cfg)
        self.store = initial_store(cfg, store_dir)
        self.opt_nic = make_optimizer_nic(self.kernel, self.fabric, cfg)
        self.optimizer = make_optimizer(self.kernel, self.opt_nic, self.store, cfg)
        data = make_dataset(cfg)
        self.nics = [make_worker_nic(self.kernel, self.fabric, cfg, i) for i in range(cfg["run.workers"])]
        self.workers = [make_worker(self.kernel, nic, cfg, i, data) for i, nic in enumerate(self.nics)]
        self.snapshots: dict[str, list[TrafficCounters]] = {}
        for w in self.workers:
            w.on_round_end = self._worker_round_end

    def _worker_round_end(self, worker: Worker, r: int) -> None:
        self.snapshots.setdefault(worker_name(worker.id), []).append(
            self.fabric.counters[worker_name(worker.id)].snapshot())

    def run(self) -> RunResult:
        cfg = self.cfg
        rounds = cfg["run.rounds"]
        procs = [self.kernel.spawn(self.optimizer.run(rounds), "optimizer")]
        procs += [self.kernel.spawn(w.run(rounds), f"worker{w.id}") for w in self.workers]
        opt_snaps: list[TrafficCounters] = []
        stats: list[dict] = []
        orig = self.store.set_step

        def set_step(step: int) -> None:
            orig(step)
            opt_snaps.append(self.fabric.counters[OPTIMIZER].snapshot())
            stats.append(self.totals())

        self.store.set_step = set_step
        self.kernel.run(lambda: all(p.done for p in procs), stall_limit=stall_limit(cfg))
        for p in procs:
            p.result()
        rows = build_rows(cfg, self.optimizer, [w.losses for w in self.workers],
                          [self.snapshots[worker_name(w.id)] for w in self.workers],
                          opt_snaps, stats)
        return RunResult(rows, self.store.dir, {"cluster": self})

    def totals(self) -> dict:
        nics = [self.opt_nic, *self.nics]
        return {
            "retransmissions": sum(n.endpoint.metrics["retransmissions"] for n in nics),
            "clamp_count": self.optimizer.clamp_count + sum(n.access.metrics["clamp_count"] for n in self.nics),
            "packets_lost": sum(c.packets_lost_injected for c in self.fabric.counters.values()),
        }


def _deltas(snaps: list) -> list:
    out, prev = [], None
    for s in snaps:
        if isinstance(s, dict):
            out.append(s if prev is None else {k: v - prev[k] for k, v in s.items()})
        else:
            out.append(s if prev is None else s - prev)
        prev = s
    return out


def build_rows(cfg: RunConfig, optimizer: OptimizerNode, losses: list[list[float]],
               worker_snaps: list[list[TrafficCounters]], opt_snaps: list[TrafficCounters],
               stats: list[dict]) -> list[dict]:
    """Per-round metric rows from cumulative snapshots taken at round ends."""
    n = cfg["run.workers"]
    model_elems = model_config(cfg).total
    w_deltas = [_deltas(s) for s in worker_snaps]
    o_deltas = _deltas(opt_snaps)
    s_deltas = _deltas(stats)
    ratio = traffic_ratio(n)
    rows = []
    for r in range(cfg["run.rounds"]):
        loss = 0.0
        for wl in losses:
            loss += wl[r]
        ticks = optimizer.round_ticks[r]
        rows.append({
            "round": r,
            "loss": loss,
            "wall_ticks": ticks["bwd_end"] - ticks["fwd_start"],
            "fwd_ticks": ticks["fwd_end"] - ticks["fwd_start"],
            "bwd_ticks": ticks["bwd_end"] - ticks["bwd_start"],
            # one gradient push and two parameter pulls per worker per round
            "push_elems_per_worker": sum(d[r].data_elems_tx for d in w_deltas) / n,
            "pull_elems_per_worker": sum(d[r].data_elems_rx for d in w_deltas) / (2 * n),
            "optimizer_push_elems": o_deltas[r].data_elems_tx / 2,
            "model_elems": model_elems,
            "ring_reference_elems": 2 * (n - 1) * model_elems / n,
            "traffic_ratio": "" if ratio is None else float(ratio),
            **s_deltas[r],
        })
    return rows


def write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def run_sim(cfg: RunConfig, out: Path) -> RunResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    cluster = SimCluster(cfg, out / "final_state")
    try:
        result = cluster.run()
    finally:
        if cfg["fabric.trace"]:
            cluster.fabric.dump_trace(out / "trace.txt")
    write_metrics(out / "metrics.csv", result.rows)
    return result


# -- UDP mode ------------------------------------------------------------------------


def free_ports(count: int) -> list[int]:
    socks, ports = [], []
    for _ in range(count):
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def run_udp(cfg: RunConfig, out: Path, timeout: float = 300.0) -> RunResult:
    """Launch switch, optimizer and workers as separate processes on loopback."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg["run.workers"]
    roles = ["switch", OPTIMIZER] + [worker_name(i) for i in range(n)]
    manifest = out / "cluster.txt"
    if cfg["fabric.manifest"]:
        manifest = Path(cfg["fabric.manifest"])
    else:
        write_manifest(manifest, {r: ("127.0.0.1", p) for r, p in zip(roles, free_ports(len(roles)))})
    cfg_path = out / "config.txt"
    cfg_path.write_text(cfg.dumps())
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[1])
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")

    def launch(role: str, index: int = 0) -> subprocess.Popen:
        cmd = [sys.executable, "-m", "netopt", "node", "--role", role, "--index", str(index),
               "--config", str(cfg_path), "--manifest", str(manifest), "--out", str(out)]
        return subprocess.Popen(cmd, env=env)

    procs = {"switch": launch("switch")}
    procs.update({worker_name(i): launch("worker", i) for i in range(n)})
    procs[OPTIMIZER] = launch("optimizer")
    deadline = time.monotonic() + timeout
    try:
        done = [out / f"{worker_name(i)}.csv" for i in range(n)]
        while True:
            for name, p in procs.items():
                code = p.poll()
                if code is not None and code != 0:
                    raise RuntimeError(f"{name} exited with status {code}")
            if procs[OPTIMIZER].poll() == 0 and all(d.exists() for d in done):
                break
            if time.monotonic() > deadline:
                raise TimeoutError("udp run did not finish in time")
            time.sleep(0.05)
    finally:
        for p in procs.values():
            if p.poll() is None:
                p.send_signal(signal.SIGTERM)
        for p in procs.values():
            try:
                p.wait(5)
            except subprocess.TimeoutExpired:
                p.kill()
    rows = assemble_udp_rows(cfg, out)
    write_metrics(out / "metrics.csv", rows)
    return RunResult(rows, out / "final_state")


def assemble_udp_rows(cfg: RunConfig, out: Path) -> list[dict]:
    n = cfg["run.workers"]
    opt = read_metrics(out / "optimizer.csv")
    workers = [read_metrics(out / f"{worker_name(i)}.csv") for i in range(n)]
    model_elems = model_config(cfg).total
    ratio = traffic_ratio(n)
    rows = []
    for r, orow in enumerate(opt):
        loss = 0.0
        for w in workers:
            loss += float(w[r]["loss"])
        rows.append({
            "round": r,
            "loss": loss,
            "wall_ticks": float(orow["wall_ticks"]),
            "fwd_ticks": float(orow["fwd_ticks"]),
            "bwd_ticks": float(orow["bwd_ticks"]),
            "push_elems_per_worker": sum(int(w[r]["push_elems"]) for w in workers) / n,
            "pull_elems_per_worker": sum(int(w[r]["pull_elems"]) for w in workers) / n,
            "optimizer_push_elems": int(orow["push_elems"]),
            "model_elems": model_elems,
            "ring_reference_elems": 2 * (n - 1) * model_elems / n,
            "traffic_ratio": "" if ratio is None else float(ratio),
            "retransmissions": int(orow["retransmissions"]) + sum(int(w[r]["retransmissions"]) for w in workers),
            "packets_lost": 0,
            "clamp_count": int(orow["clamp_count"]) + sum(int(w[r]["clamp_count"]) for w in workers),
        })
    return rows


def run_udp_node(cfg: RunConfig, role: str, index: int, manifest_path: Path, out: Path) -> None:
    """Entry point of one UDP process; returns when the role's work is done."""
    out = Path(out)
    manifest = read_manifest(manifest_path)
    kernel = RealtimeKernel(cfg["fabric.udp_tick_seconds"])
    signal.signal(signal.SIGTERM, lambda *_: sys.exit(0))
    if role == "switch":
        net = UdpNet(kernel, "switch", manifest)
        make_switch(net, cfg)
        kernel.run(lambda: False)
        return
    if role == "optimizer":
        net = UdpNet(kernel, OPTIMIZER, manifest)
        nic = make_optimizer_nic(kernel, net, cfg)
        store = initial_store(cfg, out / "final_state")
        node = make_optimizer(kernel, nic, store, cfg)
        rows = []
        last = [TrafficCounters(), 0]

        def on_step(step: int, orig=store.set_step) -> None:
            orig(step)
            r = len(rows)
            t = node.round_ticks[r]
            c = nic.counters.snapshot()
            retrans = nic.endpoint.metrics["retransmissions"]
            rows.append({
                "round": r,
                "wall_ticks": t["bwd_end"] if "bwd_end" in t else kernel.now,
                "fwd_ticks": t["fwd_end"] - t["fwd_start"],
                "bwd_ticks": kernel.now - t["bwd_start"],
                "push_elems": (c - last[0]).data_elems_tx // 2,
                "retransmissions": retrans - last[1],
                "clamp_count": node.clamp_count,
            })
            rows[-1]["wall_ticks"] = kernel.now - t["fwd_start"]
            last[0], last[1] = c, retrans

        store.set_step = on_step
        proc = kernel.spawn(node.run(cfg["run.rounds"]), "optimizer")
        kernel.run(lambda: proc.done)
        proc.result()
        _write_rows(out / "optimizer.csv", rows)
        return
    if role == "worker":
        name = worker_name(index)
        net = UdpNet(kernel, name, manifest)
        nic = make_worker_nic(kernel, net, cfg, index)
        worker = make_worker(kernel, nic, cfg, index)
        rows = []
        last = [TrafficCounters(), 0, 0]

        def on_round_end(w: Worker, r: int) -> None:
            c = nic.counters.snapshot()
            d = c - last[0]
            retrans = nic.endpoint.metrics["retransmissions"]
            clamps = nic.access.metrics["clamp_count"]
            rows.append({"round": r, "loss": repr(w.losses[r]), "push_elems": d.data_elems_tx,
                         "pull_elems": d.data_elems_rx // 2,
                         "retransmissions": retrans - last[1], "clamp_count": clamps - last[2]})
            last[0], last[1], last[2] = c, retrans, clamps

        worker.on_round_end = on_round_end
        proc = kernel.spawn(worker.run(cfg["run.rounds"]), name)
        kernel.run(lambda: proc.done)
        proc.result()
        tmp = out / f"{name}.csv.tmp"
        _write_rows(tmp, rows)
        tmp.rename(out / f"{name}.csv")
        # Keep heartbeating so peers see our final acks; the launcher stops us.
        kernel.run(lambda: False)
        return
    raise ValueError(f"unknown UDP role {role!r}")


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
