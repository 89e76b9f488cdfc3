"""Programmable-switch state machine.

Gradient packets are summed per sequence number into a table of ``window``
slots, each with two pools (active + shadow).  Parameter packets and
gradient heartbeats are broadcast; parameter heartbeats are min-aggregated.

The switch is a pure event handler: one packet in, a list of
``(destination, bytes)`` out.  It never touches floating point.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import wire
from .wire import Packet, PacketKind

OPTIMIZER = "optimizer"


def worker_name(i: int) -> str:
    return f"worker{i}"


class WindowViolation(RuntimeError):
    """A gradient sequence number fell outside the admissible window."""


@dataclass(frozen=True)
class SwitchConfig:
    num_workers: int
    window: int = 256
    leader_worker: int = 0
    elems_per_packet: int = wire.ELEMS_PER_PACKET

    def __post_init__(self):
        if self.num_workers < 1:
            raise ValueError("switch needs at least one worker")
        if self.num_workers >= wire.OPTIMIZER_ID:
            raise ValueError(f"at most {wire.OPTIMIZER_ID - 1} workers fit the worker_id field")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 <= self.leader_worker < self.num_workers:
            raise ValueError("leader_worker must name a configured worker")


class GradTable:
    """Two pools of ``window`` accumulators; pool = (seq // window) % 2."""

    def __init__(self, num_workers: int, window: int, elems: int):
        self.window = window
        self.full_mask = (1 << num_workers) - 1
        self.data = np.zeros((2, window, elems), dtype=np.int32)
        self.length = np.zeros((2, window), dtype=np.int64)
        self.bitmap = [[0] * window for _ in range(2)]
        self.owner = np.full((2, window), -1, dtype=np.int64)
        self.emitted = np.zeros((2, window), dtype=bool)

    def locate(self, seq: int) -> tuple[int, int]:
        return (seq // self.window) % 2, seq % self.window

    def recycle(self, pool: int, slot: int, seq: int) -> None:
        self.data[pool, slot] = 0
        self.length[pool, slot] = 0
        self.bitmap[pool][slot] = 0
        self.owner[pool, slot] = seq
        self.emitted[pool, slot] = False


class HeartbeatTable:
    def __init__(self, num_workers: int):
        self.ack = [0] * num_workers
        self.credit = [0] * num_workers
        self.seen = [False] * num_workers

    def update(self, worker: int, ack: int, credit: int) -> None:
        # Genuine per-worker heartbeats are monotone; max() makes the table
        # immune to the fabric reordering two of them.
        if self.seen[worker]:
            self.ack[worker] = max(self.ack[worker], ack)
            self.credit[worker] = max(self.credit[worker], credit)
        else:
            self.ack[worker], self.credit[worker] = ack, credit
            self.seen[worker] = True

    @property
    def complete(self) -> bool:
        return all(self.seen)

    def aggregate(self) -> tuple[int, int]:
        return min(self.ack), min(self.credit)


class Switch:
    def __init__(self, cfg: SwitchConfig):
        self.cfg = cfg
        self.grads = GradTable(cfg.num_workers, cfg.window, cfg.elems_per_packet)
        self.heartbeats = HeartbeatTable(cfg.num_workers)
        self.emitted_high = -1
        self.last_ack_out = -1
        self.metrics: Counter = Counter()
        self._workers = [worker_name(i) for i in range(cfg.num_workers)]

    # -- byte-level entry point used by the fabric ------------------------

    def handle(self, data: bytes) -> list[tuple[str, bytes]]:
        try:
            kind = wire.peek_kind(data)
        except wire.WireError:
            self.metrics["malformed"] += 1
            return []
        if kind == PacketKind.PARAM_DATA or kind == PacketKind.GRAD_HEARTBEAT:
            # Broadcast the original bytes: copies are byte-identical.
            self.metrics["heartbeats_in" if kind == PacketKind.GRAD_HEARTBEAT else "param_packets_in"] += 1
            if kind == PacketKind.GRAD_HEARTBEAT:
                self.metrics["heartbeats_out"] += self.cfg.num_workers
            return [(w, data) for w in self._workers]
        pkt = wire.decode(data, self.cfg.elems_per_packet)
        if kind == PacketKind.GRAD_DATA:
            out = self.on_grad_packet(pkt)
        else:
            out = self.on_param_heartbeat(pkt)
        return [(OPTIMIZER, wire.encode(p, self.cfg.elems_per_packet)) for p in out]

    # -- packet-level operations -----------------------------------------

    def on_grad_packet(self, pkt: Packet) -> list[Packet]:
        i, seq = pkt.worker_id, pkt.seq
        if i >= self.cfg.num_workers:
            self.metrics["malformed"] += 1
            return []
        self.metrics["grad_packets_in"] += 1
        w = self.cfg.window
        if not self.emitted_high + 1 - 2 * w <= seq <= self.emitted_high + w:
            raise WindowViolation(
                f"seq {seq} from worker {i} outside [{self.emitted_high + 1 - 2 * w}, "
                f"{self.emitted_high + w}]"
            )
        table = self.grads
        pool, slot = table.locate(seq)
        owner = table.owner[pool, slot]
        if owner != seq:
            if owner > seq:
                raise WindowViolation(f"seq {seq} is older than recycled slot owner {owner}")
            if owner >= 0 and not table.emitted[pool, slot]:
                raise WindowViolation(f"seq {seq} would recycle unfinished seq {owner}")
            table.recycle(pool, slot, seq)
        bit = 1 << i
        if table.bitmap[pool][slot] & bit:
            self.metrics["duplicates_absorbed"] += 1
            if table.emitted[pool, slot]:
                self.metrics["shadow_reemissions"] += 1
                return [self._aggregate_packet(pool, slot, seq)]
            return []
        n = len(pkt.values)
        if table.bitmap[pool][slot] and table.length[pool, slot] != n:
            raise WindowViolation(
                f"seq {seq}: worker {i} sent {n} elements, slot holds {table.length[pool, slot]}"
            )
        table.length[pool, slot] = n
        acc = table.data[pool, slot, :n]
        np.add(acc, pkt.values, out=acc, casting="unsafe")
        table.bitmap[pool][slot] |= bit
        if table.bitmap[pool][slot] != table.full_mask:
            return []
        table.emitted[pool, slot] = True
        self.emitted_high = max(self.emitted_high, seq)
        self.metrics["aggregates_emitted"] += 1
        return [self._aggregate_packet(pool, slot, seq)]

    def _aggregate_packet(self, pool: int, slot: int, seq: int) -> Packet:
        n = int(self.grads.length[pool, slot])
        values = self.grads.data[pool, slot, :n].copy()
        return Packet(PacketKind.GRAD_DATA, wire.OPTIMIZER_ID, seq, values)

    def on_param_packet(self, pkt: Packet) -> list[Packet]:
        self.metrics["param_packets_in"] += 1
        return [pkt] * self.cfg.num_workers

    def on_grad_heartbeat(self, pkt: Packet) -> list[Packet]:
        self.metrics["heartbeats_in"] += 1
        self.metrics["heartbeats_out"] += self.cfg.num_workers
        return [pkt] * self.cfg.num_workers

    def on_param_heartbeat(self, pkt: Packet) -> list[Packet]:
        i = pkt.worker_id
        if i >= self.cfg.num_workers:
            self.metrics["malformed"] += 1
            return []
        self.metrics["heartbeats_in"] += 1
        self.heartbeats.update(i, pkt.ack, pkt.credit)
        if i != self.cfg.leader_worker or not self.heartbeats.complete:
            return []
        ack, credit = self.heartbeats.aggregate()
        assert ack >= self.last_ack_out, "aggregate ack went backwards"
        self.last_ack_out = ack
        self.metrics["heartbeats_out"] += 1
        return [Packet.heartbeat(PacketKind.PARAM_HEARTBEAT, wire.OPTIMIZER_ID, ack, credit)]
