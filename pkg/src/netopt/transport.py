"""Reliable credit-based transport endpoints.

Each endpoint owns one TX ring (its outgoing data stream) and one RX ring
(the opposite stream).  The receiver advertises ``ack`` (next expected
sequence number) and ``credit`` (highest sequence number its ring can
accept) in periodic heartbeats; the sender never transmits past credit and
goes back to ``ack`` when acknowledgements stall for too long.

Entry points never block and never send directly: outputs accumulate in
``outbox`` and the owner drains them.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .wire import Packet, PacketKind


@dataclass(frozen=True)
class TimingConfig:
    window: int = 128
    heartbeat_divisor: int = 4
    service_ticks: float = 1.0
    loss_detect_period: float = 2000.0
    resend_stagger_unit: float = 4.0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.heartbeat_divisor <= 1:
            raise ValueError("heartbeat_divisor must exceed 1 so heartbeats beat T_send")
        if self.loss_detect_period <= 0:
            raise ValueError("loss_detect_period must be positive")

    @property
    def t_send(self) -> float:
        return self.window * self.service_ticks

    @property
    def heartbeat_interval(self) -> float:
        return self.t_send / self.heartbeat_divisor


class TxState:
    def __init__(self, capacity: int, initial_credit: int):
        self.capacity = capacity
        self.ring: dict[int, np.ndarray] = {}
        self.next_seq = 0
        self.next_send = 0
        self.ack_reg = 0
        self.credit_reg = initial_credit
        self.last_progress = 0.0

    @property
    def full(self) -> bool:
        return self.next_seq - self.ack_reg >= self.capacity

    @property
    def in_flight(self) -> bool:
        return self.next_send > self.ack_reg

    @property
    def drained(self) -> bool:
        return self.ack_reg == self.next_seq


class RxState:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.slots: dict[int, np.ndarray] = {}
        self.consumed = 0
        self.expected_seq = 0

    @property
    def credit(self) -> int:
        # Ring positions are fixed by seq, so this equals
        # expected_seq - 1 + (capacity - in-order occupancy).
        return self.consumed + self.capacity - 1

    @property
    def occupancy(self) -> int:
        return len(self.slots)

    @property
    def ready(self) -> int:
        return self.expected_seq - self.consumed


class TransportEndpoint:
    """One NIC's transport module.

    ``data_kind``/``heartbeat_kind`` select the role: a worker sends
    GRAD_DATA and PARAM_HEARTBEAT, the optimizer sends PARAM_DATA and
    GRAD_HEARTBEAT.
    """

    def __init__(
        self,
        worker_id: int,
        data_kind: PacketKind,
        heartbeat_kind: PacketKind,
        timing: TimingConfig,
        clock: Callable[[], float],
        peer_capacity: int | None = None,
        tx_capacity: int | None = None,
        stagger_index: int = 0,
    ):
        self.worker_id = worker_id
        self.data_kind = data_kind
        self.heartbeat_kind = heartbeat_kind
        self.timing = timing
        self.clock = clock
        peer = timing.window if peer_capacity is None else peer_capacity
        self.tx = TxState(tx_capacity or timing.window, initial_credit=peer - 1)
        self.rx = RxState(timing.window)
        self.resend_delay = timing.loss_detect_period + stagger_index * timing.resend_stagger_unit
        self._next_heartbeat = timing.heartbeat_interval
        self.outbox: list[tuple[Packet, bool]] = []
        self.metrics: Counter = Counter()
        self.closed = False

    def drain(self) -> list[tuple[Packet, bool]]:
        """Return and clear queued ``(packet, is_retransmission)`` pairs."""
        out, self.outbox = self.outbox, []
        return out

    # -- TX side ------------------------------------------------------------

    def tx_offer(self, values: np.ndarray) -> bool:
        tx = self.tx
        if self.closed or tx.full:
            return False
        tx.ring[tx.next_seq] = values
        tx.next_seq += 1
        self._transmit_eligible()
        return True

    def _transmit_eligible(self) -> None:
        tx = self.tx
        limit = min(tx.next_seq - 1, tx.credit_reg)
        if tx.next_send > limit:
            return
        if not tx.in_flight:
            tx.last_progress = self.clock()
        while tx.next_send <= limit:
            seq = tx.next_send
            self.outbox.append((Packet(self.data_kind, self.worker_id, seq, tx.ring[seq]), False))
            tx.next_send += 1

    def on_heartbeat(self, ack: int, credit: int) -> None:
        tx = self.tx
        if ack > tx.next_send:
            # An ack for data never sent belongs to a broken peer; ignore it.
            self.metrics["bogus_acks"] += 1
            return
        if ack > tx.ack_reg:
            for seq in range(tx.ack_reg, ack):
                del tx.ring[seq]
            tx.ack_reg = ack
            tx.last_progress = self.clock()
        if credit > tx.credit_reg:
            tx.credit_reg = credit
        self._transmit_eligible()

    # -- timers ---------------------------------------------------------------

    def on_timer_tick(self, now: float) -> None:
        if now >= self._next_heartbeat:
            rx = self.rx
            self.outbox.append(
                (Packet.heartbeat(self.heartbeat_kind, self.worker_id, rx.expected_seq, rx.credit), False)
            )
            self.metrics["heartbeats_sent"] += 1
            interval = self.timing.heartbeat_interval
            while self._next_heartbeat <= now:
                self._next_heartbeat += interval
        tx = self.tx
        if tx.in_flight and now - tx.last_progress >= self.resend_delay:
            end = min(tx.next_send - 1, tx.credit_reg)
            for seq in range(tx.ack_reg, end + 1):
                self.outbox.append((Packet(self.data_kind, self.worker_id, seq, tx.ring[seq]), True))
            self.metrics["retransmissions"] += end + 1 - tx.ack_reg
            self.metrics["resend_events"] += 1
            tx.last_progress = now

    # -- RX side ------------------------------------------------------------

    def rx_deliver(self, pkt: Packet) -> int:
        """Buffer a data packet; return how many payloads became releasable."""
        rx = self.rx
        seq = pkt.seq
        if seq < rx.expected_seq or seq in rx.slots:
            self.metrics["duplicates_dropped"] += 1
            return 0
        if seq > rx.credit:
            self.metrics["out_of_window_dropped"] += 1
            return 0
        rx.slots[seq] = pkt.values
        assert len(rx.slots) <= rx.capacity, "RX ring overflow"
        if len(rx.slots) > self.metrics["max_rx_occupancy"]:
            self.metrics["max_rx_occupancy"] = len(rx.slots)
        before = rx.expected_seq
        while rx.expected_seq in rx.slots:
            rx.expected_seq += 1
        return rx.expected_seq - before

    def rx_peek(self) -> np.ndarray | None:
        rx = self.rx
        if rx.consumed == rx.expected_seq:
            return None
        return rx.slots[rx.consumed]

    def rx_pop(self) -> np.ndarray | None:
        """Consume the next in-order payload, freeing its ring slot."""
        rx = self.rx
        if rx.consumed == rx.expected_seq:
            return None
        values = rx.slots.pop(rx.consumed)
        rx.consumed += 1
        return values

    def close(self) -> None:
        self.closed = True
