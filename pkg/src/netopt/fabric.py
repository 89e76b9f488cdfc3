"""Network substrate: deterministic simulated links or real UDP datagrams.

Both carry the exact bytes produced by ``wire.encode``.  Node wrappers
(``NicNode``, ``SwitchNode``) adapt the transport/switch state machines to
either network.
"""

from __future__ import annotations

import random
import socket
from collections import Counter, deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable

from . import wire
from .access import AccessModule, RequestKind
from .kernel import BaseKernel, Future, RealtimeKernel, SimKernel
from .switch import Switch
from .transport import TransportEndpoint
from .wire import PacketKind

Handler = Callable[[str, bytes], None]


@dataclass
class TrafficCounters:
    data_bytes_tx: int = 0
    data_bytes_rx: int = 0
    data_elems_tx: int = 0
    data_elems_rx: int = 0
    header_bytes: int = 0
    heartbeat_bytes: int = 0
    retransmit_bytes: int = 0
    packets_tx: int = 0
    packets_rx: int = 0
    packets_lost_injected: int = 0

    def snapshot(self) -> "TrafficCounters":
        return TrafficCounters(**vars(self))

    def __sub__(self, other: "TrafficCounters") -> "TrafficCounters":
        return TrafficCounters(**{k: v - getattr(other, k) for k, v in vars(self).items()})


@dataclass
class LinkParams:
    latency: float = 10.0
    jitter: float = 0.0
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    service_ticks: float = 1.0


@dataclass
class SimLink:
    src: str
    dst: str
    params: LinkParams
    busy_until: float = 0.0


def _account_tx(c: TrafficCounters, data: bytes, retransmit: bool) -> None:
    c.packets_tx += 1
    kind = data[2]
    if kind <= PacketKind.GRAD_DATA:
        if retransmit:
            c.retransmit_bytes += len(data)
        else:
            c.header_bytes += wire.HEADER_SIZE
            c.data_bytes_tx += len(data) - wire.HEADER_SIZE
            c.data_elems_tx += (len(data) - wire.HEADER_SIZE) // 4
    else:
        c.heartbeat_bytes += len(data)


def _account_rx(c: TrafficCounters, data: bytes) -> None:
    c.packets_rx += 1
    if data[2] <= PacketKind.GRAD_DATA:
        c.data_bytes_rx += len(data) - wire.HEADER_SIZE
        c.data_elems_rx += (len(data) - wire.HEADER_SIZE) // 4


class SimFabric:
    """In-process links with seeded loss, duplication and jitter."""

    def __init__(self, kernel: SimKernel, seed: int = 0, default: LinkParams | None = None,
                 trace: bool = False, trace_tail: int = 5000):
        self.kernel = kernel
        self.rng = random.Random(seed)
        self.default = default or LinkParams()
        self.handlers: dict[str, Handler] = {}
        self.links: dict[tuple[str, str], SimLink] = {}
        self.counters: dict[str, TrafficCounters] = {}
        self.trace_enabled = trace
        self.trace: list[tuple] = []
        self.recent: deque[tuple] = deque(maxlen=trace_tail)
        self.sent = 0
        self.delivered = 0
        kernel.on_deadlock = self.deadlock_report

    def attach(self, name: str, handler: Handler) -> None:
        self.handlers[name] = handler
        self.counters.setdefault(name, TrafficCounters())

    def link(self, src: str, dst: str) -> SimLink:
        key = (src, dst)
        if key not in self.links:
            self.links[key] = SimLink(src, dst, self.default)
        return self.links[key]

    def set_link(self, src: str, dst: str, params: LinkParams) -> None:
        self.link(src, dst).params = params

    def _record(self, event: tuple) -> None:
        self.recent.append(event)
        if self.trace_enabled:
            self.trace.append(event)

    def send(self, src: str, dst: str, data: bytes, retransmit: bool = False) -> None:
        now = self.kernel.now
        link = self.link(src, dst)
        p = link.params
        _account_tx(self.counters[src], data, retransmit)
        self.sent += 1
        depart = max(now, link.busy_until)
        link.busy_until = depart + p.service_ticks
        if p.loss_prob and self.rng.random() < p.loss_prob:
            self.counters[src].packets_lost_injected += 1
            self._record((now, "LOST", data, src, dst))
            return
        arrive = depart + p.service_ticks + p.latency
        if p.jitter:
            arrive += self.rng.random() * p.jitter
        self.kernel.call_at(arrive, self._deliver, src, dst, data)
        if p.dup_prob and self.rng.random() < p.dup_prob:
            extra = 1.0 + self.rng.random() * max(p.latency, 1.0)
            self.kernel.call_at(arrive + extra, self._deliver, src, dst, data)
            self._record((now, "DUP", data, src, dst))

    def _deliver(self, src: str, dst: str, data: bytes) -> None:
        self.delivered += 1
        _account_rx(self.counters[dst], data)
        self._record((self.kernel.now, "", data, src, dst))
        self.handlers[dst](src, data)

    def format_trace(self, events: Iterable[tuple] | None = None) -> list[str]:
        return [format_event(e) for e in (self.trace if events is None else events)]

    def dump_trace(self, path: Path, events: Iterable[tuple] | None = None) -> None:
        Path(path).write_text("\n".join(self.format_trace(events)) + "\n")

    def deadlock_report(self) -> str:
        tail = self.format_trace(self.recent)[-40:]
        return "\nlast events:\n" + "\n".join(tail)


def format_event(event: tuple) -> str:
    """``tick kind src dst seq len``; dropped/duplicated packets get a prefix."""
    tick, tag, data, src, dst = event
    try:
        pkt = wire.decode(data)
        kind = PacketKind(pkt.kind).name
        seq = pkt.seq if PacketKind(pkt.kind).is_data else pkt.ack
        n = pkt.payload_len if PacketKind(pkt.kind).is_data else pkt.credit
    except wire.WireError:
        kind, seq, n = "MALFORMED", -1, len(data)
    if tag:
        kind = f"{tag}:{kind}"
    return f"{tick:g} {kind} {src} {dst} {seq} {n}"


# -- UDP ---------------------------------------------------------------------


def read_manifest(path: Path) -> dict[str, tuple[str, int]]:
    """Cluster manifest: one ``role host port`` line per node; ``#`` comments."""
    nodes = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        role, host, port = line.split()
        nodes[role] = (host, int(port))
    return nodes


def write_manifest(path: Path, nodes: dict[str, tuple[str, int]]) -> None:
    lines = [f"{role} {host} {port}" for role, (host, port) in nodes.items()]
    Path(path).write_text("\n".join(lines) + "\n")


class UdpNet:
    """One socket per node process; one datagram per packet."""

    def __init__(self, kernel: RealtimeKernel, name: str, manifest: dict[str, tuple[str, int]]):
        self.kernel = kernel
        self.name = name
        self.addrs = dict(manifest)
        self.by_addr = {addr: role for role, addr in manifest.items()}
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
        self.sock.bind(manifest[name])
        self.sock.setblocking(False)
        self.counters: dict[str, TrafficCounters] = {name: TrafficCounters()}
        self.handler: Handler | None = None
        self.trace_enabled = False
        self.trace: list[tuple] = []
        kernel.add_reader(self.sock, self._readable)

    def attach(self, name: str, handler: Handler) -> None:
        assert name == self.name
        self.handler = handler

    def send(self, src: str, dst: str, data: bytes, retransmit: bool = False) -> None:
        _account_tx(self.counters[src], data, retransmit)
        try:
            self.sock.sendto(data, self.addrs[dst])
        except (BlockingIOError, ConnectionRefusedError):
            pass  # the transport recovers from drops

    def _readable(self) -> None:
        while True:
            try:
                data, addr = self.sock.recvfrom(65536)
            except (BlockingIOError, ConnectionRefusedError):
                return
            src = self.by_addr.get(addr, "?")
            _account_rx(self.counters[self.name], data)
            if self.trace_enabled:
                self.trace.append((self.kernel.now, "", data, src, self.name))
            self.handler(src, data)

    def close(self) -> None:
        self.kernel.selector.unregister(self.sock)
        self.sock.close()


# -- node wrappers -------------------------------------------------------------


class NicNode:
    """Transport endpoint + access module bound to a network and a timer."""

    def __init__(self, kernel: BaseKernel, net, name: str, endpoint: TransportEndpoint,
                 access: AccessModule, uplink: str = "switch",
                 elems_per_packet: int = wire.ELEMS_PER_PACKET):
        self.kernel = kernel
        self.net = net
        self.name = name
        self.endpoint = endpoint
        self.access = access
        self.uplink = uplink
        self.elems = elems_per_packet
        self.malformed = 0
        self._drain_waiters: list[Future] = []
        net.attach(name, self.on_datagram)
        kernel.every(endpoint.timing.heartbeat_interval, self.on_tick)

    def on_datagram(self, src: str, data: bytes) -> None:
        try:
            pkt = wire.decode(data, self.elems)
        except wire.WireError:
            self.malformed += 1
            return
        ep = self.endpoint
        if pkt.kind == ep.heartbeat_kind or pkt.kind == ep.data_kind:
            self.malformed += 1  # our own outbound kinds never come back
            return
        if PacketKind(pkt.kind).is_data:
            if ep.rx_deliver(pkt):
                self.kernel.note_progress()
        else:
            ep.on_heartbeat(pkt.ack, pkt.credit)
            self._check_drained()
        self.access.pump()
        self.flush()

    def on_tick(self, now: float) -> None:
        self.endpoint.on_timer_tick(now)
        self.access.pump()
        self.flush()

    def flush(self) -> None:
        for pkt, retransmit in self.endpoint.drain():
            self.net.send(self.name, self.uplink, wire.encode(pkt, self.elems), retransmit)

    def submit(self, kind, buffer):
        c = self.access.submit(kind, buffer)
        self.flush()
        return c

    def push(self, buffer):
        return self.submit(RequestKind.PUSH, buffer)

    def pull(self, buffer):
        return self.submit(RequestKind.PULL, buffer)

    def wait_drained(self) -> Future:
        """Resolve once every offered payload has been acknowledged."""
        f = Future()
        if self.endpoint.tx.drained:
            f.set_result()
        else:
            self._drain_waiters.append(f)
        return f

    def _check_drained(self) -> None:
        if self._drain_waiters and self.endpoint.tx.drained:
            waiters, self._drain_waiters = self._drain_waiters, []
            for f in waiters:
                f.set_result()

    @property
    def counters(self) -> TrafficCounters:
        return self.net.counters[self.name]


class SwitchNode:
    def __init__(self, net, switch: Switch, name: str = "switch"):
        self.net = net
        self.switch = switch
        self.name = name
        net.attach(name, self.on_datagram)

    def on_datagram(self, src: str, data: bytes) -> None:
        for dst, out in self.switch.handle(data):
            self.net.send(self.name, dst, out)


# -- traffic accounting --------------------------------------------------------


@dataclass
class TrafficReport:
    num_workers: int
    model_elems: int
    worker_push_elems: list[int] = field(default_factory=list)
    worker_pull_elems: list[int] = field(default_factory=list)
    optimizer_push_elems: int = 0
    collectives_per_direction: int = 1

    @property
    def ring_reference_elems(self) -> Fraction:
        n = self.num_workers
        return Fraction(2 * (n - 1) * self.model_elems, n)

    @property
    def ratio(self) -> Fraction | None:
        ring = self.ring_reference_elems
        return None if ring == 0 else Fraction(self.model_elems) / ring


def ring_reference(num_workers: int, model_elems: int) -> Fraction:
    return Fraction(2 * (num_workers - 1) * model_elems, num_workers)


def traffic_ratio(num_workers: int) -> Fraction | None:
    """Elements per worker per collective relative to ring all-reduce: N / (2(N-1))."""
    if num_workers == 1:
        return None
    return Fraction(num_workers, 2 * (num_workers - 1))


def traffic_report(num_workers: int, model_elems: int,
                   worker_deltas: list[TrafficCounters],
                   optimizer_delta: TrafficCounters | None = None,
                   pushes: int = 1, pulls: int = 2) -> TrafficReport:
    """Per-collective element counts from one round's counter deltas.

    A training round is one gradient push and two parameter pulls (forward and
    recomputation in backward) per worker.
    """
    rep = TrafficReport(num_workers, model_elems)
    rep.worker_push_elems = [d.data_elems_tx // pushes for d in worker_deltas]
    rep.worker_pull_elems = [d.data_elems_rx // pulls for d in worker_deltas]
    if optimizer_delta is not None:
        rep.optimizer_push_elems = optimizer_delta.data_elems_tx // pulls
    return rep
