"""Asynchronous push/pull request queues between application buffers and a NIC.

``submit`` returns a ``Completion`` immediately.  The module moves data in
``pump()``, which the owning node calls after every state change (submit,
heartbeat, packet arrival).  A push is complete once TX has accepted its
last chunk; a pull is complete once ``len`` elements have been written.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .kernel import Future
from .transport import TransportEndpoint
from .wire import ELEMS_PER_PACKET


class RequestKind(Enum):
    PUSH = "push"
    PULL = "pull"


class State(Enum):
    PENDING = "pending"
    OK = "ok"
    FAILED = "failed"


class QueueFull(RuntimeError):
    pass


class InvalidLength(ValueError):
    pass


class ProtocolError(RuntimeError):
    """Stream framing disagrees with the request sizes (a lockstep bug)."""


class Completion(Future):
    __slots__ = ("state", "bytes_moved", "reason")

    def __init__(self):
        super().__init__()
        self.state = State.PENDING
        self.bytes_moved = 0
        self.reason: str | None = None

    def ok(self, nbytes: int) -> None:
        self.state, self.bytes_moved = State.OK, nbytes
        self.set_result(nbytes)

    def failed(self, reason: str, exc: BaseException | None = None) -> None:
        self.state, self.reason = State.FAILED, reason
        self.set_exception(exc or RuntimeError(reason))


@dataclass
class AccessRequest:
    kind: RequestKind
    buffer: np.ndarray
    completion: Completion = field(default_factory=Completion)
    cursor: int = 0

    @property
    def len(self) -> int:
        return len(self.buffer)


def chunk_sizes(n: int, elems_per_packet: int = ELEMS_PER_PACKET) -> list[int]:
    full, rest = divmod(n, elems_per_packet)
    return [elems_per_packet] * full + ([rest] if rest else [])


Encoder = Callable[[np.ndarray], tuple[np.ndarray, int]]
Decoder = Callable[[np.ndarray], np.ndarray]


def verbatim(chunk: np.ndarray) -> tuple[np.ndarray, int]:
    return np.asarray(chunk, dtype=np.int32), 0


class AccessModule:
    """``encode`` maps a buffer chunk to wire ints (plus clamp count);
    ``decode`` maps received ints back to buffer values."""

    def __init__(
        self,
        endpoint: TransportEndpoint,
        encode: Encoder,
        decode: Decoder,
        queue_depth: int = 64,
        max_message_elems: int = 1 << 24,
        elems_per_packet: int = ELEMS_PER_PACKET,
    ):
        self.endpoint = endpoint
        self.encode = encode
        self.decode = decode
        self.queue_depth = queue_depth
        self.max_message_elems = max_message_elems
        self.elems_per_packet = elems_per_packet
        self.push_queue: deque[AccessRequest] = deque()
        self.pull_queue: deque[AccessRequest] = deque()
        self.metrics: Counter = Counter()
        self.on_complete: Callable[[AccessRequest], None] | None = None

    def submit(self, kind: RequestKind, buffer: np.ndarray) -> Completion:
        n = len(buffer)
        if n == 0 or n > self.max_message_elems:
            raise InvalidLength(f"request of {n} elements (max {self.max_message_elems})")
        if len(self.push_queue) + len(self.pull_queue) >= self.queue_depth:
            raise QueueFull(f"{self.queue_depth} requests already in flight")
        if __debug__:
            other = self.pull_queue if kind is RequestKind.PUSH else self.push_queue
            assert not any(np.shares_memory(buffer, r.buffer) for r in other), \
                "push and pull buffers overlap"
        req = AccessRequest(kind, buffer)
        (self.push_queue if kind is RequestKind.PUSH else self.pull_queue).append(req)
        self.metrics[f"{kind.value}_submitted"] += 1
        self.pump()
        return req.completion

    def push(self, buffer: np.ndarray) -> Completion:
        return self.submit(RequestKind.PUSH, buffer)

    def pull(self, buffer: np.ndarray) -> Completion:
        return self.submit(RequestKind.PULL, buffer)

    @property
    def idle(self) -> bool:
        return not self.push_queue and not self.pull_queue

    def pump(self) -> None:
        self._process_push()
        self._process_pull()

    def _finish(self, queue: deque, req: AccessRequest) -> None:
        queue.popleft()
        self.metrics[f"{req.kind.value}_bytes"] += 4 * req.len
        req.completion.ok(4 * req.len)
        if self.on_complete:
            self.on_complete(req)

    def _fail_all(self, reason: str) -> None:
        for queue in (self.push_queue, self.pull_queue):
            while queue:
                queue.popleft().completion.failed(reason)

    def _process_push(self) -> None:
        ep, step = self.endpoint, self.elems_per_packet
        if ep.closed and self.push_queue:
            self._fail_all("TransportClosed")
            return
        while self.push_queue:
            req = self.push_queue[0]
            while req.cursor < req.len:
                if ep.tx.full:
                    return
                chunk = req.buffer[req.cursor:req.cursor + step]
                ints, clamped = self.encode(chunk)
                self.metrics["clamp_count"] += clamped
                accepted = ep.tx_offer(ints)
                assert accepted
                req.cursor += len(chunk)
            self._finish(self.push_queue, req)

    def _process_pull(self) -> None:
        ep, step = self.endpoint, self.elems_per_packet
        if ep.closed and self.pull_queue:
            self._fail_all("TransportClosed")
            return
        while self.pull_queue:
            req = self.pull_queue[0]
            while req.cursor < req.len:
                values = ep.rx_pop()
                if values is None:
                    return
                want = min(step, req.len - req.cursor)
                if len(values) != want:
                    req.completion.failed(
                        "LengthMismatch",
                        ProtocolError(f"expected a {want}-element chunk, got {len(values)}"),
                    )
                    self.pull_queue.popleft()
                    raise ProtocolError(f"expected a {want}-element chunk, got {len(values)}")
                req.buffer[req.cursor:req.cursor + want] = self.decode(values)
                req.cursor += want
            self._finish(self.pull_queue, req)
