"""Event kernels and cooperative processes.

Node logic (workers, the optimizer pipeline, NIC timers) is written once as
callbacks plus generator-based processes and runs on either

* ``SimKernel``: virtual ticks, a single heap, fully deterministic; or
* ``RealtimeKernel``: wall-clock ticks with sockets multiplexed in the loop.

A process is a generator that yields what it waits on: a number of ticks,
a ``Future``, or a list of futures (wait for all).
"""

from __future__ import annotations

import heapq
import itertools
import selectors
import time
from collections import deque
from typing import Any, Callable, Generator, Iterable


class Deadlock(RuntimeError):
    """No event can make progress while work is still pending."""


class Future:
    __slots__ = ("_done", "_result", "_exc", "_callbacks")

    def __init__(self):
        self._done = False
        self._result: Any = None
        self._exc: BaseException | None = None
        self._callbacks: list[Callable[["Future"], None]] = []

    @property
    def done(self) -> bool:
        return self._done

    def result(self) -> Any:
        if not self._done:
            raise RuntimeError("future is still pending")
        if self._exc is not None:
            raise self._exc
        return self._result

    def exception(self) -> BaseException | None:
        return self._exc

    def set_result(self, value: Any = None) -> None:
        if self._done:
            raise RuntimeError("future already resolved")
        self._done, self._result = True, value
        self._fire()

    def set_exception(self, exc: BaseException) -> None:
        if self._done:
            raise RuntimeError("future already resolved")
        self._done, self._exc = True, exc
        self._fire()

    def add_done_callback(self, fn: Callable[["Future"], None]) -> None:
        if self._done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _fire(self) -> None:
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)


def gather(futures: Iterable[Future]) -> Future:
    futures = list(futures)
    out = Future()
    remaining = [len(futures)]

    def one_done(f: Future) -> None:
        if out.done:
            return
        if f.exception() is not None:
            out.set_exception(f.exception())
            return
        remaining[0] -= 1
        if remaining[0] == 0:
            out.set_result([g.result() for g in futures])

    if not futures:
        out.set_result([])
    for f in futures:
        f.add_done_callback(one_done)
    return out


class Channel:
    """Unbounded FIFO hand-off between processes."""

    def __init__(self):
        self._items: deque = deque()
        self._getters: deque[Future] = deque()

    def put(self, item: Any) -> None:
        if self._getters:
            self._getters.popleft().set_result(item)
        else:
            self._items.append(item)

    def get(self) -> Future:
        f = Future()
        if self._items:
            f.set_result(self._items.popleft())
        else:
            self._getters.append(f)
        return f

    def __len__(self) -> int:
        return len(self._items)


class Semaphore:
    def __init__(self, value: int):
        self.value = value
        self._waiters: deque[Future] = deque()

    def acquire(self) -> Future:
        f = Future()
        if self.value > 0:
            self.value -= 1
            f.set_result()
        else:
            self._waiters.append(f)
        return f

    def release(self) -> None:
        if self._waiters:
            self._waiters.popleft().set_result()
        else:
            self.value += 1


class Process(Future):
    """Drives a generator; resolves with its return value."""

    __slots__ = ("kernel", "gen", "name")

    def __init__(self, kernel: "BaseKernel", gen: Generator, name: str = ""):
        super().__init__()
        self.kernel, self.gen, self.name = kernel, gen, name

    def _step(self, value: Any = None, exc: BaseException | None = None) -> None:
        self.kernel.note_progress()
        try:
            waited = self.gen.throw(exc) if exc is not None else self.gen.send(value)
        except StopIteration as stop:
            self.set_result(stop.value)
            return
        except BaseException as e:  # noqa: BLE001 - surfaced through the future
            self.set_exception(e)
            self.kernel.fail(e)
            return
        if isinstance(waited, (int, float)):
            self.kernel.call_later(waited, self._step)
            return
        if isinstance(waited, (list, tuple)):
            waited = gather(waited)
        if not isinstance(waited, Future):
            self._step(exc=TypeError(f"process {self.name!r} yielded {waited!r}"))
            return
        waited.add_done_callback(self._resume)

    def _resume(self, f: Future) -> None:
        if f.exception() is not None:
            self.kernel.call_soon(self._step, None, f.exception())
        else:
            self.kernel.call_soon(self._step, f._result)


class BaseKernel:
    def __init__(self):
        self._heap: list = []
        self._counter = itertools.count()
        self._failure: BaseException | None = None
        self.last_progress = 0.0

    @property
    def now(self) -> float:
        raise NotImplementedError

    def call_at(self, when: float, fn: Callable, *args) -> None:
        heapq.heappush(self._heap, (when, next(self._counter), fn, args))

    def call_later(self, delay: float, fn: Callable, *args) -> None:
        self.call_at(self.now + delay, fn, *args)

    def call_soon(self, fn: Callable, *args) -> None:
        self.call_at(self.now, fn, *args)

    def spawn(self, gen: Generator, name: str = "") -> Process:
        proc = Process(self, gen, name)
        self.call_soon(proc._step)
        return proc

    def every(self, interval: float, fn: Callable[[float], None], start: float | None = None) -> None:
        """Call ``fn(now)`` at ``start, start+interval, ...`` forever."""

        def tick(when: float) -> None:
            fn(self.now)
            self.call_at(when + interval, tick, when + interval)

        first = interval if start is None else start
        self.call_at(first, tick, first)

    def note_progress(self) -> None:
        self.last_progress = self.now

    def fail(self, exc: BaseException) -> None:
        if self._failure is None:
            self._failure = exc

    def _check_failure(self) -> None:
        if self._failure is not None:
            exc, self._failure = self._failure, None
            raise exc


class SimKernel(BaseKernel):
    def __init__(self):
        super().__init__()
        self._now = 0.0
        self.on_deadlock: Callable[[], str] | None = None

    @property
    def now(self) -> float:
        return self._now

    def run(self, until: Callable[[], bool], stall_limit: float = float("inf")) -> None:
        heap = self._heap
        pop = heapq.heappop
        while not until():
            if not heap:
                self._deadlock("event queue drained with work pending")
            when, _, fn, args = pop(heap)
            self._now = when
            fn(*args)
            if self._failure is not None:
                self._check_failure()
            if when - self.last_progress > stall_limit:
                self._deadlock(f"no progress for {when - self.last_progress:g} ticks")

    def _deadlock(self, why: str) -> None:
        detail = self.on_deadlock() if self.on_deadlock else ""
        raise Deadlock(f"at tick {self._now:g}: {why}{detail}")


class RealtimeKernel(BaseKernel):
    """Wall-clock kernel; ``now`` is elapsed seconds / ``tick_seconds``."""

    def __init__(self, tick_seconds: float):
        super().__init__()
        self.tick_seconds = tick_seconds
        self._t0 = time.monotonic()
        self.selector = selectors.DefaultSelector()

    @property
    def now(self) -> float:
        return (time.monotonic() - self._t0) / self.tick_seconds

    def add_reader(self, sock, fn: Callable[[], None]) -> None:
        self.selector.register(sock, selectors.EVENT_READ, fn)

    def run(self, until: Callable[[], bool], stall_limit: float = float("inf"), timeout: float | None = None) -> None:
        deadline = None if timeout is None else time.monotonic() + timeout
        heap = self._heap
        while not until():
            now = self.now
            while heap and heap[0][0] <= now:
                _, _, fn, args = heapq.heappop(heap)
                fn(*args)
                self._check_failure()
                if until():
                    return
            wait = 0.05
            if heap:
                wait = min(wait, max(0.0, (heap[0][0] - self.now) * self.tick_seconds))
            for key, _ in self.selector.select(wait):
                key.data()
                self._check_failure()
            if self.now - self.last_progress > stall_limit:
                raise Deadlock(f"no progress for {self.now - self.last_progress:g} ticks")
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError("realtime run exceeded its timeout")
