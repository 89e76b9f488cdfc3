"""File-backed model state with prioritized, optionally rate-limited IO.

On disk a store is a directory holding ``params.f32``, ``m.f32`` and
``v.f32`` (raw little-endian float32, layers concatenated in layer order)
plus ``manifest.txt``::

    step 3
    layer 0 1056 0
    layer 1 1056 1056

where each ``layer`` line is ``layer_id param_count offset`` (offsets in
elements).
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..kernel import BaseKernel, Future

FILES = ("params", "m", "v")
QUEUES = ("read_params", "read_states", "write_states")  # strict priority order
_DTYPE = np.dtype("<f4")


class StoreError(IOError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    layer_id: int
    param_count: int
    offset: int


def layout(counts: Sequence[int]) -> list[LayerSpec]:
    specs, offset = [], 0
    for i, n in enumerate(counts):
        specs.append(LayerSpec(i, n, offset))
        offset += n
    return specs


class TokenBucket:
    """``rate`` bytes per tick; ``burst`` bytes may be spent at once."""

    def __init__(self, rate: float, burst: float = 0.0):
        self.rate = rate
        self.burst = burst
        self.tokens = burst
        self.last = 0.0

    def delay(self, now: float, nbytes: int) -> float:
        """Ticks until ``nbytes`` have been transferred, starting at ``now``."""
        if self.rate <= 0:
            return 0.0
        self.tokens = min(self.burst, self.tokens + (now - self.last) * self.rate)
        self.last = now
        if self.tokens >= nbytes:
            self.tokens -= nbytes
            return 0.0
        wait = (nbytes - self.tokens) / self.rate
        self.tokens = 0.0
        self.last = now + wait
        return wait


@dataclass
class IORequest:
    queue: str
    layer: LayerSpec
    write: bool
    which: tuple[str, ...]
    data: dict[str, np.ndarray] | None = None
    future: Future = field(default_factory=Future)

    @property
    def nbytes(self) -> int:
        return 4 * self.layer.param_count * len(self.which)


class ModelStateStore:
    def __init__(self, directory: Path, layers: Sequence[LayerSpec], step: int = 0):
        self.dir = Path(directory)
        self.layers = list(layers)
        self.step = step
        self.kernel: BaseKernel | None = None
        self.buckets = {q: TokenBucket(0.0) for q in QUEUES}
        self.queues: dict[str, deque[IORequest]] = {q: deque() for q in QUEUES}
        self.busy = False
        self.dispatch_log: list[str] = []
        self.metrics: Counter = Counter()

    # -- creation / opening ------------------------------------------------

    @classmethod
    def create(cls, directory: Path, counts: Sequence[int],
               params: Sequence[np.ndarray] | None = None) -> "ModelStateStore":
        """New store; parameters default to zeros, moments are always zero."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        store = cls(directory, layout(counts))
        total = sum(counts)
        zeros = np.zeros(total, dtype=_DTYPE)
        flat = zeros if params is None else np.concatenate(
            [np.asarray(p, dtype=np.float32) for p in params]).astype(_DTYPE)
        if len(flat) != total:
            raise StoreError(f"initial parameters have {len(flat)} elements, layout needs {total}")
        for name in FILES:
            (flat if name == "params" else zeros).tofile(store.path(name))
        store.write_manifest()
        return store

    @classmethod
    def open(cls, directory: Path) -> "ModelStateStore":
        directory = Path(directory)
        manifest = directory / "manifest.txt"
        if not manifest.exists():
            raise StoreError(f"{manifest}: no manifest")
        step, layers = 0, []
        for line in manifest.read_text().splitlines():
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "step":
                step = int(parts[1])
            elif parts[0] == "layer":
                layers.append(LayerSpec(int(parts[1]), int(parts[2]), int(parts[3])))
            else:
                raise StoreError(f"{manifest}: unrecognized line {line!r}")
        return cls(directory, layers, step)

    def path(self, which: str) -> Path:
        return self.dir / f"{which}.f32"

    def write_manifest(self) -> None:
        lines = [f"step {self.step}"]
        lines += [f"layer {s.layer_id} {s.param_count} {s.offset}" for s in self.layers]
        (self.dir / "manifest.txt").write_text("\n".join(lines) + "\n")

    def set_step(self, step: int) -> None:
        self.step = step
        self.write_manifest()

    @property
    def total(self) -> int:
        return sum(s.param_count for s in self.layers)

    # -- synchronous region access -------------------------------------------

    def read(self, which: str, layer: LayerSpec) -> np.ndarray:
        path = self.path(which)
        try:
            with open(path, "rb") as f:
                f.seek(4 * layer.offset)
                out = np.fromfile(f, dtype=_DTYPE, count=layer.param_count)
        except OSError as e:
            raise StoreError(f"{path}: {e}") from e
        if len(out) != layer.param_count:
            raise StoreError(f"{path}: short read for layer {layer.layer_id}")
        return out.astype(np.float32)

    def write(self, which: str, layer: LayerSpec, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float32)
        if len(values) != layer.param_count:
            raise StoreError(f"layer {layer.layer_id}: writing {len(values)} of {layer.param_count}")
        path = self.path(which)
        try:
            with open(path, "r+b") as f:
                f.seek(4 * layer.offset)
                f.write(values.astype(_DTYPE).tobytes())
        except OSError as e:
            raise StoreError(f"{path}: {e}") from e

    def read_all(self, which: str) -> list[np.ndarray]:
        return [self.read(which, s) for s in self.layers]

    # -- queued IO -------------------------------------------------------------

    def attach(self, kernel: BaseKernel, rate_bytes_per_tick: float = 0.0, burst: float = 0.0,
               queue_rates: dict[str, float] | None = None) -> None:
        """Serve IO on ``kernel``'s clock.

        One device serves all queues; each queue has its own token bucket
        (``queue_rates`` overrides the shared default rate).
        """
        self.kernel = kernel
        rates = {q: rate_bytes_per_tick for q in QUEUES}
        rates.update({q: r for q, r in (queue_rates or {}).items() if r > 0})
        self.buckets = {q: TokenBucket(rates[q], burst) for q in QUEUES}

    def submit(self, queue: str, layer: LayerSpec, which: Iterable[str] | str,
               data: dict[str, np.ndarray] | None = None) -> Future:
        """Queue a read (``data is None``) or write of ``which`` for one layer.

        Reads resolve to a dict ``{name: array}``; writes resolve to None.
        """
        if queue not in self.queues:
            raise ValueError(f"unknown IO queue {queue!r}")
        which = (which,) if isinstance(which, str) else tuple(which)
        req = IORequest(queue, layer, data is not None, which, data)
        self.queues[queue].append(req)
        self._dispatch()
        return req.future

    def _dispatch(self) -> None:
        if self.busy:
            return
        for i, name in enumerate(QUEUES):
            if self.queues[name]:
                break
        else:
            return
        assert all(not self.queues[q] for q in QUEUES[:i]), "priority inversion"
        req = self.queues[name].popleft()
        self.dispatch_log.append(name)
        self.metrics[f"{name}_bytes"] += req.nbytes
        try:
            if req.write:
                for w in req.which:
                    self.write(w, req.layer, req.data[w])
                result = None
            else:
                result = {w: self.read(w, req.layer) for w in req.which}
        except StoreError as e:
            req.future.set_exception(e)
            self._dispatch()
            return
        if self.kernel is None:
            req.future.set_result(result)
            self._dispatch()
            return
        self.busy = True
        now = self.kernel.now
        delay = self.buckets[name].delay(now, req.nbytes)
        # Long transfers are progress, not a stall.
        self.kernel.last_progress = max(self.kernel.last_progress, now + delay)
        self.kernel.call_later(delay, self._complete, req, result)

    def _complete(self, req: IORequest, result) -> None:
        self.busy = False
        req.future.set_result(result)
        self._dispatch()
