"""The in-network optimizer: per-layer tasks rotating through stage queues.

fwd step:      ReadParams -> PrepareParams
bwd+opt step:  ReadParams -> PrepareParams -> AcceptGrads -> UpdateStates -> WriteStates

In pipelined mode each stage is its own process fed by a channel, so layer
k+1 can read from the store while layer k is on the wire.  Serialized mode
runs one layer through all stages before admitting the next; it exists to
measure how much the pipeline buys.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Generator

import numpy as np

from .. import quant
from ..kernel import BaseKernel, Channel, Semaphore
from .adam import AdamConfig, adam_update
from .store import LayerSpec, ModelStateStore


class Stage(Enum):
    READ_PARAMS = 1
    PREPARE_PARAMS = 2
    ACCEPT_GRADS = 3
    UPDATE_STATES = 4
    WRITE_STATES = 5
    DONE = 6


FWD_STAGES = (Stage.READ_PARAMS, Stage.PREPARE_PARAMS)
BWD_STAGES = (Stage.READ_PARAMS, Stage.PREPARE_PARAMS, Stage.ACCEPT_GRADS,
              Stage.UPDATE_STATES, Stage.WRITE_STATES)


@dataclass
class OptimizerTask:
    layer: LayerSpec
    round: int
    stage: Stage = Stage.READ_PARAMS
    param_buf: np.ndarray | None = None
    grad_buf: np.ndarray | None = None
    state_buf: dict[str, np.ndarray] | None = None
    timings: dict[Stage, float] = field(default_factory=dict)

    def advance(self, stage: Stage) -> None:
        assert stage.value > self.stage.value or stage is self.stage, \
            f"layer {self.layer.layer_id}: {self.stage} -> {stage}"
        self.stage = stage

    def free(self) -> None:
        self.param_buf = self.grad_buf = self.state_buf = None


class OptimizerNode:
    """Drives fwd and bwd+opt rounds against a NIC exposing ``push``/``pull``."""

    def __init__(self, kernel: BaseKernel, nic, store: ModelStateStore,
                 adam: AdamConfig, param_quant: quant.QuantConfig,
                 grad_quant: quant.QuantConfig, pipeline: bool = True,
                 buffer_layers: int = 4, update_ticks_per_elem: float = 0.0):
        self.kernel = kernel
        self.nic = nic
        self.store = store
        self.adam = adam
        self.param_quant = param_quant
        self.grad_quant = grad_quant
        self.pipeline = pipeline
        self.buffer_layers = buffer_layers
        self.update_ticks_per_elem = update_ticks_per_elem
        self.clamp_count = 0
        self.round_ticks: dict[int, dict[str, float]] = defaultdict(dict)
        self.stage_ticks: dict[Stage, list[float]] = defaultdict(list)
        self.received_grads: list[tuple[int, int, np.ndarray]] | None = None
        self.pushes: list[tuple[int, int]] = []
        self.buffers_in_use = 0
        self.max_buffers_in_use = 0

    @property
    def layers(self) -> list[LayerSpec]:
        return self.store.layers

    def run(self, rounds: int) -> Generator:
        first = self.store.step
        for r in range(rounds):
            yield from self.run_fwd_round(r)
            yield from self.run_bwd_opt_round(r, step=first + r + 1)

    def run_fwd_round(self, r: int) -> Generator:
        self.round_ticks[r]["fwd_start"] = self.kernel.now
        tasks = [OptimizerTask(layer, r) for layer in self.layers]
        yield from self._execute(tasks, FWD_STAGES)
        self.round_ticks[r]["fwd_end"] = self.kernel.now

    def run_bwd_opt_round(self, r: int, step: int | None = None) -> Generator:
        step = self.store.step + 1 if step is None else step
        self.round_ticks[r]["bwd_start"] = self.kernel.now
        tasks = [OptimizerTask(layer, r) for layer in reversed(self.layers)]
        yield from self._execute(tasks, BWD_STAGES, step)
        self.store.set_step(step)
        self.round_ticks[r]["bwd_end"] = self.kernel.now

    # -- scheduling -------------------------------------------------------------

    def _execute(self, tasks: list[OptimizerTask], stages: tuple[Stage, ...], step: int = 0):
        handlers = {
            Stage.READ_PARAMS: self._read_params,
            Stage.PREPARE_PARAMS: self._prepare_params,
            Stage.ACCEPT_GRADS: self._accept_grads,
            Stage.UPDATE_STATES: lambda t: self._update_states(t, step),
            Stage.WRITE_STATES: self._write_states,
        }
        if not self.pipeline:
            for task in tasks:
                self._admit()
                for stage in stages:
                    yield from self._timed(task, stage, handlers[stage])
                self._retire(task)
            return
        pool = Semaphore(self.buffer_layers)
        chans = [Channel() for _ in stages]

        def admit():
            for task in tasks:
                yield pool.acquire()
                self._admit()
                chans[0].put(task)

        def worker(i: int, stage: Stage):
            for _ in tasks:
                task = yield chans[i].get()
                yield from self._timed(task, stage, handlers[stage])
                if i + 1 < len(stages):
                    chans[i + 1].put(task)
                else:
                    self._retire(task)
                    pool.release()

        procs = [self.kernel.spawn(admit(), "admit")]
        procs += [self.kernel.spawn(worker(i, s), s.name) for i, s in enumerate(stages)]
        yield procs

    def _admit(self) -> None:
        self.buffers_in_use += 1
        self.max_buffers_in_use = max(self.max_buffers_in_use, self.buffers_in_use)

    def _retire(self, task: OptimizerTask) -> None:
        task.free()
        task.advance(Stage.DONE)
        self.buffers_in_use -= 1

    def _timed(self, task: OptimizerTask, stage: Stage, fn: Callable):
        task.advance(stage)
        start = self.kernel.now
        yield from fn(task)
        task.timings[stage] = self.kernel.now - start
        self.stage_ticks[stage].append(self.kernel.now - start)

    # -- stages -------------------------------------------------------------------

    def _read_params(self, task: OptimizerTask):
        got = yield self.store.submit("read_params", task.layer, "params")
        task.param_buf = got["params"]

    def _prepare_params(self, task: OptimizerTask):
        ints, clamped = quant.to_fixed(task.param_buf, self.param_quant)
        self.clamp_count += clamped
        self.pushes.append((task.round, task.layer.layer_id))
        yield self.nic.push(ints)
        task.param_buf = None

    def _accept_grads(self, task: OptimizerTask):
        # float64 holds the dequantized aggregate exactly; Adam sees float32.
        task.grad_buf = np.empty(task.layer.param_count, dtype=np.float64)
        pulled = self.nic.pull(task.grad_buf)
        states = self.store.submit("read_states", task.layer, ("params", "m", "v"))
        _, task.state_buf = yield [pulled, states]
        if self.received_grads is not None:
            ints = (task.grad_buf * self.grad_quant.scale).astype(np.int64)
            self.received_grads.append((task.round, task.layer.layer_id, ints))

    def _update_states(self, task: OptimizerTask, step: int):
        if self.update_ticks_per_elem:
            yield self.update_ticks_per_elem * task.layer.param_count
        s = task.state_buf
        p, m, v = adam_update(s["params"], s["m"], s["v"],
                              task.grad_buf.astype(np.float32), self.adam, step)
        task.state_buf = {"params": p, "m": m, "v": v}
        task.grad_buf = None

    def _write_states(self, task: OptimizerTask):
        yield self.store.submit("write_states", task.layer, ("params", "m", "v"), task.state_buf)
