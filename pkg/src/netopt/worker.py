"""Data-parallel worker running a per-block pull/compute/push loop.

The model is an MLP of ``layers`` blocks, each ``a = tanh(x @ W.T + b)``
with ``W`` of shape (hidden, hidden).  A block's flat parameter vector is
``W`` row-major followed by ``b``.  Workers keep no parameters between
blocks: each block's parameters are pulled on demand, in forward and again
for recomputation in backward.

Per-worker losses use ``1 / (global batch * hidden)`` scaling so the sum of
worker gradients is the gradient of the global mean-squared error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Generator

import numpy as np


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 32

    @property
    def block_size(self) -> int:
        return self.hidden * self.hidden + self.hidden

    @property
    def counts(self) -> list[int]:
        return [self.block_size] * self.layers

    @property
    def total(self) -> int:
        return self.block_size * self.layers


def init_params(cfg: ModelConfig, seed: int, kind: str = "seeded-random") -> list[np.ndarray]:
    if kind == "zeros":
        return [np.zeros(cfg.block_size, dtype=np.float32) for _ in range(cfg.layers)]
    if kind != "seeded-random":
        raise ValueError(f"unknown init {kind!r}")
    rng = np.random.default_rng([seed, 0x1A17])
    bound = 1.0 / np.sqrt(cfg.hidden)
    return [rng.uniform(-bound, bound, cfg.block_size).astype(np.float32)
            for _ in range(cfg.layers)]


def unpack(flat: np.ndarray, hidden: int) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64)
    return flat[: hidden * hidden].reshape(hidden, hidden), flat[hidden * hidden:]


def block_forward(flat: np.ndarray, x: np.ndarray, hidden: int) -> np.ndarray:
    w, b = unpack(flat, hidden)
    return np.tanh(x @ w.T + b)


def block_backward(flat: np.ndarray, x: np.ndarray, delta: np.ndarray,
                   hidden: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the block's parameters and of its input.

    ``delta`` is dLoss/d(block output).  The block output is recomputed from
    the checkpointed input ``x``.
    """
    w, b = unpack(flat, hidden)
    a = np.tanh(x @ w.T + b)
    dz = delta * (1.0 - a * a)
    grad = np.concatenate([(dz.T @ x).ravel(), dz.sum(axis=0)])
    return grad, dz @ w


def output_loss(out: np.ndarray, target: np.ndarray, global_batch: int) -> tuple[float, np.ndarray]:
    """Shard's share of the global MSE and its gradient w.r.t. ``out``."""
    scale = 1.0 / (global_batch * out.shape[1])
    diff = out - target
    return float(np.sum(diff * diff) * scale), 2.0 * scale * diff


def local_grad(params: list[np.ndarray], x: np.ndarray, y: np.ndarray, hidden: int,
               global_batch: int) -> tuple[float, list[np.ndarray]]:
    """Loss and per-block gradients for one shard, straight through the model."""
    acts = [x]
    for flat in params:
        acts.append(block_forward(flat, acts[-1], hidden))
    loss, delta = output_loss(acts[-1], y, global_batch)
    grads = [None] * len(params)
    for k in reversed(range(len(params))):
        grads[k], delta = block_backward(params[k], acts[k], delta, hidden)
    return loss, grads


class Dataset:
    """Seeded teacher-student regression set; rounds walk through it cyclically.

    ``targets="zeros"`` replaces the teacher's outputs with zeros, which a
    zero-initialized model already fits exactly (every gradient is zero).
    """

    def __init__(self, hidden: int, seed: int, num_samples: int = 4096, targets: str = "teacher"):
        if targets not in ("teacher", "zeros"):
            raise ValueError(f"unknown targets {targets!r}")
        rng = np.random.default_rng([seed, 0xDA7A])
        self.x = rng.standard_normal((num_samples, hidden))
        teacher = rng.standard_normal((hidden, hidden)) / np.sqrt(hidden)
        self.y = np.tanh(self.x @ teacher.T)
        if targets == "zeros":
            self.y = np.zeros_like(self.y)
        self.num_samples = num_samples

    def shard(self, round: int, worker: int, num_workers: int,
              batch_per_worker: int) -> tuple[np.ndarray, np.ndarray]:
        global_batch = batch_per_worker * num_workers
        start = (round * global_batch + worker * batch_per_worker) % self.num_samples
        idx = (start + np.arange(batch_per_worker)) % self.num_samples
        return self.x[idx], self.y[idx]


def random_grad(seed: int, round: int, worker: int, layer: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([seed, round, worker, layer, 0x6AAD])
    return (rng.standard_normal(n) * 0.05).astype(np.float32)


class Worker:
    """One worker's training loop as a kernel process.

    ``nic`` provides ``pull(buf)``/``push(buf)`` returning completions and
    ``wait_drained()``.
    """

    def __init__(self, kernel, nic, worker_id: int, model: ModelConfig, data: Dataset,
                 num_workers: int, batch_per_worker: int, compute_ticks: float = 0.0,
                 overlap: bool = True, grad_source: str = "model", grad_seed: int = 0):
        self.kernel = kernel
        self.nic = nic
        self.id = worker_id
        self.model = model
        self.data = data
        self.num_workers = num_workers
        self.batch = batch_per_worker
        self.compute_ticks = compute_ticks
        self.overlap = overlap
        self.grad_source = grad_source
        self.grad_seed = grad_seed
        self.losses: list[float] = []
        self.requests: list[tuple[str, int]] = []
        self.pushed: list[np.ndarray] = []
        self.record_pushes = False
        self.round_end: list[float] = []
        self.bwd_ticks: list[float] = []
        self.compute_total = 0.0
        self.held_param_bytes = 0
        self.on_round_end = None

    def run(self, rounds: int, first_round: int = 0) -> Generator:
        for r in range(first_round, first_round + rounds):
            yield from self.run_round(r)

    def _pull(self, n: int):
        buf = np.empty(n, dtype=np.float32)
        self.requests.append(("pull", n))
        self.held_param_bytes += buf.nbytes
        yield self.nic.pull(buf)
        return buf

    def _compute(self):
        if self.compute_ticks:
            self.compute_total += self.compute_ticks
            yield self.compute_ticks

    def run_round(self, r: int) -> Generator:
        h, n = self.model.hidden, self.model.block_size
        x, y = self.data.shard(r, self.id, self.num_workers, self.batch)
        acts = [x]
        for _ in range(self.model.layers):
            params = yield from self._pull(n)
            acts.append(block_forward(params, acts[-1], h))
            self.held_param_bytes -= params.nbytes
            del params
            yield from self._compute()
        loss, delta = output_loss(acts.pop(), y, self.batch * self.num_workers)
        self.losses.append(loss)

        bwd_start = self.kernel.now
        pending = []
        for k in reversed(range(self.model.layers)):
            params = yield from self._pull(n)
            grad, delta = block_backward(params, acts[k], delta, h)
            self.held_param_bytes -= params.nbytes
            del params
            yield from self._compute()
            if self.grad_source == "random":
                g32 = random_grad(self.grad_seed, r, self.id, k, n)
            else:
                g32 = grad.astype(np.float32)
            if self.record_pushes:
                self.pushed.append(g32.copy())
            self.requests.append(("push", n))
            done = self.nic.push(g32)
            if not self.overlap:
                yield done
                yield self.nic.wait_drained()
            pending.append(done)
        yield pending
        self.bwd_ticks.append(self.kernel.now - bwd_start)
        self.round_end.append(self.kernel.now)
        assert self.held_param_bytes == 0
        if self.on_round_end:
            self.on_round_end(self, r)
