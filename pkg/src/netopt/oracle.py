"""Single-process reference run: no transport, no switch, no pipeline.

Each round computes every worker's gradient directly, aggregates with
``from_fixed(sum(to_fixed(g_i)))`` and applies Adam, writing the same store
and metrics formats as a distributed run.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import quant
from .cluster import (RunResult, adam_config, initial_store, make_dataset, model_config,
                      quant_configs, write_metrics)
from .config import RunConfig
from .optimizer import adam_update
from .worker import Dataset, local_grad, random_grad


def aggregate(grads: list[np.ndarray], cfg: quant.QuantConfig) -> np.ndarray:
    """Integer sum of the workers' fixed-point gradients (int64, range-checked)."""
    total = np.zeros(len(grads[0]), dtype=np.int64)
    for g in grads:
        ints, _ = quant.to_fixed(g, cfg)
        total += ints
    assert np.all(np.abs(total) < 2**31), "aggregate overflows int32"
    return total


def oracle_round(cfg: RunConfig, params: list[np.ndarray], data: Dataset, r: int):
    """Return ``(loss, per-layer aggregated ints)`` for one round."""
    model = model_config(cfg)
    n = cfg["run.workers"]
    param_q, grad_q = quant_configs(cfg)
    seen = [quant.from_fixed(quant.to_fixed(p, param_q)[0], param_q).astype(np.float32)
            for p in params]
    loss = 0.0
    per_layer: list[list[np.ndarray]] = [[] for _ in range(model.layers)]
    batch = cfg["data.batch_per_worker"]
    for i in range(n):
        x, y = data.shard(r, i, n, batch)
        shard_loss, grads = local_grad(seen, x, y, model.hidden, batch * n)
        loss += shard_loss
        for k, g in enumerate(grads):
            if cfg["model.grad_source"] == "random":
                g32 = random_grad(cfg.data_seed, r, i, k, model.block_size)
            else:
                g32 = g.astype(np.float32)
            per_layer[k].append(g32)
    return loss, [aggregate(gs, grad_q) for gs in per_layer]


def run_oracle(cfg: RunConfig, out: Path, record: list | None = None) -> RunResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    store = initial_store(cfg, out / "final_state")
    model = model_config(cfg)
    data = make_dataset(cfg)
    _, grad_q = quant_configs(cfg)
    adam = adam_config(cfg)
    rows = []
    for r in range(cfg["run.rounds"]):
        params = store.read_all("params")
        loss, sums = oracle_round(cfg, params, data, r)
        step = store.step + 1
        for layer, total in zip(store.layers, sums):
            if record is not None:
                record.append((r, layer.layer_id, total))
            g = quant.from_fixed(total.astype(np.int32), grad_q).astype(np.float32)
            p, m, v = adam_update(store.read("params", layer), store.read("m", layer),
                                  store.read("v", layer), g, adam, step)
            store.write("params", layer, p)
            store.write("m", layer, m)
            store.write("v", layer, v)
        store.set_step(step)
        rows.append({"round": r, "loss": loss, "model_elems": model.total})
    write_metrics(out / "metrics.csv", rows)
    return RunResult(rows, store.dir)
