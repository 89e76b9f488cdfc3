"""Run configuration: typed ``key=value`` settings with validation.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Every key has a declared type and default; unknown keys are rejected before
anything runs.  The effective config is written next to run outputs so the
run can be reproduced from it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

ROLES = ("all-in-one", "worker", "switch", "optimizer", "oracle")

# key: (type, default)
KEYS: dict[str, tuple[type, Any]] = {
    "run.seed": (int, 0),
    "run.workers": (int, 2),
    "run.rounds": (int, 10),
    "run.role": (str, "all-in-one"),
    "run.mode": (str, "sim"),
    "run.worker_index": (int, 0),
    "quant.frac_bits": (int, 20),
    "wire.elems_per_packet": (int, 64),
    "switch.window": (int, 256),
    "switch.leader": (int, 0),
    "transport.window": (int, 128),
    "transport.heartbeat_divisor": (int, 4),
    "transport.loss_detect_period": (float, 0.0),  # 0: 50 x fabric round trip
    "transport.resend_stagger_unit": (float, 4.0),
    "access.queue_depth": (int, 64),
    "access.max_message_elems": (int, 1 << 24),
    "opt.lr": (float, 1e-3),
    "opt.beta1": (float, 0.9),
    "opt.beta2": (float, 0.999),
    "opt.eps": (float, 1e-8),
    "opt.pipeline": (bool, True),
    "opt.buffer_layers": (int, 4),
    "opt.update_ticks_per_elem": (float, 0.0),
    "store.dir": (str, ""),
    "store.rate_limit_bytes_per_sec": (float, 0.0),
    "store.read_params_bytes_per_sec": (float, 0.0),  # 0: use the shared rate
    "store.read_states_bytes_per_sec": (float, 0.0),
    "store.write_states_bytes_per_sec": (float, 0.0),
    "store.init": (str, "seeded-random"),
    "model.layers": (int, 4),
    "model.hidden": (int, 32),
    "model.compute_ticks": (float, 20.0),
    "model.grad_source": (str, "model"),
    "data.seed": (int, -1),  # -1: use run.seed
    "data.batch_per_worker": (int, 8),
    "data.samples": (int, 4096),
    "data.targets": (str, "teacher"),
    "worker.overlap": (bool, True),
    "fabric.latency": (float, 10.0),
    "fabric.jitter": (float, 0.0),
    "fabric.service_ticks": (float, 1.0),
    "fabric.loss_prob": (float, 0.0),
    "fabric.dup_prob": (float, 0.0),
    "fabric.tick_seconds": (float, 1e-6),
    "fabric.udp_tick_seconds": (float, 1e-4),
    "fabric.trace": (bool, False),
    "fabric.manifest": (str, ""),
    "fabric.stall_factor": (float, 20.0),
}

ALIASES = {"train.rounds": "run.rounds"}


class ConfigError(ValueError):
    pass


def _parse(key: str, raw: Any) -> Any:
    typ = KEYS[key][0]
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    if typ is bool:
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if typ is int:
            return int(str(raw), 0)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


class RunConfig(Mapping[str, Any]):
    def __init__(self, values: Mapping[str, Any] | None = None):
        self._values = {k: default for k, (_, default) in KEYS.items()}
        for key, raw in (values or {}).items():
            key = ALIASES.get(key, key)
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            self._values[key] = _parse(key, raw)
        self.validate()

    def __getitem__(self, key: str) -> Any:
        return self._values[ALIASES.get(key, key)]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def replace(self, **updates: Any) -> "RunConfig":
        """Copy with updates; keyword names use ``__`` for ``.``."""
        values = dict(self._values)
        for k, v in updates.items():
            values[k.replace("__", ".")] = v
        return RunConfig(values)

    def updated(self, values: Mapping[str, Any]) -> "RunConfig":
        merged = dict(self._values)
        merged.update(values)
        return RunConfig(merged)

    def validate(self) -> None:
        v = self._values
        if v["run.role"] not in ROLES:
            raise ConfigError(f"run.role must be one of {ROLES}")
        if v["run.mode"] not in ("sim", "udp"):
            raise ConfigError("run.mode must be 'sim' or 'udp'")
        if v["store.init"] not in ("zeros", "seeded-random"):
            raise ConfigError("store.init must be 'zeros' or 'seeded-random'")
        if v["data.targets"] not in ("teacher", "zeros"):
            raise ConfigError("data.targets must be 'teacher' or 'zeros'")
        if v["model.grad_source"] not in ("model", "random"):
            raise ConfigError("model.grad_source must be 'model' or 'random'")
        for key in ("run.workers", "run.rounds", "model.layers", "model.hidden",
                    "data.batch_per_worker", "transport.window", "switch.window",
                    "opt.buffer_layers", "wire.elems_per_packet", "data.samples"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if v["run.workers"] > 254:
            raise ConfigError("at most 254 workers fit the 1-byte worker id")
        if v["transport.window"] > v["switch.window"]:
            raise ConfigError("transport.window must not exceed switch.window")
        if not 0 <= v["switch.leader"] < v["run.workers"]:
            raise ConfigError("switch.leader must name a worker")
        for key in ("fabric.loss_prob", "fabric.dup_prob"):
            if not 0.0 <= v[key] < 1.0:
                raise ConfigError(f"{key} must lie in [0, 1)")

    # -- derived values --------------------------------------------------------

    @property
    def data_seed(self) -> int:
        return self["run.seed"] if self["data.seed"] < 0 else self["data.seed"]

    @property
    def round_trip_ticks(self) -> float:
        hop = self["fabric.latency"] + self["fabric.service_ticks"] + self["fabric.jitter"]
        return 4 * hop

    @property
    def loss_detect_period(self) -> float:
        period = self["transport.loss_detect_period"]
        return period if period > 0 else 50 * self.round_trip_ticks

    def dumps(self) -> str:
        return "".join(f"{k} = {self._values[k]}\n" for k in KEYS)


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load(path: Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = parse_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return RunConfig(values)
