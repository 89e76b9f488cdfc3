"""Float <-> fixed-point conversion for integer-domain aggregation.

A single static scale ``2**frac_bits`` is shared by every worker, so the
switch can add integers without knowing anything about scales.  Values are
saturated so that the sum of ``num_workers`` converted vectors always fits
in a signed 32-bit accumulator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuantConfig:
    frac_bits: int = 20
    num_workers: int = 1

    def __post_init__(self):
        if not 1 <= self.frac_bits <= 28:
            raise ValueError(f"frac_bits must be in [1, 28], got {self.frac_bits}")
        if self.num_workers < 1:
            raise ValueError(f"num_workers must be >= 1, got {self.num_workers}")

    @property
    def scale(self) -> float:
        return float(2**self.frac_bits)

    @property
    def clamp_bound(self) -> float:
        return 2.0 ** (31 - self.frac_bits) / self.num_workers

    @property
    def max_int(self) -> int:
        # (2**31 - 1) // N keeps N saturated positives inside int32 as well.
        return (2**31 - 1) // self.num_workers


def to_fixed(values, cfg: QuantConfig) -> tuple[np.ndarray, int]:
    """Scale, round half-to-even and saturate.  Returns ``(ints, clamp_count)``."""
    v = np.asarray(values, dtype=np.float64)
    if np.isnan(v).any():
        raise ValueError("cannot convert NaN to fixed point")
    scaled = np.rint(v * cfg.scale)
    limit = cfg.max_int
    over = np.abs(scaled) > limit
    clamp_count = int(np.count_nonzero(over))
    if clamp_count:
        scaled = np.clip(scaled, -limit, limit)
    return scaled.astype(np.int32), clamp_count


def from_fixed(values, cfg: QuantConfig) -> np.ndarray:
    """Exact inverse scaling to float64."""
    return np.asarray(values, dtype=np.int32).astype(np.float64) / cfg.scale
