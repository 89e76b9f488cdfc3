"""Adam with bias correction, evaluated elementwise in float32."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def constants(self, step: int) -> dict[str, np.float32]:
        """float32 coefficients for step ``step`` (1-based)."""
        if step < 1:
            raise ValueError("Adam steps are 1-based")
        f = np.float32
        return {
            "lr": f(self.lr),
            "b1": f(self.beta1),
            "c1": f(1.0 - self.beta1),
            "b2": f(self.beta2),
            "c2": f(1.0 - self.beta2),
            "bc1": f(1.0 - self.beta1**step),
            "bc2": f(1.0 - self.beta2**step),
            "eps": f(self.eps),
        }


def adam_update(p, m, v, g, cfg: AdamConfig, step: int):
    """Return ``(p', m', v')``; every operation rounds to float32."""
    p, m, v, g = (np.asarray(a, dtype=np.float32) for a in (p, m, v, g))
    if not p.shape == m.shape == v.shape == g.shape:
        raise ValueError("adam_update needs equal-length vectors")
    k = cfg.constants(step)
    m_new = k["b1"] * m + k["c1"] * g
    v_new = k["b2"] * v + k["c2"] * (g * g)
    m_hat = m_new / k["bc1"]
    v_hat = v_new / k["bc2"]
    p_new = p - (k["lr"] * m_hat) / (np.sqrt(v_hat) + k["eps"])
    return p_new, m_new, v_new
