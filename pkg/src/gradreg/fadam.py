"""Fisher-Adam: Adam with the gradient preconditioned by a diagonal Fisher
estimate before it enters the momentum.

One step, for parameters ``theta`` and gradient ``g``::

    t      <- t + 1
    v      <- beta2 * v + (1 - beta2) * g**2
    v_hat  <- v / (1 - beta2**t)
    g_nat  <- g / (v_hat**rho + eps)
    g_nat  <- g_nat / max(1, rms(g_nat) / clip)
    m      <- beta1 * m + (1 - beta1) * g_nat
    d      <- theta / (v_hat**rho + eps)          (only if weight_decay > 0)
    theta  <- theta - lr * (m + weight_decay * d)

The momentum is deliberately not bias-corrected: it accumulates gradients
that are already scaled by the Fisher factor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class DivergenceError(FloatingPointError):
    """A gradient or loss became non-finite."""


@dataclass(frozen=True)
class FAdamConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rho: float = 0.5
    clip: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if not self.clip > 0:
            raise ValueError(f"clip must be > 0, got {self.clip}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FAdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size_or_shape) -> "FAdamState":
        return cls(np.zeros(size_or_shape), np.zeros(size_or_shape), 0)


def fadam_step(
    params: np.ndarray, grads: np.ndarray, state: FAdamState, cfg: FAdamConfig
) -> tuple[np.ndarray, FAdamState]:
    """Apply one update. Inputs are left untouched; new arrays are returned."""
    theta = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if not (theta.shape == g.shape == state.m.shape == state.v.shape):
        raise ValueError(
            f"length mismatch: params {theta.shape}, grads {g.shape}, "
            f"m {state.m.shape}, v {state.v.shape}"
        )
    if not np.isfinite(g).all():
        raise DivergenceError("divergent gradient")

    t = state.t + 1
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * (g * g)
    v_hat = v / (1.0 - cfg.beta2**t)
    fisher = v_hat**cfg.rho + cfg.eps
    g_nat = g / fisher
    rms = float(np.sqrt(np.mean(g_nat * g_nat))) if g_nat.size else 0.0
    g_nat = g_nat / max(1.0, rms / cfg.clip)
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g_nat
    step = m
    if cfg.weight_decay > 0:
        step = m + cfg.weight_decay * (theta / fisher)
    return theta - cfg.lr * step, FAdamState(m, v, t)


def lr_schedule(step: int, total_steps: int, lr0: float, power: float = 0.9) -> float:
    """Polynomial decay ``lr0 * (1 - step/total_steps) ** power``."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power
