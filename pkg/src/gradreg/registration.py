"""Coarse-to-fine displacement-field optimization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from gradreg.fadam import DivergenceError, FAdamConfig, FAdamState, fadam_step, lr_schedule
from gradreg.similarity import LossBreakdown, LossConfig, effective_windows, objective
from gradreg.volume import (
    DisplacementField,
    ShapeError,
    Volume3,
    downsample_array,
    downsample_field_array,
    upsample_field_array,
)

log = logging.getLogger(__name__)

# voxels per step; 1e-2 under-converges within the default iteration budget
DEFAULT_LR = 3e-2


@dataclass(frozen=True)
class RegistrationConfig:
    """Pyramid depth, per-level iteration budgets (coarse to fine) and the
    loss / optimizer settings.

    When warm-starting from an existing field (``init_field``), halving
    ``optim.lr`` is the usual fine-tuning choice.
    """

    levels: int = 3
    iters_per_level: tuple[int, ...] = (100, 100, 50)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: FAdamConfig = field(default_factory=lambda: FAdamConfig(lr=DEFAULT_LR))
    converge_tol: float = 1e-5
    patience: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "iters_per_level", tuple(int(i) for i in self.iters_per_level))
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if len(self.iters_per_level) != self.levels:
            raise ValueError(
                f"iters_per_level has {len(self.iters_per_level)} entries, expected {self.levels}"
            )
        if any(i < 1 for i in self.iters_per_level):
            raise ValueError("iters_per_level entries must be >= 1")
        if not self.converge_tol > 0:
            raise ValueError(f"converge_tol must be > 0, got {self.converge_tol}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "iters_per_level": list(self.iters_per_level),
            "converge_tol": self.converge_tol,
            "patience": self.patience,
            "seed": self.seed,
            "loss": self.loss.to_dict(),
            "optim": self.optim.to_dict(),
        }


@dataclass
class RegistrationResult:
    field: DisplacementField
    history: list[list[LossBreakdown]]
    converged: bool
    iterations_run: list[int]

    @property
    def best_loss(self) -> float:
        return min(b.total for b in self.history[-1])


def check_convergence(history: Sequence[float], tol: float, patience: int) -> bool:
    """True when the last ``patience`` losses brought no relative improvement
    of at least ``tol`` over the best loss recorded before them.

    The window includes its own reference point: with ``patience=2`` the last
    two entries are compared, i.e. one step of progress is inspected.
    """
    n = len(history)
    if n == 0:
        raise ValueError("history must be non-empty")
    span = max(patience - 1, 1)
    if n <= span:
        return False
    ref = min(history[: n - span])
    recent = min(history[n - span :])
    return (ref - recent) < tol * abs(ref)


def _pyramid(arr: np.ndarray, levels: int) -> list[np.ndarray]:
    out = [np.asarray(arr, dtype=np.float64)]
    for _ in range(levels - 1):
        out.append(downsample_array(out[-1]))
    return out[::-1]


def register(
    fixed: Volume3,
    moving: Volume3,
    cfg: RegistrationConfig = RegistrationConfig(),
    init_field: DisplacementField | None = None,
) -> RegistrationResult:
    """Estimate ``u`` such that ``moving(x + u(x))`` matches ``fixed(x)``.

    Each level runs FAdam under the polynomial learning-rate decay and keeps
    the lowest-loss iterate, which seeds the next finer level.
    """
    if tuple(fixed.dims) != tuple(moving.dims):
        raise ShapeError(f"shape mismatch: {fixed.dims} vs {moving.dims}")
    if tuple(fixed.spacing) != tuple(moving.spacing):
        raise ShapeError(f"spacing mismatch: {fixed.spacing} vs {moving.spacing}")
    need = 4 * 2 ** (cfg.levels - 1)
    if min(fixed.dims) < need:
        raise ShapeError(f"volume {fixed.dims} too small for {cfg.levels} levels (need >= {need} per axis)")

    fixed_pyr = _pyramid(fixed.data, cfg.levels)
    moving_pyr = _pyramid(moving.data, cfg.levels)

    if init_field is not None:
        if tuple(init_field.dims) != tuple(fixed.dims):
            raise ShapeError(f"init field dims {init_field.dims} do not match {fixed.dims}")
        disp = init_field.data.astype(np.float64)
        for _ in range(cfg.levels - 1):
            disp = downsample_field_array(disp)
    else:
        disp = np.zeros(fixed_pyr[0].shape + (3,))

    history: list[list[LossBreakdown]] = []
    iterations: list[int] = []
    converged = False
    for level, (f_arr, m_arr, n_iter) in enumerate(zip(fixed_pyr, moving_pyr, cfg.iters_per_level)):
        if level > 0:
            disp = upsample_field_array(disp, f_arr.shape)
        windows = effective_windows(f_arr.shape, cfg.loss.lncc_window)
        state = FAdamState.zeros(disp.shape)
        level_hist: list[LossBreakdown] = []
        totals: list[float] = []
        best, best_disp = np.inf, disp
        stopped = False
        for it in range(n_iter):
            with np.errstate(over="ignore", invalid="ignore"):
                breakdown, grad = objective(f_arr, m_arr, disp, cfg.loss, windows)
            if not np.isfinite(breakdown.total):
                raise DivergenceError(f"non-finite loss at level {level}, iteration {it}")
            level_hist.append(breakdown)
            totals.append(breakdown.total)
            if breakdown.total < best:
                best, best_disp = breakdown.total, disp
            if check_convergence(totals, cfg.converge_tol, cfg.patience):
                stopped = True
                break
            step_cfg = replace(cfg.optim, lr=lr_schedule(it, n_iter, cfg.optim.lr))
            disp, state = fadam_step(disp, grad, state, step_cfg)
        log.info(
            "level %d %s: %d iterations, best total %.6f",
            level, f_arr.shape, len(level_hist), best,
        )
        history.append(level_hist)
        iterations.append(len(level_hist))
        disp = best_disp
        converged = stopped

    out = DisplacementField(disp.astype(np.float32), fixed.spacing)
    return RegistrationResult(out, history, converged, iterations)
