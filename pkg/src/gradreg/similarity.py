"""Similarity terms, diffusion regularizer and the composite registration
objective, each with a hand-derived gradient.

The objective is

    total = L_IC + gamma * L_GC + lambda * L_reg

where ``L_IC = 1 - mean local correlation`` of intensities, ``L_GC = 1 - GC``
with GC the mean of the axis-wise correlations of finite-difference image
gradients, and ``L_reg`` the forward-difference diffusion energy of the
displacement field.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from gradreg.volume import (
    DisplacementField,
    ShapeError,
    Volume3,
    gradient_adjoint,
    gradient_array,
    warp_array,
)

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class LossConfig:
    """Weights and knobs for :func:`total_loss`.

    ``gamma`` weights the gradient-correlation term and ``lam`` the diffusion
    regularizer; 0.5 and 2.0 balance the two similarity terms against each
    other and against the regularizer. ``use_*`` switch whole terms off (a
    disabled term reports 0).
    """

    gamma: float = 0.5
    lam: float = 2.0
    lncc_window: int = 9
    eps: float = DEFAULT_EPS
    use_ic: bool = True
    use_gc: bool = True
    use_reg: bool = True

    def __post_init__(self) -> None:
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if int(self.lncc_window) != self.lncc_window or self.lncc_window < 3 or self.lncc_window % 2 == 0:
            raise ValueError(f"lncc_window must be an odd integer >= 3, got {self.lncc_window}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass(frozen=True)
class LossBreakdown:
    l_ic: float
    l_gc: float
    l_sim: float
    l_reg: float
    total: float

    @classmethod
    def compose(cls, l_ic: float, l_gc: float, l_reg: float, cfg: LossConfig) -> "LossBreakdown":
        l_ic, l_gc, l_reg = float(l_ic), float(l_gc), float(l_reg)
        l_sim = l_ic + cfg.gamma * l_gc
        return cls(l_ic, l_gc, l_sim, l_reg, l_sim + cfg.lam * l_reg)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# array kernels


def _ncc(a: np.ndarray, b: np.ndarray, eps: float, want_grad: bool = False):
    """Pearson correlation with variances floored at ``eps``.

    With ``want_grad`` also returns d ncc / d b.
    """
    da = a - a.mean()
    db = b - b.mean()
    va = float(np.sum(da * da))
    vb = float(np.sum(db * db))
    cross = float(np.sum(da * db))
    den = np.sqrt(max(va, eps)) * np.sqrt(max(vb, eps))
    r = cross / den
    if not want_grad:
        return r
    grad = da / den
    if vb > eps:
        grad = grad - (r / vb) * db
    return r, grad


def _gc(a: np.ndarray, b: np.ndarray, eps: float, want_grad: bool = False):
    total = 0.0
    grad = np.zeros(b.shape) if want_grad else None
    for axis in range(3):
        ga = gradient_array(a, axis)
        gb = gradient_array(b, axis)
        if want_grad:
            r, g = _ncc(ga, gb, eps, want_grad=True)
            grad += gradient_adjoint(g, axis)
        else:
            r = _ncc(ga, gb, eps)
        total += r
    if want_grad:
        return total / 3.0, grad / 3.0
    return total / 3.0


def _window_starts(n: int, w: int) -> np.ndarray:
    # windows are shifted, not cut, at the borders: every window holds w samples
    return np.clip(np.arange(n) - w // 2, 0, n - w)


def _box_axis(arr: np.ndarray, w: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    s = _window_starts(n, w)
    a = np.moveaxis(arr, axis, 0)
    c = np.empty((n + 1,) + a.shape[1:])
    c[0] = 0.0
    np.cumsum(a, axis=0, out=c[1:])
    return np.moveaxis(c[s + w] - c[s], 0, axis)


def _box_adjoint_axis(q: np.ndarray, w: int, axis: int) -> np.ndarray:
    n = q.shape[axis]
    s = _window_starts(n, w)
    a = np.moveaxis(q, axis, 0)
    starts, first = np.unique(s, return_index=True)
    grouped = np.add.reduceat(a, first, axis=0)
    d = np.zeros((n + 1,) + a.shape[1:])
    d[starts] += grouped
    d[starts + w] -= grouped
    return np.moveaxis(np.cumsum(d[:n], axis=0), 0, axis)


def _box(arr: np.ndarray, windows: Sequence[int]) -> np.ndarray:
    for axis, w in enumerate(windows):
        arr = _box_axis(arr, w, axis)
    return arr


def _box_adjoint(arr: np.ndarray, windows: Sequence[int]) -> np.ndarray:
    for axis, w in enumerate(windows):
        arr = _box_adjoint_axis(arr, w, axis)
    return arr


def _lncc(f: np.ndarray, m: np.ndarray, windows: Sequence[int], eps: float, want_grad: bool = False):
    """``1 - mean`` local correlation over ``windows``-sized boxes."""
    n = float(np.prod(windows))
    sf = _box(f, windows)
    sm = _box(m, windows)
    sff = _box(f * f, windows)
    smm = _box(m * m, windows)
    sfm = _box(f * m, windows)
    mu_f = sf / n
    mu_m = sm / n
    cross = sfm - sf * mu_m
    vf = sff - sf * mu_f
    vm = smm - sm * mu_m
    den = np.sqrt(np.maximum(vf, eps)) * np.sqrt(np.maximum(vm, eps))
    cc = cross / den
    loss = 1.0 - float(np.mean(cc))
    if not want_grad:
        return loss
    inv_den = 1.0 / den
    b = np.where(vm > eps, cc / np.where(vm > eps, vm, 1.0), 0.0)
    a1 = _box_adjoint(inv_den, windows)
    a2 = _box_adjoint(mu_f * inv_den, windows)
    b1 = _box_adjoint(b, windows)
    b2 = _box_adjoint(b * mu_m, windows)
    grad = -(f * a1 - a2 - m * b1 + b2) / f.size
    return loss, grad


def _diffusion(disp: np.ndarray, want_grad: bool = False):
    nvox = disp.shape[0] * disp.shape[1] * disp.shape[2]
    scale = 1.0 / (3.0 * nvox)
    total = 0.0
    grad = np.zeros(disp.shape) if want_grad else None
    for axis in range(3):
        d = np.diff(disp, axis=axis)
        total += float(np.sum(d * d))
        if want_grad:
            g = 2.0 * scale * d
            lo = [slice(None)] * 4
            hi = [slice(None)] * 4
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            grad[tuple(hi)] += g
            grad[tuple(lo)] -= g
    if want_grad:
        return total * scale, grad
    return total * scale


def effective_windows(dims: Sequence[int], window: int) -> tuple[int, int, int]:
    """Per-axis LNCC window, shrunk to the axis extent on small grids."""
    return tuple(min(window, n) for n in dims)  # type: ignore[return-value]


def objective(
    fixed: np.ndarray,
    moving: np.ndarray,
    disp: np.ndarray,
    cfg: LossConfig,
    windows: Sequence[int] | None = None,
) -> tuple[LossBreakdown, np.ndarray]:
    """Loss breakdown and d total / d disp for raw arrays (float64 math)."""
    if windows is None:
        windows = effective_windows(fixed.shape, cfg.lncc_window)
    fixed = np.asarray(fixed, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    moved, jac = warp_array(moving, disp, with_grad=True)
    d_moved = np.zeros(fixed.shape)
    l_ic = l_gc = l_reg = 0.0
    if cfg.use_ic:
        l_ic, g = _lncc(fixed, moved, windows, cfg.eps, want_grad=True)
        d_moved += g
    if cfg.use_gc:
        if cfg.gamma > 0:
            score, g = _gc(fixed, moved, cfg.eps, want_grad=True)
            d_moved -= cfg.gamma * g
        else:
            score = _gc(fixed, moved, cfg.eps)
        l_gc = 1.0 - score
    grad = d_moved[..., None] * jac
    if cfg.use_reg:
        if cfg.lam > 0:
            l_reg, g = _diffusion(disp, want_grad=True)
            grad += cfg.lam * g
        else:
            l_reg = _diffusion(disp)
    return LossBreakdown.compose(l_ic, l_gc, l_reg, cfg), grad


# ---------------------------------------------------------------------------
# public operations on typed grids


def _same_dims(a, b) -> None:
    if tuple(a.dims) != tuple(b.dims):
        raise ShapeError(f"shape mismatch: {tuple(a.dims)} vs {tuple(b.dims)}")


def _f64(vol: Volume3) -> np.ndarray:
    return vol.data.astype(np.float64)


def ncc_global(a: Volume3, b: Volume3, eps: float = DEFAULT_EPS) -> float:
    """Normalized cross-correlation over all voxels.

    A constant input has its variance floored at ``eps`` and correlates as 0.
    """
    _same_dims(a, b)
    return _ncc(_f64(a), _f64(b), eps)


def gc(a: Volume3, b: Volume3, eps: float = DEFAULT_EPS) -> float:
    """Mean NCC of the x, y and z finite-difference gradients."""
    _same_dims(a, b)
    return _gc(_f64(a), _f64(b), eps)


def loss_gc(fixed: Volume3, moved: Volume3, eps: float = DEFAULT_EPS) -> float:
    return 1.0 - gc(fixed, moved, eps)


def loss_lncc(fixed: Volume3, moved: Volume3, window: int = 9, eps: float = DEFAULT_EPS) -> float:
    """``1 - mean`` of the local correlation coefficient in ``window``-cubed boxes.

    Boxes near the border are shifted inward so each one covers exactly
    ``window**3`` voxels; a window equal to every extent therefore reduces to
    the global NCC.
    """
    _same_dims(fixed, moved)
    if int(window) != window or window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    if window > min(fixed.dims):
        raise ValueError(f"window {window} exceeds smallest volume extent {min(fixed.dims)}")
    return _lncc(_f64(fixed), _f64(moved), (window,) * 3, eps)


def loss_diffusion(field: DisplacementField) -> float:
    """Mean squared forward difference of ``u`` over voxels and axes."""
    return _diffusion(field.data.astype(np.float64))


def total_loss(fixed: Volume3, moved: Volume3, field: DisplacementField, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    _same_dims(fixed, moved)
    _same_dims(fixed, field)
    f, m = _f64(fixed), _f64(moved)
    l_ic = _lncc(f, m, effective_windows(fixed.dims, cfg.lncc_window), cfg.eps) if cfg.use_ic else 0.0
    l_gc = 1.0 - _gc(f, m, cfg.eps) if cfg.use_gc else 0.0
    l_reg = loss_diffusion(field) if cfg.use_reg else 0.0
    return LossBreakdown.compose(l_ic, l_gc, l_reg, cfg)


def total_loss_grad(
    fixed: Volume3, moving: Volume3, field: DisplacementField, cfg: LossConfig = LossConfig()
) -> tuple[LossBreakdown, DisplacementField]:
    """Objective at ``moving`` warped by ``field`` and its gradient w.r.t. ``u``."""
    _same_dims(fixed, moving)
    _same_dims(fixed, field)
    breakdown, grad = objective(_f64(fixed), _f64(moving), field.data, cfg)
    return breakdown, DisplacementField(grad, field.spacing)
