"""Synthetic registration pairs with a known displacement field.

The fixed image is an analytic sum of Gaussian blobs. A smooth random
field ``u`` is drawn and the moving image is built so that
``moving(x + u(x)) ~= fixed(x)``: the inverse deformation is found by
fixed-point iteration and the blob function is evaluated there directly,
so no resampling blur enters the moving image. ``u`` is therefore the
target a registration of moving onto fixed should recover; inverse
consistency error and interpolation bound how closely it can.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from gradreg.metrics import ndv
from gradreg.volume import DisplacementField, LabelMap, LandmarkSet, Volume3, _trilinear

LABEL_THRESHOLD = 0.35
# the broadest blobs carry labels and landmarks
N_LABELLED = 12
# blobs are evaluated out to this many sigmas
_SUPPORT = 5.0
_INVERSE_ITERS = 60


@dataclass
class SynthCase:
    fixed: Volume3
    moving: Volume3
    field: DisplacementField
    fixed_labels: LabelMap
    moving_labels: LabelMap
    fixed_lms: LandmarkSet
    moving_lms: LandmarkSet
    field_ndv: float


@dataclass
class _Blobs:
    centers: np.ndarray
    sigmas: np.ndarray
    amps: np.ndarray

    @property
    def labelled(self) -> np.ndarray:
        """Indices of the labelled blobs, broadest first."""
        return np.argsort(-self.sigmas, kind="stable")[:N_LABELLED]

    def evaluate(self, grid_pts: list[np.ndarray], pad: float):
        """Intensity and blob label at ``grid_pts`` (per-axis coordinate arrays
        on the voxel grid, each within ``pad`` voxels of its grid position)."""
        shape = grid_pts[0].shape
        value = np.zeros(shape)
        top = np.zeros(shape)
        label = np.zeros(shape, dtype=np.int32)
        label_of = np.zeros(len(self.sigmas), dtype=np.int32)
        label_of[self.labelled] = np.arange(1, len(self.labelled) + 1)
        for k, (c, s, a) in enumerate(zip(self.centers, self.sigmas, self.amps)):
            reach = _SUPPORT * s + pad
            box = tuple(
                slice(max(0, int(np.floor(c[i] - reach))), min(shape[i], int(np.ceil(c[i] + reach)) + 1))
                for i in range(3)
            )
            r2 = sum((grid_pts[i][box] - c[i]) ** 2 for i in range(3))
            rel = np.exp(-r2 / (2.0 * s * s))
            value[box] += a * rel
            if label_of[k]:
                t = top[box]
                take = (rel > t) & (rel > LABEL_THRESHOLD)
                label[box][take] = label_of[k]
                top[box] = np.maximum(t, rel)
        return value, label


def _random_blobs(rng: np.random.Generator, size: int) -> _Blobs:
    # dense, mostly fine-scale texture with a few broad blobs for the coarse levels
    count = size**3 // 11
    centers = rng.uniform(0.0, size - 1.0, (count, 3))
    sigmas = np.exp(rng.uniform(np.log(0.6), np.log(size / 10.0), count))
    amps = rng.uniform(0.3, 1.0, count) * rng.choice([-1.0, 1.0], count) / sigmas
    return _Blobs(centers, sigmas, amps)


def smooth_field(rng: np.random.Generator, size: int, max_disp: float) -> np.ndarray:
    noise = rng.standard_normal((3, size, size, size))
    sigma = size / 8.0
    u = np.stack([ndimage.gaussian_filter(noise[c], sigma, mode="reflect") for c in range(3)], axis=-1)
    peak = float(np.max(np.linalg.norm(u, axis=-1)))
    if max_disp == 0 or peak == 0:
        return np.zeros_like(u)
    return u * (max_disp / peak)


def invert_field(u: np.ndarray, iters: int = _INVERSE_ITERS) -> np.ndarray:
    """``v`` with ``y + v(y) = phi^-1(y)`` via ``v <- -u(y + v)``."""
    dims = u.shape[:3]
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    v = -u.copy()
    for _ in range(iters):
        p = [grid[c] + v[..., c] for c in range(3)]
        v = -np.stack([_trilinear(u[..., c], *p, False)[0] for c in range(3)], axis=-1)
    return v


def make_case(size: int, seed: int, max_disp: float) -> SynthCase:
    """Build a deterministic synthetic pair.

    ``size >= 16`` and ``0 <= max_disp < size / 4``; for
    ``max_disp <= size / 16`` the ground-truth field is checked fold-free.
    """
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if not 0 <= max_disp < size / 4:
        raise ValueError(f"max_disp must lie in [0, size/4), got {max_disp}")
    rng = np.random.default_rng(seed)
    blobs = _random_blobs(rng, size)
    u = smooth_field(rng, size, max_disp)

    grid = np.meshgrid(*(np.arange(size, dtype=np.float64) for _ in range(3)), indexing="ij")
    pad = float(np.ceil(max_disp)) + 1.0
    fixed_val, fixed_lab = blobs.evaluate(grid, pad)
    if max_disp == 0:
        moving_val, moving_lab = fixed_val, fixed_lab
    else:
        v = invert_field(u)
        moving_val, moving_lab = blobs.evaluate([grid[c] + v[..., c] for c in range(3)], pad)

    field = DisplacementField(u.astype(np.float32))
    field_ndv = ndv(field)
    if max_disp <= size / 16 and field_ndv > 0:
        raise RuntimeError(f"generated field folds (ndv {field_ndv:.4f}%) despite max_disp <= size/16")

    centers = blobs.centers[blobs.labelled]
    fixed_pts = centers[np.all((centers >= 1.0) & (centers <= size - 2.0), axis=1)]
    f = field.data.astype(np.float64)
    disp_at = np.stack([_trilinear(f[..., c], *fixed_pts.T, False)[0] for c in range(3)], axis=1)

    return SynthCase(
        fixed=Volume3(fixed_val.astype(np.float32)),
        moving=Volume3(moving_val.astype(np.float32)),
        field=field,
        fixed_labels=LabelMap(fixed_lab.astype(np.int16)),
        moving_labels=LabelMap(moving_lab.astype(np.int16)),
        fixed_lms=LandmarkSet(fixed_pts),
        moving_lms=LandmarkSet(fixed_pts + disp_at),
        field_ndv=field_ndv,
    )


def endpoint_error(estimate: DisplacementField, truth: DisplacementField) -> float:
    """Mean Euclidean distance between two fields, in voxels."""
    diff = estimate.data.astype(np.float64) - truth.data.astype(np.float64)
    return float(np.mean(np.linalg.norm(diff, axis=-1)))
