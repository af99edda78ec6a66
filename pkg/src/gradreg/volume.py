"""Dense 3D grids, trilinear sampling and warping, finite-difference
gradients and the 2x resolution pyramid.

Arrays are indexed ``[x, y, z]``; ``data.ravel(order="F")`` gives the
x-fastest linear order used on disk. Displacements are in voxel units.
Storage is float32 unless the caller hands in float64, which is kept (the
gradient checks rely on it). All reductions accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from gradreg._parallel import slab_map

AXES = {"x": 0, "y": 1, "z": 2}

DEFAULT_DIMS = (160, 224, 192)
DEFAULT_SPACING = (1.0, 1.0, 1.0)


class ShapeError(ValueError):
    """Raised when grid dimensions are inconsistent or unusable."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


def _float_storage(data: Any) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return arr


def _check_spacing(spacing: Sequence[float]) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be three positive numbers, got {spacing!r}")
    return sp  # type: ignore[return-value]


def _check_dims(shape: tuple[int, ...]) -> None:
    if len(shape) != 3 or min(shape) < 2:
        raise ShapeError(f"volume dims must be three extents >= 2, got {shape}")


@dataclass(frozen=True, eq=False)
class Volume3:
    """Scalar 3D image with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    header: Any = field(default=None, repr=False)

    def __post_init__(self) -> None:
        arr = _float_storage(self.data)
        _check_dims(arr.shape)
        if not np.isfinite(arr).all():
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume3":
        return Volume3(data, self.spacing, self.header)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer segmentation; label 0 is background."""

    data: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    header: Any = field(default=None, repr=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.array_equal(arr, np.round(arr)):
                raise ValueError("label data must be integral")
            arr = arr.astype(np.int32)
        _check_dims(arr.shape)
        if arr.size and arr.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.data) if v != 0]


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement ``u`` with ``data.shape == dims + (3,)``.

    The deformation is ``phi(x) = x + u(x)`` in voxel index coordinates.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    header: Any = field(default=None, repr=False)

    def __post_init__(self) -> None:
        arr = _float_storage(self.data)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ShapeError(f"displacement data must have shape (X, Y, Z, 3), got {arr.shape}")
        _check_dims(arr.shape[:3])
        if not np.isfinite(arr).all():
            raise ValueError("displacement field contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]  # type: ignore[return-value]

    @classmethod
    def zeros(cls, dims: Sequence[int], spacing: Sequence[float] = DEFAULT_SPACING) -> "DisplacementField":
        return cls(np.zeros((*dims, 3), dtype=np.float32), tuple(spacing))


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Landmark positions in mm world coordinates, shape ``(count, 3)``."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("landmarks must be finite")
        object.__setattr__(self, "points", _freeze(pts))

    @property
    def count(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# trilinear kernels on raw arrays


def _axis_setup(p: np.ndarray, n: int):
    q = np.clip(p, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(q).astype(np.intp), n - 2)
    f = q - i0
    inside = (p >= 0.0) & (p <= n - 1.0)
    return i0, f, inside


def _trilinear(arr: np.ndarray, px: np.ndarray, py: np.ndarray, pz: np.ndarray, with_grad: bool):
    nx, ny, nz = arr.shape
    ix, fx, inx = _axis_setup(px, nx)
    iy, fy, iny = _axis_setup(py, ny)
    iz, fz, inz = _axis_setup(pz, nz)
    flat = arr.reshape(-1)
    sx, sy = ny * nz, nz
    base = ix * sx + iy * sy + iz

    def at(off: int) -> np.ndarray:
        return flat[base + off].astype(np.float64)

    c000, c001 = at(0), at(1)
    c010, c011 = at(sy), at(sy + 1)
    c100, c101 = at(sx), at(sx + 1)
    c110, c111 = at(sx + sy), at(sx + sy + 1)

    # collapse z, then y, then x; the (1-f)a + fb form is exact at f in {0, 1}
    wz, wy, wx = 1.0 - fz, 1.0 - fy, 1.0 - fx
    c00 = wz * c000 + fz * c001
    c01 = wz * c010 + fz * c011
    c10 = wz * c100 + fz * c101
    c11 = wz * c110 + fz * c111
    c0 = wy * c00 + fy * c01
    c1 = wy * c10 + fy * c11
    val = wx * c0 + fx * c1
    if not with_grad:
        return (val,)
    gx = (c1 - c0) * inx
    d0 = c01 - c00
    d1 = c11 - c10
    gy = (d0 + fx * (d1 - d0)) * iny
    e00 = c001 - c000
    e01 = c011 - c010
    e10 = c101 - c100
    e11 = c111 - c110
    e0 = e00 + fy * (e01 - e00)
    e1 = e10 + fy * (e11 - e10)
    gz = (e0 + fx * (e1 - e0)) * inz
    return val, gx, gy, gz


def _grid(dims: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return tuple(np.arange(n, dtype=np.float64) for n in dims)  # type: ignore[return-value]


def warp_array(moving: np.ndarray, disp: np.ndarray, with_grad: bool = False):
    """Sample ``moving`` at ``x + disp(x)``.

    Returns ``(warped,)`` or ``(warped, dwarped/dp)`` where the second entry
    has shape ``dims + (3,)`` and is zero across clamped axes.
    """
    nx, ny, nz = moving.shape
    gx, gy, gz = _grid(moving.shape)

    def run(sl: slice):
        px = gx[sl, None, None] + disp[sl, :, :, 0]
        py = gy[None, :, None] + disp[sl, :, :, 1]
        pz = gz[None, None, :] + disp[sl, :, :, 2]
        out = _trilinear(moving, px, py, pz, with_grad)
        if with_grad:
            return out[0], np.stack(out[1:], axis=-1)
        return out

    parts = slab_map(run, nx, moving.size)
    return parts


# ---------------------------------------------------------------------------
# public operations


def trilinear_sample(vol: Volume3, p: Sequence[float]) -> float:
    """Trilinear interpolation at a continuous voxel coordinate, border-clamped."""
    pt = np.asarray(p, dtype=np.float64)
    if pt.shape != (3,) or not np.isfinite(pt).all():
        raise ValueError(f"invalid coordinate: {p!r}")
    (val,) = _trilinear(vol.data, pt[0:1], pt[1:2], pt[2:3], with_grad=False)
    return float(val[0])


def _require_same_dims(a: Sequence[int], b: Sequence[int]) -> None:
    if tuple(a) != tuple(b):
        raise ShapeError(f"shape mismatch: {tuple(a)} vs {tuple(b)}")


def warp_image(moving: Volume3, field: DisplacementField) -> Volume3:
    """Resample ``moving`` through ``phi(x) = x + u(x)``."""
    _require_same_dims(moving.dims, field.dims)
    (out,) = warp_array(moving.data, field.data)
    dtype = np.result_type(moving.data.dtype, field.data.dtype)
    return Volume3(out.astype(dtype), moving.spacing, moving.header)


def _round_half_away(p: np.ndarray) -> np.ndarray:
    return np.sign(p) * np.floor(np.abs(p) + 0.5)


def warp_labels(labels: LabelMap, field: DisplacementField) -> LabelMap:
    """Nearest-neighbour resampling of a label map; values are never blended."""
    _require_same_dims(labels.dims, field.dims)
    u = field.data.astype(np.float64)
    idx = []
    for axis, n in enumerate(labels.dims):
        shape = [1, 1, 1]
        shape[axis] = n
        base = np.arange(n, dtype=np.float64).reshape(shape)
        p = _round_half_away(base + u[..., axis])
        idx.append(np.clip(p, 0, n - 1).astype(np.intp))
    return LabelMap(labels.data[tuple(idx)], labels.spacing, labels.header)


def gradient_array(arr: np.ndarray, axis: int) -> np.ndarray:
    """Central differences inside, one-sided at the two boundary planes."""
    n = arr.shape[axis]
    if n < 2:
        raise ShapeError("degenerate axis: need at least 2 samples")
    a = np.moveaxis(np.asarray(arr, dtype=np.float64), axis, 0)
    out = np.empty_like(a)
    out[0] = a[1] - a[0]
    out[-1] = a[-1] - a[-2]
    if n > 2:
        out[1:-1] = (a[2:] - a[:-2]) * 0.5
    return np.moveaxis(out, 0, axis)


def gradient_adjoint(r: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of :func:`gradient_array` applied to ``r``."""
    n = r.shape[axis]
    a = np.moveaxis(np.asarray(r, dtype=np.float64), axis, 0)
    out = np.zeros_like(a)
    out[0] -= a[0]
    out[1] += a[0]
    out[-1] += a[-1]
    out[-2] -= a[-1]
    if n > 2:
        half = a[1:-1] * 0.5
        out[2:] += half
        out[:-2] -= half
    return np.moveaxis(out, 0, axis)


def spatial_gradient(vol: Volume3, axis: str | int) -> Volume3:
    ax = AXES[axis] if isinstance(axis, str) else int(axis)
    if ax not in (0, 1, 2):
        raise ValueError(f"axis must be x, y or z, got {axis!r}")
    g = gradient_array(vol.data, ax)
    return Volume3(g.astype(vol.data.dtype), vol.spacing)


def _block_mean(arr: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    starts = np.arange(0, n, 2)
    counts = np.diff(np.append(starts, n)).astype(np.float64)
    summed = np.add.reduceat(arr, starts, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(starts)
    return summed / counts.reshape(shape)


def downsample_array(arr: np.ndarray) -> np.ndarray:
    """2x2x2 block average over the first three axes (ceil output size)."""
    if min(arr.shape[:3]) < 4:
        raise ShapeError(f"too small to downsample: {arr.shape[:3]}")
    out = np.asarray(arr, dtype=np.float64)
    for axis in range(3):
        out = _block_mean(out, axis)
    return out


def downsample2x(vol: Volume3) -> Volume3:
    out = downsample_array(vol.data)
    spacing = tuple(2.0 * s for s in vol.spacing)
    return Volume3(out.astype(vol.data.dtype), spacing)


def _check_upsample_dims(src: Sequence[int], target: Sequence[int]) -> None:
    if len(target) != 3 or any(abs(t - 2 * n) > 1 for n, t in zip(src, target)):
        raise ShapeError(f"target dims {tuple(target)} inconsistent with 2x of {tuple(src)}")


def upsample_field_array(disp: np.ndarray, target_dims: Sequence[int]) -> np.ndarray:
    _check_upsample_dims(disp.shape[:3], target_dims)
    tx, ty, tz = target_dims
    px = np.broadcast_to((np.arange(tx) * 0.5)[:, None, None], (tx, ty, tz))
    py = np.broadcast_to((np.arange(ty) * 0.5)[None, :, None], (tx, ty, tz))
    pz = np.broadcast_to((np.arange(tz) * 0.5)[None, None, :], (tx, ty, tz))
    comps = [_trilinear(disp[..., c], px, py, pz, with_grad=False)[0] for c in range(3)]
    return 2.0 * np.stack(comps, axis=-1)


def upsample_field2x(field: DisplacementField, target_dims: Sequence[int]) -> DisplacementField:
    """Interpolate onto a grid twice as fine and rescale to fine-voxel units."""
    out = upsample_field_array(field.data, tuple(int(t) for t in target_dims))
    spacing = tuple(s / 2.0 for s in field.spacing)
    return DisplacementField(out.astype(field.data.dtype), spacing)


def downsample_field_array(disp: np.ndarray) -> np.ndarray:
    """Block-average a field and rescale to coarse-voxel units."""
    return 0.5 * downsample_array(disp)
