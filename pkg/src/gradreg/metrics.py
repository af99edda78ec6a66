"""Registration quality metrics: Dice, HD95, TRE, non-diffeomorphic volume
and the gradient-correlation score."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from gradreg.similarity import DEFAULT_EPS, gc
from gradreg.volume import DisplacementField, LabelMap, LandmarkSet, ShapeError, Volume3, _trilinear

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    """Any metric whose inputs were not supplied stays ``None``."""

    dice_per_label: Optional[dict[int, float]] = None
    dice_mean: Optional[float] = None
    hd95_per_label: Optional[dict[int, float]] = None
    hd95_mean: Optional[float] = None
    hd95_skipped: list[int] = field(default_factory=list)
    tre_mean: Optional[float] = None
    ndv_percent: Optional[float] = None
    gc_score: Optional[float] = None

    def to_dict(self) -> dict:
        def table(d):
            return None if d is None else {str(k): v for k, v in sorted(d.items())}

        return {
            "dice_mean": self.dice_mean,
            "hd95_mean": self.hd95_mean,
            "tre_mean": self.tre_mean,
            "ndv_percent": self.ndv_percent,
            "gc_score": self.gc_score,
            "dice_per_label": table(self.dice_per_label),
            "hd95_per_label": table(self.hd95_per_label),
            "hd95_skipped": list(self.hd95_skipped),
        }


def _check_pair(a, b) -> None:
    if tuple(a.dims) != tuple(b.dims):
        raise ShapeError(f"shape mismatch: {tuple(a.dims)} vs {tuple(b.dims)}")


def _mean(values) -> float:
    vals = list(values)
    return float(np.mean(vals)) if vals else float("nan")


def dice(a: LabelMap, b: LabelMap) -> tuple[dict[int, float], float]:
    """Per-label Dice over the union of labels in both maps, and their mean."""
    _check_pair(a, b)
    scores = {}
    for label in sorted(set(a.labels) | set(b.labels)):
        ma = a.data == label
        mb = b.data == label
        na, nb = int(ma.sum()), int(mb.sum())
        scores[label] = 2.0 * int(np.logical_and(ma, mb).sum()) / (na + nb)
    return scores, _mean(scores.values())


_FACE = ndimage.generate_binary_structure(3, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside (grid edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACE, border_value=0)


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    # nearest dst boundary voxel for every src boundary voxel, exact EDT
    _, nearest = ndimage.distance_transform_edt(~dst, sampling=spacing, return_indices=True)
    pts = np.argwhere(src)
    near = nearest[:, pts[:, 0], pts[:, 1], pts[:, 2]].T
    delta = (pts - near) * np.asarray(spacing, dtype=np.float64)
    return np.sqrt(np.sum(delta * delta, axis=1))


def hd95_masks(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of pooled bidirectional boundary distances (mm)."""
    ba, bb = boundary(a), boundary(b)
    if not ba.any() or not bb.any():
        raise ValueError("hd95 needs two non-empty masks")
    pooled = np.concatenate([_directed(ba, bb, spacing), _directed(bb, ba, spacing)])
    return float(np.percentile(pooled, 95, method="linear"))


def hd95(a: LabelMap, b: LabelMap) -> tuple[dict[int, float], float, list[int]]:
    """Per-label HD95 in mm, their mean, and labels skipped for being empty in one map."""
    _check_pair(a, b)
    if tuple(a.spacing) != tuple(b.spacing):
        raise ShapeError(f"spacing mismatch: {a.spacing} vs {b.spacing}")
    scores, skipped = {}, []
    for label in sorted(set(a.labels) | set(b.labels)):
        ma = a.data == label
        mb = b.data == label
        if not ma.any() or not mb.any():
            log.warning("hd95: label %d empty in one map, skipped", label)
            skipped.append(label)
            continue
        scores[label] = hd95_masks(ma, mb, a.spacing)
    return scores, _mean(scores.values()), skipped


def tre(
    fixed_lms: LandmarkSet, moving_lms: LandmarkSet, field: DisplacementField, spacing=None
) -> float:
    """Mean distance (mm) between displaced fixed landmarks and their moving partners."""
    if fixed_lms.count != moving_lms.count:
        raise ValueError(f"landmark count mismatch: {fixed_lms.count} vs {moving_lms.count}")
    if fixed_lms.count == 0:
        return float("nan")
    sp = np.asarray(field.spacing if spacing is None else spacing, dtype=np.float64)
    vox = fixed_lms.points / sp
    upper = np.asarray(field.dims, dtype=np.float64) - 1.0
    bad = np.flatnonzero(((vox < 0) | (vox > upper)).any(axis=1))
    if bad.size:
        raise ValueError(f"landmarks out of bounds at indices {bad.tolist()}")
    px, py, pz = vox[:, 0], vox[:, 1], vox[:, 2]
    u = np.stack([_trilinear(field.data[..., c], px, py, pz, False)[0] for c in range(3)], axis=1)
    warped_mm = (vox + u) * sp
    return float(np.mean(np.linalg.norm(warped_mm - moving_lms.points, axis=1)))


# Five-tetrahedra splits of the unit cube. Corners are (dx, dy, dz) offsets;
# the first tetrahedron of each split is the central one.
_EVEN = [(0, 0, 0), (1, 1, 0), (1, 0, 1), (0, 1, 1)]
_ODD = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)]


def _split(central, outer):
    tets = [tuple(central)]
    for apex in outer:
        # face-adjacent central corners of an outer corner differ in one coordinate
        near = [c for c in central if sum(abs(p - q) for p, q in zip(apex, c)) == 1]
        tets.append((apex, *near))
    return tets


_SPLITS = (_split(_EVEN, _ODD), _split(_ODD, _EVEN))


def _orient(tet) -> float:
    a, b, c, d = (np.asarray(p, dtype=np.float64) for p in tet)
    return float(np.sign(np.linalg.det(np.stack([b - a, c - a, d - a]))))


def _corner(pos: np.ndarray, off) -> np.ndarray:
    nx, ny, nz = pos.shape[:3]
    dx, dy, dz = off
    return pos[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz]


def deformed_positions(field: DisplacementField) -> np.ndarray:
    dims = field.dims
    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"), axis=-1)
    return grid + field.data.astype(np.float64)


def ndv(field: DisplacementField) -> float:
    """Non-diffeomorphic volume as a percentage of the grid volume.

    Every grid cell is cut into five tetrahedra in both complementary ways;
    the negative part of each deformed tetrahedron's signed volume is summed
    and the two splits averaged. The grid volume is the number of cells, so a
    full reflection scores exactly 100. Tangled fields can fold more mass
    than the grid holds; the percentage is capped at 100.
    """
    if min(field.dims) < 2:
        raise ShapeError(f"degenerate dims {field.dims}")
    pos = deformed_positions(field)
    negative = 0.0
    for split in _SPLITS:
        for tet in split:
            a, b, c, d = (_corner(pos, off) for off in tet)
            # six times the signed volume; stays integral for integer fields
            vol6 = np.einsum("...i,...i->...", b - a, np.cross(c - a, d - a)) * _orient(tet)
            negative += float(np.sum(np.maximum(0.0, -vol6)))
    cells = np.prod([n - 1 for n in field.dims], dtype=np.float64)
    return min(100.0, 100.0 * negative / (12.0 * cells))


def jacobian_negative_percent(field: DisplacementField) -> float:
    """Diagnostic only: percent of voxels whose central-difference Jacobian
    determinant of ``x + u(x)`` is non-positive."""
    pos = deformed_positions(field)
    jac = np.stack([np.stack(np.gradient(pos[..., c], axis=(0, 1, 2)), axis=-1) for c in range(3)], axis=-2)
    det = np.linalg.det(jac)
    return 100.0 * float(np.mean(det <= 0))


def gc_score(fixed: Volume3, moved: Volume3, eps: float = DEFAULT_EPS) -> float:
    return gc(fixed, moved, eps)


def evaluate(
    *,
    fixed_labels: LabelMap | None = None,
    warped_labels: LabelMap | None = None,
    field: DisplacementField | None = None,
    fixed_lms: LandmarkSet | None = None,
    moving_lms: LandmarkSet | None = None,
    fixed: Volume3 | None = None,
    moved: Volume3 | None = None,
) -> MetricsReport:
    """Compute every metric whose inputs are present."""
    report = MetricsReport()
    if fixed_labels is not None and warped_labels is not None:
        report.dice_per_label, report.dice_mean = dice(fixed_labels, warped_labels)
        report.hd95_per_label, report.hd95_mean, report.hd95_skipped = hd95(fixed_labels, warped_labels)
    if field is not None:
        report.ndv_percent = ndv(field)
        if fixed_lms is not None and moving_lms is not None:
            report.tre_mean = tre(fixed_lms, moving_lms, field)
    if fixed is not None and moved is not None:
        report.gc_score = gc_score(fixed, moved)
    return report
