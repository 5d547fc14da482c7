"""Detection and segmentation metrics: DSC, NSD, and detection F1 sweeps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import DegenerateCohort, ShapeMismatch
from .grid import VoxelGrid

_CUBE26 = np.ones((3, 3, 3), dtype=bool)
_CROSS6 = ndimage.generate_binary_structure(3, 1)


def _as_bool(mask) -> np.ndarray:
    data = mask.data if isinstance(mask, VoxelGrid) else np.asarray(mask)
    return data.astype(bool)


def dsc(pred, truth) -> float:
    """Dice similarity coefficient 2|A∩B| / (|A|+|B|); two empty masks score 1."""
    a = _as_bool(pred)
    b = _as_bool(truth)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    na = int(a.sum())
    nb = int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def boundary_voxels(mask) -> np.ndarray:
    """Inner boundary: mask voxels with a face-adjacent background (or grid-edge) neighbor."""
    m = _as_bool(mask)
    if not m.any():
        return np.zeros_like(m)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS6, border_value=0)


def nsd(pred, truth, tolerance_mm: float, spacing_mm) -> float:
    """Normalized surface distance at a tolerance.

    The fraction of boundary voxels of each mask lying within
    ``tolerance_mm`` (exact Euclidean distance, anisotropic spacing) of the
    other mask's boundary, averaged symmetrically by pooling both boundaries.
    Two empty masks score 1; one empty mask scores 0.
    """
    a = _as_bool(pred)
    b = _as_bool(truth)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    ba = boundary_voxels(a)
    bb = boundary_voxels(b)
    na = int(ba.sum())
    nb = int(bb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    spacing = tuple(float(s) for s in spacing_mm)
    dist_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    hits = int(np.sum(dist_to_b[ba] <= tolerance_mm)) + int(np.sum(dist_to_a[bb] <= tolerance_mm))
    return hits / (na + nb)


class OperatingPoint(NamedTuple):
    threshold: float
    f1: float
    sensitivity: float
    specificity: float


def detection_f1_sweep(scores, labels) -> OperatingPoint:
    """Find the detection threshold maximizing F1 over observed score values.

    A case is called positive when its score is >= the threshold. Ties in F1
    resolve to the lowest threshold. Requires at least one positive and one
    negative label.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1D arrays of equal length")
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateCohort(f"need both classes, got {n_pos} positives / {n_neg} negatives")

    best: OperatingPoint | None = None
    for thr in np.unique(scores):
        pred = scores >= thr
        tp = int(np.sum(pred & labels))
        fp = int(np.sum(pred & ~labels))
        fn = int(np.sum(~pred & labels))
        tn = int(np.sum(~pred & ~labels))
        f1 = 2.0 * tp / (2.0 * tp + fp + fn) if tp else 0.0
        if best is None or f1 > best.f1:
            best = OperatingPoint(
                threshold=float(thr),
                f1=f1,
                sensitivity=tp / n_pos,
                specificity=tn / n_neg,
            )
    return best


def largest_component_volume_mm3(
    probs, spacing_mm, prob_threshold: float = 0.5, connectivity_26: bool = True
) -> float:
    """Volume of the largest connected component of the thresholded grid."""
    data = probs.data if isinstance(probs, VoxelGrid) else np.asarray(probs)
    binary = data >= prob_threshold
    if not binary.any():
        return 0.0
    structure = _CUBE26 if connectivity_26 else _CROSS6
    labeled, n = ndimage.label(binary, structure=structure)
    counts = np.bincount(labeled.ravel())[1:]
    sh, sw, sl = (float(s) for s in spacing_mm)
    return float(counts.max()) * sh * sw * sl


@dataclass(frozen=True)
class DetectionOutcome:
    """Case-level tumor presence: prediction vs ground truth for one CT/organ."""

    ct_id: str
    organ_id: str | None
    predicted: bool
    actual: bool
    score: float


def detect_tumor(
    probs: VoxelGrid,
    organ_mask: VoxelGrid | None = None,
    prob_threshold: float = 0.5,
    min_volume_mm3: float = 50.0,
) -> tuple[bool, float]:
    """Case-level detection rule: largest 26-connected component volume.

    Thresholds the probability grid (restricted to the organ when a mask is
    given) and reports (present, score) where the score is the largest
    component's volume in mm³ and presence means it exceeds
    ``min_volume_mm3``.
    """
    data = probs.data.astype(np.float64, copy=False)
    if organ_mask is not None:
        data = data * organ_mask.data.astype(bool)
    score = largest_component_volume_mm3(data, probs.spacing_mm, prob_threshold)
    return score > min_volume_mm3, score


def confusion_counts(outcomes) -> dict[str, int]:
    """TP/FP/TN/FN tally over detection outcomes (sums to the cohort size)."""
    counts = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for o in outcomes:
        if o.predicted and o.actual:
            counts["tp"] += 1
        elif o.predicted and not o.actual:
            counts["fp"] += 1
        elif not o.predicted and o.actual:
            counts["fn"] += 1
        else:
            counts["tn"] += 1
    return counts
