"""Deep-supervision loss tying segmented tumor volume to the report volume.

The loss has two parts: a hinged, stabilized relative discrepancy between the
segmented and report-estimated tumor volumes inside one organ, and a
cross-entropy term suppressing tumor probability outside that organ. Both the
values and the exact analytic gradients w.r.t. every voxel probability are
returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoverageViolation, ExcludedOrgan
from .grid import Coverage, VoxelGrid, check_same_geometry, validate_probabilities
from .reports import OrganVolumeTarget, zero_volume_target


@dataclass(frozen=True)
class VolumeLossConfig:
    """Constants of the volume loss.

    ``stabilizer_mm3`` keeps the discrepancy ratio stable near zero volumes
    and puts its minimum at zero segmented volume for tumor-free organs.
    ``tolerance`` is the fraction of the report volume inside which the loss
    (and its gradient) vanish, absorbing report measurement variance.
    """

    stabilizer_mm3: float = 500.0
    tolerance: float = 0.10
    background_eps: float = 1e-7

    def __post_init__(self):
        if not self.stabilizer_mm3 > 0:
            raise ValueError("stabilizer_mm3 must be > 0")
        if not 0.0 < self.tolerance < 1.0:
            raise ValueError("tolerance must be in (0, 1)")
        if not 0.0 < self.background_eps <= 1e-3:
            raise ValueError("background_eps must be in (0, 1e-3]")


def volume_discrepancy(v_seg, v_rep, stabilizer_mm3: float = 500.0):
    """Stabilized relative volume mismatch |v_seg - v_rep| / (v_seg + v_rep + stabilizer).

    Accepts scalars or numpy arrays (broadcasting elementwise).
    """
    v_seg = np.asarray(v_seg, dtype=np.float64)
    v_rep = np.asarray(v_rep, dtype=np.float64)
    out = np.abs(v_seg - v_rep) / (v_seg + v_rep + stabilizer_mm3)
    return float(out) if out.ndim == 0 else out


def hinge_threshold(v_rep: float, cfg: VolumeLossConfig) -> float:
    """Discrepancy value below which the hinged loss is exactly zero.

    Equals the raw discrepancy evaluated at a segmented volume one tolerance
    fraction below the report volume.
    """
    return volume_discrepancy((1.0 - cfg.tolerance) * v_rep, v_rep, cfg.stabilizer_mm3)


def hinged_volume_discrepancy(v_seg, v_rep, cfg: VolumeLossConfig = VolumeLossConfig()):
    """Volume mismatch with a dead zone around the report volume.

    The raw discrepancy is shifted down by the hinge threshold and clamped at
    zero, so segmented volumes within the tolerance band produce zero loss
    and zero gradient. For a zero report volume the threshold is zero and the
    hinge is inert, leaving the raw push-to-zero discrepancy.
    """
    v_seg = np.asarray(v_seg, dtype=np.float64)
    v_rep = np.asarray(v_rep, dtype=np.float64)
    raw = volume_discrepancy(v_seg, v_rep, cfg.stabilizer_mm3)
    thr = volume_discrepancy((1.0 - cfg.tolerance) * v_rep, v_rep, cfg.stabilizer_mm3)
    out = np.maximum(raw - thr, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def background_suppression_loss(
    probs: VoxelGrid, organ_mask: VoxelGrid, cfg: VolumeLossConfig = VolumeLossConfig()
) -> float:
    """Mean negative log-likelihood of background outside the organ.

    Averages -ln(1 - t*(1-o)) over the whole grid; voxels inside the organ
    contribute zero. The log argument is clamped below at ``background_eps``
    so a confident false positive yields a large but finite value.
    """
    check_same_geometry(probs, organ_mask)
    validate_probabilities(probs)
    t = probs.data.astype(np.float64, copy=False)
    outside = 1.0 - organ_mask.data.astype(np.float64, copy=False)
    arg = np.maximum(1.0 - t * outside, cfg.background_eps)
    return float(-np.sum(np.log(arg), dtype=np.float64) / t.size)


@dataclass(frozen=True)
class VolumeLossResult:
    """Loss terms, the integrated segmented volume, and the full gradient."""

    volume_term: float
    background_term: float
    total: float
    segmented_volume_mm3: float
    grad: VoxelGrid


def volume_loss(
    probs: VoxelGrid,
    organ_mask: VoxelGrid,
    target: OrganVolumeTarget,
    cfg: VolumeLossConfig = VolumeLossConfig(),
    coverage: Coverage = Coverage.FULLY_INSIDE,
) -> VolumeLossResult:
    """Full volume loss for one organ, with the exact analytic gradient.

    ``coverage`` is the organ's position relative to the current patch;
    anything but fully-inside refuses to compute (the reported tumor could
    lie outside the patch). Targets flagged excluded (size-less findings)
    are refused likewise.
    """
    if coverage != Coverage.FULLY_INSIDE:
        raise CoverageViolation(
            f"organ {target.organ_id!r} is {coverage.value}, not fully inside the patch"
        )
    if target.excluded:
        raise ExcludedOrgan(
            f"organ {target.organ_id!r} has size-less findings and is excluded from supervision"
        )
    check_same_geometry(probs, organ_mask)
    validate_probabilities(probs)

    t = probs.data.astype(np.float64, copy=False)
    o = organ_mask.data.astype(np.float64, copy=False)
    n_voxels = t.size
    voxel_volume = probs.voxel_volume_mm3

    v_seg = float(np.sum(t * o, dtype=np.float64) * voxel_volume)
    v_rep = target.report_volume_mm3

    raw = volume_discrepancy(v_seg, v_rep, cfg.stabilizer_mm3)
    thr = hinge_threshold(v_rep, cfg)
    if raw > thr:
        volume_term = raw - thr
        denom = v_seg + v_rep + cfg.stabilizer_mm3
        diff = v_seg - v_rep
        d_raw = (np.sign(diff) * denom - abs(diff)) / denom**2
        grad = d_raw * voxel_volume * o
    else:
        volume_term = 0.0
        grad = np.zeros_like(t)

    outside = 1.0 - o
    arg = np.maximum(1.0 - t * outside, cfg.background_eps)
    background_term = float(-np.sum(np.log(arg), dtype=np.float64) / n_voxels)
    grad = grad + outside / (n_voxels * arg)

    return VolumeLossResult(
        volume_term=float(volume_term),
        background_term=background_term,
        total=float(volume_term) + background_term,
        segmented_volume_mm3=v_seg,
        grad=probs.like(grad),
    )


@dataclass(frozen=True)
class PatchVolumeLoss:
    """Combined volume loss over every supervised organ in a patch."""

    total: float
    grad: VoxelGrid
    per_organ: dict[str, VolumeLossResult]
    skipped: tuple[tuple[str, str], ...]


def patch_volume_loss(
    probs: VoxelGrid,
    organ_masks: dict[str, VoxelGrid],
    targets: dict[str, OrganVolumeTarget],
    cfg: VolumeLossConfig = VolumeLossConfig(),
    coverage: dict[str, Coverage] | None = None,
    reduction: str = "mean",
) -> PatchVolumeLoss:
    """Sum the per-organ volume losses over a patch, then reduce.

    Organs only partially inside the patch and organs with excluded targets
    are skipped (recorded in ``skipped`` with a reason). Organs present in
    ``organ_masks`` but missing from ``targets`` are supervised toward zero
    tumor volume. ``reduction`` is ``"mean"`` (divide by the number of
    supervised organs) or ``"sum"``.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    per_organ: dict[str, VolumeLossResult] = {}
    skipped: list[tuple[str, str]] = []
    total = 0.0
    grad = np.zeros(probs.shape, dtype=np.float64)
    for organ_id, mask in organ_masks.items():
        cov = coverage.get(organ_id, Coverage.FULLY_INSIDE) if coverage else Coverage.FULLY_INSIDE
        if cov != Coverage.FULLY_INSIDE:
            skipped.append((organ_id, f"coverage={cov.value}"))
            continue
        target = targets.get(organ_id)
        if target is None:
            target = zero_volume_target(organ_id)
        if target.excluded:
            skipped.append((organ_id, "excluded: size-less finding"))
            continue
        result = volume_loss(probs, mask, target, cfg)
        per_organ[organ_id] = result
        total += result.total
        grad += result.grad.data
    if per_organ and reduction == "mean":
        total /= len(per_organ)
        grad /= len(per_organ)
    return PatchVolumeLoss(
        total=total, grad=probs.like(grad), per_organ=per_organ, skipped=tuple(skipped)
    )
