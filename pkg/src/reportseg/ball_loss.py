"""Pseudo-mask construction from reported tumors, and the losses against it.

Each reported tumor is localized by convolving the organ-masked probability
grid with a fixed spherical kernel sized to the reported diameter (Gaussian
decay toward the rim, zero outside the ball). Tumors are placed greedily from
largest to smallest: the best-scoring ball is selected, the top-N most
probable voxels inside it become that tumor's label, and those voxels are
zeroed before the next iteration so no voxel is used twice. The resulting
binary mask matches the report's tumor count, locations, volumes, and
diameters, and is scored with weighted cross-entropy plus soft Dice.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage, signal

from .errors import BallCapacityExceeded, EmptyOrgan, ExcludedOrgan, KernelExceedsGrid, SpacingMismatch
from .grid import VoxelGrid, check_same_geometry, validate_binary, validate_probabilities
from .reports import OrganVolumeTarget

# direct sliding-window cost (voxels * kernel taps) above which the FFT path kicks in
_DIRECT_COST_LIMIT = 3e7

_CUBE26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class BallLossConfig:
    """Knobs of the pseudo-mask construction and its losses.

    ``diameter_margin`` widens the ball beyond the reported largest diameter
    to absorb measurement variance. ``gaussian_std_frac`` scales the kernel's
    Gaussian decay by the effective ball diameter (0.75 fixed). The border
    band of ``border_margin_vox`` around label boundaries is excluded from
    both losses. ``ce_weight_mode`` is ``"predicted"`` (tumor voxels weighted
    by predicted probability, normalized to mean 1, clipped) or ``"uniform"``.
    """

    diameter_margin: float = 0.20
    gaussian_std_frac: float = 0.75
    border_margin_vox: int = 1
    ce_weight_mode: str = "predicted"
    ce_weight_clip: tuple[float, float] = (0.1, 10.0)
    dsc_smooth: float = 1.0
    prob_eps: float = 1e-7
    conv_method: str = "auto"

    def __post_init__(self):
        if self.diameter_margin < 0:
            raise ValueError("diameter_margin must be >= 0")
        if self.gaussian_std_frac <= 0:
            raise ValueError("gaussian_std_frac must be > 0")
        if self.border_margin_vox < 0 or int(self.border_margin_vox) != self.border_margin_vox:
            raise ValueError("border_margin_vox must be a non-negative integer")
        if self.ce_weight_mode not in ("predicted", "uniform"):
            raise ValueError(f"unknown ce_weight_mode {self.ce_weight_mode!r}")
        if self.conv_method not in ("auto", "direct", "fft"):
            raise ValueError(f"unknown conv_method {self.conv_method!r}")


@dataclass(frozen=True, eq=False)
class BallKernel:
    """Odd-sized spherical convolution stencil tied to one reported diameter.

    Weight is 1 at the center, follows a 3D Gaussian in mm distance, and is 0
    at every voxel whose anisotropy-corrected distance exceeds the ball
    radius.
    """

    weights: np.ndarray
    spacing_mm: tuple[float, float, float]
    diameter_mm: float  # effective (reported largest + margin)

    @property
    def size(self) -> tuple[int, int, int]:
        return self.weights.shape

    @property
    def radius_vox(self) -> tuple[int, int, int]:
        return tuple(s // 2 for s in self.weights.shape)


def build_ball_kernel(
    diameter_mm: float,
    spacing_mm,
    cfg: BallLossConfig = BallLossConfig(),
) -> BallKernel:
    """Build the Gaussian-weighted ball stencil for one reported diameter.

    The effective diameter is the reported one plus the configured margin;
    each axis spans ceil(diameter/spacing) voxels, rounded up to odd so the
    kernel has a center voxel. The Gaussian std is ``gaussian_std_frac``
    times the effective diameter (post-margin).
    """
    if not diameter_mm > 0:
        raise ValueError(f"diameter must be positive, got {diameter_mm}")
    spacing = tuple(float(s) for s in spacing_mm)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive components, got {spacing}")

    effective = float(diameter_mm) * (1.0 + cfg.diameter_margin)
    size = []
    for s in spacing:
        n = math.ceil(effective / s)
        if n % 2 == 0:
            n += 1
        size.append(max(n, 1))

    radii = [n // 2 for n in size]
    offsets = np.meshgrid(
        *[np.arange(-r, r + 1, dtype=np.float64) for r in radii], indexing="ij"
    )
    dist2_mm = sum((off * s) ** 2 for off, s in zip(offsets, spacing))
    sigma = cfg.gaussian_std_frac * effective
    weights = np.exp(-dist2_mm / (2.0 * sigma**2))
    weights[dist2_mm > (effective / 2.0) ** 2] = 0.0
    weights.setflags(write=False)
    return BallKernel(weights=weights, spacing_mm=spacing, diameter_mm=effective)


def _convolve_direct(arr: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Sliding-window correlation with zero padding, accumulated in kernel
    row-major order so serial results are bit-reproducible."""
    kh, kw, kl = weights.shape
    rh, rw, rl = kh // 2, kw // 2, kl // 2
    H, W, L = arr.shape
    padded = np.zeros((H + 2 * rh, W + 2 * rw, L + 2 * rl), dtype=np.float64)
    padded[rh : rh + H, rw : rw + W, rl : rl + L] = arr
    out = np.zeros((H, W, L), dtype=np.float64)
    for dh in range(kh):
        for dw in range(kw):
            for dl in range(kl):
                w = weights[dh, dw, dl]
                if w == 0.0:
                    continue
                out += w * padded[dh : dh + H, dw : dw + W, dl : dl + L]
    return out


def _convolve_fft(arr: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # ball kernels are symmetric, so correlation equals convolution
    return signal.fftconvolve(arr, weights, mode="same")


def _convolve_array(arr: np.ndarray, weights: np.ndarray, method: str) -> np.ndarray:
    if method == "auto":
        cost = arr.size * int(np.count_nonzero(weights))
        method = "direct" if cost <= _DIRECT_COST_LIMIT else "fft"
    if method == "direct":
        return _convolve_direct(arr, weights)
    if method == "fft":
        return _convolve_fft(arr, weights)
    raise ValueError(f"unknown convolution method {method!r}")


def ball_convolve(
    probs_in_organ: VoxelGrid, kernel: BallKernel, method: str = "direct"
) -> VoxelGrid:
    """Score every voxel as a candidate ball center (stride 1, zero padding).

    The input is expected to be the organ-masked probability grid; the score
    at a voxel is the kernel-weighted sum of probabilities in the ball
    centered there. Output shape equals input shape.
    """
    if tuple(kernel.spacing_mm) != tuple(probs_in_organ.spacing_mm):
        raise SpacingMismatch(
            f"kernel spacing {kernel.spacing_mm} != grid spacing {probs_in_organ.spacing_mm}"
        )
    arr = probs_in_organ.data.astype(np.float64, copy=False)
    return probs_in_organ.like(_convolve_array(arr, kernel.weights, method))


class PlacementRecord(NamedTuple):
    """Where one reported tumor was placed and how many voxels it received."""

    tumor_index: int
    center: tuple[int, int, int]
    n_requested: int
    n_assigned: int

    @property
    def shortfall(self) -> int:
        return self.n_requested - self.n_assigned


@dataclass(frozen=True)
class PseudoMask:
    """Dynamically built training target matching the report.

    ``labels`` is the binary target; ``ce_weights`` the per-voxel CE weights
    (zero on the border-exclusion band); ``border_exclusion`` the band of
    voxels around label boundaries that neither loss penalizes.
    """

    labels: VoxelGrid
    ce_weights: VoxelGrid
    border_exclusion: VoxelGrid
    placements: tuple[PlacementRecord, ...]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _bounding_box(mask: np.ndarray) -> tuple[slice, slice, slice]:
    idx = np.nonzero(mask)
    return tuple(slice(int(ax.min()), int(ax.max()) + 1) for ax in idx)


def _border_exclusion_band(labels: np.ndarray, margin_vox: int) -> np.ndarray:
    """Label-boundary voxels (26-connectivity) dilated by the margin."""
    lab = labels.astype(bool)
    if not lab.any():
        return np.zeros_like(lab)
    inner = lab & ~ndimage.binary_erosion(lab, structure=_CUBE26, border_value=0)
    if margin_vox == 0:
        return inner
    return ndimage.binary_dilation(inner, structure=_CUBE26, iterations=margin_vox)


def place_tumors(
    probs: VoxelGrid,
    organ_mask: VoxelGrid,
    target: OrganVolumeTarget,
    cfg: BallLossConfig = BallLossConfig(),
) -> PseudoMask:
    """Greedily place every reported tumor and assemble the pseudo-mask.

    Tumors are processed in descending diameter order. For each: build its
    ball kernel, convolve the current organ-masked probabilities (restricted
    to the organ bounding box), take the best-scoring voxel as ball center
    (ties resolve to the lowest row-major index), then label the top-N most
    probable unassigned organ voxels inside the ball, N being the tumor's
    report-estimated volume in voxels (round half up, at least 1). Labeled
    voxels are zeroed in the working probabilities so later tumors cannot
    reuse them.

    When a ball has fewer than N available voxels a
    :class:`BallCapacityExceeded` warning is emitted, all available voxels
    are assigned, and the shortfall is recorded in the placement.
    """
    check_same_geometry(probs, organ_mask)
    validate_probabilities(probs)
    validate_binary(organ_mask)
    if target.excluded:
        raise ExcludedOrgan(
            f"organ {target.organ_id!r} has size-less findings and is excluded from supervision"
        )

    organ = organ_mask.data.astype(bool)
    if not organ.any():
        raise EmptyOrgan(f"organ mask {target.organ_id!r} has no voxels")

    shape = probs.shape
    voxel_volume = probs.voxel_volume_mm3
    original = probs.data.astype(np.float64, copy=False)
    working = np.where(organ, original, 0.0)
    labels = np.zeros(shape, dtype=np.uint8)
    assigned = np.zeros(shape, dtype=bool)
    box = _bounding_box(organ)
    box_origin = np.array([s.start for s in box])

    placements = []
    for tumor_index, (diameter_mm, volume_mm3) in enumerate(target.per_tumor):
        kernel = build_ball_kernel(diameter_mm, probs.spacing_mm, cfg)
        box_shape = tuple(s.stop - s.start for s in box)
        if any(k > b for k, b in zip(kernel.size, box_shape)):
            warnings.warn(
                f"ball kernel {kernel.size} exceeds organ bounding box {box_shape}; "
                "scores are clipped to the box",
                KernelExceedsGrid,
            )
        scores = _convolve_array(working[box], kernel.weights, cfg.conv_method)
        local = np.unravel_index(int(np.argmax(scores)), scores.shape)
        center = tuple(int(c) for c in (box_origin + np.array(local)))

        # candidate voxels: ball ∩ organ ∩ unassigned, listed in row-major order
        support = np.nonzero(kernel.weights > 0)
        radii = kernel.radius_vox
        coords = [support[ax] - radii[ax] + center[ax] for ax in range(3)]
        in_bounds = np.ones(len(coords[0]), dtype=bool)
        for ax in range(3):
            in_bounds &= (coords[ax] >= 0) & (coords[ax] < shape[ax])
        coords = tuple(c[in_bounds] for c in coords)
        eligible = organ[coords] & ~assigned[coords]
        coords = tuple(c[eligible] for c in coords)

        n_requested = max(1, _round_half_up(volume_mm3 / voxel_volume))
        n_available = len(coords[0])
        n_assign = min(n_requested, n_available)
        if n_available < n_requested:
            warnings.warn(
                f"tumor {tumor_index} needs {n_requested} voxels but only "
                f"{n_available} are available in its ball",
                BallCapacityExceeded,
            )
        if n_assign > 0:
            # stable sort on descending probability; candidates are already in
            # row-major order, so ties resolve to the lowest linear index
            order = np.argsort(-working[coords], kind="stable")[:n_assign]
            chosen = tuple(c[order] for c in coords)
            labels[chosen] = 1
            assigned[chosen] = True
            working[chosen] = 0.0
        placements.append(
            PlacementRecord(
                tumor_index=tumor_index,
                center=center,
                n_requested=n_requested,
                n_assigned=n_assign,
            )
        )

    exclusion = _border_exclusion_band(labels, cfg.border_margin_vox)

    ce_weights = np.ones(shape, dtype=np.float64)
    tumor_voxels = labels.astype(bool)
    if tumor_voxels.any() and cfg.ce_weight_mode == "predicted":
        t_pred = original[tumor_voxels]
        mean_pred = float(t_pred.mean())
        if mean_pred > 0:
            lo, hi = cfg.ce_weight_clip
            ce_weights[tumor_voxels] = np.clip(t_pred / mean_pred, lo, hi)
    ce_weights[exclusion] = 0.0

    return PseudoMask(
        labels=probs.like(labels),
        ce_weights=probs.like(ce_weights),
        border_exclusion=probs.like(exclusion.astype(np.uint8)),
        placements=tuple(placements),
    )


class PseudoMaskLoss(NamedTuple):
    """Weighted CE, soft Dice loss, and their combined analytic gradient."""

    ce: float
    dsc_loss: float
    grad: VoxelGrid


def pseudo_mask_loss(
    probs: VoxelGrid, pmask: PseudoMask, cfg: BallLossConfig = BallLossConfig()
) -> PseudoMaskLoss:
    """Score predictions against a pseudo-mask with weighted CE + soft Dice.

    CE is the weighted mean of per-voxel binary cross-entropy (weights from
    the pseudo-mask; border-excluded voxels carry weight zero). The Dice term
    is 1 minus the smoothed soft-Dice coefficient over non-excluded voxels.
    ``grad`` is the exact derivative of their sum w.r.t. each probability.
    """
    check_same_geometry(probs, pmask.labels)
    validate_probabilities(probs)

    t = np.clip(probs.data.astype(np.float64, copy=False), cfg.prob_eps, 1.0 - cfg.prob_eps)
    y = pmask.labels.data.astype(np.float64, copy=False)
    w = pmask.ce_weights.data.astype(np.float64, copy=False)
    keep = pmask.border_exclusion.data == 0

    grad = np.zeros_like(t)

    w_sum = float(np.sum(w, dtype=np.float64))
    if w_sum > 0:
        bce = -(y * np.log(t) + (1.0 - y) * np.log(1.0 - t))
        ce = float(np.sum(w * bce, dtype=np.float64) / w_sum)
        grad += (w / w_sum) * (-y / t + (1.0 - y) / (1.0 - t))
    else:
        ce = 0.0

    s = cfg.dsc_smooth
    tk = np.where(keep, t, 0.0)
    yk = np.where(keep, y, 0.0)
    num = 2.0 * float(np.sum(tk * yk, dtype=np.float64)) + s
    den = float(np.sum(tk, dtype=np.float64)) + float(np.sum(yk, dtype=np.float64)) + s
    dsc_loss = 1.0 - num / den
    grad += np.where(keep, (num - 2.0 * yk * den) / den**2, 0.0)

    return PseudoMaskLoss(ce=ce, dsc_loss=float(dsc_loss), grad=probs.like(grad))
