"""Dense 3D voxel grids, patch geometry, masked volume integration, and grid file IO.

Grids are value objects: the wrapped array is made read-only at construction,
so they are safe to share across threads. All reductions use float64
accumulation with numpy's deterministic pairwise summation, making results
independent of how work is scheduled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import HeaderMismatch, ShapeMismatch, SpacingMismatch, TruncatedPayload

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _as_spacing(spacing) -> tuple[float, float, float]:
    s = tuple(float(x) for x in spacing)
    if len(s) != 3:
        raise ValueError(f"spacing must have 3 components, got {len(s)}")
    if any(not np.isfinite(x) or x <= 0 for x in s):
        raise ValueError(f"spacing components must be positive, got {s}")
    return s


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A dense 3D scalar field with anisotropic voxel spacing in mm.

    ``data`` has shape (H, W, L) in row-major (C) order; the grid takes
    ownership of the array and freezes it. Probability grids additionally
    satisfy 0 <= t <= 1 elementwise, checked at loss entry points via
    :func:`validate_probabilities`.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"grid data must be 3D, got ndim={arr.ndim}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", _as_spacing(self.spacing_mm))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sh, sw, sl = self.spacing_mm
        return sh * sw * sl

    def like(self, data: np.ndarray) -> "VoxelGrid":
        """Wrap ``data`` with this grid's spacing."""
        return VoxelGrid(data, self.spacing_mm)

    def astype(self, dtype) -> "VoxelGrid":
        return VoxelGrid(self.data.astype(dtype), self.spacing_mm)


def validate_probabilities(grid: VoxelGrid) -> None:
    """Raise if any value falls outside [0, 1]."""
    lo = float(grid.data.min(initial=0.0))
    hi = float(grid.data.max(initial=0.0))
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"probability grid has values outside [0, 1]: min={lo}, max={hi}")


def validate_binary(grid: VoxelGrid) -> None:
    """Raise if any value is neither 0 nor 1."""
    d = grid.data
    if not np.all((d == 0) | (d == 1)):
        raise ValueError("mask grid has values outside {0, 1}")


def check_same_geometry(a: VoxelGrid, b: VoxelGrid) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"grid shapes differ: {a.shape} vs {b.shape}")
    if a.spacing_mm != b.spacing_mm:
        raise SpacingMismatch(f"grid spacings differ: {a.spacing_mm} vs {b.spacing_mm}")


class Coverage(str, Enum):
    """Position of an organ mask relative to a training patch."""

    FULLY_INSIDE = "fully_inside"
    PARTIAL = "partial"
    ABSENT = "absent"


@dataclass(frozen=True)
class Patch:
    """An axis-aligned box inside a parent volume."""

    origin: tuple[int, int, int]
    shape: tuple[int, int, int]
    parent_shape: tuple[int, int, int]

    def __post_init__(self):
        origin = tuple(int(x) for x in self.origin)
        shape = tuple(int(x) for x in self.shape)
        parent = tuple(int(x) for x in self.parent_shape)
        if len(origin) != 3 or len(shape) != 3 or len(parent) != 3:
            raise ValueError("patch origin/shape/parent_shape must be 3-tuples")
        if any(s < 1 for s in shape):
            raise ValueError(f"patch shape must be positive, got {shape}")
        if any(o < 0 or o + s > p for o, s, p in zip(origin, shape, parent)):
            raise ValueError(f"patch {origin}+{shape} does not fit inside parent {parent}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "parent_shape", parent)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.shape))

    def extract(self, grid: VoxelGrid) -> VoxelGrid:
        """Crop a parent-volume grid to this patch."""
        if grid.shape != self.parent_shape:
            raise ShapeMismatch(f"grid shape {grid.shape} != parent shape {self.parent_shape}")
        return VoxelGrid(grid.data[self.slices].copy(), grid.spacing_mm)


def organ_coverage(patch: Patch, organ_mask_full: VoxelGrid) -> Coverage:
    """Classify an organ mask (on the parent volume) against a patch.

    ``FULLY_INSIDE`` iff every nonzero mask voxel lies within the patch
    bounds; ``ABSENT`` iff none does (including an all-zero mask).
    """
    if organ_mask_full.shape != patch.parent_shape:
        raise ShapeMismatch(
            f"organ mask shape {organ_mask_full.shape} != parent shape {patch.parent_shape}"
        )
    nonzero = organ_mask_full.data != 0
    total = int(nonzero.sum())
    if total == 0:
        return Coverage.ABSENT
    inside = int(nonzero[patch.slices].sum())
    if inside == 0:
        return Coverage.ABSENT
    return Coverage.FULLY_INSIDE if inside == total else Coverage.PARTIAL


@dataclass(frozen=True)
class OrganMaskSet:
    """Named binary organ masks sharing one geometry, plus patch-coverage flags."""

    grids: dict[str, VoxelGrid]
    coverage: dict[str, Coverage]

    def __post_init__(self):
        grids = dict(self.grids)
        ref = None
        for organ_id, g in grids.items():
            validate_binary(g)
            if ref is None:
                ref = g
            else:
                check_same_geometry(ref, g)
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "coverage", dict(self.coverage))

    @classmethod
    def from_patch(cls, patch: Patch, full_masks: dict[str, VoxelGrid]) -> "OrganMaskSet":
        """Crop parent-volume masks to a patch and record each organ's coverage."""
        grids = {}
        coverage = {}
        for organ_id, full in full_masks.items():
            coverage[organ_id] = organ_coverage(patch, full)
            grids[organ_id] = patch.extract(full)
        return cls(grids=grids, coverage=coverage)


def segmented_volume(probs: VoxelGrid, mask: VoxelGrid) -> float:
    """Integrate masked probabilities into a volume in mm³.

    Returns the sum of probability times mask over all voxels, scaled by the
    voxel volume derived from the grid spacing.
    """
    check_same_geometry(probs, mask)
    validate_probabilities(probs)
    t = probs.data.astype(np.float64, copy=False)
    o = mask.data.astype(np.float64, copy=False)
    return float(np.sum(t * o, dtype=np.float64) * probs.voxel_volume_mm3)


def segmented_volume_gradient(mask: VoxelGrid) -> VoxelGrid:
    """Per-voxel derivative of :func:`segmented_volume` w.r.t. the probabilities.

    The integral is linear, so the gradient is simply mask times voxel volume.
    """
    g = mask.data.astype(np.float64) * mask.voxel_volume_mm3
    return mask.like(g)


def _infer_dtype_tag(data: np.ndarray) -> str:
    if data.dtype.kind in "uib":
        return "u8"
    return "f32"


def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_grid(grid: VoxelGrid, path, dtype: str | None = None) -> None:
    """Write a grid as a raw little-endian payload plus a sidecar JSON header.

    The header lives at ``<path>.json``. ``dtype`` is ``"f32"`` or ``"u8"``;
    by default integer/bool data is written as ``u8`` and floats as ``f32``.
    """
    path = Path(path)
    tag = dtype or _infer_dtype_tag(grid.data)
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unsupported dtype tag {tag!r}")
    arr = np.ascontiguousarray(grid.data.astype(_DTYPE_TAGS[tag]))
    header = {
        "shape": list(grid.shape),
        "spacing_mm": list(grid.spacing_mm),
        "dtype": tag,
        "order": "row-major",
    }
    path.write_bytes(arr.tobytes(order="C"))
    _header_path(path).write_text(json.dumps(header), encoding="utf-8")


def read_grid(path) -> VoxelGrid:
    """Read a grid written by :func:`write_grid`.

    Raises :class:`HeaderMismatch` for a missing or malformed header and
    :class:`TruncatedPayload` when the payload size disagrees with the header.
    """
    path = Path(path)
    hpath = _header_path(path)
    if not hpath.exists():
        raise HeaderMismatch(f"missing header file {hpath}")
    try:
        header = json.loads(hpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise HeaderMismatch(f"malformed header {hpath}: {exc}") from exc
    for key in ("shape", "spacing_mm", "dtype", "order"):
        if key not in header:
            raise HeaderMismatch(f"header missing field {key!r}")
    if header["order"] != "row-major":
        raise HeaderMismatch(f"unsupported order {header['order']!r}")
    tag = header["dtype"]
    if tag not in _DTYPE_TAGS:
        raise HeaderMismatch(f"unsupported dtype {tag!r}")
    shape = tuple(int(x) for x in header["shape"])
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise HeaderMismatch(f"bad shape {header['shape']}")
    np_dtype = _DTYPE_TAGS[tag]
    payload = path.read_bytes()
    expected = int(np.prod(shape)) * np_dtype.itemsize
    if len(payload) != expected:
        raise TruncatedPayload(
            f"payload holds {len(payload)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape)
    return VoxelGrid(arr, _as_spacing(header["spacing_mm"]))


def trilinear_resample(
    grid: VoxelGrid,
    shape: tuple[int, int, int],
    spacing_mm: tuple[float, float, float],
) -> VoxelGrid:
    """Resample a grid to a new shape/spacing with trilinear interpolation.

    Both grids are assumed to share the physical position of voxel (0,0,0);
    coordinates outside the source are edge-clamped. Intended for bringing a
    coarse deep-layer probability map back to CT spacing before integrating
    volumes; the losses themselves never resample implicitly.
    """
    shape = tuple(int(s) for s in shape)
    target_spacing = _as_spacing(spacing_mm)
    coords = [
        np.arange(shape[ax], dtype=np.float64) * (target_spacing[ax] / grid.spacing_mm[ax])
        for ax in range(3)
    ]
    mesh = np.meshgrid(*coords, indexing="ij")
    sampled = ndimage.map_coordinates(
        grid.data.astype(np.float64, copy=False), np.stack(mesh), order=1, mode="nearest"
    )
    return VoxelGrid(sampled, target_spacing)
