"""Synthetic 3D phantoms: ellipsoid organs and tumors with paired ground truth.

Phantoms are the oracle for the end-to-end tests: an ellipsoid's analytic
volume is known exactly, the rasterized voxel count approximates it within a
few boundary shells, and the derived report (diameters = 2x radii) lets every
loss and placement be checked against constructed truth. Generation is
deterministic given the seed (numpy PCG64 via ``default_rng``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import SchemaViolation, TumorOutsideOrgan
from .grid import VoxelGrid
from .reports import ReportFindings, TumorFinding


@dataclass(frozen=True)
class EllipsoidShape:
    """An axis-aligned ellipsoid: center in (possibly fractional) voxel
    coordinates, radii in mm."""

    organ_id: str
    center_vox: tuple[float, float, float]
    radii_mm: tuple[float, float, float]

    def __post_init__(self):
        center = tuple(float(c) for c in self.center_vox)
        radii = tuple(float(r) for r in self.radii_mm)
        if len(center) != 3 or len(radii) != 3:
            raise ValueError("center_vox and radii_mm must be 3-tuples")
        if any(r <= 0 for r in radii):
            raise ValueError(f"radii must be positive, got {radii}")
        object.__setattr__(self, "center_vox", center)
        object.__setattr__(self, "radii_mm", radii)


@dataclass(frozen=True)
class TumorShape(EllipsoidShape):
    """A tumor ellipsoid, optionally overriding the diameters its report states."""

    report_diameters_mm: tuple[float, ...] | None = None


@dataclass(frozen=True)
class NoiseSpec:
    blur_mm: float = 0.0
    clutter_rate: float = 0.0

    def __post_init__(self):
        if self.blur_mm < 0 or not 0.0 <= self.clutter_rate <= 1.0:
            raise ValueError("blur_mm must be >= 0 and clutter_rate in [0, 1]")


@dataclass(frozen=True)
class PhantomSpec:
    ct_id: str
    shape: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    organs: tuple[EllipsoidShape, ...]
    tumors: tuple[TumorShape, ...] = ()
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0


@dataclass(frozen=True)
class RenderedPhantom:
    """Ground-truth masks, the simulated probability grid, and the report."""

    organ_masks: dict[str, VoxelGrid]
    tumor_masks: tuple[VoxelGrid, ...]
    probs: VoxelGrid
    report: ReportFindings

    @property
    def tumor_union(self) -> VoxelGrid:
        """Binary union of all tumor ground-truth masks."""
        if not self.tumor_masks:
            return self.probs.like(np.zeros(self.probs.shape, dtype=np.uint8))
        union = np.zeros(self.probs.shape, dtype=bool)
        for t in self.tumor_masks:
            union |= t.data.astype(bool)
        return self.probs.like(union.astype(np.uint8))


def rasterize_ellipsoid(
    shape, spacing_mm, center_vox, radii_mm
) -> np.ndarray:
    """Boolean mask of voxels whose centers satisfy the ellipsoid inequality."""
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    q = sum(
        (((g - c) * s) / r) ** 2
        for g, c, s, r in zip(grids, center_vox, spacing_mm, radii_mm)
    )
    return q <= 1.0


def render_phantom(spec: PhantomSpec) -> RenderedPhantom:
    """Rasterize the phantom and simulate a probability grid plus its report.

    The probability grid is the tumor ground truth blurred by a Gaussian of
    ``blur_mm`` (per-axis std converted through the spacing) with clutter
    voxels (drawn at ``clutter_rate``) bumped to a uniform random value; with
    zero noise it equals the truth exactly. The report states each tumor's
    diameters as twice its radii, descending, unless overridden.
    """
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(n) for n in spec.shape)
    spacing = tuple(float(s) for s in spec.spacing_mm)

    organ_masks = {}
    for organ in spec.organs:
        mask = rasterize_ellipsoid(shape, spacing, organ.center_vox, organ.radii_mm)
        organ_masks[organ.organ_id] = VoxelGrid(mask.astype(np.uint8), spacing)

    tumor_masks = []
    findings = []
    for i, tumor in enumerate(spec.tumors):
        if tumor.organ_id not in organ_masks:
            raise TumorOutsideOrgan(f"tumor {i} references unknown organ {tumor.organ_id!r}")
        mask = rasterize_ellipsoid(shape, spacing, tumor.center_vox, tumor.radii_mm)
        organ = organ_masks[tumor.organ_id].data.astype(bool)
        if np.any(mask & ~organ):
            raise TumorOutsideOrgan(
                f"tumor {i} ({tumor.organ_id}) is not fully inside its organ"
            )
        tumor_masks.append(VoxelGrid(mask.astype(np.uint8), spacing))
        diameters = tumor.report_diameters_mm
        if diameters is None:
            diameters = tuple(sorted((2.0 * r for r in tumor.radii_mm), reverse=True))
        findings.append(TumorFinding(organ_id=tumor.organ_id, diameters_mm=diameters))

    truth = np.zeros(shape, dtype=np.float64)
    for t in tumor_masks:
        truth = np.maximum(truth, t.data.astype(np.float64))

    probs = truth
    if spec.noise.blur_mm > 0:
        sigma_vox = [spec.noise.blur_mm / s for s in spacing]
        probs = ndimage.gaussian_filter(probs, sigma=sigma_vox, mode="constant")
    if spec.noise.clutter_rate > 0:
        hit = rng.random(shape) < spec.noise.clutter_rate
        level = rng.random(shape)
        probs = np.maximum(probs, np.where(hit, level, 0.0))
    probs = np.clip(probs, 0.0, 1.0)

    report = ReportFindings(ct_id=spec.ct_id, findings=tuple(findings))
    return RenderedPhantom(
        organ_masks=organ_masks,
        tumor_masks=tuple(tumor_masks),
        probs=VoxelGrid(probs, spacing),
        report=report,
    )


def perturb_report(
    report: ReportFindings, diameter_noise_frac: float, rng: np.random.Generator | None = None
) -> ReportFindings:
    """Jitter every reported diameter by an independent uniform factor.

    Each diameter is multiplied by (1 + u) with u drawn uniformly from
    +/- ``diameter_noise_frac``, simulating inter-radiologist measurement
    variance; used to probe the volume-loss tolerance dead zone.
    """
    if diameter_noise_frac < 0:
        raise ValueError("diameter_noise_frac must be >= 0")
    if diameter_noise_frac == 0:
        return report
    if rng is None:
        rng = np.random.default_rng()
    findings = []
    for f in report.findings:
        factors = 1.0 + rng.uniform(
            -diameter_noise_frac, diameter_noise_frac, size=len(f.diameters_mm)
        )
        findings.append(
            TumorFinding(
                organ_id=f.organ_id,
                diameters_mm=tuple(d * u for d, u in zip(f.diameters_mm, factors)),
            )
        )
    return ReportFindings(ct_id=report.ct_id, findings=tuple(findings))


def sample_phantom_spec(
    rng: np.random.Generator,
    ct_id: str = "phantom",
    n_tumors: int = 1,
    diameter_range_mm: tuple[float, float] = (8.0, 40.0),
    organ_id: str = "pancreas",
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0),
    noise: NoiseSpec = NoiseSpec(),
    spherical: bool = True,
    seed: int | None = None,
) -> PhantomSpec:
    """Draw a random phantom: one large organ holding non-overlapping tumors.

    Tumor centers are rejection-sampled so each tumor (plus a one-voxel gap)
    stays inside the organ and clear of the others; the grid is sized to the
    organ. With ``spherical`` False, tumor radii get mild anisotropy.
    """
    lo, hi = diameter_range_mm
    diameters = np.sort(rng.uniform(lo, hi, size=n_tumors))[::-1]

    organ_radius = max(hi * 1.1, float(diameters[0])) if n_tumors == 1 else hi * 1.35
    # crude packing: grow the organ until the tumors plausibly fit
    organ_radius = max(organ_radius, 0.75 * float(np.sum(diameters)))
    margin = 4.0
    half_extent = [(organ_radius + margin) / s for s in spacing_mm]
    shape = tuple(int(math.ceil(2 * h + 1)) for h in half_extent)
    center = tuple((n - 1) / 2.0 for n in shape)

    tumors = []
    placed = []  # (center_mm, radius_mm)
    for d in diameters:
        r = float(d) / 2.0
        if spherical:
            radii = (r, r, r)
        else:
            radii = tuple(float(x) for x in np.sort(rng.uniform(0.7 * r, r, size=3))[::-1])
        for _ in range(1000):
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            rho = (organ_radius - max(radii) - 1.0) * rng.random() ** (1 / 3)
            pos_mm = rho * u
            if all(
                np.linalg.norm(pos_mm - prev) > max(radii) + prev_r + 1.0
                for prev, prev_r in placed
            ):
                placed.append((pos_mm, max(radii)))
                center_vox = tuple(c + p / s for c, p, s in zip(center, pos_mm, spacing_mm))
                tumors.append(
                    TumorShape(organ_id=organ_id, center_vox=center_vox, radii_mm=radii)
                )
                break
        else:
            raise RuntimeError("could not pack tumors into the organ; widen the ranges")

    organ = EllipsoidShape(
        organ_id=organ_id, center_vox=center, radii_mm=(organ_radius,) * 3
    )
    return PhantomSpec(
        ct_id=ct_id,
        shape=shape,
        spacing_mm=spacing_mm,
        organs=(organ,),
        tumors=tuple(tumors),
        noise=noise,
        seed=int(rng.integers(0, 2**31)) if seed is None else seed,
    )


# --- phantom spec JSON ------------------------------------------------------


def phantom_spec_to_dict(spec: PhantomSpec) -> dict:
    out = {
        "ct_id": spec.ct_id,
        "shape": list(spec.shape),
        "spacing_mm": list(spec.spacing_mm),
        "organs": [
            {
                "organ_id": o.organ_id,
                "center_vox": list(o.center_vox),
                "radii_mm": list(o.radii_mm),
            }
            for o in spec.organs
        ],
        "tumors": [
            {
                "organ_id": t.organ_id,
                "center_vox": list(t.center_vox),
                "radii_mm": list(t.radii_mm),
                **(
                    {"report_diameters_mm": list(t.report_diameters_mm)}
                    if t.report_diameters_mm is not None
                    else {}
                ),
            }
            for t in spec.tumors
        ],
        "noise": {"blur_mm": spec.noise.blur_mm, "clutter_rate": spec.noise.clutter_rate},
        "seed": spec.seed,
    }
    return out


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise SchemaViolation(f"{path}.{key}", "missing required field")
    return obj[key]


def phantom_spec_from_dict(obj: dict, path: str = "$") -> PhantomSpec:
    if not isinstance(obj, dict):
        raise SchemaViolation(path, "phantom spec must be a JSON object")
    try:
        organs = tuple(
            EllipsoidShape(
                organ_id=_require(o, "organ_id", f"{path}.organs[{i}]"),
                center_vox=tuple(_require(o, "center_vox", f"{path}.organs[{i}]")),
                radii_mm=tuple(_require(o, "radii_mm", f"{path}.organs[{i}]")),
            )
            for i, o in enumerate(_require(obj, "organs", path))
        )
        tumors = tuple(
            TumorShape(
                organ_id=_require(t, "organ_id", f"{path}.tumors[{i}]"),
                center_vox=tuple(_require(t, "center_vox", f"{path}.tumors[{i}]")),
                radii_mm=tuple(_require(t, "radii_mm", f"{path}.tumors[{i}]")),
                report_diameters_mm=(
                    tuple(t["report_diameters_mm"]) if "report_diameters_mm" in t else None
                ),
            )
            for i, t in enumerate(obj.get("tumors", []))
        )
        noise_obj = obj.get("noise", {})
        return PhantomSpec(
            ct_id=_require(obj, "ct_id", path),
            shape=tuple(int(n) for n in _require(obj, "shape", path)),
            spacing_mm=tuple(float(s) for s in _require(obj, "spacing_mm", path)),
            organs=organs,
            tumors=tumors,
            noise=NoiseSpec(
                blur_mm=float(noise_obj.get("blur_mm", 0.0)),
                clutter_rate=float(noise_obj.get("clutter_rate", 0.0)),
            ),
            seed=int(obj.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaViolation(path, f"malformed phantom spec: {exc}") from exc


def read_phantom_specs(path) -> list[PhantomSpec]:
    """Read one spec object or a list of them from a JSON file."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, list):
        return [phantom_spec_from_dict(o, path=f"$[{i}]") for i, o in enumerate(raw)]
    return [phantom_spec_from_dict(raw)]
