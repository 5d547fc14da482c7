"""Structured report findings: validation, serialization, and volume estimation.

A report lists tumor findings per CT: the organ (or organ sub-segment) and one
to three reported diameters in mm. Diameters are kept in mm as doubles and
never rounded; the downstream losses are ratios that are sensitive to early
truncation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import InvalidDiameter, SchemaViolation, SizeMissing, UnknownOrgan

MAX_DIAMETERS = 3


@dataclass(frozen=True)
class Organ:
    organ_id: str
    display_name: str
    parent: str | None = None


def load_organ_vocabulary(path) -> dict[str, Organ]:
    """Load an organ vocabulary config file (id -> display name -> parent)."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    organs = {}
    for entry in raw["organs"]:
        organ = Organ(entry["organ_id"], entry["display_name"], entry.get("parent"))
        organs[organ.organ_id] = organ
    for organ in organs.values():
        if organ.parent is not None and organ.parent not in organs:
            raise ValueError(f"organ {organ.organ_id!r} references unknown parent {organ.parent!r}")
    return organs


_DEFAULT_VOCABULARY: dict[str, Organ] | None = None


def default_organ_vocabulary() -> dict[str, Organ]:
    """The vocabulary shipped with the package: liver, pancreas (+sub-segments), kidneys."""
    global _DEFAULT_VOCABULARY
    if _DEFAULT_VOCABULARY is None:
        with resources.as_file(resources.files("reportseg.data") / "organs.json") as p:
            _DEFAULT_VOCABULARY = load_organ_vocabulary(p)
    return _DEFAULT_VOCABULARY


def estimate_tumor_volume(diameters_mm) -> float:
    """Estimate a tumor's volume in mm³ from 1-3 reported diameters.

    A single diameter is treated as a ball; three diameters as an ellipsoid
    with those axes; with two, the third axis is imputed as their mean before
    applying the ellipsoid formula. The result is symmetric in the input
    order and strictly increasing in every diameter.
    """
    ds = [float(d) for d in diameters_mm]
    if not ds:
        raise SizeMissing("at least one diameter is required")
    if len(ds) > MAX_DIAMETERS:
        raise InvalidDiameter(f"at most {MAX_DIAMETERS} diameters, got {len(ds)}")
    if any(not math.isfinite(d) or d <= 0 for d in ds):
        raise InvalidDiameter(f"diameters must be positive finite, got {ds}")
    if len(ds) == 1:
        product = ds[0] ** 3
    elif len(ds) == 2:
        product = ds[0] * ds[1] * ((ds[0] + ds[1]) / 2.0)
    else:
        product = ds[0] * ds[1] * ds[2]
    return product * math.pi / 6.0


@dataclass(frozen=True)
class TumorFinding:
    """One tumor in a report: its organ and 0-3 diameters, stored descending.

    An empty diameter tuple means the report mentioned the tumor without a
    size (``has_size`` is False).
    """

    organ_id: str
    diameters_mm: tuple[float, ...] = ()

    def __post_init__(self):
        ds = tuple(sorted((float(d) for d in self.diameters_mm), reverse=True))
        if len(ds) > MAX_DIAMETERS:
            raise InvalidDiameter(f"at most {MAX_DIAMETERS} diameters, got {len(ds)}")
        if any(not math.isfinite(d) or d <= 0 for d in ds):
            raise InvalidDiameter(f"diameters must be positive finite, got {list(ds)}")
        object.__setattr__(self, "diameters_mm", ds)

    @property
    def has_size(self) -> bool:
        return len(self.diameters_mm) > 0

    def estimated_volume_mm3(self) -> float:
        return estimate_tumor_volume(self.diameters_mm)


@dataclass(frozen=True)
class ReportFindings:
    """All tumor findings for one CT. ``normal`` is true iff there are none."""

    ct_id: str
    findings: tuple[TumorFinding, ...] = ()
    normal: bool | None = None

    def __post_init__(self):
        findings = tuple(self.findings)
        normal = self.normal
        if normal is None:
            normal = len(findings) == 0
        if normal != (len(findings) == 0):
            raise ValueError("normal flag inconsistent with findings list")
        object.__setattr__(self, "findings", findings)
        object.__setattr__(self, "normal", bool(normal))


@dataclass(frozen=True)
class OrganVolumeTarget:
    """Per-organ supervision target: summed tumor volume and per-tumor sizes.

    ``per_tumor`` holds (largest diameter mm, estimated volume mm³) pairs in
    descending diameter order (ties keep report order). ``excluded`` marks
    organs where the report mentioned a tumor without a size; losses refuse
    those so callers can audit coverage.
    """

    organ_id: str
    report_volume_mm3: float
    tumor_count: int
    per_tumor: tuple[tuple[float, float], ...] = ()
    excluded: bool = False


def build_volume_targets(
    report: ReportFindings, vocabulary: dict[str, Organ] | None = None
) -> dict[str, OrganVolumeTarget]:
    """Aggregate a report into per-organ volume targets.

    Each organ with at least one finding gets a target; organs containing any
    size-less finding are flagged ``excluded`` (the whole organ is withheld
    from supervision, not just the offending finding).
    """
    vocab = vocabulary if vocabulary is not None else default_organ_vocabulary()
    grouped: dict[str, list[TumorFinding]] = {}
    for finding in report.findings:
        if finding.organ_id not in vocab:
            raise UnknownOrgan(f"unknown organ id {finding.organ_id!r}")
        grouped.setdefault(finding.organ_id, []).append(finding)

    targets = {}
    for organ_id, group in grouped.items():
        sized = [f for f in group if f.has_size]
        per_tumor = [(f.diameters_mm[0], f.estimated_volume_mm3()) for f in sized]
        per_tumor.sort(key=lambda pair: -pair[0])  # stable: ties keep report order
        targets[organ_id] = OrganVolumeTarget(
            organ_id=organ_id,
            report_volume_mm3=float(sum(v for _, v in per_tumor)),
            tumor_count=len(per_tumor),
            per_tumor=tuple(per_tumor),
            excluded=len(sized) < len(group),
        )
    return targets


def zero_volume_target(organ_id: str) -> OrganVolumeTarget:
    """Target for an organ the report declares tumor-free."""
    return OrganVolumeTarget(organ_id, 0.0, 0, (), excluded=False)


# --- JSON schema -----------------------------------------------------------
#
# One object per CT:
#   {"ct_id": str, "findings": [{"organ": str, "diameters_mm": [num...]}],
#    "normal": bool}
# Batch files are JSONL (UTF-8, one object per line). An optional per-finding
# "has_size" may appear but must agree with diameters_mm.


def _expect(condition: bool, path: str, message: str) -> None:
    if not condition:
        raise SchemaViolation(path, message)


def parse_report(obj, vocabulary: dict[str, Organ] | None = None, path: str = "$") -> ReportFindings:
    """Validate a decoded report object and build :class:`ReportFindings`."""
    vocab = vocabulary if vocabulary is not None else default_organ_vocabulary()
    _expect(isinstance(obj, dict), path, "report must be a JSON object")
    _expect("ct_id" in obj, f"{path}.ct_id", "missing required field")
    _expect(
        isinstance(obj["ct_id"], str) and obj["ct_id"] != "",
        f"{path}.ct_id",
        "must be a non-empty string",
    )
    _expect("findings" in obj, f"{path}.findings", "missing required field")
    _expect(isinstance(obj["findings"], list), f"{path}.findings", "must be a list")
    for key in obj:
        _expect(key in ("ct_id", "findings", "normal"), f"{path}.{key}", "unexpected field")

    findings = []
    for i, fobj in enumerate(obj["findings"]):
        fpath = f"{path}.findings[{i}]"
        _expect(isinstance(fobj, dict), fpath, "finding must be a JSON object")
        _expect("organ" in fobj, f"{fpath}.organ", "missing required field")
        organ = fobj["organ"]
        _expect(isinstance(organ, str), f"{fpath}.organ", "must be a string")
        _expect(organ in vocab, f"{fpath}.organ", f"unknown organ id {organ!r}")
        diam = fobj.get("diameters_mm", [])
        _expect(isinstance(diam, list), f"{fpath}.diameters_mm", "must be a list")
        _expect(
            len(diam) <= MAX_DIAMETERS,
            f"{fpath}.diameters_mm",
            f"at most {MAX_DIAMETERS} diameters",
        )
        for j, d in enumerate(diam):
            dpath = f"{fpath}.diameters_mm[{j}]"
            _expect(
                isinstance(d, (int, float)) and not isinstance(d, bool),
                dpath,
                "must be a number",
            )
            _expect(math.isfinite(float(d)) and float(d) > 0, dpath, "must be > 0 and finite")
        if "has_size" in fobj:
            _expect(isinstance(fobj["has_size"], bool), f"{fpath}.has_size", "must be a boolean")
            _expect(
                fobj["has_size"] == (len(diam) > 0),
                f"{fpath}.has_size",
                "inconsistent with diameters_mm",
            )
        for key in fobj:
            _expect(
                key in ("organ", "diameters_mm", "has_size"), f"{fpath}.{key}", "unexpected field"
            )
        findings.append(TumorFinding(organ_id=organ, diameters_mm=tuple(float(d) for d in diam)))

    if "normal" in obj:
        _expect(isinstance(obj["normal"], bool), f"{path}.normal", "must be a boolean")
        _expect(
            obj["normal"] == (len(findings) == 0),
            f"{path}.normal",
            "inconsistent with findings list",
        )
    return ReportFindings(ct_id=obj["ct_id"], findings=tuple(findings))


def parse_report_file(path, vocabulary: dict[str, Organ] | None = None) -> ReportFindings:
    """Parse a single-report JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation("$", f"invalid JSON: {exc}") from exc
    return parse_report(obj, vocabulary)


def read_reports_jsonl(path, vocabulary: dict[str, Organ] | None = None) -> list[ReportFindings]:
    """Parse a JSONL batch file, one report object per line."""
    reports = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"line {lineno}", f"invalid JSON: {exc}") from exc
            reports.append(parse_report(obj, vocabulary, path=f"line {lineno}"))
    return reports


def report_to_dict(report: ReportFindings) -> dict:
    """Serialize to the JSON report schema (diameters emitted descending)."""
    return {
        "ct_id": report.ct_id,
        "findings": [
            {"organ": f.organ_id, "diameters_mm": list(f.diameters_mm)} for f in report.findings
        ],
        "normal": report.normal,
    }


def write_report_file(report: ReportFindings, path) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report)) + "\n", encoding="utf-8")


def write_reports_jsonl(reports, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(json.dumps(report_to_dict(report)))
            fh.write("\n")
