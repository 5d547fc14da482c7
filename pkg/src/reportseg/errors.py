"""Exception and warning types shared across the library."""


class SizeMissing(ValueError):
    """A tumor finding has no reported diameters."""


class InvalidDiameter(ValueError):
    """A reported diameter is non-positive, non-finite, or there are too many."""


class UnknownOrgan(ValueError):
    """An organ id is not present in the organ vocabulary."""


class SchemaViolation(ValueError):
    """A report or spec file violates its JSON schema.

    ``path`` points at the offending field, e.g. ``findings[1].diameters_mm[0]``.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ShapeMismatch(ValueError):
    """Two grids that must share a shape do not."""


class SpacingMismatch(ValueError):
    """Two grids that must share voxel spacing do not."""


class HeaderMismatch(ValueError):
    """A grid file header is missing, malformed, or inconsistent."""


class TruncatedPayload(ValueError):
    """A grid payload does not contain exactly shape-product elements."""


class CoverageViolation(ValueError):
    """A loss was requested for an organ not fully inside the patch."""


class ExcludedOrgan(ValueError):
    """A loss was requested for an organ flagged as excluded (size-less finding)."""


class EmptyOrgan(ValueError):
    """An organ mask contains no voxels."""


class TumorOutsideOrgan(ValueError):
    """A phantom tumor is not fully contained in its organ."""


class DegenerateCohort(ValueError):
    """A detection cohort lacks positive or negative cases."""


class KernelExceedsGrid(UserWarning):
    """A ball kernel is larger than the organ bounding box; scores are clipped."""


class BallCapacityExceeded(UserWarning):
    """A ball cannot hold the requested voxel count; all available were assigned."""
