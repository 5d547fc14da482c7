"""reportseg: voxel-wise supervision for 3D tumor segmentation from report findings.

The library converts structured radiology-report findings (tumor count,
organ/sub-segment, diameters) into training signals for 3D segmentation
probability grids: a volume-consistency loss with a tolerance dead zone, and
a pseudo-mask built by greedy spherical-convolution placement of each
reported tumor. A phantom generator and a metrics harness make every claim
checkable at desk scale.
"""

from .ball_loss import (
    BallKernel,
    BallLossConfig,
    PlacementRecord,
    PseudoMask,
    PseudoMaskLoss,
    ball_convolve,
    build_ball_kernel,
    place_tumors,
    pseudo_mask_loss,
)
from .errors import (
    BallCapacityExceeded,
    CoverageViolation,
    DegenerateCohort,
    EmptyOrgan,
    ExcludedOrgan,
    HeaderMismatch,
    InvalidDiameter,
    KernelExceedsGrid,
    SchemaViolation,
    ShapeMismatch,
    SizeMissing,
    SpacingMismatch,
    TruncatedPayload,
    TumorOutsideOrgan,
    UnknownOrgan,
)
from .grid import (
    Coverage,
    OrganMaskSet,
    Patch,
    VoxelGrid,
    organ_coverage,
    read_grid,
    segmented_volume,
    segmented_volume_gradient,
    trilinear_resample,
    write_grid,
)
from .metrics import (
    DetectionOutcome,
    OperatingPoint,
    confusion_counts,
    detect_tumor,
    detection_f1_sweep,
    dsc,
    nsd,
)
from .phantom import (
    EllipsoidShape,
    NoiseSpec,
    PhantomSpec,
    RenderedPhantom,
    TumorShape,
    perturb_report,
    render_phantom,
    sample_phantom_spec,
)
from .reports import (
    Organ,
    OrganVolumeTarget,
    ReportFindings,
    TumorFinding,
    build_volume_targets,
    default_organ_vocabulary,
    estimate_tumor_volume,
    load_organ_vocabulary,
    parse_report,
    parse_report_file,
    read_reports_jsonl,
    report_to_dict,
    write_report_file,
    write_reports_jsonl,
    zero_volume_target,
)
from .volume_loss import (
    PatchVolumeLoss,
    VolumeLossConfig,
    VolumeLossResult,
    background_suppression_loss,
    hinge_threshold,
    hinged_volume_discrepancy,
    patch_volume_loss,
    volume_discrepancy,
    volume_loss,
)

__version__ = "0.1.0"
