import numpy as np
import pytest

from reportseg import (
    Coverage,
    CoverageViolation,
    ExcludedOrgan,
    OrganVolumeTarget,
    VoxelGrid,
    background_suppression_loss,
    hinge_threshold,
    hinged_volume_discrepancy,
    patch_volume_loss,
    volume_discrepancy,
    volume_loss,
    zero_volume_target,
)
from reportseg.volume_loss import VolumeLossConfig
from oracles import finite_diff_grad, max_rel_err

CFG = VolumeLossConfig()  # stabilizer 500 mm3, tolerance 10%


def target(v_rep, excluded=False):
    return OrganVolumeTarget("organ", float(v_rep), 1, ((10.0, float(v_rep)),), excluded=excluded)


def test_volume_discrepancy_hand_values():
    assert volume_discrepancy(1000, 1000, 500) == 0.0
    assert volume_discrepancy(1000, 0, 500) == pytest.approx(1000 / 1500, rel=1e-12)
    assert volume_discrepancy(0, 1000, 500) == pytest.approx(1000 / 1500, rel=1e-12)


def test_hinged_discrepancy_hand_values():
    # hand evaluation: L'(950,1000)=50/2450 < threshold L'(900,1000)=100/2400
    assert hinged_volume_discrepancy(950, 1000, CFG) == 0.0
    assert hinged_volume_discrepancy(1000, 1000, CFG) == 0.0
    # hand evaluation: 1000/3500 - 100/2400 = 41/168
    assert hinged_volume_discrepancy(2000, 1000, CFG) == pytest.approx(41 / 168, abs=1e-12)
    # all-zero output against a 1000 mm3 report: 2/3 - 1/24
    assert hinged_volume_discrepancy(0, 1000, CFG) == pytest.approx(0.625, abs=1e-12)


def test_hinge_dead_zone_boundaries():
    thr = hinge_threshold(1000.0, CFG)
    assert thr == pytest.approx(1 / 24, rel=1e-12)
    # zero exactly at the lower tolerance edge, positive just outside
    assert hinged_volume_discrepancy(900.0, 1000.0, CFG) == 0.0
    assert hinged_volume_discrepancy(899.0, 1000.0, CFG) > 0.0
    # upper edge solves (v-1000)/(v+1500) = 1/24 -> v = 25500/23
    upper = 25500.0 / 23.0
    assert hinged_volume_discrepancy(upper - 1e-9, 1000.0, CFG) == 0.0
    assert hinged_volume_discrepancy(upper + 1e-6, 1000.0, CFG) > 0.0


def test_hinge_with_zero_report_volume_reduces_to_raw():
    # the threshold collapses to zero, so any mass is penalized
    for v_s in (0.0, 1.0, 250.0, 4000.0):
        assert hinged_volume_discrepancy(v_s, 0.0, CFG) == pytest.approx(
            volume_discrepancy(v_s, 0.0, CFG.stabilizer_mm3), rel=1e-12
        )


def test_loss_curve_shape_around_report_volume():
    # zero on an interval around the report volume, monotone outside it
    v_s = np.linspace(0.0, 5000.0, 10_000)
    vals = hinged_volume_discrepancy(v_s, 1000.0, CFG)
    zero = vals == 0.0
    assert zero.any()
    inside = np.flatnonzero(zero)
    assert np.array_equal(inside, np.arange(inside[0], inside[-1] + 1))  # one interval
    left = vals[: inside[0] + 1]
    right = vals[inside[-1] :]
    assert np.all(np.diff(left) < 0)
    assert np.all(np.diff(right) > 0)


def test_background_loss_values():
    spacing = (1.0, 1.0, 1.0)
    zeros = VoxelGrid(np.zeros((2, 2, 2)), spacing)
    mask = np.ones((2, 2, 2), dtype=np.uint8)
    mask[0, 0, 0] = 0
    m = VoxelGrid(mask, spacing)
    assert background_suppression_loss(zeros, m) == 0.0

    inside_only = np.ones((2, 2, 2)) * (mask == 1)
    assert background_suppression_loss(VoxelGrid(inside_only, spacing), m) == 0.0

    one_out = np.zeros((2, 2, 2))
    one_out[0, 0, 0] = 0.5
    got = background_suppression_loss(VoxelGrid(one_out, spacing), m)
    assert got == pytest.approx(np.log(2) / 8, rel=1e-12)


def test_background_loss_clamps_at_certain_false_positive():
    spacing = (1.0, 1.0, 1.0)
    probs = np.zeros((2, 2, 2))
    probs[0, 0, 0] = 1.0
    mask = np.ones((2, 2, 2), dtype=np.uint8)
    mask[0, 0, 0] = 0
    got = background_suppression_loss(VoxelGrid(probs, spacing), VoxelGrid(mask, spacing))
    assert got == pytest.approx(-np.log(CFG.background_eps) / 8)
    assert np.isfinite(got)


def fixture(seed, shape=(6, 6, 6), spacing=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng(seed)
    probs = rng.uniform(0.02, 0.98, size=shape)
    mask = (rng.random(shape) < 0.5).astype(np.uint8)
    return probs, VoxelGrid(mask, spacing), spacing


def test_volume_loss_composition_and_invariants():
    probs, mask, spacing = fixture(11)
    t = target(1000.0)
    res = volume_loss(VoxelGrid(probs.copy(), spacing), mask, t, CFG)
    assert res.total == pytest.approx(res.volume_term + res.background_term, rel=1e-12)
    assert res.volume_term >= 0.0
    assert res.background_term >= 0.0
    assert res.segmented_volume_mm3 == pytest.approx(
        float((probs * mask.data).sum()), rel=1e-12
    )


def test_volume_loss_all_zero_probs_pushes_up_inside_organ():
    shape = (6, 6, 6)
    spacing = (1.0, 1.0, 1.0)
    mask = np.zeros(shape, dtype=np.uint8)
    mask[1:5, 1:5, 1:5] = 1
    res = volume_loss(
        VoxelGrid(np.zeros(shape), spacing), VoxelGrid(mask, spacing), target(1000.0), CFG
    )
    assert res.volume_term == pytest.approx(0.625, abs=1e-12)
    inside = res.grad.data[mask == 1]
    assert np.all(inside < 0)  # gradient descent raises the probabilities
    assert res.background_term == 0.0


def test_volume_loss_normal_organ_penalizes_stray_mass():
    shape = (6, 6, 6)
    spacing = (1.0, 1.0, 1.0)
    mask = np.zeros(shape, dtype=np.uint8)
    mask[1:5, 1:5, 1:5] = 1
    probs = np.zeros(shape)
    probs[2, 2, 2] = 0.8
    res = volume_loss(VoxelGrid(probs, spacing), VoxelGrid(mask, spacing), target(0.0), CFG)
    assert res.volume_term == pytest.approx(0.8 / (0.8 + 500.0), rel=1e-12)
    assert res.grad.data[2, 2, 2] > 0


def test_volume_loss_dead_zone_has_zero_volume_gradient():
    shape = (4, 4, 4)
    spacing = (2.0, 2.0, 2.0)  # voxel volume 8
    mask = np.ones(shape, dtype=np.uint8)
    probs = np.full(shape, 0.5)  # v_s = 64 * 0.5 * 8 = 256
    t = target(256.0 / 0.95)  # inside the ±tolerance band
    res = volume_loss(VoxelGrid(probs, spacing), VoxelGrid(mask, spacing), t, CFG)
    assert res.volume_term == 0.0
    # remaining gradient comes from the background term only; inside an
    # all-ones organ that term is zero as well
    assert np.all(res.grad.data == 0.0)


def test_volume_loss_refuses_partial_coverage_and_excluded():
    probs, mask, spacing = fixture(12)
    g = VoxelGrid(probs, spacing)
    with pytest.raises(CoverageViolation):
        volume_loss(g, mask, target(100.0), CFG, coverage=Coverage.PARTIAL)
    with pytest.raises(ExcludedOrgan):
        volume_loss(g, mask, target(100.0, excluded=True), CFG)


@pytest.mark.parametrize("seed,v_rep", [(0, 0.0), (1, 30.0), (2, 120.0), (3, 2000.0)])
def test_volume_loss_gradient_matches_finite_differences(seed, v_rep):
    probs, mask, spacing = fixture(seed)
    t = target(v_rep)
    analytic = volume_loss(VoxelGrid(probs.copy(), spacing), mask, t, CFG).grad.data

    fd = finite_diff_grad(
        lambda p: volume_loss(VoxelGrid(p.copy(), spacing), mask, t, CFG).total,
        probs,
        step=1e-4,
    )
    assert max_rel_err(fd, analytic) < 1e-4


def test_scaling_up_in_active_branch_never_decreases_volume_term():
    shape = (5, 5, 5)
    spacing = (1.0, 1.0, 1.0)
    mask = np.ones(shape, dtype=np.uint8)
    rng = np.random.default_rng(13)
    probs = rng.uniform(0.05, 0.4, size=shape)
    m = VoxelGrid(mask, spacing)
    t = target(10.0)  # v_s >> v_r: active upper branch
    base = volume_loss(VoxelGrid(probs.copy(), spacing), m, t, CFG)
    assert base.segmented_volume_mm3 > t.report_volume_mm3
    prev = base.volume_term
    for alpha in (1.2, 1.6, 2.0, 2.4):
        cur = volume_loss(VoxelGrid(np.clip(alpha * probs, 0, 1), spacing), m, t, CFG).volume_term
        assert cur >= prev - 1e-15
        prev = cur


def test_patch_volume_loss_reduction_and_skips():
    shape = (6, 6, 6)
    spacing = (1.0, 1.0, 1.0)
    rng = np.random.default_rng(14)
    probs = VoxelGrid(rng.uniform(0.0, 0.3, size=shape), spacing)
    m1 = np.zeros(shape, dtype=np.uint8)
    m1[1:3, 1:3, 1:3] = 1
    m2 = np.zeros(shape, dtype=np.uint8)
    m2[4:6, 4:6, 4:6] = 1
    masks = {"a": VoxelGrid(m1, spacing), "b": VoxelGrid(m2, spacing)}
    targets = {"a": OrganVolumeTarget("a", 40.0, 1, ((4.0, 40.0),))}
    out = patch_volume_loss(probs, masks, targets)
    # organ b had no finding: supervised toward zero volume
    assert set(out.per_organ) == {"a", "b"}
    expected = (out.per_organ["a"].total + out.per_organ["b"].total) / 2
    assert out.total == pytest.approx(expected, rel=1e-12)

    targets["b"] = OrganVolumeTarget("b", 10.0, 1, ((3.0, 10.0),), excluded=True)
    coverage = {"a": Coverage.PARTIAL, "b": Coverage.FULLY_INSIDE}
    out2 = patch_volume_loss(probs, masks, targets, coverage=coverage)
    assert out2.per_organ == {}
    assert dict(out2.skipped) == {"a": "coverage=partial", "b": "excluded: size-less finding"}
    assert out2.total == 0.0


def test_zero_volume_target_helper():
    t = zero_volume_target("liver")
    assert t.report_volume_mm3 == 0.0 and t.tumor_count == 0 and not t.excluded
