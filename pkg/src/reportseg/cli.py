"""Command-line front end: volume-loss, ball-mask, phantom, evaluate, gradcheck."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ball_loss as bl
from . import metrics as mx
from . import phantom as ph
from . import reports as rp
from . import volume_loss as vl
from .grid import VoxelGrid, read_grid, write_grid


def _load_target(report_path: str, organ: str) -> rp.OrganVolumeTarget:
    report = rp.parse_report_file(report_path)
    vocab = rp.default_organ_vocabulary()
    if organ not in vocab:
        raise rp.UnknownOrgan(f"unknown organ id {organ!r}")
    targets = rp.build_volume_targets(report)
    return targets.get(organ, rp.zero_volume_target(organ))


def _cmd_volume_loss(args) -> int:
    probs = read_grid(args.probs)
    mask = read_grid(args.organ_mask)
    target = _load_target(args.report, args.organ)
    cfg = vl.VolumeLossConfig(stabilizer_mm3=args.e, tolerance=args.tau)
    result = vl.volume_loss(probs, mask, target, cfg)
    if args.grad_out:
        write_grid(result.grad, args.grad_out, dtype="f32")
    print(
        json.dumps(
            {
                "l_forg": result.volume_term,
                "l_bkg": result.background_term,
                "l_vol": result.total,
                "v_s_mm3": result.segmented_volume_mm3,
            }
        )
    )
    return 0


def _cmd_ball_mask(args) -> int:
    probs = read_grid(args.probs)
    mask = read_grid(args.organ_mask)
    target = _load_target(args.report, args.organ)
    cfg = bl.BallLossConfig(
        diameter_margin=args.diameter_margin,
        border_margin_vox=args.border_margin,
    )
    if target.tumor_count == 0:
        pmask = bl.PseudoMask(
            labels=probs.like(np.zeros(probs.shape, dtype=np.uint8)),
            ce_weights=probs.like(np.ones(probs.shape, dtype=np.float64)),
            border_exclusion=probs.like(np.zeros(probs.shape, dtype=np.uint8)),
            placements=(),
        )
    else:
        pmask = bl.place_tumors(probs, mask, target, cfg)
    write_grid(pmask.labels, args.out, dtype="u8")
    if args.weights_out:
        write_grid(pmask.ce_weights, args.weights_out, dtype="f32")
    manifest = {
        "organ": args.organ,
        "tumor_count": target.tumor_count,
        "placements": [
            {
                "tumor_index": p.tumor_index,
                "center": list(p.center),
                "n_requested": p.n_requested,
                "n_assigned": p.n_assigned,
                "shortfall": p.shortfall,
            }
            for p in pmask.placements
        ],
    }
    if args.manifest_out:
        Path(args.manifest_out).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    print(json.dumps(manifest))
    return 0


def _cmd_phantom(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = ph.read_phantom_specs(args.spec)
    manifest = {"phantoms": []}
    reports = []
    for spec in specs:
        rendered = ph.render_phantom(spec)
        entry = {"ct_id": spec.ct_id, "organs": {}, "tumors": []}
        write_grid(rendered.probs, out_dir / f"{spec.ct_id}_probs.bin", dtype="f32")
        entry["probs"] = f"{spec.ct_id}_probs.bin"
        for organ_id, grid in rendered.organ_masks.items():
            name = f"{spec.ct_id}_organ_{organ_id}.bin"
            write_grid(grid, out_dir / name, dtype="u8")
            entry["organs"][organ_id] = name
        union_name = f"{spec.ct_id}_tumors.bin"
        write_grid(rendered.tumor_union, out_dir / union_name, dtype="u8")
        entry["tumor_union"] = union_name
        for i, tmask in enumerate(rendered.tumor_masks):
            name = f"{spec.ct_id}_tumor_{i}.bin"
            write_grid(tmask, out_dir / name, dtype="u8")
            entry["tumors"].append(name)
        reports.append(rendered.report)
        manifest["phantoms"].append(entry)
    rp.write_reports_jsonl(reports, out_dir / "reports.jsonl")
    manifest["reports"] = "reports.jsonl"
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    print(json.dumps({"written": len(specs), "out_dir": str(out_dir)}))
    return 0


def _cmd_evaluate(args) -> int:
    metric_names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metric_names) - {"f1", "dsc", "nsd"}
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    pred_dir = Path(args.pred_dir)
    truth_dir = Path(args.truth_dir)

    cases = []
    with open(args.manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                cases.append(json.loads(line))

    results = {"cases": [], "aggregate": {}}
    scores, labels, dscs, nsds = [], [], [], []
    for case in cases:
        pred = read_grid(pred_dir / case["pred"])
        truth = read_grid(truth_dir / case["truth"])
        organ = read_grid(truth_dir / case["organ_mask"]) if "organ_mask" in case else None
        row = {"ct_id": case.get("ct_id", case["pred"])}
        pred_bin = pred.data >= args.threshold
        actual = bool(case.get("label", bool(truth.data.any())))
        _, score = mx.detect_tumor(pred, organ, prob_threshold=args.threshold)
        row["score_mm3"] = score
        row["label"] = actual
        scores.append(score)
        labels.append(actual)
        if "dsc" in metric_names:
            row["dsc"] = mx.dsc(pred_bin, truth.data)
            dscs.append(row["dsc"])
        if "nsd" in metric_names:
            row["nsd"] = mx.nsd(pred_bin, truth.data, args.nsd_tolerance, pred.spacing_mm)
            nsds.append(row["nsd"])
        results["cases"].append(row)

    if dscs:
        results["aggregate"]["dsc_mean"] = float(np.mean(dscs))
    if nsds:
        results["aggregate"]["nsd_mean"] = float(np.mean(nsds))
    if "f1" in metric_names:
        op = mx.detection_f1_sweep(np.array(scores), np.array(labels, dtype=bool))
        results["aggregate"]["detection"] = {
            "threshold_mm3": op.threshold,
            "f1": op.f1,
            "sensitivity": op.sensitivity,
            "specificity": op.specificity,
        }
    text = json.dumps(results, indent=2)
    if args.json_out:
        Path(args.json_out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def _finite_difference(loss_fn, probs: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros_like(probs)
    flat = probs.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn(probs)
        flat[i] = orig - step
        lo = loss_fn(probs)
        flat[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return grad


def _cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    step = 1e-4
    worst = 0.0
    failures = 0
    for trial in range(args.trials):
        shape = tuple(rng.integers(5, 17, size=3))
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        probs = rng.uniform(0.02, 0.98, size=shape)
        mask = (rng.random(shape) < 0.5).astype(np.uint8)
        grid = VoxelGrid(probs.copy(), spacing)
        mask_grid = VoxelGrid(mask, spacing)

        if args.module == "volume":
            v_r = float(rng.uniform(0, 400))
            target = rp.OrganVolumeTarget("organ", v_r, 1, ((10.0, v_r),))
            analytic = vl.volume_loss(grid, mask_grid, target).grad.data

            def loss_fn(p, _t=target, _m=mask_grid, _s=spacing):
                return vl.volume_loss(VoxelGrid(p.copy(), _s), _m, _t).total

        else:
            diameter = float(rng.uniform(4.0, 8.0))
            volume = rp.estimate_tumor_volume([diameter])
            target = rp.OrganVolumeTarget("organ", volume, 1, ((diameter, volume),))
            mask_grid = VoxelGrid(np.ones(shape, dtype=np.uint8), spacing)
            pmask = bl.place_tumors(grid, mask_grid, target)
            analytic = bl.pseudo_mask_loss(grid, pmask).grad.data

            def loss_fn(p, _pm=pmask, _s=spacing):
                r = bl.pseudo_mask_loss(VoxelGrid(p.copy(), _s), _pm)
                return r.ce + r.dsc_loss

        fd = _finite_difference(loss_fn, probs, step)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
        rel = float(np.max(np.abs(fd - analytic) / scale))
        worst = max(worst, rel)
        ok = rel < args.tol
        failures += 0 if ok else 1
        print(f"trial {trial}: shape={shape} max_rel_err={rel:.3e} {'ok' if ok else 'FAIL'}")
    print(f"worst relative error over {args.trials} trials: {worst:.3e}")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reportseg",
        description="Report-derived voxel-wise supervision for 3D tumor segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("volume-loss", help="volume loss for one organ")
    p.add_argument("--probs", required=True)
    p.add_argument("--organ-mask", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--organ", required=True)
    p.add_argument("--tau", type=float, default=0.10)
    p.add_argument("--e", type=float, default=500.0)
    p.add_argument("--grad-out", default=None)
    p.set_defaults(func=_cmd_volume_loss)

    p = sub.add_parser("ball-mask", help="build the pseudo-mask for one organ")
    p.add_argument("--probs", required=True)
    p.add_argument("--organ-mask", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--organ", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights-out", default=None)
    p.add_argument("--manifest-out", default=None)
    p.add_argument("--diameter-margin", type=float, default=0.20)
    p.add_argument("--border-margin", type=int, default=1)
    p.set_defaults(func=_cmd_ball_mask)

    p = sub.add_parser("phantom", help="render phantoms from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("evaluate", help="cohort metrics from grid files")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--truth-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--metrics", default="f1,dsc,nsd")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--nsd-tolerance", type=float, default=2.0)
    p.add_argument("--json-out", default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", choices=("volume", "ball"), required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
