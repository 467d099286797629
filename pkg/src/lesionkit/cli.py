"""Command-line interface.

Subcommands expose each stage of the pipeline (preprocess, phantom,
cluster, match, froc, kappa, dice, wilcoxon, px2, evaluate, losscheck).
Global flags come before the subcommand:

    lesionkit [--config FILE] [--seed N] [--threads N] [--strict] CMD ...

--config points at a JSON file with optional "phantom" and "evaluation"
sections whose keys override the corresponding config defaults; explicit
command-line flags win over the file.  --seed overrides the phantom and
bootstrap seeds.  --strict escalates degenerate-statistics warnings to
exit code 4.

Exit codes: 0 success; 2 configuration error; 3 data error (missing or
malformed inputs, grid mismatches, empty strata); 4 degenerate statistics
under --strict.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .cluster import (
    DEFAULT_CONNECTIVITY,
    MIN_LESION_VOLUME_MM3,
    cs_lesion_maps,
    filter_by_volume,
    gs_lesion_maps,
)
from .evaluation import (
    EvaluationConfig,
    evaluate_points,
    load_fold_manifest,
    load_patient_eval,
    read_points_csv,
    run_full_evaluation,
)
from .grades import GRADE_ORDER, MISSED, parse_grade
from .matching import DetectionRecord, match_detections
from .metrics import (
    bootstrap_kappa,
    confusion_matrix,
    dice_coefficient,
    wilcoxon_one_sided,
)
from .netmath import (
    AttentionMap,
    ClassWeights,
    FeatureStack,
    attention_gate_backward,
    attention_gate_forward,
    branch_loss_gradient,
    weighted_ce_loss,
    weighted_dice_loss,
)
from .phantom import PhantomConfig, PlacementError, write_cohort
from .volume import (
    ProbStack,
    Volume,
    VolumeFormatError,
    preprocess,
    read_volume,
    write_volume,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DEGENERATE = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(cfg) - {"phantom", "evaluation"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _build_dataclass(cls, section: dict, overrides: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - fields
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("dims", "spacing_mm", "lesions_per_grade", "lesion_radius_mm",
                "score_range", "misgrade", "fp_targets", "fp_grid"):
        if key in merged and isinstance(merged[key], list):
            merged[key] = tuple(
                tuple(v) if isinstance(v, list) else v for v in merged[key]
            )
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _read_volume(path) -> Volume:
    try:
        return read_volume(path)
    except FileNotFoundError as e:
        raise DataError(f"volume not found: {path}") from e
    except VolumeFormatError as e:
        raise DataError(str(e)) from e


def _read_probs(base) -> ProbStack:
    chans = [_read_volume(f"{base}_c{c}") for c in range(6)]
    try:
        return ProbStack.from_channels(chans)
    except ValueError as e:
        raise DataError(str(e)) from e


# ---------------------------------------------------------------------------
# Subcommands


def cmd_preprocess(args, file_cfg) -> int:
    v = _read_volume(args.input)
    try:
        out = preprocess(
            v,
            target_spacing=tuple(args.spacing),
            crop=tuple(args.crop),
            per_slice_norm=args.per_slice,
        )
    except ValueError as e:
        raise DataError(str(e)) from e
    write_volume(out, args.output)
    _emit({"input_dims": list(v.dims), "output_dims": list(out.dims),
           "output": str(args.output)})
    return EXIT_OK


def cmd_phantom(args, file_cfg) -> int:
    section = file_cfg.get("phantom", {})
    overrides = {"seed": args.seed}
    if args.patients is not None:
        overrides["n_patients"] = args.patients
        if "n_folds" not in section:  # default folds cannot exceed patients
            overrides["n_folds"] = min(5, args.patients)
    cfg = _build_dataclass(PhantomConfig, section, overrides)
    try:
        ledger = write_cohort(cfg, args.out)
    except PlacementError as e:
        raise ConfigError(str(e)) from e
    n_lesions = sum(len(p.lesions) for p in ledger.patients)
    n_fps = sum(len(p.fps) for p in ledger.patients)
    _emit({
        "out": str(args.out),
        "n_patients": ledger.n_patients,
        "n_lesions": n_lesions,
        "n_fp_blobs": n_fps,
        "seed": cfg.seed,
    })
    return EXIT_OK


def _cluster_dicts(m):
    return [
        {
            "grade": c.grade_name,
            "n_voxels": c.n_voxels,
            "volume_mm3": c.volume_mm3,
            "score": c.score,
            "bbox": list(c.bbox),
        }
        for c in m.clusters
    ]


def cmd_cluster(args, file_cfg) -> int:
    labels = _read_volume(args.labels)
    probs = _read_probs(args.probs) if args.probs else None
    build = cs_lesion_maps if args.mode == "cs" else gs_lesion_maps
    try:
        m = filter_by_volume(build(labels, probs, args.connectivity), args.min_volume)
    except ValueError as e:
        raise DataError(str(e)) from e
    payload = {"mode": args.mode, "n_clusters": len(m), "clusters": _cluster_dicts(m)}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    _emit(payload)
    return EXIT_OK


def cmd_match(args, file_cfg) -> int:
    gt_labels = _read_volume(args.gt)
    pred_labels = _read_volume(args.pred)
    probs = _read_probs(args.pred_probs) if args.pred_probs else None
    build = cs_lesion_maps if args.mode == "cs" else gs_lesion_maps
    try:
        gt = filter_by_volume(build(gt_labels, None, args.connectivity), args.min_volume)
        pred = filter_by_volume(build(pred_labels, probs, args.connectivity), args.min_volume)
        result = match_detections(
            pred, gt, overlap_frac=args.overlap, denom=args.denom,
            strict_duplicates=args.strict_duplicates,
        )
    except ValueError as e:
        raise DataError(str(e)) from e
    _emit({
        "mode": args.mode,
        "n_gt": result.n_gt,
        "tp": len(result.tp),
        "fp": len(result.fp),
        "fn": len(result.fn),
        "duplicates": len(result.duplicates),
        "sensitivity": result.sensitivity,
        "matches": [
            {
                "gt_grade": t.gt.grade_name,
                "pred_grade": t.pred.grade_name,
                "score": t.pred.score,
                "dice": t.dice,
                "overlap": t.overlap,
            }
            for t in result.tp
        ],
    })
    return EXIT_OK


def _eval_config(args, file_cfg, **extra) -> EvaluationConfig:
    overrides = dict(extra)
    overrides["threads"] = args.threads
    if args.seed is not None:
        overrides["bootstrap_seed"] = args.seed
    return _build_dataclass(EvaluationConfig, file_cfg.get("evaluation", {}), overrides)


def _cohort_overrides(args) -> dict:
    d = {}
    if getattr(args, "cohort", None):
        root = Path(args.cohort)
        d.update(
            gt_dir=str(root / "gt"),
            pred_dir=str(root / "pred"),
            zones_dir=str(root / "zones"),
            fold_manifest=str(root / "cohort.json"),
        )
    for name, key in (
        ("gt_dir", "gt_dir"), ("pred_dir", "pred_dir"),
        ("zones_dir", "zones_dir"), ("manifest", "fold_manifest"),
    ):
        v = getattr(args, name, None)
        if v is not None:
            d[key] = str(v)
    return d


def _load_cohort(cfg: EvaluationConfig):
    try:
        pairs = load_fold_manifest(cfg.fold_manifest)
        return [load_patient_eval(cfg, pid, fold) for pid, fold in pairs]
    except FileNotFoundError as e:
        raise DataError(str(e)) from e
    except (ValueError, VolumeFormatError) as e:
        raise DataError(str(e)) from e


def cmd_froc(args, file_cfg) -> int:
    from .metrics import froc_by_grade, froc_curve, sensitivity_at_fp
    from .evaluation import stage_cohort

    cfg = _eval_config(args, file_cfg, **_cohort_overrides(args))
    if cfg.fold_manifest is None or cfg.gt_dir is None or cfg.pred_dir is None:
        raise ConfigError("froc needs --cohort or --gt-dir/--pred-dir/--manifest")
    patients = _load_cohort(cfg)
    try:
        stages = stage_cohort(patients, cfg)
        if args.grade is None:
            pairs = [(s.cs_pred, s.cs_gt) for s in stages]
            curve = froc_curve(pairs, cfg.overlap_frac, cfg.overlap_denom,
                               cfg.strict_duplicates)
            stratum = "CS"
        else:
            grade = parse_grade(args.grade)
            pairs = [(s.gs_pred, s.gs_gt) for s in stages]
            curve = froc_by_grade(pairs, grade, cfg.overlap_frac, cfg.overlap_denom,
                                  cfg.strict_duplicates)
            stratum = grade.display
    except ValueError as e:
        raise DataError(str(e)) from e
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["threshold", "mean_fp_per_patient", "sensitivity"])
            for p in curve.points:
                w.writerow([p.threshold, p.mean_fp_per_patient, p.sensitivity])
    _emit({
        "stratum": stratum,
        "n_patients": curve.n_patients,
        "n_gt_lesions": curve.n_gt_lesions,
        "sensitivity_at_fp": {
            str(t): sensitivity_at_fp(curve, t) for t in cfg.fp_targets
        },
        "out": args.out,
    })
    return EXIT_OK


def _read_detections_csv(path):
    records = []
    try:
        f = open(path, newline="")
    except FileNotFoundError as e:
        raise DataError(f"detections CSV not found: {path}") from e
    with f:
        reader = csv.DictReader(f)
        need = {"patient_id", "fold", "zone", "gt_grade", "pred_grade", "score",
                "dice", "overlap_frac"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise DataError(f"detections CSV needs columns {sorted(need)}")
        for row in reader:
            try:
                pred = MISSED if row["pred_grade"] == MISSED else parse_grade(row["pred_grade"])
                records.append(
                    DetectionRecord(
                        patient_id=row["patient_id"],
                        fold=int(row["fold"]),
                        zone=row["zone"],
                        gt_grade=parse_grade(row["gt_grade"]),
                        pred_grade=pred,
                        score=float(row["score"]),
                        dice=float(row["dice"]),
                        overlap_frac=float(row["overlap_frac"]),
                    )
                )
            except ValueError as e:
                raise DataError(f"bad detections row {row}: {e}") from e
    if not records:
        raise DataError(f"detections CSV {path} has no rows")
    return records


def cmd_kappa(args, file_cfg) -> int:
    records = _read_detections_csv(args.detections)
    cm = confusion_matrix(records, include_fn_as_gs6=args.include_fn)
    if cm.total == 0:
        raise DataError("no gradable records (all lesions missed in TP-only mode)")
    seed = args.seed if args.seed is not None else 0
    result = bootstrap_kappa(
        records, n_iter=args.bootstrap, seed=seed,
        include_fn_as_gs6=args.include_fn, resample=args.resample,
    )
    _emit({
        "grades": [g.display for g in GRADE_ORDER],
        "counts": [list(r) for r in cm.counts],
        "include_fn_as_gs6": cm.include_fn_as_gs6,
        "kappa": result.kappa,
        "degenerate": result.degenerate,
        "bootstrap_mean": result.bootstrap_mean,
        "bootstrap_std": result.bootstrap_std,
        "n_iterations": result.n_iterations,
    })
    if result.degenerate and args.strict:
        print("warning: kappa is degenerate (expected disagreement is zero)",
              file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_dice(args, file_cfg) -> int:
    a = _read_volume(args.a)
    b = _read_volume(args.b)
    try:
        d = dice_coefficient(a, b)
    except ValueError as e:
        raise DataError(str(e)) from e
    _emit({"dice": d})
    return EXIT_OK


def cmd_wilcoxon(args, file_cfg) -> int:
    try:
        f = open(args.csv, newline="")
    except FileNotFoundError as e:
        raise DataError(f"CSV not found: {args.csv}") from e
    with f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or args.x not in reader.fieldnames \
                or args.y not in reader.fieldnames:
            raise DataError(f"CSV must contain columns {args.x!r} and {args.y!r}")
        xs, ys = [], []
        for row in reader:
            try:
                xs.append(float(row[args.x]))
                ys.append(float(row[args.y]))
            except ValueError as e:
                raise DataError(f"non-numeric value in row {row}: {e}") from e
    try:
        p = wilcoxon_one_sided(xs, ys)
    except ValueError as e:
        raise DataError(str(e)) from e
    n_nonzero = int(sum(1 for a, b in zip(xs, ys) if a != b))
    _emit({
        "n_pairs": len(xs),
        "n_nonzero_diffs": n_nonzero,
        "alternative": f"{args.x} > {args.y}",
        "p_value": p,
        "mode": "exact" if n_nonzero <= 20 else "normal_approx",
    })
    return EXIT_OK


def cmd_px2(args, file_cfg) -> int:
    cfg = _eval_config(args, file_cfg, pred_dir=str(args.pred_dir))
    try:
        points = read_points_csv(args.points)
    except FileNotFoundError as e:
        raise DataError(f"points CSV not found: {args.points}") from e
    except ValueError as e:
        raise DataError(str(e)) from e
    stacks = {}
    for pid in sorted({p.patient_id for p in points}):
        stacks[pid] = _read_probs(Path(cfg.pred_dir) / f"{pid}_prob")
    try:
        records, kappa = evaluate_points(points, stacks, cfg)
    except ValueError as e:
        raise DataError(str(e)) from e
    payload = {
        "n_points": len(records),
        "kappa": kappa.kappa,
        "degenerate": kappa.degenerate,
        "bootstrap_mean": kappa.bootstrap_mean,
        "bootstrap_std": kappa.bootstrap_std,
        "n_iterations": kappa.n_iterations,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "px2_report.json", "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        with open(out / "px2_records.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["patient_id", "x_vox", "y_vox", "z_vox", "zone",
                        "gs_label", "pred_grade"])
            for pt, r in zip(points, records):
                w.writerow([pt.patient_id, pt.x, pt.y, pt.z, pt.zone,
                            pt.gs_label.display, r.pred_grade.display])
    _emit(payload)
    if kappa.degenerate and args.strict:
        print("warning: point-protocol kappa is degenerate", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_evaluate(args, file_cfg) -> int:
    extra = _cohort_overrides(args)
    extra["output_dir"] = str(args.out)
    if args.zone is not None:
        extra["zone"] = None if args.zone == "none" else args.zone
    if args.min_volume is not None:
        extra["min_volume_mm3"] = args.min_volume
    if args.overlap is not None:
        extra["overlap_frac"] = args.overlap
    if args.connectivity is not None:
        extra["connectivity"] = args.connectivity
    if args.bootstrap is not None:
        extra["bootstrap_iterations"] = args.bootstrap
    if args.no_intermediates:
        extra["write_intermediates"] = False
    cfg = _eval_config(args, file_cfg, **extra)
    try:
        report, _ = run_full_evaluation(cfg)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e
    except (ValueError, VolumeFormatError) as e:
        raise DataError(str(e)) from e
    _emit({
        "out": str(args.out),
        "n_patients": report.n_patients,
        "prostate_dice_mean": report.prostate_dice_mean,
        "sensitivity_at_fp": {
            str(t): report.sens_at["CS"][t] for t in cfg.fp_targets
        },
        "kappa_tp_only": report.kappa_tp_only.kappa,
        "kappa_with_fn": report.kappa_with_fn.kappa,
        "degenerate_stats": report.degenerate_stats,
    })
    if report.degenerate_stats and args.strict:
        for msg in report.degenerate_stats:
            print(f"warning: {msg}", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def _fd_loss_err(rng) -> float:
    n = int(rng.integers(8, 40))
    w = ClassWeights.lesion_default()
    p = rng.uniform(0.05, 0.95, size=(n, 6))
    y = np.zeros((n, 6))
    y[np.arange(n), rng.integers(0, 6, size=n)] = 1.0
    grad = branch_loss_gradient(p, y, w)

    def loss(q):
        return weighted_dice_loss(q, y, w) + weighted_ce_loss(q, y, w)

    step = 1e-4
    worst = 0.0
    for i in range(n):
        for c in range(6):
            hi = p.copy()
            lo = p.copy()
            hi[i, c] += step
            lo[i, c] -= step
            fd = (loss(hi) - loss(lo)) / (2 * step)
            denom = max(abs(fd), abs(grad[i, c]), 1e-6)
            worst = max(worst, abs(fd - grad[i, c]) / denom)
    return worst


def _fd_gate_err(rng) -> float:
    C = int(rng.integers(2, 5))
    h, w = int(rng.integers(4, 17)), int(rng.integers(4, 17))
    if rng.random() < 0.5:  # integral ratios exercise the area-pooling path
        ah, aw = h * int(rng.integers(1, 4)), w * int(rng.integers(1, 4))
    else:  # everything else goes through bilinear resampling
        ah, aw = int(rng.integers(h, 2 * h + 1)), int(rng.integers(w, 2 * w + 1))
    f = FeatureStack(rng.normal(size=(C, h, w)))
    a = AttentionMap(rng.uniform(0.05, 0.95, size=(ah, aw)))
    dout = rng.normal(size=(C, h, w))
    df, da = attention_gate_backward(f, a, dout)

    def forward_sum(fp, ap):
        out = attention_gate_forward(FeatureStack(fp), AttentionMap(ap))
        return float((out.planes * dout).sum())

    step = 1e-4
    worst = 0.0
    for _ in range(20):  # spot-check random coordinates of both gradients
        i, j, k = (int(rng.integers(0, s)) for s in (C, h, w))
        fp_hi, fp_lo = f.planes.copy(), f.planes.copy()
        fp_hi[i, j, k] += step
        fp_lo[i, j, k] -= step
        fd = (forward_sum(fp_hi, a.plane) - forward_sum(fp_lo, a.plane)) / (2 * step)
        denom = max(abs(fd), abs(df[i, j, k]), 1e-6)
        worst = max(worst, abs(fd - df[i, j, k]) / denom)
        u, v = int(rng.integers(0, ah)), int(rng.integers(0, aw))
        ap_hi, ap_lo = a.plane.copy(), a.plane.copy()
        ap_hi[u, v] += step
        ap_lo[u, v] -= step
        fd = (forward_sum(f.planes, ap_hi) - forward_sum(f.planes, ap_lo)) / (2 * step)
        denom = max(abs(fd), abs(da[u, v]), 1e-6)
        worst = max(worst, abs(fd - da[u, v]) / denom)
    return worst


def cmd_losscheck(args, file_cfg) -> int:
    seed = args.seed if args.seed is not None else 0
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    loss_err = float(max(_fd_loss_err(rng) for _ in range(args.instances)))
    gate_err = float(max(_fd_gate_err(rng) for _ in range(args.instances)))
    tol = 1e-4
    ok = bool(loss_err < tol and gate_err < tol)
    _emit({
        "instances": args.instances,
        "branch_loss_max_rel_err": loss_err,
        "attention_gate_max_rel_err": gate_err,
        "tolerance": tol,
        "pass": ok,
    })
    return EXIT_OK if ok else 1


# ---------------------------------------------------------------------------
# Parser


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lesionkit",
        description="Lesion detection and grading evaluation toolkit.",
    )
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override phantom/bootstrap seeds")
    p.add_argument("--threads", type=int, default=1, help="parallel patient map")
    p.add_argument("--strict", action="store_true",
                   help="escalate degenerate-statistics warnings to exit code 4")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("preprocess", help="resample, crop, normalize an intensity volume")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", dest="output", required=True)
    sp.add_argument("--spacing", nargs=3, type=float, default=[1.0, 1.0, 3.0])
    sp.add_argument("--crop", nargs=2, type=int, default=[96, 96])
    sp.add_argument("--per-slice", action="store_true")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("phantom", help="generate a synthetic cohort with ledger")
    sp.add_argument("--out", required=True)
    sp.add_argument("--patients", type=int, default=None)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("cluster", help="connected components of a label volume")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--probs", default=None, help="probability base path (channels _c0.._c5)")
    sp.add_argument("--mode", choices=("gs", "cs"), default="gs")
    sp.add_argument("--connectivity", type=int, default=DEFAULT_CONNECTIVITY,
                    choices=(6, 18, 26))
    sp.add_argument("--min-volume", type=float, default=MIN_LESION_VOLUME_MM3)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("match", help="match predicted clusters to ground truth")
    sp.add_argument("--pred", required=True, help="predicted label volume")
    sp.add_argument("--gt", required=True, help="ground-truth label volume")
    sp.add_argument("--pred-probs", default=None)
    sp.add_argument("--mode", choices=("gs", "cs"), default="cs")
    sp.add_argument("--overlap", type=float, default=0.10)
    sp.add_argument("--denom", choices=("pred", "gt", "union"), default="pred")
    sp.add_argument("--connectivity", type=int, default=DEFAULT_CONNECTIVITY,
                    choices=(6, 18, 26))
    sp.add_argument("--min-volume", type=float, default=MIN_LESION_VOLUME_MM3)
    sp.add_argument("--strict-duplicates", action="store_true")
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("froc", help="FROC curve over a cohort directory")
    sp.add_argument("--cohort", default=None)
    sp.add_argument("--gt-dir", default=None)
    sp.add_argument("--pred-dir", default=None)
    sp.add_argument("--zones-dir", default=None)
    sp.add_argument("--manifest", default=None)
    sp.add_argument("--grade", default=None,
                    help="per-grade curve (GS6, GS3+4, GS4+3, GS>=8); default CS binary")
    sp.add_argument("--out", default=None, help="CSV output path")
    sp.set_defaults(func=cmd_froc)

    sp = sub.add_parser("kappa", help="confusion matrix and weighted kappa from detections CSV")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--include-fn", action="store_true",
                    help="book missed lesions as GS6 predictions")
    sp.add_argument("--bootstrap", type=int, default=1000)
    sp.add_argument("--resample", choices=("lesion", "patient"), default="lesion")
    sp.set_defaults(func=cmd_kappa)

    sp = sub.add_parser("dice", help="Dice coefficient of two binary volumes")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.set_defaults(func=cmd_dice)

    sp = sub.add_parser("wilcoxon", help="one-sided signed-rank test on two CSV columns")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--x", required=True, help="column tested as greater")
    sp.add_argument("--y", required=True)
    sp.set_defaults(func=cmd_wilcoxon)

    sp = sub.add_parser("px2", help="point-annotation grading protocol")
    sp.add_argument("--points", required=True)
    sp.add_argument("--pred-dir", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_px2)

    sp = sub.add_parser("evaluate", help="full evaluation over a cohort directory")
    sp.add_argument("--cohort", default=None)
    sp.add_argument("--gt-dir", default=None)
    sp.add_argument("--pred-dir", default=None)
    sp.add_argument("--zones-dir", default=None)
    sp.add_argument("--manifest", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--zone", choices=("none", "pz", "tz"), default=None)
    sp.add_argument("--min-volume", type=float, default=None)
    sp.add_argument("--overlap", type=float, default=None)
    sp.add_argument("--connectivity", type=int, default=None, choices=(6, 18, 26))
    sp.add_argument("--bootstrap", type=int, default=None)
    sp.add_argument("--no-intermediates", action="store_true")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("losscheck", help="finite-difference check of analytic gradients")
    sp.add_argument("--instances", type=int, default=10)
    sp.set_defaults(func=cmd_losscheck)

    return p


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = _load_config_file(args.config)
        return args.func(args, file_cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
