"""Cohort evaluation: voxel volumes in, detection/grading report out.

The pipeline per patient is argmax labeling, per-grade and CS-binary
clustering, the minimum-volume filter, an optional zonal restriction, and
overlap matching.  Cohort-level aggregation produces the binary CS FROC
(pooled, per fold, and a mean +/- 2 std band over folds), per-grade FROC
curves, both confusion-matrix variants with quadratic weighted kappa and
bootstrap bands, per-fold kappa, prostate Dice, and fixed-FP sensitivity
readouts.

`evaluate_cohort` is pure and in-memory; `run_full_evaluation` adds the
directory conventions and writes the report bundle (report.json plus CSV
and JSON intermediates from which every reported number is recomputable).
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cluster import (
    DEFAULT_CONNECTIVITY,
    MIN_LESION_VOLUME_MM3,
    LesionMap,
    cs_lesion_maps,
    filter_by_volume,
    filter_by_zone,
    gs_lesion_maps,
)
from .grades import GRADE_ORDER, Grade, MISSED, parse_grade
from .matching import (
    DEFAULT_OVERLAP_FRAC,
    DetectionRecord,
    _overlap_value,
    best_dice_assignment,
    dice_overlap,
    point_in_cluster_grade,
)
from .metrics import (
    AggregatePoint,
    ConfusionMatrix,
    FrocCurve,
    KappaResult,
    aggregate_folds,
    bootstrap_kappa,
    confusion_matrix,
    dice_coefficient,
    froc_by_grade,
    froc_curve,
    quadratic_weighted_kappa,
    sensitivity_at_fp,
)
from .netmath import label_from_probs
from .volume import KIND_LABEL, ProbStack, Volume, ZoneMask, read_volume

ZONE_CHOICES = (None, "pz", "tz")

#: safe file-name stems for the per-grade FROC CSVs
GRADE_STEMS = {Grade.GS6: "gs6", Grade.GS34: "gs34", Grade.GS43: "gs43", Grade.GS8: "gs8"}


@dataclass(frozen=True)
class EvaluationConfig:
    """Knobs of the evaluation protocol; defaults are the study constants
    (45 mm^3 volume filter, 10% overlap rule, 26-connectivity)."""

    gt_dir: str | None = None
    pred_dir: str | None = None
    zones_dir: str | None = None
    fold_manifest: str | None = None
    output_dir: str | None = None
    connectivity: int = DEFAULT_CONNECTIVITY
    min_volume_mm3: float = MIN_LESION_VOLUME_MM3
    overlap_frac: float = DEFAULT_OVERLAP_FRAC
    overlap_denom: str = "pred"
    zone: str | None = None
    strict_duplicates: bool = False
    bootstrap_iterations: int = 1000
    bootstrap_seed: int = 0
    bootstrap_resample: str = "lesion"
    fp_targets: tuple[float, ...] = (1.0, 1.5)
    fp_grid: tuple[float, ...] = (0.25, 0.5, 1.0, 1.5, 2.0)
    threads: int = 1
    write_intermediates: bool = True

    def __post_init__(self):
        if self.zone not in ZONE_CHOICES:
            raise ValueError(f"zone must be one of {ZONE_CHOICES}, got {self.zone!r}")
        if self.min_volume_mm3 < 0:
            raise ValueError("min_volume_mm3 must be nonnegative")
        if not (0.0 < self.overlap_frac <= 1.0):
            raise ValueError("overlap_frac must lie in (0, 1]")
        if self.bootstrap_iterations < 1:
            raise ValueError("bootstrap_iterations must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")
        if not self.fp_targets or any(t < 0 for t in self.fp_targets):
            raise ValueError("fp_targets must be nonnegative")
        if not self.fp_grid or any(t < 0 for t in self.fp_grid):
            raise ValueError("fp_grid must be nonnegative")

    @classmethod
    def for_cohort_dir(cls, root, output_dir=None, **overrides) -> "EvaluationConfig":
        """Fill directory fields from the standard cohort layout
        (gt/, pred/, zones/, cohort.json under one root)."""
        root = Path(root)
        fields = dict(
            gt_dir=str(root / "gt"),
            pred_dir=str(root / "pred"),
            zones_dir=str(root / "zones"),
            fold_manifest=str(root / "cohort.json"),
            output_dir=None if output_dir is None else str(output_dir),
        )
        fields.update(overrides)
        return cls(**fields)

    def to_dict(self) -> dict:
        # protocol knobs only; directory paths stay out of the report
        return {
            "connectivity": self.connectivity,
            "min_volume_mm3": self.min_volume_mm3,
            "overlap_frac": self.overlap_frac,
            "overlap_denom": self.overlap_denom,
            "zone": self.zone,
            "strict_duplicates": self.strict_duplicates,
            "bootstrap_iterations": self.bootstrap_iterations,
            "bootstrap_seed": self.bootstrap_seed,
            "bootstrap_resample": self.bootstrap_resample,
            "fp_targets": list(self.fp_targets),
            "fp_grid": list(self.fp_grid),
        }


@dataclass(frozen=True)
class PatientEval:
    """One patient's evaluation inputs."""

    patient_id: str
    fold: int
    labels: Volume  # ground-truth label codes
    probs: ProbStack  # predicted per-class probabilities
    zones: ZoneMask | None = None

    def __post_init__(self):
        if self.labels.kind != KIND_LABEL:
            raise ValueError("ground truth must be a label volume")
        vals = self.probs.data.shape[1:]
        if vals != self.labels.values.shape or self.probs.spacing_mm != self.labels.spacing_mm:
            raise ValueError(f"prediction grid mismatch for patient {self.patient_id}")
        if self.zones is not None and not self.zones.pz.same_grid(self.labels):
            raise ValueError(f"zone grid mismatch for patient {self.patient_id}")


@dataclass(frozen=True)
class PatientStage:
    """Per-patient pipeline products feeding cohort aggregation."""

    patient_id: str
    fold: int
    gs_pred: LesionMap
    gs_gt: LesionMap
    cs_pred: LesionMap
    cs_gt: LesionMap
    prostate_dice: float
    records: tuple[DetectionRecord, ...]


@dataclass
class EvaluationReport:
    n_patients: int
    folds: tuple[int, ...]
    patients: list[dict]
    prostate_dice_mean: float
    prostate_dice_std: float
    cs_froc: FrocCurve
    cs_froc_by_fold: dict[int, FrocCurve | None]
    cs_aggregate: tuple[AggregatePoint, ...] | None
    grade_froc: dict[Grade, FrocCurve | None]
    sens_at: dict[str, dict[float, float] | None]
    records: tuple[DetectionRecord, ...]
    confusion_tp_only: ConfusionMatrix
    confusion_with_fn: ConfusionMatrix
    kappa_tp_only: KappaResult
    kappa_with_fn: KappaResult
    fold_kappa: dict[str, dict]  # variant -> {"values": {fold: v|None}, "mean", "std"}
    degenerate_stats: list[str]
    config: EvaluationConfig


# ---------------------------------------------------------------------------
# Per-patient stage


def _lesion_zone(lesion, zones: ZoneMask | None) -> str:
    if zones is None:
        return "unknown"
    zs, ys, xs = lesion.index_arrays()
    in_pz = int((np.asarray(zones.pz.values)[zs, ys, xs] != 0).sum())
    in_tz = int((np.asarray(zones.tz.values)[zs, ys, xs] != 0).sum())
    if 2 * in_pz > lesion.n_voxels:
        return "PZ"
    if 2 * in_tz > lesion.n_voxels:
        return "TZ"
    return "unknown"


def _patient_records(patient: PatientEval, gs_pred, gs_gt, cfg) -> tuple:
    """Detection outcome per ground-truth lesion: a lesion is detected when
    some predicted cluster reaches the overlap rule against it, and takes
    the grade of the highest-Dice qualifying cluster (one cluster may grade
    several lesions)."""
    records = []
    for lesion in gs_gt.clusters:
        ls = lesion.voxel_set
        cands = []
        for c in gs_pred.clusters:
            inter = len(c.voxel_set & ls)
            if inter == 0:
                continue
            if _overlap_value(inter, c, lesion, cfg.overlap_denom) >= cfg.overlap_frac:
                cands.append(c)
        zone = _lesion_zone(lesion, patient.zones)
        if cands:
            best = best_dice_assignment(lesion, cands)
            inter = len(best.voxel_set & ls)
            records.append(
                DetectionRecord(
                    patient_id=patient.patient_id,
                    fold=patient.fold,
                    zone=zone,
                    gt_grade=lesion.grade,
                    pred_grade=best.grade,
                    score=best.score,
                    dice=dice_overlap(best.voxel_set, ls),
                    overlap_frac=_overlap_value(inter, best, lesion, cfg.overlap_denom),
                )
            )
        else:
            records.append(
                DetectionRecord(
                    patient_id=patient.patient_id,
                    fold=patient.fold,
                    zone=zone,
                    gt_grade=lesion.grade,
                    pred_grade=MISSED,
                    score=0.0,
                    dice=0.0,
                    overlap_frac=0.0,
                )
            )
    return tuple(records)


def _stage_patient(patient: PatientEval, cfg: EvaluationConfig) -> PatientStage:
    pred_labels = label_from_probs(patient.probs)
    conn = cfg.connectivity

    gs_pred = filter_by_volume(gs_lesion_maps(pred_labels, patient.probs, conn), cfg.min_volume_mm3)
    gs_gt = filter_by_volume(gs_lesion_maps(patient.labels, None, conn), cfg.min_volume_mm3)
    cs_pred = filter_by_volume(cs_lesion_maps(pred_labels, patient.probs, conn), cfg.min_volume_mm3)
    cs_gt = filter_by_volume(cs_lesion_maps(patient.labels, None, conn), cfg.min_volume_mm3)

    if cfg.zone is not None:
        if patient.zones is None:
            raise ValueError(
                f"zone filter {cfg.zone!r} requested but patient "
                f"{patient.patient_id} has no zone masks"
            )
        mask = patient.zones.pz if cfg.zone == "pz" else patient.zones.tz
        gs_pred = filter_by_zone(gs_pred, mask)
        gs_gt = filter_by_zone(gs_gt, mask)
        cs_pred = filter_by_zone(cs_pred, mask)
        cs_gt = filter_by_zone(cs_gt, mask)

    gt_gland = Volume(
        (np.asarray(patient.labels.values) >= 1).astype(np.uint8),
        patient.labels.spacing_mm,
        KIND_LABEL,
    )
    pred_gland = Volume(
        (np.asarray(pred_labels.values) >= 1).astype(np.uint8),
        patient.labels.spacing_mm,
        KIND_LABEL,
    )
    return PatientStage(
        patient_id=patient.patient_id,
        fold=patient.fold,
        gs_pred=gs_pred,
        gs_gt=gs_gt,
        cs_pred=cs_pred,
        cs_gt=cs_gt,
        prostate_dice=dice_coefficient(gt_gland, pred_gland),
        records=_patient_records(patient, gs_pred, gs_gt, cfg),
    )


# ---------------------------------------------------------------------------
# Cohort aggregation


def _fold_kappa(records, folds, include_fn_as_gs6):
    values = {}
    usable = []
    for f in folds:
        recs = [r for r in records if r.fold == f]
        cm = confusion_matrix(recs, include_fn_as_gs6)
        if cm.total == 0:
            values[f] = None
            continue
        k = quadratic_weighted_kappa(cm).kappa
        values[f] = k
        usable.append(k)
    mean = float(np.mean(usable)) if usable else None
    std = float(np.std(usable)) if usable else None
    return {"values": values, "mean": mean, "std": std}


def stage_cohort(patients, cfg: EvaluationConfig) -> list[PatientStage]:
    """Per-patient pipeline over the cohort; parallel map when threads > 1,
    output always in input order."""
    patients = list(patients)
    if not patients:
        raise ValueError("cohort is empty")
    ids = [p.patient_id for p in patients]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids in cohort")
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(lambda p: _stage_patient(p, cfg), patients))
    return [_stage_patient(p, cfg) for p in patients]


def evaluate_cohort(patients, cfg: EvaluationConfig | None = None) -> EvaluationReport:
    """Run the full protocol over in-memory patients, in input order."""
    cfg = cfg or EvaluationConfig()
    return aggregate_stages(stage_cohort(patients, cfg), cfg)


def aggregate_stages(stages, cfg: EvaluationConfig) -> EvaluationReport:
    """Cohort-level metrics from per-patient stages, in deterministic order."""
    degenerate = []
    folds = tuple(sorted({s.fold for s in stages}))
    cs_pairs = [(s.cs_pred, s.cs_gt) for s in stages]
    gs_pairs = [(s.gs_pred, s.gs_gt) for s in stages]

    cs_curve = froc_curve(
        cs_pairs, overlap_frac=cfg.overlap_frac, denom=cfg.overlap_denom,
        strict_duplicates=cfg.strict_duplicates,
    )

    cs_by_fold = {}
    fold_curves = []
    for f in folds:
        pairs = [(s.cs_pred, s.cs_gt) for s in stages if s.fold == f]
        if sum(len(gt) for _, gt in pairs) == 0:
            cs_by_fold[f] = None
            degenerate.append(f"fold {f} has no CS ground-truth lesions")
            continue
        curve = froc_curve(
            pairs, overlap_frac=cfg.overlap_frac, denom=cfg.overlap_denom,
            strict_duplicates=cfg.strict_duplicates,
        )
        cs_by_fold[f] = curve
        fold_curves.append(curve)
    cs_aggregate = (
        aggregate_folds(fold_curves, cfg.fp_grid) if len(fold_curves) >= 2 else None
    )
    if cs_aggregate is None:
        degenerate.append("fewer than 2 folds with CS lesions; no aggregate band")

    grade_curves = {}
    for g in GRADE_ORDER:
        n_gt = sum(1 for _, gt in gs_pairs for c in gt.clusters if c.grade == g)
        if n_gt == 0:
            grade_curves[g] = None
            degenerate.append(f"no {g.display} ground-truth lesions; curve omitted")
            continue
        grade_curves[g] = froc_by_grade(
            gs_pairs, g, overlap_frac=cfg.overlap_frac, denom=cfg.overlap_denom,
            strict_duplicates=cfg.strict_duplicates,
        )

    sens_at = {
        "CS": {t: sensitivity_at_fp(cs_curve, t) for t in cfg.fp_targets}
    }
    for g in GRADE_ORDER:
        curve = grade_curves[g]
        sens_at[g.display] = (
            None if curve is None else {t: sensitivity_at_fp(curve, t) for t in cfg.fp_targets}
        )

    records = tuple(r for s in stages for r in s.records)
    cm_tp = confusion_matrix(records, include_fn_as_gs6=False)
    cm_fn = confusion_matrix(records, include_fn_as_gs6=True)
    if cm_tp.total == 0:
        degenerate.append("no detected lesions; TP-only matrix is empty")
        kappa_tp = KappaResult(kappa=0.0, degenerate=True)
    else:
        kappa_tp = bootstrap_kappa(
            records, n_iter=cfg.bootstrap_iterations, seed=cfg.bootstrap_seed,
            include_fn_as_gs6=False, resample=cfg.bootstrap_resample,
        )
    kappa_fn = bootstrap_kappa(
        records, n_iter=cfg.bootstrap_iterations, seed=cfg.bootstrap_seed,
        include_fn_as_gs6=True, resample=cfg.bootstrap_resample,
    )
    for name, k in (("tp_only", kappa_tp), ("with_fn", kappa_fn)):
        if k.degenerate:
            degenerate.append(f"kappa ({name}) is degenerate")

    fold_kappa = {
        "tp_only": _fold_kappa(records, folds, include_fn_as_gs6=False),
        "with_fn": _fold_kappa(records, folds, include_fn_as_gs6=True),
    }
    for variant, d in fold_kappa.items():
        for f, v in d["values"].items():
            if v is None:
                degenerate.append(f"fold {f} kappa ({variant}) undefined (no records)")

    dices = np.asarray([s.prostate_dice for s in stages], dtype=np.float64)
    patients_out = [
        {
            "patient_id": s.patient_id,
            "fold": s.fold,
            "prostate_dice": s.prostate_dice,
            "n_gt_lesions": len(s.gs_gt),
            "n_pred_clusters": len(s.gs_pred),
        }
        for s in stages
    ]

    return EvaluationReport(
        n_patients=len(stages),
        folds=folds,
        patients=patients_out,
        prostate_dice_mean=float(dices.mean()),
        prostate_dice_std=float(dices.std()),
        cs_froc=cs_curve,
        cs_froc_by_fold=cs_by_fold,
        cs_aggregate=cs_aggregate,
        grade_froc=grade_curves,
        sens_at=sens_at,
        records=records,
        confusion_tp_only=cm_tp,
        confusion_with_fn=cm_fn,
        kappa_tp_only=kappa_tp,
        kappa_with_fn=kappa_fn,
        fold_kappa=fold_kappa,
        degenerate_stats=degenerate,
        config=cfg,
    )


# ---------------------------------------------------------------------------
# Report serialization


def _curve_dict(curve: FrocCurve | None):
    if curve is None:
        return None
    return {
        "n_patients": curve.n_patients,
        "n_gt_lesions": curve.n_gt_lesions,
        "points": [
            [p.threshold, p.mean_fp_per_patient, p.sensitivity] for p in curve.points
        ],
    }


def _kappa_dict(k: KappaResult):
    return {
        "kappa": k.kappa,
        "degenerate": k.degenerate,
        "bootstrap_mean": k.bootstrap_mean,
        "bootstrap_std": k.bootstrap_std,
        "n_iterations": k.n_iterations,
    }


def _confusion_dict(cm: ConfusionMatrix, k: KappaResult):
    return {
        "grades": [g.display for g in GRADE_ORDER],
        "counts": [list(r) for r in cm.counts],
        "include_fn_as_gs6": cm.include_fn_as_gs6,
        **_kappa_dict(k),
    }


def report_to_dict(report: EvaluationReport) -> dict:
    sens = {}
    for name, d in report.sens_at.items():
        sens[name] = None if d is None else {str(t): v for t, v in d.items()}
    return {
        "config": report.config.to_dict(),
        "n_patients": report.n_patients,
        "folds": list(report.folds),
        "patients": report.patients,
        "prostate_dice": {
            "mean": report.prostate_dice_mean,
            "std": report.prostate_dice_std,
        },
        "froc": {
            "cs": _curve_dict(report.cs_froc),
            "cs_by_fold": {str(f): _curve_dict(c) for f, c in report.cs_froc_by_fold.items()},
            "cs_aggregate": None
            if report.cs_aggregate is None
            else [
                [p.fp_rate, p.sens_mean, p.sens_lo, p.sens_hi] for p in report.cs_aggregate
            ],
            "by_grade": {g.display: _curve_dict(c) for g, c in report.grade_froc.items()},
        },
        "sensitivity_at_fp": sens,
        "confusion": {
            "tp_only": _confusion_dict(report.confusion_tp_only, report.kappa_tp_only),
            "with_fn": _confusion_dict(report.confusion_with_fn, report.kappa_with_fn),
        },
        "kappa_by_fold": {
            variant: {
                "values": {str(f): v for f, v in d["values"].items()},
                "mean": d["mean"],
                "std": d["std"],
            }
            for variant, d in report.fold_kappa.items()
        },
        "n_detection_records": len(report.records),
        "degenerate_stats": report.degenerate_stats,
    }


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_froc_csv(path: Path, curve: FrocCurve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "mean_fp_per_patient", "sensitivity"])
        for p in curve.points:
            w.writerow([p.threshold, p.mean_fp_per_patient, p.sensitivity])


def _cluster_summary(m: LesionMap) -> list[dict]:
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


def write_report_bundle(report: EvaluationReport, out_dir, stages=None) -> None:
    """report.json plus the CSV/JSON intermediates: detections.csv, FROC
    CSVs (pooled, per fold, per grade, aggregate band), both confusion
    matrices, and per-patient cluster summaries when stages are given."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report_to_dict(report))

    with open(out / "detections.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(
            ["patient_id", "fold", "zone", "gt_grade", "pred_grade", "score", "dice", "overlap_frac"]
        )
        for r in report.records:
            pred = r.pred_grade.display if isinstance(r.pred_grade, Grade) else MISSED
            w.writerow(
                [r.patient_id, r.fold, r.zone, r.gt_grade.display, pred, r.score, r.dice, r.overlap_frac]
            )

    _write_froc_csv(out / "froc_cs.csv", report.cs_froc)
    for f, curve in report.cs_froc_by_fold.items():
        if curve is not None:
            _write_froc_csv(out / f"froc_cs_fold{f}.csv", curve)
    for g, curve in report.grade_froc.items():
        if curve is not None:
            _write_froc_csv(out / f"froc_{GRADE_STEMS[g]}.csv", curve)
    if report.cs_aggregate is not None:
        with open(out / "froc_cs_aggregate.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["fp_rate", "sens_mean", "sens_lo", "sens_hi"])
            for p in report.cs_aggregate:
                w.writerow([p.fp_rate, p.sens_mean, p.sens_lo, p.sens_hi])

    _write_json(
        out / "confusion_tp_only.json",
        _confusion_dict(report.confusion_tp_only, report.kappa_tp_only),
    )
    _write_json(
        out / "confusion_with_fn.json",
        _confusion_dict(report.confusion_with_fn, report.kappa_with_fn),
    )

    if stages is not None:
        clusters = {
            s.patient_id: {
                "gs_pred": _cluster_summary(s.gs_pred),
                "gs_gt": _cluster_summary(s.gs_gt),
                "cs_pred": _cluster_summary(s.cs_pred),
                "cs_gt": _cluster_summary(s.cs_gt),
            }
            for s in stages
        }
        _write_json(out / "clusters.json", clusters)


# ---------------------------------------------------------------------------
# Disk conventions


def load_fold_manifest(path) -> list[tuple[str, int]]:
    with open(path) as f:
        manifest = json.load(f)
    try:
        pairs = [(p["patient_id"], int(p["fold"])) for p in manifest["patients"]]
    except (KeyError, TypeError) as e:
        raise ValueError(f"malformed fold manifest {path}: {e}") from e
    if not pairs:
        raise ValueError(f"fold manifest {path} lists no patients")
    return pairs


def load_patient_eval(cfg: EvaluationConfig, patient_id: str, fold: int) -> PatientEval:
    gt_dir = Path(cfg.gt_dir)
    pred_dir = Path(cfg.pred_dir)
    labels = read_volume(gt_dir / f"{patient_id}_labels")
    chans = [read_volume(pred_dir / f"{patient_id}_prob_c{c}") for c in range(6)]
    probs = ProbStack.from_channels(chans)
    zones = None
    if cfg.zones_dir is not None:
        pz_path = Path(cfg.zones_dir) / f"{patient_id}_pz.vol.json"
        tz_path = Path(cfg.zones_dir) / f"{patient_id}_tz.vol.json"
        if pz_path.exists() and tz_path.exists():
            zones = ZoneMask(pz=read_volume(pz_path), tz=read_volume(tz_path))
    return PatientEval(patient_id=patient_id, fold=fold, labels=labels, probs=probs, zones=zones)


def run_full_evaluation(cfg: EvaluationConfig):
    """Load the cohort from disk, evaluate, and write the bundle.

    Returns (report, stages).  Requires gt_dir, pred_dir, fold_manifest and
    output_dir to be set.
    """
    for name in ("gt_dir", "pred_dir", "fold_manifest", "output_dir"):
        if getattr(cfg, name) is None:
            raise ValueError(f"evaluation config needs {name}")
    pairs = load_fold_manifest(cfg.fold_manifest)
    patients = [load_patient_eval(cfg, pid, fold) for pid, fold in pairs]
    stages = stage_cohort(patients, cfg)
    report = aggregate_stages(stages, cfg)
    write_report_bundle(report, cfg.output_dir, stages if cfg.write_intermediates else None)
    return report, stages


# ---------------------------------------------------------------------------
# Point-annotation protocol (external datasets without contoured lesions)


@dataclass(frozen=True)
class PointAnnotation:
    patient_id: str
    x: int
    y: int
    z: int
    zone: str
    gs_label: Grade


def read_points_csv(path) -> list[PointAnnotation]:
    """CSV columns: patient_id,x_vox,y_vox,z_vox,zone,gs_label."""
    points = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        need = {"patient_id", "x_vox", "y_vox", "z_vox", "zone", "gs_label"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise ValueError(f"points CSV needs columns {sorted(need)}")
        for row in reader:
            points.append(
                PointAnnotation(
                    patient_id=row["patient_id"],
                    x=int(row["x_vox"]),
                    y=int(row["y_vox"]),
                    z=int(row["z_vox"]),
                    zone=row["zone"],
                    gs_label=parse_grade(row["gs_label"]),
                )
            )
    if not points:
        raise ValueError(f"points CSV {path} is empty")
    return points


def evaluate_points(points, stacks_by_id: dict, cfg: EvaluationConfig | None = None):
    """Grade each annotated point against the prediction it falls in.

    A point inside a volume-filtered CS cluster takes the cluster's modal
    predicted GS grade; a point covered by no cluster reads GS6.  Returns
    (records, kappa with bootstrap): records are per-point with fold 0, so
    patient-level resampling still groups by patient id.
    """
    cfg = cfg or EvaluationConfig()
    maps = {}
    for pid, stack in stacks_by_id.items():
        pred_labels = label_from_probs(stack)
        cs = filter_by_volume(
            cs_lesion_maps(pred_labels, stack, cfg.connectivity), cfg.min_volume_mm3
        )
        maps[pid] = (cs, pred_labels)
    records = []
    for pt in points:
        if pt.patient_id not in maps:
            raise ValueError(f"no prediction for patient {pt.patient_id}")
        cs, pred_labels = maps[pt.patient_id]
        pred_grade = point_in_cluster_grade((pt.x, pt.y, pt.z), cs, pred_labels)
        records.append(
            DetectionRecord(
                patient_id=pt.patient_id,
                fold=0,
                zone=pt.zone,
                gt_grade=pt.gs_label,
                pred_grade=pred_grade,
                score=0.0,
                dice=0.0,
                overlap_frac=0.0,
            )
        )
    kappa = bootstrap_kappa(
        records, n_iter=cfg.bootstrap_iterations, seed=cfg.bootstrap_seed,
        include_fn_as_gs6=False, resample=cfg.bootstrap_resample,
    )
    return records, kappa
