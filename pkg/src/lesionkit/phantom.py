"""Deterministic synthetic cohorts with an exact evaluation ledger.

Each patient gets an ellipsoidal prostate split into TZ (inner ellipsoid)
and PZ (shell), plus axis-aligned ellipsoidal lesion blobs placed wholly
inside one zone with at least 2 voxels of Chebyshev separation between
blobs, so 26-connectivity clustering recovers every blob exactly.

Predictions follow a script drawn at generation time: each lesion is
either missed or detected with a scripted grade and probability score, and
extra false-positive blobs are injected.  Scores are realized as exact
float32 values and rendered as constant probability channels, which makes
the pipeline's cluster scores equal the ledger's scores bit for bit; all
ledger-derived counts (sensitivity, FP rate, per-grade FROC, confusion
matrices) are therefore exact oracles for the evaluation pipeline.

The RNG is Philox (64-bit counter-based) with per-patient spawned
substreams, so cohorts are reproducible across platforms and safe to
generate in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import MIN_LESION_VOLUME_MM3
from .grades import CS_GRADES, GRADE_ORDER, Grade, parse_grade
from .volume import KIND_LABEL, ProbStack, Volume, ZoneMask, write_volume

ZONE_PZ = "PZ"
ZONE_TZ = "TZ"

#: Prostate ellipsoid semi-axes as fractions of the grid extent.
PROSTATE_AXIS_FRACTIONS = (0.40, 0.40, 0.42)

IDENTITY_TRANSITIONS = (
    (1.0, 0.0, 0.0, 0.0),
    (0.0, 1.0, 0.0, 0.0),
    (0.0, 0.0, 1.0, 0.0),
    (0.0, 0.0, 0.0, 1.0),
)


class PlacementError(RuntimeError):
    """Requested blobs cannot be placed without overlap in bounded retries."""


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    n_patients: int = 10
    dims: tuple[int, int, int] = (96, 96, 24)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 3.0)
    #: lesions per patient for (GS6, GS3+4, GS4+3, GS>=8)
    lesions_per_grade: tuple[int, int, int, int] = (1, 1, 1, 1)
    lesion_radius_mm: tuple[float, float] = (2.5, 5.0)
    fp_per_patient: int = 0
    fp_score: float = 0.9
    miss_fraction: float = 0.0
    #: row g: probabilities of predicting each grade for a detected lesion
    #: of true grade g; grade order (GS6, GS3+4, GS4+3, GS>=8)
    misgrade: tuple = IDENTITY_TRANSITIONS
    score_range: tuple[float, float] = (0.55, 0.95)
    pz_fraction: float = 0.6
    tz_scale: float = 0.55
    min_lesion_voxels: int = 15
    max_place_retries: int = 400
    n_folds: int = 5

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("need at least one patient")
        if not (0.0 <= self.miss_fraction <= 1.0):
            raise ValueError("miss_fraction must lie in [0, 1]")
        if not (0.0 <= self.pz_fraction <= 1.0):
            raise ValueError("pz_fraction must lie in [0, 1]")
        lo, hi = self.lesion_radius_mm
        if lo <= 0 or hi < lo:
            raise ValueError("lesion radius range must be positive and ordered")
        if len(self.lesions_per_grade) != 4 or any(n < 0 for n in self.lesions_per_grade):
            raise ValueError("lesions_per_grade needs 4 nonnegative counts")
        if not (0.5 < self.fp_score <= 1.0):
            raise ValueError("fp_score must exceed 0.5 (argmax must pick the lesion)")
        slo, shi = self.score_range
        if not (0.5 < slo <= shi <= 1.0):
            raise ValueError("score_range must lie inside (0.5, 1.0]")
        rows = self.misgrade
        if len(rows) != 4 or any(len(r) != 4 for r in rows):
            raise ValueError("misgrade table must be 4x4")
        for r in rows:
            if any(p < 0 for p in r) or abs(sum(r) - 1.0) > 1e-9:
                raise ValueError("misgrade rows must be distributions")
        if not (0 < self.tz_scale < 1):
            raise ValueError("tz_scale must lie in (0, 1)")
        if self.n_folds < 1 or self.n_folds > self.n_patients:
            raise ValueError("n_folds must lie in 1..n_patients")
        if self.min_lesion_voxels < 1:
            raise ValueError("min_lesion_voxels must be positive")
        sx, sy, sz = self.spacing_mm
        if self.min_lesion_voxels * sx * sy * sz < MIN_LESION_VOLUME_MM3:
            raise ValueError(
                "min_lesion_voxels times the voxel volume must reach the "
                f"{MIN_LESION_VOLUME_MM3} mm^3 evaluation filter, or blobs "
                "would be dropped and the ledger would no longer be exact"
            )


@dataclass(frozen=True)
class LesionEntry:
    """One injected ground-truth lesion and its scripted prediction."""

    grade: Grade
    zone: str
    voxels: tuple[tuple[int, int, int], ...]
    detected: bool
    pred_grade: Grade | None  # None iff missed
    score: float | None  # realized float32 value; None iff missed

    @property
    def n_voxels(self) -> int:
        return len(self.voxels)


@dataclass(frozen=True)
class FpEntry:
    """One injected false-positive blob (always a CS grade)."""

    grade: Grade
    zone: str
    voxels: tuple[tuple[int, int, int], ...]
    score: float

    @property
    def n_voxels(self) -> int:
        return len(self.voxels)


@dataclass(frozen=True)
class PatientScript:
    patient_id: str
    fold: int
    lesions: tuple[LesionEntry, ...]
    fps: tuple[FpEntry, ...]


@dataclass(frozen=True)
class PhantomLedger:
    patients: tuple[PatientScript, ...]
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]

    @property
    def n_patients(self) -> int:
        return len(self.patients)


@dataclass(frozen=True)
class PhantomPatient:
    """Ground-truth volumes of one synthetic patient."""

    patient_id: str
    labels: Volume
    zones: ZoneMask


# ---------------------------------------------------------------------------
# Geometry


def _ellipsoid_mask(dims, center, semi_axes) -> np.ndarray:
    nx, ny, nz = dims
    cx, cy, cz = center
    ax, ay, az = semi_axes
    z, y, x = np.ogrid[0:nz, 0:ny, 0:nx]
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2 <= 1.0


def _prostate_and_zones(dims):
    nx, ny, nz = dims
    center = ((nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0)
    fx, fy, fz = PROSTATE_AXIS_FRACTIONS
    axes = (fx * nx, fy * ny, fz * nz)
    return center, axes


def _blob_voxels(dims, center, semi_axes):
    """Voxels of an axis-aligned ellipsoid, as sorted (x, y, z) tuples."""
    nx, ny, nz = dims
    cx, cy, cz = center
    ax, ay, az = semi_axes
    x0, x1 = max(0, int(np.floor(cx - ax))), min(nx - 1, int(np.ceil(cx + ax)))
    y0, y1 = max(0, int(np.floor(cy - ay))), min(ny - 1, int(np.ceil(cy + ay)))
    z0, z1 = max(0, int(np.floor(cz - az))), min(nz - 1, int(np.ceil(cz + az)))
    if x0 > x1 or y0 > y1 or z0 > z1:
        return ()
    z, y, x = np.ogrid[z0 : z1 + 1, y0 : y1 + 1, x0 : x1 + 1]
    inside = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2 <= 1.0
    zi, yi, xi = np.nonzero(inside)
    vox = [(int(xv + x0), int(yv + y0), int(zv + z0)) for zv, yv, xv in zip(zi, yi, xi)]
    return tuple(sorted(vox, key=lambda v: (v[2], v[1], v[0])))


def _mark_forbidden(forbidden: np.ndarray, voxels, margin: int = 2) -> None:
    nz, ny, nx = forbidden.shape
    for (x, y, z) in voxels:
        forbidden[
            max(0, z - margin) : min(nz, z + margin + 1),
            max(0, y - margin) : min(ny, y + margin + 1),
            max(0, x - margin) : min(nx, x + margin + 1),
        ] = True


def _place_blob(cfg: PhantomConfig, rng, zone_voxel_arrays, forbidden, zone_masks):
    """One blob wholly inside a single zone, clear of the forbidden region.

    Returns (zone name, voxels); raises PlacementError after bounded retries.
    """
    sx, sy, sz = cfg.spacing_mm
    lo, hi = cfg.lesion_radius_mm
    for _ in range(cfg.max_place_retries):
        zone = ZONE_PZ if rng.random() < cfg.pz_fraction else ZONE_TZ
        zvox = zone_voxel_arrays[zone]
        if len(zvox[0]) == 0:
            continue
        k = int(rng.integers(0, len(zvox[0])))
        center = (int(zvox[2][k]), int(zvox[1][k]), int(zvox[0][k]))  # (x, y, z)
        semi = (
            float(rng.uniform(lo, hi)) / sx,
            float(rng.uniform(lo, hi)) / sy,
            float(rng.uniform(lo, hi)) / sz,
        )
        vox = _blob_voxels(cfg.dims, center, semi)
        if len(vox) < cfg.min_lesion_voxels:
            continue
        zmask = zone_masks[zone]
        if not all(zmask[z, y, x] for (x, y, z) in vox):
            continue
        if any(forbidden[z, y, x] for (x, y, z) in vox):
            continue
        _mark_forbidden(forbidden, vox)
        return zone, vox
    raise PlacementError(
        f"could not place a lesion blob after {cfg.max_place_retries} retries; "
        "reduce lesion count or radius"
    )


def _realized_score(rng, lo: float, hi: float) -> float:
    # store the exact float32 the prediction renderer will write
    return float(np.float32(rng.uniform(lo, hi)))


def _generate_patient(cfg: PhantomConfig, rng, patient_id: str, fold: int):
    nx, ny, nz = cfg.dims
    center, axes = _prostate_and_zones(cfg.dims)
    prostate = _ellipsoid_mask(cfg.dims, center, axes)
    tz = _ellipsoid_mask(cfg.dims, center, tuple(a * cfg.tz_scale for a in axes))
    tz &= prostate
    pz = prostate & ~tz
    zone_masks = {ZONE_PZ: pz, ZONE_TZ: tz}
    zone_voxel_arrays = {name: np.nonzero(m) for name, m in zone_masks.items()}

    forbidden = np.zeros((nz, ny, nx), dtype=bool)
    lab = np.zeros((nz, ny, nx), dtype=np.uint8)
    lab[prostate] = 1

    slo, shi = cfg.score_range
    order = [int(g) - 2 for g in GRADE_ORDER]
    lesions = []
    for gi in order:
        grade = GRADE_ORDER[gi]
        for _ in range(cfg.lesions_per_grade[gi]):
            zone, vox = _place_blob(cfg, rng, zone_voxel_arrays, forbidden, zone_masks)
            for (x, y, z) in vox:
                lab[z, y, x] = int(grade)
            detected = bool(rng.random() >= cfg.miss_fraction)
            if detected:
                row = np.asarray(cfg.misgrade[gi], dtype=np.float64)
                pred_gi = int(rng.choice(4, p=row / row.sum()))
                pred_grade = GRADE_ORDER[pred_gi]
                score = _realized_score(rng, slo, shi)
            else:
                pred_grade = None
                score = None
            lesions.append(
                LesionEntry(
                    grade=grade,
                    zone=zone,
                    voxels=vox,
                    detected=detected,
                    pred_grade=pred_grade,
                    score=score,
                )
            )

    fps = []
    for _ in range(cfg.fp_per_patient):
        zone, vox = _place_blob(cfg, rng, zone_voxel_arrays, forbidden, zone_masks)
        grade = CS_GRADES[int(rng.integers(0, len(CS_GRADES)))]
        fps.append(
            FpEntry(
                grade=grade,
                zone=zone,
                voxels=vox,
                score=float(np.float32(cfg.fp_score)),
            )
        )

    labels = Volume(lab, cfg.spacing_mm, KIND_LABEL)
    zones = ZoneMask(
        pz=Volume(pz.astype(np.uint8), cfg.spacing_mm, KIND_LABEL),
        tz=Volume(tz.astype(np.uint8), cfg.spacing_mm, KIND_LABEL),
    )
    patient = PhantomPatient(patient_id=patient_id, labels=labels, zones=zones)
    script = PatientScript(
        patient_id=patient_id, fold=fold, lesions=tuple(lesions), fps=tuple(fps)
    )
    return patient, script


def generate_cohort(cfg: PhantomConfig):
    """Build ground-truth volumes and the prediction script for a cohort.

    Returns (list of PhantomPatient, PhantomLedger).  Deterministic under
    cfg.seed; per-patient substreams keep patients independent.
    """
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)
    patients = []
    scripts = []
    for i in range(cfg.n_patients):
        rng = np.random.Generator(np.random.Philox(streams[i]))
        pid = f"p{i:03d}"
        patient, script = _generate_patient(cfg, rng, pid, fold=i % cfg.n_folds)
        patients.append(patient)
        scripts.append(script)
    ledger = PhantomLedger(tuple(scripts), cfg.dims, cfg.spacing_mm)
    return patients, ledger


def degrade_prediction(patients, ledger: PhantomLedger):
    """Render the scripted predictions as per-patient probability stacks.

    Detected lesions and injected FPs get their scripted grade channel set
    to the realized score (prostate channel takes the remainder), missed
    lesions render as plain prostate, and everything else is background or
    prostate at probability 1.
    """
    by_id = {s.patient_id: s for s in ledger.patients}
    stacks = []
    for patient in patients:
        script = by_id[patient.patient_id]
        lab = patient.labels.values
        nz, ny, nx = lab.shape
        data = np.zeros((6, nz, ny, nx), dtype=np.float32)
        gland = lab >= 1
        data[0][~gland] = 1.0
        data[1][gland] = 1.0
        events = [
            (e.pred_grade, e.voxels, e.score)
            for e in script.lesions
            if e.detected
        ] + [(f.grade, f.voxels, f.score) for f in script.fps]
        for grade, voxels, score in events:
            s = np.float32(score)
            rest = np.float32(1.0) - s  # exact for s in [0.5, 1]
            for (x, y, z) in voxels:
                data[int(grade), z, y, x] = s
                data[1, z, y, x] = rest
        stacks.append(ProbStack(data, patient.labels.spacing_mm))
    return stacks


def phantom_patient_evals(patients, ledger: PhantomLedger, stacks=None):
    """Package a generated cohort as evaluation inputs (folds from the
    ledger; predictions rendered on demand when stacks is None)."""
    from .evaluation import PatientEval

    if stacks is None:
        stacks = degrade_prediction(patients, ledger)
    folds = {s.patient_id: s.fold for s in ledger.patients}
    return [
        PatientEval(
            patient_id=p.patient_id,
            fold=folds[p.patient_id],
            labels=p.labels,
            probs=st,
            zones=p.zones,
        )
        for p, st in zip(patients, stacks)
    ]


# ---------------------------------------------------------------------------
# Ledger-derived oracle metrics (direct enumeration, no clustering/matching)


def _cs(grade) -> bool:
    return grade in CS_GRADES


def ledger_zone_subset(ledger: PhantomLedger, zone: str) -> PhantomLedger:
    """Restrict the script to lesions and FPs of one zone."""
    if zone not in (ZONE_PZ, ZONE_TZ):
        raise ValueError(f"zone must be {ZONE_PZ!r} or {ZONE_TZ!r}")
    pats = tuple(
        PatientScript(
            patient_id=p.patient_id,
            fold=p.fold,
            lesions=tuple(e for e in p.lesions if e.zone == zone),
            fps=tuple(f for f in p.fps if f.zone == zone),
        )
        for p in ledger.patients
    )
    return PhantomLedger(pats, ledger.dims, ledger.spacing_mm)


def _cs_events(ledger):
    """(kind, score) events visible in the CS prediction map: 'tp' for a CS
    lesion detected as CS, 'fp' for injected FPs and GS6 lesions detected
    as CS."""
    events = []
    for p in ledger.patients:
        for e in p.lesions:
            if not e.detected or not _cs(e.pred_grade):
                continue
            events.append(("tp" if _cs(e.grade) else "fp", e.score))
        for f in p.fps:
            events.append(("fp", f.score))
    return events


def ledger_cs_gt_count(ledger) -> int:
    return sum(1 for p in ledger.patients for e in p.lesions if _cs(e.grade))


def ledger_froc_cs(ledger: PhantomLedger):
    """Expected CS FROC points: list of (threshold, mean_fp, sensitivity)."""
    from .metrics import ABOVE_MAX_SCORE

    n_gt = ledger_cs_gt_count(ledger)
    if n_gt == 0:
        raise ValueError("no CS ground-truth lesions in ledger")
    events = _cs_events(ledger)
    thresholds = sorted({s for _, s in events} | {0.0, ABOVE_MAX_SCORE})
    points = []
    for thr in thresholds:
        tp = sum(1 for kind, s in events if kind == "tp" and s >= thr)
        fp = sum(1 for kind, s in events if kind == "fp" and s >= thr)
        points.append((thr, fp / ledger.n_patients, tp / n_gt))
    return points


def ledger_grade_gt_count(ledger, grade: Grade) -> int:
    return sum(1 for p in ledger.patients for e in p.lesions if e.grade == grade)


def ledger_froc_grade(ledger: PhantomLedger, grade: Grade):
    """Expected per-grade FROC points; a detected lesion predicted as a
    different grade is a FN here and a FP in the predicted grade's curve."""
    from .metrics import ABOVE_MAX_SCORE

    n_gt = ledger_grade_gt_count(ledger, grade)
    if n_gt == 0:
        raise ValueError(f"no {grade.display} ground-truth lesions in ledger")
    events = []
    for p in ledger.patients:
        for e in p.lesions:
            if not e.detected or e.pred_grade != grade:
                continue
            events.append(("tp" if e.grade == grade else "fp", e.score))
        for f in p.fps:
            if f.grade == grade:
                events.append(("fp", f.score))
    thresholds = sorted({s for _, s in events} | {0.0, ABOVE_MAX_SCORE})
    points = []
    for thr in thresholds:
        tp = sum(1 for kind, s in events if kind == "tp" and s >= thr)
        fp = sum(1 for kind, s in events if kind == "fp" and s >= thr)
        points.append((thr, fp / ledger.n_patients, tp / n_gt))
    return points


def ledger_confusion(ledger: PhantomLedger, include_fn_as_gs6: bool = False, fold=None):
    """Expected 4x4 grading counts (rows GT, columns prediction)."""
    counts = [[0] * 4 for _ in range(4)]
    for p in ledger.patients:
        if fold is not None and p.fold != fold:
            continue
        for e in p.lesions:
            gi = e.grade.ordinal
            if e.detected:
                counts[gi][e.pred_grade.ordinal] += 1
            elif include_fn_as_gs6:
                counts[gi][Grade.GS6.ordinal] += 1
    return tuple(tuple(r) for r in counts)


def ledger_folds(ledger) -> tuple[int, ...]:
    return tuple(sorted({p.fold for p in ledger.patients}))


# ---------------------------------------------------------------------------
# Serialization


def _entry_dict(e) -> dict:
    d = {
        "grade": e.grade.display,
        "zone": e.zone,
        "voxels": [list(v) for v in e.voxels],
    }
    if isinstance(e, LesionEntry):
        d["detected"] = e.detected
        d["pred_grade"] = None if e.pred_grade is None else e.pred_grade.display
        d["score"] = e.score
    else:
        d["score"] = e.score
    return d


def ledger_to_dict(ledger: PhantomLedger) -> dict:
    return {
        "dims": list(ledger.dims),
        "spacing_mm": list(ledger.spacing_mm),
        "patients": [
            {
                "patient_id": p.patient_id,
                "fold": p.fold,
                "lesions": [_entry_dict(e) for e in p.lesions],
                "fps": [_entry_dict(f) for f in p.fps],
            }
            for p in ledger.patients
        ],
    }


def ledger_from_dict(d: dict) -> PhantomLedger:
    patients = []
    for p in d["patients"]:
        lesions = tuple(
            LesionEntry(
                grade=parse_grade(e["grade"]),
                zone=e["zone"],
                voxels=tuple(tuple(v) for v in e["voxels"]),
                detected=e["detected"],
                pred_grade=None if e["pred_grade"] is None else parse_grade(e["pred_grade"]),
                score=e["score"],
            )
            for e in p["lesions"]
        )
        fps = tuple(
            FpEntry(
                grade=parse_grade(f["grade"]),
                zone=f["zone"],
                voxels=tuple(tuple(v) for v in f["voxels"]),
                score=f["score"],
            )
            for f in p["fps"]
        )
        patients.append(PatientScript(p["patient_id"], p["fold"], lesions, fps))
    return PhantomLedger(tuple(patients), tuple(d["dims"]), tuple(d["spacing_mm"]))


def write_cohort(cfg: PhantomConfig, out_dir) -> PhantomLedger:
    """Generate a cohort and write it as an on-disk directory:
    gt/<pid>_labels, zones/<pid>_{pz,tz}, pred/<pid>_prob_c{0..5} volume
    pairs, plus ledger.json and cohort.json (fold manifest)."""
    out = Path(out_dir)
    patients, ledger = generate_cohort(cfg)
    stacks = degrade_prediction(patients, ledger)
    for patient, stack in zip(patients, stacks):
        pid = patient.patient_id
        write_volume(patient.labels, out / "gt" / f"{pid}_labels")
        write_volume(patient.zones.pz, out / "zones" / f"{pid}_pz")
        write_volume(patient.zones.tz, out / "zones" / f"{pid}_tz")
        for c in range(6):
            write_volume(stack.channel(c), out / "pred" / f"{pid}_prob_c{c}")
    with open(out / "ledger.json", "w") as f:
        json.dump(ledger_to_dict(ledger), f, indent=2, sort_keys=True)
        f.write("\n")
    manifest = {
        "n_folds": cfg.n_folds,
        "patients": [
            {"patient_id": p.patient_id, "fold": p.fold} for p in ledger.patients
        ],
    }
    with open(out / "cohort.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return ledger
