"""Synthetic-cohort generator: determinism, geometry guarantees, and exact
agreement between the ledger oracle and the clustering/matching pipeline."""

import json

import numpy as np
import pytest

from lesionkit.cluster import (
    cs_lesion_maps,
    filter_by_volume,
    filter_by_zone,
    gs_lesion_maps,
)
from lesionkit.grades import CS_GRADES, GRADE_ORDER, Grade
from lesionkit.matching import best_dice_assignment, match_detections
from lesionkit.metrics import (
    ABOVE_MAX_SCORE,
    froc_by_grade,
    froc_curve,
    quadratic_weighted_kappa,
    ConfusionMatrix,
)
from lesionkit.netmath import label_from_probs
from lesionkit.phantom import (
    FpEntry,
    LesionEntry,
    PatientScript,
    PhantomConfig,
    PhantomLedger,
    PlacementError,
    ZONE_PZ,
    ZONE_TZ,
    degrade_prediction,
    generate_cohort,
    ledger_confusion,
    ledger_cs_gt_count,
    ledger_from_dict,
    ledger_froc_cs,
    ledger_froc_grade,
    ledger_grade_gt_count,
    ledger_to_dict,
    ledger_zone_subset,
    write_cohort,
)
from lesionkit.volume import read_volume


SMALL = PhantomConfig(
    seed=7,
    n_patients=6,
    dims=(48, 48, 12),
    lesions_per_grade=(2, 1, 1, 1),
    fp_per_patient=2,
    miss_fraction=0.3,
    misgrade=(
        (0.7, 0.3, 0.0, 0.0),
        (0.2, 0.6, 0.2, 0.0),
        (0.0, 0.2, 0.6, 0.2),
        (0.0, 0.0, 0.3, 0.7),
    ),
    n_folds=3,
)


def chebyshev(a, b):
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]), abs(a[2] - b[2]))


class TestGeneration:
    def test_deterministic_ledger_and_volumes(self):
        pats1, led1 = generate_cohort(SMALL)
        pats2, led2 = generate_cohort(SMALL)
        assert ledger_to_dict(led1) == ledger_to_dict(led2)
        for a, b in zip(pats1, pats2):
            assert np.array_equal(a.labels.values, b.labels.values)
            assert np.array_equal(a.zones.pz.values, b.zones.pz.values)
        s1 = degrade_prediction(pats1, led1)
        s2 = degrade_prediction(pats2, led2)
        for a, b in zip(s1, s2):
            assert a.data.tobytes() == b.data.tobytes()

    def test_lesion_counts_and_sizes(self):
        pats, ledger = generate_cohort(SMALL)
        for script in ledger.patients:
            per_grade = {g: 0 for g in GRADE_ORDER}
            for e in script.lesions:
                per_grade[e.grade] += 1
                assert e.n_voxels >= SMALL.min_lesion_voxels
            assert [per_grade[g] for g in GRADE_ORDER] == list(SMALL.lesions_per_grade)
            assert len(script.fps) == SMALL.fp_per_patient
            for f in script.fps:
                assert f.grade in CS_GRADES
                assert f.n_voxels >= SMALL.min_lesion_voxels

    def test_blob_separation_at_least_two_voxels(self):
        pats, ledger = generate_cohort(SMALL)
        script = ledger.patients[0]
        blobs = [e.voxels for e in script.lesions] + [f.voxels for f in script.fps]
        for i in range(len(blobs)):
            for j in range(i + 1, len(blobs)):
                d = min(chebyshev(a, b) for a in blobs[i] for b in blobs[j])
                assert d >= 2

    def test_blobs_respect_zones(self):
        pats, ledger = generate_cohort(SMALL)
        for patient, script in zip(pats, ledger.patients):
            masks = {
                ZONE_PZ: np.asarray(patient.zones.pz.values) != 0,
                ZONE_TZ: np.asarray(patient.zones.tz.values) != 0,
            }
            for e in list(script.lesions) + list(script.fps):
                m = masks[e.zone]
                assert all(m[z, y, x] for (x, y, z) in e.voxels)

    def test_gt_census_matches_cluster_module(self):
        # every scripted blob is exactly one 26-connected component
        pats, ledger = generate_cohort(SMALL)
        for patient, script in zip(pats, ledger.patients):
            gt = gs_lesion_maps(patient.labels, None)
            assert len(gt) == len(script.lesions)
            by_vox = {c.voxels: c for c in gt.clusters}
            for e in script.lesions:
                assert e.voxels in by_vox
                assert by_vox[e.voxels].grade == e.grade
            # the 45 mm^3 filter must keep everything
            assert len(filter_by_volume(gt)) == len(gt)

    def test_zone_filter_recovers_scripted_zones(self):
        pats, ledger = generate_cohort(SMALL)
        patient, script = pats[0], ledger.patients[0]
        gt = gs_lesion_maps(patient.labels, None)
        pz_only = filter_by_zone(gt, patient.zones.pz)
        want = {e.voxels for e in script.lesions if e.zone == ZONE_PZ}
        assert {c.voxels for c in pz_only.clusters} == want

    def test_impossible_placement_raises(self):
        cfg = PhantomConfig(
            seed=0,
            n_patients=1,
            dims=(16, 16, 6),
            lesions_per_grade=(1, 0, 0, 0),
            lesion_radius_mm=(10.0, 12.0),
            max_place_retries=50,
            n_folds=1,
        )
        with pytest.raises(PlacementError):
            generate_cohort(cfg)

    def test_config_rejects_sub_filter_blobs(self):
        with pytest.raises(ValueError, match="volume"):
            PhantomConfig(spacing_mm=(0.5, 0.5, 3.0), min_lesion_voxels=15)


class TestPrediction:
    def test_scores_bit_exact_and_grades_scripted(self):
        pats, ledger = generate_cohort(SMALL)
        stacks = degrade_prediction(pats, ledger)
        for patient, script, stack in zip(pats, ledger.patients, stacks):
            pred_labels = label_from_probs(stack)
            pred = gs_lesion_maps(pred_labels, stack)
            by_vox = {c.voxels: c for c in pred.clusters}
            n_expected = 0
            for e in script.lesions:
                if not e.detected:
                    # missed lesions render as prostate: no cluster there
                    assert e.voxels not in by_vox
                    continue
                n_expected += 1
                c = by_vox[e.voxels]
                assert c.grade == e.pred_grade
                assert c.score == e.score  # bit-for-bit
            for f in script.fps:
                n_expected += 1
                c = by_vox[f.voxels]
                assert c.grade == f.grade
                assert c.score == f.score
            assert len(pred) == n_expected

    def test_cs_map_scores_bit_exact(self):
        pats, ledger = generate_cohort(SMALL)
        stacks = degrade_prediction(pats, ledger)
        patient, script, stack = pats[1], ledger.patients[1], stacks[1]
        pred = cs_lesion_maps(label_from_probs(stack), stack)
        by_vox = {c.voxels: c for c in pred.clusters}
        for e in script.lesions:
            if e.detected and e.pred_grade in CS_GRADES:
                assert by_vox[e.voxels].score == e.score

    def test_prostate_support_identical(self):
        # the gland mask survives the prediction round-trip exactly
        pats, ledger = generate_cohort(SMALL)
        stacks = degrade_prediction(pats, ledger)
        for patient, stack in zip(pats, stacks):
            gt_gland = np.asarray(patient.labels.values) >= 1
            pred_gland = np.asarray(label_from_probs(stack).values) >= 1
            assert np.array_equal(gt_gland, pred_gland)


def _handmade_ledger():
    def vox(base):
        x, y, z = base
        return tuple(sorted(((x + i, y, z) for i in range(3)), key=lambda v: (v[2], v[1], v[0])))

    p0 = PatientScript(
        patient_id="p000",
        fold=0,
        lesions=(
            LesionEntry(Grade.GS34, ZONE_PZ, vox((0, 0, 0)), True, Grade.GS34, 0.8),
            LesionEntry(Grade.GS6, ZONE_TZ, vox((10, 0, 0)), True, Grade.GS43, 0.7),
        ),
        fps=(FpEntry(Grade.GS8, ZONE_PZ, vox((20, 0, 0)), 0.9),),
    )
    p1 = PatientScript(
        patient_id="p001",
        fold=1,
        lesions=(LesionEntry(Grade.GS43, ZONE_PZ, vox((0, 10, 0)), False, None, None),),
        fps=(),
    )
    return PhantomLedger((p0, p1), (32, 32, 4), (1.0, 1.0, 3.0))


class TestLedgerOracles:
    def test_cs_froc_points(self):
        led = _handmade_ledger()
        assert ledger_cs_gt_count(led) == 2  # GS3+4 and GS4+3 lesions
        pts = ledger_froc_cs(led)
        # events: TP at 0.8, FP at 0.7 (GS6 called CS), FP at 0.9 (injected)
        assert [p[0] for p in pts] == [0.0, 0.7, 0.8, 0.9, ABOVE_MAX_SCORE]
        assert pts[0] == (0.0, 1.0, 0.5)
        assert pts[1] == (0.7, 1.0, 0.5)
        assert pts[2] == (0.8, 0.5, 0.5)
        assert pts[3] == (0.9, 0.5, 0.0)
        assert pts[4] == (ABOVE_MAX_SCORE, 0.0, 0.0)

    def test_grade_froc_points(self):
        led = _handmade_ledger()
        assert ledger_grade_gt_count(led, Grade.GS43) == 1
        pts = ledger_froc_grade(led, Grade.GS43)
        # the GS4+3 lesion is missed; the GS6 lesion predicted GS4+3 is a FP
        assert [p[0] for p in pts] == [0.0, 0.7, ABOVE_MAX_SCORE]
        assert pts[0] == (0.0, 0.5, 0.0)
        assert pts[1] == (0.7, 0.5, 0.0)
        with pytest.raises(ValueError):
            ledger_froc_grade(led, Grade.GS8)  # injected FP only, no GT

    def test_confusion_variants(self):
        led = _handmade_ledger()
        tp_only = ledger_confusion(led, include_fn_as_gs6=False)
        assert tp_only[1][1] == 1 and tp_only[0][2] == 1
        assert sum(v for r in tp_only for v in r) == 2
        with_fn = ledger_confusion(led, include_fn_as_gs6=True)
        assert with_fn[2][0] == 1
        assert sum(v for r in with_fn for v in r) == 3
        only_fold0 = ledger_confusion(led, include_fn_as_gs6=True, fold=0)
        assert sum(v for r in only_fold0 for v in r) == 2

    def test_zone_subset(self):
        led = ledger_zone_subset(_handmade_ledger(), ZONE_PZ)
        grades = [e.grade for p in led.patients for e in p.lesions]
        assert grades == [Grade.GS34, Grade.GS43]
        assert sum(len(p.fps) for p in led.patients) == 1

    def test_json_round_trip(self):
        pats, ledger = generate_cohort(SMALL)
        blob = json.dumps(ledger_to_dict(ledger), sort_keys=True)
        assert ledger_from_dict(json.loads(blob)) == ledger


class TestPipelineAgreement:
    """The clustering/matching pipeline must reproduce the ledger exactly."""

    CFG = PhantomConfig(
        seed=11,
        n_patients=5,
        dims=(48, 48, 12),
        lesions_per_grade=(1, 1, 1, 1),
        fp_per_patient=1,
        miss_fraction=0.25,
        misgrade=(
            (0.6, 0.4, 0.0, 0.0),
            (0.2, 0.6, 0.2, 0.0),
            (0.0, 0.2, 0.6, 0.2),
            (0.0, 0.0, 0.4, 0.6),
        ),
        n_folds=5,
    )

    def _cohort_maps(self):
        pats, ledger = generate_cohort(self.CFG)
        stacks = degrade_prediction(pats, ledger)
        cs_pairs, gs_pairs = [], []
        for patient, stack in zip(pats, stacks):
            pred_labels = label_from_probs(stack)
            cs_pairs.append(
                (
                    filter_by_volume(cs_lesion_maps(pred_labels, stack)),
                    filter_by_volume(cs_lesion_maps(patient.labels, None)),
                )
            )
            gs_pairs.append(
                (
                    filter_by_volume(gs_lesion_maps(pred_labels, stack)),
                    filter_by_volume(gs_lesion_maps(patient.labels, None)),
                )
            )
        return ledger, cs_pairs, gs_pairs

    def test_cs_froc_exact(self):
        ledger, cs_pairs, _ = self._cohort_maps()
        curve = froc_curve(cs_pairs)
        expect = ledger_froc_cs(ledger)
        assert curve.n_gt_lesions == ledger_cs_gt_count(ledger)
        got = [(p.threshold, p.mean_fp_per_patient, p.sensitivity) for p in curve.points]
        assert got == expect  # exact float equality, no tolerance

    def test_per_grade_froc_exact(self):
        ledger, _, gs_pairs = self._cohort_maps()
        for grade in GRADE_ORDER:
            if ledger_grade_gt_count(ledger, grade) == 0:
                continue
            curve = froc_by_grade(gs_pairs, grade)
            expect = ledger_froc_grade(ledger, grade)
            got = [
                (p.threshold, p.mean_fp_per_patient, p.sensitivity) for p in curve.points
            ]
            assert got == expect

    def test_match_counts_exact(self):
        ledger, cs_pairs, _ = self._cohort_maps()
        tp = fp = 0
        for pred, gt in cs_pairs:
            m = match_detections(pred, gt)
            tp += len(m.tp)
            fp += len(m.fp)
            assert len(m.duplicates) == 0
        pts = ledger_froc_cs(ledger)
        n_gt = ledger_cs_gt_count(ledger)
        assert pts[0][2] == tp / n_gt
        assert pts[0][1] == fp / ledger.n_patients

    def test_confusion_and_kappa_exact(self):
        ledger, _, gs_pairs = self._cohort_maps()
        counts = [[0] * 4 for _ in range(4)]
        counts_fn = [[0] * 4 for _ in range(4)]
        for (pred, gt), script in zip(gs_pairs, ledger.patients):
            for lesion in gt.clusters:
                cands = [
                    c
                    for c in pred.clusters
                    if len(c.voxel_set & lesion.voxel_set) / c.n_voxels >= 0.10
                ]
                gi = lesion.grade.ordinal
                if cands:
                    pj = best_dice_assignment(lesion, cands).grade.ordinal
                    counts[gi][pj] += 1
                    counts_fn[gi][pj] += 1
                else:
                    counts_fn[gi][Grade.GS6.ordinal] += 1
        want = ledger_confusion(ledger, include_fn_as_gs6=False)
        want_fn = ledger_confusion(ledger, include_fn_as_gs6=True)
        assert tuple(tuple(r) for r in counts) == want
        assert tuple(tuple(r) for r in counts_fn) == want_fn
        k_pipe = quadratic_weighted_kappa(ConfusionMatrix(tuple(map(tuple, counts_fn)), True))
        k_led = quadratic_weighted_kappa(ConfusionMatrix(want_fn, True))
        assert abs(k_pipe.kappa - k_led.kappa) <= 1e-12


class TestCohortFiles:
    def test_write_round_trip_and_determinism(self, tmp_path):
        cfg = PhantomConfig(
            seed=3, n_patients=2, dims=(48, 48, 12), lesions_per_grade=(1, 0, 1, 0),
            fp_per_patient=1, n_folds=2,
        )
        led1 = write_cohort(cfg, tmp_path / "a")
        led2 = write_cohort(cfg, tmp_path / "b")
        a = (tmp_path / "a" / "ledger.json").read_bytes()
        b = (tmp_path / "b" / "ledger.json").read_bytes()
        assert a == b
        pats, _ = generate_cohort(cfg)
        disk = read_volume(tmp_path / "a" / "gt" / "p000_labels")
        assert np.array_equal(disk.values, pats[0].labels.values)
        assert (tmp_path / "a" / "pred" / "p001_prob_c5.vol.raw").exists()
        manifest = json.loads((tmp_path / "a" / "cohort.json").read_text())
        assert [p["fold"] for p in manifest["patients"]] == [0, 1]
        assert led1 == led2
