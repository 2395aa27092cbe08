from fractions import Fraction

import numpy as np
import pytest

from mgtr.data import SyntheticSceneSpec, generate_synthetic, to_ground_truth
from mgtr.geometry import BoundingBox
from mgtr.instances import LAEO, NOT_LAEO, GroundTruthSet, MutualGazeInstance, PredictedInstance, PredictionSet
from mgtr.evaluation import (
    ScoredDetection,
    average_precision,
    evaluate,
    match_detections,
    score_predictions,
)

from conftest import random_center


def _det(inst, cls=None, score=0.9, image_id="img"):
    cls = cls if cls is not None else (LAEO if inst.laeo else NOT_LAEO)
    return ScoredDetection(inst.head_a, inst.head_b, cls, score, image_id)


def _gt(rng, m, image_id="img"):
    return GroundTruthSet(
        tuple(MutualGazeInstance(random_center(rng, 0.05, 0.3), random_center(rng, 0.05, 0.3), int(rng.integers(2)))
              for _ in range(m)),
        image_id,
    )


# ---------------------------------------------------------------- scoring


def _pred(h1, h2, gz):
    a, b = BoundingBox(0.3, 0.3, 0.1, 0.1), BoundingBox(0.7, 0.7, 0.1, 0.1)
    return PredictedInstance(np.array(h1, float), np.array(h2, float), np.array(gz, float), a, b)


def test_not_match_excluded():
    ps = PredictionSet((_pred([.8, .1, .1], [.8, .1, .1], [.2, .2, .6]), _pred([.8, .1, .1], [.2, .1, .7], [.6, .2, .2])))
    assert score_predictions(ps) == []


def test_one_hot_scores_one():
    (d,) = score_predictions(PredictionSet((_pred([1, 0, 0], [1, 0, 0], [1, 0, 0]),)))
    assert d.score == 1.0 and d.gaze_class == LAEO


def test_threshold_and_modes():
    ps = PredictionSet((_pred([.5, .3, .2], [.6, .2, .2], [.2, .7, .1]),))
    assert score_predictions(ps)[0].score == pytest.approx(.5 * .6 * .7)
    assert score_predictions(ps, mode="min")[0].score == .5
    assert score_predictions(ps, mode="gaze")[0].score == .7
    assert score_predictions(ps, threshold=0.25) == []


def test_score_monotone_in_gaze(rng):
    for _ in range(200):
        g = rng.dirichlet(np.ones(3)) * 0.5 + np.array([0.5, 0, 0])  # laeo is the argmax
        moved = g + np.array([1, 0, -1]) * g[2] * rng.random()  # shift not-match mass onto laeo
        s = [score_predictions(PredictionSet((_pred([.9, .05, .05], [.9, .05, .05], v),)))[0] for v in (g, moved)]
        assert s[0].gaze_class == s[1].gaze_class == LAEO
        assert s[1].score >= s[0].score


# ---------------------------------------------------------------- matching


def test_exact_detection_is_tp(rng):
    gt = _gt(rng, 1)
    (m,) = match_detections([_det(gt.instances[0])], gt)
    assert m.tp


def test_wrong_class_is_fp_and_gt_unmatched(rng):
    gt = _gt(rng, 1)
    inst = gt.instances[0]
    wrong = LAEO if not inst.laeo else NOT_LAEO
    ms = match_detections([_det(inst, cls=wrong, score=0.9), _det(inst, score=0.1)], gt)
    assert [(m.gaze_class, m.tp) for m in ms] == [(wrong, False), (1 - wrong, True)]


def test_two_detections_one_gt(rng):
    gt = _gt(rng, 1)
    inst = gt.instances[0]
    ms = match_detections([_det(inst, score=0.3), _det(inst, score=0.8)], gt)
    assert [(m.index, m.tp) for m in ms] == [(1, True), (0, False)]


def test_swap_invariant_flags(rng):
    for _ in range(1000):
        gt = _gt(rng, int(rng.integers(1, 4)))
        dets = [_jitter(rng, inst) for inst in gt.instances for _ in range(2)]
        base = [m.tp for m in match_detections(dets, gt)]
        flip_det = [d.swapped() if rng.random() < 0.5 else d for d in dets]
        flip_gt = GroundTruthSet(tuple(i.swapped() for i in gt.instances), gt.image_id)
        assert [m.tp for m in match_detections(flip_det, gt)] == base
        assert [m.tp for m in match_detections(dets, flip_gt)] == base


# ---------------------------------------------------------------- AP


def test_ap_hand_cases():
    assert average_precision([True], [0.9], 1) == 1.0
    assert average_precision([False, True], [0.9, 0.5], 1) == 0.5
    assert average_precision([], [], 3) == 0.0
    assert average_precision([True, False, True], [.9, .8, .7], 2) == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_ap_rank_invariance(rng):
    for _ in range(100):
        n = int(rng.integers(1, 12))
        flags, scores = rng.random(n) < 0.5, rng.random(n)
        n_gt = int(flags.sum() + rng.integers(0, 3)) or 1
        a = average_precision(flags, scores, n_gt)
        assert average_precision(flags, scores * 3.7, n_gt) == a


def test_ap_monotone_fp_to_tp(rng):
    for _ in range(200):
        n = int(rng.integers(1, 12))
        flags, scores = rng.random(n) < 0.5, rng.random(n)
        if flags.all():
            continue
        n_gt = n
        k = rng.choice(np.flatnonzero(~flags))
        better = flags.copy()
        better[k] = True
        assert average_precision(better, scores, n_gt) >= average_precision(flags, scores, n_gt) - 1e-15


def test_eleven_point():
    assert average_precision([True], [1.0], 1, "11_point") == 1.0
    assert average_precision([False, True], [0.9, 0.5], 1, "11_point") == pytest.approx(0.5)


# ---------------------------------------------------------------- evaluate


def _perfect(gt: GroundTruthSet, shuffle_rng=None):
    return [_det(i, image_id=gt.image_id, score=0.5 + 0.5 * k / max(1, len(gt))) for k, i in enumerate(gt.instances)]


def test_perfect_predictions_on_synthetic_fixture():
    gts = [to_ground_truth(rec) for _, rec in generate_synthetic(SyntheticSceneSpec(seed=0), 16)]
    r = evaluate([(_perfect(g), g) for g in gts])
    assert r.map == 1.0 and r.recall == 1.0
    assert r.map == (r.ap_rare + r.ap_normal) / 2


def test_empty_predictions():
    gts = [to_ground_truth(rec) for _, rec in generate_synthetic(SyntheticSceneSpec(seed=0), 4)]
    r = evaluate([([], g) for g in gts])
    assert r.map == 0.0 and r.recall == 0.0


def test_rare_class_is_minority():
    a, b, c = BoundingBox(.2, .2, .1, .1), BoundingBox(.5, .5, .1, .1), BoundingBox(.8, .8, .1, .1)
    gt = GroundTruthSet((MutualGazeInstance(a, b, 1), MutualGazeInstance(a, c, 0), MutualGazeInstance(b, c, 0)), "x")
    r = evaluate([([_det(gt.instances[0])], gt)])
    assert r.rare_class == "laeo" and r.ap_rare == 1.0 and r.ap_normal == 0.0 and r.map == 0.5


# ------------------------------------------------- brute-force evaluator oracle


def _iou_frac(p, q):
    """IoU of two center boxes in exact rational arithmetic."""
    def corners(b):
        cx, cy, w, h = (Fraction(v) for v in b.as_tuple())
        return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    ax1, ay1, ax2, ay2 = corners(p)
    bx1, by1, bx2, by2 = corners(q)
    iw = max(Fraction(0), min(ax2, bx2) - max(ax1, bx1))
    ih = max(Fraction(0), min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def brute_force_report(results, thresh=Fraction(1, 2)):
    out = {}
    for cls in (LAEO, NOT_LAEO):
        flags_scores = []
        n_gt = 0
        for dets, gt in results:
            pool = [k for k, inst in enumerate(gt.instances) if (LAEO if inst.laeo else NOT_LAEO) == cls]
            n_gt += len(pool)
            used = set()
            order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
            for k in order:
                d = dets[k]
                if d.gaze_class != cls:
                    continue
                ok = [
                    j for j in pool if j not in used and (
                        min(_iou_frac(d.box_a, gt.instances[j].head_a), _iou_frac(d.box_b, gt.instances[j].head_b)) >= thresh
                        or min(_iou_frac(d.box_a, gt.instances[j].head_b), _iou_frac(d.box_b, gt.instances[j].head_a)) >= thresh)
                ]
                best = max(ok, key=lambda j: max(
                    min(_iou_frac(d.box_a, gt.instances[j].head_a), _iou_frac(d.box_b, gt.instances[j].head_b)),
                    min(_iou_frac(d.box_a, gt.instances[j].head_b), _iou_frac(d.box_b, gt.instances[j].head_a)),
                ), default=None)
                if best is not None:
                    used.add(best)
                flags_scores.append((d.score, best is not None))
        flags_scores.sort(key=lambda t: -t[0])
        if n_gt == 0:
            out[cls] = Fraction(0)
            continue
        # precision/recall at every cut, then area under the monotone envelope
        prec, rec, tp = [], [], 0
        for k, (_, f) in enumerate(flags_scores, 1):
            tp += f
            prec.append(Fraction(tp, k))
            rec.append(Fraction(tp, n_gt))
        ap, prev = Fraction(0), Fraction(0)
        for k in range(len(rec)):
            if rec[k] > prev:
                ap += (rec[k] - prev) * max(prec[k:])
                prev = rec[k]
        out[cls] = ap
    return out


def _jitter(rng, inst, sigma=0.02):
    def j(b):
        cx, cy, w, h = b.as_tuple()
        return BoundingBox(float(np.clip(cx + rng.normal(0, sigma), 0, 1)), float(np.clip(cy + rng.normal(0, sigma), 0, 1)),
                           w * float(np.exp(rng.normal(0, 0.2))), h * float(np.exp(rng.normal(0, 0.2))))
    cls = (LAEO if inst.laeo else NOT_LAEO) if rng.random() < 0.8 else int(rng.integers(2))
    return ScoredDetection(j(inst.head_a), j(inst.head_b), cls, float(rng.random()))


def test_matches_brute_force_evaluator():
    rng = np.random.default_rng(42)
    for trial in range(20):
        results = []
        for i in range(int(rng.integers(1, 5))):
            gt = _gt(rng, int(rng.integers(0, 5)), f"s{trial}_{i}")
            dets = [_jitter(rng, inst) for inst in gt.instances for _ in range(int(rng.integers(0, 3)))]
            dets += [ScoredDetection(random_center(rng), random_center(rng), int(rng.integers(2)), float(rng.random()))
                     for _ in range(int(rng.integers(0, 3)))]
            rng.shuffle(dets)
            results.append((dets, gt))
        report = evaluate(results)
        oracle = brute_force_report(results)
        assert report.ap_laeo == pytest.approx(float(oracle[LAEO]), abs=1e-12)
        assert report.ap_not_laeo == pytest.approx(float(oracle[NOT_LAEO]), abs=1e-12)
        assert report.map == (report.ap_rare + report.ap_normal) / 2
