"""Two-class mean average precision for mutual gaze detection.

A detection is correct only if both of its head boxes overlap the heads of a
ground-truth instance (IoU >= threshold each, under the better of the two head
orderings) *and* its gaze class equals the instance label. AP is computed per
gaze class (laeo / not-laeo) over all images pooled; mAP is their mean.
"""
from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .geometry import BoundingBox
from .instances import LAEO, NOT_LAEO, NOT_MATCH, PERSON, GAZE_CLASSES, GroundTruthSet, PredictionSet, gaze_class

CLASSES = (LAEO, NOT_LAEO)


@dataclass(frozen=True)
class ScoredDetection:
    box_a: BoundingBox
    box_b: BoundingBox
    gaze_class: int  # LAEO or NOT_LAEO
    score: float
    image_id: str = ""
    query: int = -1

    def __post_init__(self):
        if self.gaze_class not in CLASSES:
            raise ValueError(f"detections carry laeo or not-laeo, got class {self.gaze_class}")

    def swapped(self) -> ScoredDetection:
        return ScoredDetection(self.box_b, self.box_a, self.gaze_class, self.score, self.image_id, self.query)

    def to_json(self) -> dict:
        return {
            "box_a": list(self.box_a.as_tuple()),
            "box_b": list(self.box_b.as_tuple()),
            "class": GAZE_CLASSES[self.gaze_class],
            "score": self.score,
            "query": self.query,
        }


def score_predictions(preds: PredictionSet, threshold: float = 0.0, mode: str = "product") -> list[ScoredDetection]:
    """Turn N query outputs into detections.

    Queries whose argmax is not-match on any head are dropped. The gaze class
    is the likelier of laeo / not-laeo. ``mode`` picks the score: ``product``
    of the two person confidences and the gaze confidence, their ``min``, or
    the ``gaze`` confidence alone.
    """
    dets = []
    for q, p in enumerate(preds):
        if NOT_MATCH in (int(np.argmax(p.p_h1)), int(np.argmax(p.p_h2)), int(np.argmax(p.p_gaze))):
            continue
        cls = LAEO if p.p_gaze[LAEO] >= p.p_gaze[NOT_LAEO] else NOT_LAEO
        factors = (float(p.p_h1[PERSON]), float(p.p_h2[PERSON]), float(p.p_gaze[cls]))
        if mode == "product":
            score = factors[0] * factors[1] * factors[2]
        elif mode == "min":
            score = min(factors)
        elif mode == "gaze":
            score = factors[2]
        else:
            raise ValueError(f"unknown score mode {mode!r}")
        if score >= threshold:
            dets.append(ScoredDetection(p.box_a, p.box_b, cls, score, preds.image_id, q))
    return dets


def pair_overlap(det: ScoredDetection, gt_a: BoundingBox, gt_b: BoundingBox) -> float:
    """Smaller of the two head IoUs, under the better head ordering."""
    straight = min(geometry.iou(det.box_a, gt_a), geometry.iou(det.box_b, gt_b))
    crossed = min(geometry.iou(det.box_a, gt_b), geometry.iou(det.box_b, gt_a))
    return max(straight, crossed)


@dataclass(frozen=True)
class DetectionMatch:
    index: int  # position in the input detection list
    gaze_class: int
    score: float
    tp: bool
    gt_index: int = -1


def _rank(scores: Sequence[float]) -> np.ndarray:
    # descending score; ties keep input order
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(
    dets: Sequence[ScoredDetection], gts: GroundTruthSet, iou_thresh: float = 0.5
) -> list[DetectionMatch]:
    """Greedy one-to-one matching in descending score order; results follow that order."""
    taken = [False] * len(gts)
    out = []
    for k in _rank([d.score for d in dets]):
        det = dets[k]
        best, best_j = -1.0, -1
        for j, inst in enumerate(gts.instances):
            if taken[j] or gaze_class(inst.laeo) != det.gaze_class:
                continue
            ov = pair_overlap(det, inst.head_a, inst.head_b)
            if ov >= iou_thresh and ov > best:
                best, best_j = ov, j
        if best_j >= 0:
            taken[best_j] = True
        out.append(DetectionMatch(int(k), det.gaze_class, det.score, best_j >= 0, best_j))
    return out


def average_precision(flags: Sequence[bool], scores: Sequence[float], n_gt: int, method: str = "all_point") -> float:
    """Area under the interpolated precision-recall curve.

    ``all_point`` integrates the exact step curve; ``11_point`` averages the
    interpolated precision at recall 0, 0.1, ..., 1. Returns 0 when ``n_gt``
    is 0.
    """
    if n_gt <= 0:
        return 0.0
    order = _rank(scores)
    tp = np.asarray(flags, dtype=np.float64)[order] if len(flags) else np.zeros(0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    if method == "11_point":
        return float(
            np.mean([precision[recall >= t].max() if (recall >= t).any() else 0.0 for t in np.linspace(0, 1, 11)])
        )
    if method != "all_point":
        raise ValueError(f"unknown AP method {method!r}")
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    map: float
    ap_rare: float
    ap_normal: float
    recall: float
    ap_laeo: float
    ap_not_laeo: float
    rare_class: str
    n_gt: dict[str, int]
    n_images: int
    images_per_sec: float | None = None
    per_image: list[dict] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_image")
        return d

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.summary(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def write_matches(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.per_image:
                fh.write(json.dumps(rec) + "\n")


def evaluate(
    results: Iterable[tuple[Sequence[ScoredDetection], GroundTruthSet]],
    iou_thresh: float = 0.5,
    ap_method: str = "all_point",
    images_per_sec: float | None = None,
) -> EvalReport:
    """Pool detections of all images and compute per-class AP, mAP and recall.

    The rare class is the one with fewer ground-truth instances (laeo on a
    tie). Recall is the mean over classes present in the ground truth of the
    matched fraction, counting every detection passed in.
    """
    pooled = {c: ([], []) for c in CLASSES}
    n_gt = {c: 0 for c in CLASSES}
    hit = {c: 0 for c in CLASSES}
    per_image = []
    n_images = 0
    for dets, gts in results:
        n_images += 1
        matches = match_detections(dets, gts, iou_thresh)
        for m in matches:
            pooled[m.gaze_class][0].append(m.tp)
            pooled[m.gaze_class][1].append(m.score)
            hit[m.gaze_class] += m.tp
        for inst in gts.instances:
            n_gt[gaze_class(inst.laeo)] += 1
        per_image.append({
            "image_id": gts.image_id,
            "n_gt": len(gts),
            "matches": [
                {"det": m.index, "class": GAZE_CLASSES[m.gaze_class], "score": m.score, "tp": m.tp, "gt": m.gt_index}
                for m in matches
            ],
        })
    ap = {c: average_precision(pooled[c][0], pooled[c][1], n_gt[c], ap_method) for c in CLASSES}
    rare = LAEO if n_gt[LAEO] <= n_gt[NOT_LAEO] else NOT_LAEO
    normal = NOT_LAEO if rare == LAEO else LAEO
    present = [c for c in CLASSES if n_gt[c]]
    recall = float(np.mean([hit[c] / n_gt[c] for c in present])) if present else 0.0
    return EvalReport(
        map=(ap[rare] + ap[normal]) / 2,
        ap_rare=ap[rare],
        ap_normal=ap[normal],
        recall=recall,
        ap_laeo=ap[LAEO],
        ap_not_laeo=ap[NOT_LAEO],
        rare_class=GAZE_CLASSES[rare],
        n_gt={GAZE_CLASSES[c]: n_gt[c] for c in CLASSES},
        n_images=n_images,
        images_per_sec=images_per_sec,
        per_image=per_image,
    )


def evaluate_predictions(
    preds: Sequence[PredictionSet],
    gts: Sequence[GroundTruthSet],
    threshold: float = 0.0,
    iou_thresh: float = 0.5,
    score_mode: str = "product",
    ap_method: str = "all_point",
    images_per_sec: float | None = None,
) -> EvalReport:
    results = [(score_predictions(p, threshold, score_mode), g) for p, g in zip(preds, gts)]
    return evaluate(results, iou_thresh, ap_method, images_per_sec)
