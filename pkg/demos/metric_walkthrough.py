"""
Two-class mAP for mutual gaze
=============================

A detection counts only if *both* head boxes land (IoU >= 0.5 each) and the
gaze label is right. AP is computed separately for laeo and not-laeo.
"""
from mgtr.evaluation import ScoredDetection, average_precision, evaluate
from mgtr.geometry import BoundingBox
from mgtr.instances import LAEO, NOT_LAEO, GroundTruthSet, MutualGazeInstance

a, b, c = BoundingBox(.2, .3, .1, .1), BoundingBox(.7, .3, .1, .1), BoundingBox(.45, .75, .1, .1)
gt = GroundTruthSet((MutualGazeInstance(a, b, 1), MutualGazeInstance(a, c, 0), MutualGazeInstance(b, c, 0)), "img")

# the PR curve by hand: one GT, a false positive ranked above the true one
print(average_precision([False, True], [0.9, 0.5], n_gt=1))  # 0.5

near_b = BoundingBox(.71, .31, .1, .1)
dets = [
    ScoredDetection(b, a, LAEO, 0.95),         # right pair, heads listed in the other order: still a hit
    ScoredDetection(a, c, LAEO, 0.97),         # right boxes, wrong label: a laeo false positive, ranked first
    ScoredDetection(near_b, c, NOT_LAEO, 0.6),  # slightly off box, still above 0.5 IoU
    ScoredDetection(a, c, NOT_LAEO, 0.4),
]
report = evaluate([(dets, gt)])
print(report.to_json())
for rec in report.per_image[0]["matches"]:
    print(rec)
