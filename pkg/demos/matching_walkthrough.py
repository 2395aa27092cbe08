"""
Matching predicted gaze pairs to ground truth
=============================================

A mutual gaze instance is an unordered pair of head boxes plus a label.
Here we build a tiny image with three heads, score a handful of fake
query outputs against it and look at the optimal assignment.
"""
import numpy as np

from mgtr.geometry import BoundingBox
from mgtr.instances import PredictedInstance, PredictionSet, derive_negatives
from mgtr.matcher import build_cost_matrix, hungarian_solve

# three heads; only the first two look at each other
heads = [BoundingBox(0.25, 0.4, 0.1, 0.12), BoundingBox(0.7, 0.4, 0.1, 0.12), BoundingBox(0.5, 0.8, 0.1, 0.1)]
gt = derive_negatives(heads, [(0, 1)], image_id="demo")
for inst in gt.instances:
    print(inst.head_a.as_tuple(), inst.head_b.as_tuple(), "laeo" if inst.laeo else "not-laeo")

# five queries: two reasonable guesses (one with its heads in swapped order) and three empties
rng = np.random.default_rng(0)
def probs(k, p=0.8):
    v = np.full(3, (1 - p) / 2)
    v[k] = p
    return v

preds = [
    PredictedInstance(probs(0), probs(0), probs(0), heads[1], heads[0]),  # swapped heads, laeo
    PredictedInstance(probs(0), probs(0), probs(1), heads[0], heads[2]),  # not-laeo
]
preds += [PredictedInstance(probs(2), probs(2), probs(2), BoundingBox(*rng.uniform(0.2, 0.8, 2), 0.1, 0.1),
                            BoundingBox(*rng.uniform(0.2, 0.8, 2), 0.1, 0.1)) for _ in range(3)]
ps = PredictionSet(tuple(preds), "demo")

# rows are queries, columns the 3 real instances followed by 2 empty slots (cost 0)
cm = build_cost_matrix(ps, gt)
print(np.round(cm.values, 2))

sig = hungarian_solve(cm)
print("assignment", sig.sigma.tolist(), "total cost", round(sig.total_cost, 3))
for q, j, swapped in sig.pairs():
    print(f"query {q} -> instance {j}" + (" (heads crossed)" if swapped else ""))
print("queries left empty:", sig.empty_rows().tolist())
