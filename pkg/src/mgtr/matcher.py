"""Bipartite matching between the N predictions and the ∅-padded ground truth.

The pair cost is ``beta1 * class_cost + beta2 * box_cost`` where

* ``class_cost = -(alpha1 * p_h1[person] + alpha2 * p_h2[person] + alpha3 * p_gaze[gt class])``
* ``box_cost = sum over the two heads of gamma1 * l1 + gamma2 * (1 - GIoU)``

Instances are unordered, so each prediction is compared to a ground-truth
triple under both head correspondences and the cheaper one is kept; the
class and box terms swap together. Columns past the M real instances are ∅
slots that cost 0 for every prediction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import geometry
from .instances import PERSON, GroundTruthSet, MutualGazeInstance, PredictedInstance, PredictionSet, gaze_class

EMPTY_COST = 0.0


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class MatchWeights:
    beta1: float = 1.2
    beta2: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 2.0
    gamma1: float = 5.0
    gamma2: float = 2.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"weight {k} must be finite and nonnegative, got {v}")


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray
    n_real: int
    # swapped[i, j]: the cheaper correspondence pairs pred box_a with gt head_b
    swapped: np.ndarray | None = None
    image_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise MatchingError(f"cost matrix must be square, got shape {v.shape}")
        object.__setattr__(self, "values", v)
        if self.swapped is None:
            object.__setattr__(self, "swapped", np.zeros(v.shape, dtype=bool))

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MatchAssignment:
    sigma: np.ndarray
    total_cost: float
    matched_real: int
    swapped: np.ndarray = field(repr=False)
    image_id: str = ""

    def pairs(self) -> list[tuple[int, int, bool]]:
        """(prediction, gt instance, swapped) for every prediction mapped to a real instance."""
        return [
            (i, int(j), bool(self.swapped[i]))
            for i, j in enumerate(self.sigma)
            if j < self.matched_real
        ]

    def empty_rows(self) -> np.ndarray:
        return np.flatnonzero(self.sigma >= self.matched_real)


def pair_cost(pred: PredictedInstance, gt: MutualGazeInstance, w: MatchWeights = MatchWeights()) -> float:
    return min(_oriented_cost(pred, gt, w), _oriented_cost(pred.swapped(), gt, w))


def _oriented_cost(pred: PredictedInstance, gt: MutualGazeInstance, w: MatchWeights) -> float:
    cls = -(
        w.alpha1 * pred.p_h1[PERSON]
        + w.alpha2 * pred.p_h2[PERSON]
        + w.alpha3 * pred.p_gaze[gaze_class(gt.laeo)]
    )
    box = 0.0
    for p, g in ((pred.box_a, gt.head_a), (pred.box_b, gt.head_b)):
        box += w.gamma1 * geometry.l1_box(p, g) + w.gamma2 * (1.0 - geometry.giou(p, g))
    return w.beta1 * cls + w.beta2 * box


def cost_from_arrays(
    p_h1: np.ndarray,
    p_h2: np.ndarray,
    p_gaze: np.ndarray,
    box_a: np.ndarray,
    box_b: np.ndarray,
    gt_a: np.ndarray,
    gt_b: np.ndarray,
    gt_cls: np.ndarray,
    w: MatchWeights = MatchWeights(),
    image_id: str = "",
) -> CostMatrix:
    """Vectorized cost matrix; probabilities ``[N,3]``, boxes center-form ``[N,4]`` / ``[M,4]``."""
    n, m = p_h1.shape[0], gt_a.shape[0]
    if m > n:
        raise MatchingError(f"image {image_id!r}: {m} ground-truth instances exceed {n} queries")
    values = np.full((n, n), EMPTY_COST, dtype=np.float64)
    swapped = np.zeros((n, n), dtype=bool)
    if m:
        gaze = p_gaze[:, gt_cls]  # [N, M]
        person = w.alpha1 * p_h1[:, PERSON], w.alpha2 * p_h2[:, PERSON]
        straight = w.beta1 * -(person[0][:, None] + person[1][:, None] + w.alpha3 * gaze) + w.beta2 * (
            _box_cost(box_a, gt_a, w) + _box_cost(box_b, gt_b, w)
        )
        crossed_person = w.alpha1 * p_h2[:, PERSON] + w.alpha2 * p_h1[:, PERSON]
        crossed = w.beta1 * -(crossed_person[:, None] + w.alpha3 * gaze) + w.beta2 * (
            _box_cost(box_b, gt_a, w) + _box_cost(box_a, gt_b, w)
        )
        swapped[:, :m] = crossed < straight
        values[:, :m] = np.minimum(straight, crossed)
    if not np.isfinite(values).all():
        raise MatchingError(f"image {image_id!r}: non-finite matching cost")
    return CostMatrix(values, m, swapped, image_id)


def _box_cost(pred: np.ndarray, gt: np.ndarray, w: MatchWeights) -> np.ndarray:
    l1 = np.abs(pred[:, None, :] - gt[None, :, :]).sum(-1)
    pc = geometry.box_cxcywh_to_xyxy(torch.from_numpy(np.ascontiguousarray(pred, dtype=np.float64)))
    gc = geometry.box_cxcywh_to_xyxy(torch.from_numpy(np.ascontiguousarray(gt, dtype=np.float64)))
    g = geometry.pairwise(geometry.giou_tensor, pc, gc).numpy()
    return w.gamma1 * l1 + w.gamma2 * (1.0 - g)


def build_cost_matrix(preds: PredictionSet, gts: GroundTruthSet, w: MatchWeights = MatchWeights()) -> CostMatrix:
    if len(gts) > len(preds):
        raise MatchingError(
            f"image {gts.image_id!r}: {len(gts)} ground-truth instances exceed {len(preds)} queries"
        )
    arr = preds.arrays()
    gt_a, gt_b, gt_cls = gts.arrays()
    return cost_from_arrays(
        arr["p_h1"], arr["p_h2"], arr["p_gaze"], arr["box_a"], arr["box_b"],
        gt_a, gt_b, gt_cls, w, gts.image_id or preds.image_id,
    )


def linear_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching of a square matrix; returns column per row.

    Shortest augmenting paths with dual potentials (Kuhn-Munkres in the
    Jonker-Volgenant formulation), O(n^3). Rows are inserted one at a time;
    the inner Dijkstra-like sweep is vectorized over columns.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise MatchingError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise MatchingError("cost matrix has non-finite entries")
    # 1-based columns; column 0 is the virtual source of each augmenting path
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # row owning column j, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for row in range(1, n + 1):
        owner[0] = row
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[owner[1:] - 1] = np.arange(n)
    return col_of_row


def hungarian_solve(c: CostMatrix | np.ndarray) -> MatchAssignment:
    if not isinstance(c, CostMatrix):
        c = CostMatrix(np.asarray(c, dtype=np.float64), n_real=np.asarray(c).shape[0])
    sigma = linear_assignment(c.values)
    rows = np.arange(c.n)
    total = math.fsum(c.values[rows, sigma].tolist())
    swapped = c.swapped[rows, sigma] & (sigma < c.n_real)
    return MatchAssignment(sigma, total, c.n_real, swapped, c.image_id)


def match(preds: PredictionSet, gts: GroundTruthSet, w: MatchWeights = MatchWeights()) -> MatchAssignment:
    return hungarian_solve(build_cost_matrix(preds, gts, w))
