"""Training objective evaluated on a fixed matching.

Matched predictions get cross-entropy against "person" on both person heads,
cross-entropy against the ground-truth gaze class, and ``gamma1 * l1 +
gamma2 * (1 - IoU-variant)`` on each head box under the correspondence the
matcher picked. Predictions assigned to ∅ get cross-entropy against
"not-match" on all three heads, down-weighted by ``eos_weight``, and no box
term.

Reduction: each class term is a weighted mean over all queries of the batch
(weight 1 for matched rows, ``eos_weight`` for ∅ rows); box terms are summed
and divided by the number of real instances in the batch, clamped at 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import geometry
from .instances import NOT_MATCH, PERSON, GroundTruthSet
from .matcher import MatchAssignment, MatchingError, MatchWeights, cost_from_arrays, hungarian_solve


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 1.0
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


@dataclass
class LossBreakdown:
    total: torch.Tensor
    class_h1: torch.Tensor
    class_h2: torch.Tensor
    class_gaze: torch.Tensor
    box_l1: torch.Tensor
    box_giou: torch.Tensor
    # unreduced weighted contribution of every query, [B, N]
    per_query: torch.Tensor = field(repr=False)
    weights: LossWeights = field(default_factory=LossWeights, repr=False)

    def recombine(self) -> torch.Tensor:
        w = self.weights
        return w.beta1 * (
            w.alpha1 * self.class_h1 + w.alpha2 * self.class_h2 + w.alpha3 * self.class_gaze
        ) + w.beta2 * (w.gamma1 * self.box_l1 + w.gamma2 * self.box_giou)

    def to_dict(self) -> dict[str, float]:
        return {
            k: float(getattr(self, k).detach())
            for k in ("total", "class_h1", "class_h2", "class_gaze", "box_l1", "box_giou")
        }


def match_layer(out, targets: list[GroundTruthSet], w: MatchWeights = MatchWeights()) -> list[MatchAssignment]:
    """Hungarian matching for every image of one decoder layer's output."""
    with torch.no_grad():
        p_h1 = out.logits_h1.softmax(-1).double().cpu().numpy()
        p_h2 = out.logits_h2.softmax(-1).double().cpu().numpy()
        p_gaze = out.logits_gaze.softmax(-1).double().cpu().numpy()
        box_a = out.boxes_a.double().cpu().numpy()
        box_b = out.boxes_b.double().cpu().numpy()
    result = []
    for b, gt in enumerate(targets):
        gt_a, gt_b, gt_cls = gt.arrays()
        cost = cost_from_arrays(
            p_h1[b], p_h2[b], p_gaze[b], box_a[b], box_b[b], gt_a, gt_b, gt_cls, w, gt.image_id
        )
        result.append(hungarian_solve(cost))
    return result


def training_loss(
    out,
    targets: list[GroundTruthSet],
    assignments: list[MatchAssignment],
    w: LossWeights = LossWeights(),
    eos_weight: float = 0.1,
    iou_loss: str = "giou",
) -> LossBreakdown:
    """Loss for one layer's output.

    ``out`` carries ``logits_h1``, ``logits_h2``, ``logits_gaze`` ``[B,N,3]``
    and center-form ``boxes_a``, ``boxes_b`` ``[B,N,4]``. ``iou_loss`` picks
    the overlap term (giou, diou, ciou) or ``"none"`` to drop it.
    """
    bsz, n = out.logits_h1.shape[:2]
    if len(targets) != bsz or len(assignments) != bsz:
        raise MatchingError(f"batch of {bsz} images got {len(targets)} targets, {len(assignments)} assignments")
    dev, dt = out.logits_h1.device, out.logits_h1.dtype

    t_person = torch.full((bsz, n), NOT_MATCH, dtype=torch.long, device=dev)
    t_gaze = torch.full((bsz, n), NOT_MATCH, dtype=torch.long, device=dev)
    row_w = torch.full((bsz, n), float(eos_weight), dtype=dt, device=dev)
    idx_b, idx_q, tgt_a, tgt_b = [], [], [], []
    for b, (gt, sig) in enumerate(zip(targets, assignments)):
        if len(sig.sigma) != n or sig.matched_real != len(gt) or (
            sig.image_id and gt.image_id and sig.image_id != gt.image_id
        ):
            raise MatchingError(
                f"assignment for image {sig.image_id!r} does not belong to image {gt.image_id!r} "
                f"({len(sig.sigma)} rows / {sig.matched_real} real vs {n} / {len(gt)})"
            )
        gt_a, gt_b, gt_cls = gt.arrays()
        for q, j, swapped in sig.pairs():
            t_person[b, q] = PERSON
            t_gaze[b, q] = int(gt_cls[j])
            row_w[b, q] = 1.0
            idx_b.append(b)
            idx_q.append(q)
            tgt_a.append(gt_b[j] if swapped else gt_a[j])
            tgt_b.append(gt_a[j] if swapped else gt_b[j])

    def ce(logits, target):
        return F.cross_entropy(logits.reshape(-1, 3), target.reshape(-1), reduction="none").reshape(bsz, n)

    ce_h1 = ce(out.logits_h1, t_person)
    ce_h2 = ce(out.logits_h2, t_person)
    ce_gz = ce(out.logits_gaze, t_gaze)
    norm = row_w.sum()
    class_h1 = (row_w * ce_h1).sum() / norm
    class_h2 = (row_w * ce_h2).sum() / norm
    class_gaze = (row_w * ce_gz).sum() / norm

    num_inst = max(1, sum(len(gt) for gt in targets))
    per_query = w.beta1 * row_w * (w.alpha1 * ce_h1 + w.alpha2 * ce_h2 + w.alpha3 * ce_gz)
    gamma2 = 0.0 if iou_loss == "none" else w.gamma2
    if idx_b:
        ib = torch.tensor(idx_b, device=dev)
        iq = torch.tensor(idx_q, device=dev)
        ta = torch.as_tensor(np.stack(tgt_a), dtype=dt, device=dev)
        tb = torch.as_tensor(np.stack(tgt_b), dtype=dt, device=dev)
        pa, pb = out.boxes_a[ib, iq], out.boxes_b[ib, iq]
        l1 = (pa - ta).abs().sum(-1) + (pb - tb).abs().sum(-1)
        overlap = geometry.IOU_VARIANTS["giou" if iou_loss == "none" else iou_loss]
        gi = (1 - overlap(geometry.box_cxcywh_to_xyxy(pa), geometry.box_cxcywh_to_xyxy(ta))) + (
            1 - overlap(geometry.box_cxcywh_to_xyxy(pb), geometry.box_cxcywh_to_xyxy(tb))
        )
        box_l1 = l1.sum() / num_inst
        box_giou = gi.sum() / num_inst
        box_rows = torch.zeros_like(per_query)
        box_rows = box_rows.index_put((ib, iq), w.beta2 * (w.gamma1 * l1 + gamma2 * gi))
        per_query = per_query + box_rows
    else:
        zero = out.boxes_a.sum() * 0
        box_l1 = box_giou = zero

    used = LossWeights(w.beta1, w.beta2, w.alpha1, w.alpha2, w.alpha3, w.gamma1, gamma2)
    parts = LossBreakdown(
        total=torch.zeros((), dtype=dt, device=dev),
        class_h1=class_h1, class_h2=class_h2, class_gaze=class_gaze,
        box_l1=box_l1, box_giou=box_giou, per_query=per_query, weights=used,
    )
    parts.total = parts.recombine()
    return parts


class SetCriterion:
    """Match every decoder layer (or only the last) and sum the per-layer losses."""

    def __init__(
        self,
        match_weights: MatchWeights = MatchWeights(),
        loss_weights: LossWeights = LossWeights(),
        eos_weight: float = 0.1,
        iou_loss: str = "giou",
        aux_loss: bool = True,
    ):
        if iou_loss not in ("giou", "diou", "ciou", "none"):
            raise ValueError(f"unknown iou_loss {iou_loss!r}")
        self.match_weights = match_weights
        self.loss_weights = loss_weights
        self.eos_weight = eos_weight
        self.iou_loss = iou_loss
        self.aux_loss = aux_loss

    def __call__(self, outputs, targets: list[GroundTruthSet]):
        """Returns ``(total, final-layer breakdown, final-layer assignments)``."""
        layers = range(outputs.num_layers) if self.aux_loss else [outputs.num_layers - 1]
        total = 0
        for layer in layers:
            out = outputs.layer(layer)
            sigma = match_layer(out, targets, self.match_weights)
            parts = training_loss(out, targets, sigma, self.loss_weights, self.eos_weight, self.iou_loss)
            total = total + parts.total
        return total, parts, sigma


def loss_gradients(model: torch.nn.Module, images, targets, criterion: SetCriterion, mask=None) -> dict[str, torch.Tensor]:
    """Gradient of the criterion total w.r.t. every trainable parameter."""
    model.zero_grad(set_to_none=True)
    total, _, _ = criterion(model(images, mask), targets)
    total.backward()
    grads = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        grads[name] = g
    return grads
