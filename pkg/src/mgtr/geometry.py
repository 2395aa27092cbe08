"""Head box representations and the IoU family of overlap measures.

Two surfaces live here. The scalar functions (``iou``, ``giou``, ``diou``,
``ciou``, ``l1_box``) take :class:`CornerBox` / :class:`BoundingBox` values
and are used for evaluation and tests. The ``*_tensor`` functions do the same
arithmetic on ``torch`` tensors of shape ``[..., 4]`` and are differentiable,
which is what the matcher and the training loss consume.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

# Guards division by the enclosing-box area (or diagonal) only.
EPS = 1e-9


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Normalized center-form box: fractions of image width / height."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidBoxError(f"box must have positive extent, got w={self.w}, h={self.h}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise InvalidBoxError(f"box center outside the image: ({self.cx}, {self.cy})")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def to_corner(self) -> CornerBox:
        return center_to_corner(self)


@dataclass(frozen=True)
class CornerBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError(f"degenerate corner box {vals}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_center(self) -> BoundingBox:
        return corner_to_center(self)


def center_to_corner(b: BoundingBox) -> CornerBox:
    return CornerBox(b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def corner_to_center(c: CornerBox) -> BoundingBox:
    return BoundingBox((c.x1 + c.x2) / 2, (c.y1 + c.y2) / 2, c.x2 - c.x1, c.y2 - c.y1)


def _as_corner(b: CornerBox | BoundingBox) -> CornerBox:
    return center_to_corner(b) if isinstance(b, BoundingBox) else b


def _overlap(a: CornerBox, b: CornerBox) -> tuple[float, float]:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    return inter, a.area + b.area - inter


def _enclosing(a: CornerBox, b: CornerBox) -> tuple[float, float]:
    cw = max(a.x2, b.x2) - min(a.x1, b.x1)
    ch = max(a.y2, b.y2) - min(a.y1, b.y1)
    return cw, ch


def iou(a: CornerBox | BoundingBox, b: CornerBox | BoundingBox) -> float:
    a, b = _as_corner(a), _as_corner(b)
    inter, union = _overlap(a, b)
    return inter / union


def giou(a: CornerBox | BoundingBox, b: CornerBox | BoundingBox) -> float:
    a, b = _as_corner(a), _as_corner(b)
    inter, union = _overlap(a, b)
    cw, ch = _enclosing(a, b)
    hull = cw * ch
    return inter / union - (hull - union) / max(hull, EPS)


def _center_term(a: CornerBox, b: CornerBox) -> float:
    # squared center distance over squared enclosing diagonal
    dx = (a.x1 + a.x2 - b.x1 - b.x2) / 2
    dy = (a.y1 + a.y2 - b.y1 - b.y2) / 2
    cw, ch = _enclosing(a, b)
    return (dx * dx + dy * dy) / max(cw * cw + ch * ch, EPS)


def diou(a: CornerBox | BoundingBox, b: CornerBox | BoundingBox) -> float:
    a, b = _as_corner(a), _as_corner(b)
    return iou(a, b) - _center_term(a, b)


def ciou(a: CornerBox | BoundingBox, b: CornerBox | BoundingBox) -> float:
    a, b = _as_corner(a), _as_corner(b)
    overlap = iou(a, b)
    v = (4 / math.pi**2) * (
        math.atan((a.x2 - a.x1) / (a.y2 - a.y1)) - math.atan((b.x2 - b.x1) / (b.y2 - b.y1))
    ) ** 2
    alpha = 0.0 if v == 0 else v / ((1 - overlap) + v)
    return overlap - _center_term(a, b) - alpha * v


def l1_box(a: BoundingBox, b: BoundingBox) -> float:
    return sum(abs(x - y) for x, y in zip(a.as_tuple(), b.as_tuple()))


# --------------------------------------------------------------------------
# tensor versions, [..., 4] layouts


def box_cxcywh_to_xyxy(x: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = x.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(x: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = x.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def _tensor_parts(a: torch.Tensor, b: torch.Tensor):
    """Broadcasting helper; a and b are corner boxes."""
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    enc = torch.maximum(a[..., 2:], b[..., 2:]) - torch.minimum(a[..., :2], b[..., :2])
    return inter, union, enc


def iou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter, union, _ = _tensor_parts(a, b)
    return inter / union


def giou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise (broadcasting) GIoU of corner-form boxes."""
    inter, union, enc = _tensor_parts(a, b)
    hull = enc[..., 0] * enc[..., 1]
    return inter / union - (hull - union) / hull.clamp(min=EPS)


def _center_term_tensor(a, b, enc):
    d = (a[..., :2] + a[..., 2:] - b[..., :2] - b[..., 2:]) / 2
    return (d**2).sum(-1) / (enc**2).sum(-1).clamp(min=EPS)


def diou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter, union, enc = _tensor_parts(a, b)
    return inter / union - _center_term_tensor(a, b, enc)


def ciou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter, union, enc = _tensor_parts(a, b)
    overlap = inter / union
    wa, ha = a[..., 2] - a[..., 0], a[..., 3] - a[..., 1]
    wb, hb = b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]
    v = (4 / math.pi**2) * (torch.atan(wa / ha) - torch.atan(wb / hb)) ** 2
    # trade-off weight is treated as a constant during backprop
    with torch.no_grad():
        alpha = torch.where(v > 0, v / ((1 - overlap) + v).clamp(min=EPS), torch.zeros_like(v))
    return overlap - _center_term_tensor(a, b, enc) - alpha * v


IOU_VARIANTS = {"giou": giou_tensor, "diou": diou_tensor, "ciou": ciou_tensor, "iou": iou_tensor}


def pairwise(fn, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``[N,4] x [M,4] -> [N,M]`` via broadcasting."""
    return fn(a[:, None, :], b[None, :, :])
