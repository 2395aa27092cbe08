import numpy as np
import pytest
import torch

from mgtr.geometry import BoundingBox, CornerBox

GRID = 1000


def grid_mask(box: CornerBox, n: int = GRID) -> np.ndarray:
    """Rasterize a unit-square corner box by testing pixel centers."""
    c = (np.arange(n) + 0.5) / n
    xs = (c >= box.x1) & (c < box.x2)
    ys = (c >= box.y1) & (c < box.y2)
    return ys[:, None] & xs[None, :]


def grid_iou_giou(a: CornerBox, b: CornerBox, n: int = GRID) -> tuple[float, float]:
    ma, mb = grid_mask(a, n), grid_mask(b, n)
    inter = np.count_nonzero(ma & mb)
    union = np.count_nonzero(ma | mb)
    hull = CornerBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))
    hull_px = np.count_nonzero(grid_mask(hull, n))
    iou = inter / union
    return iou, iou - (hull_px - union) / hull_px


def random_corner(rng: np.random.Generator, lo=0.1, hi=0.5) -> CornerBox:
    w, h = rng.uniform(lo, hi, size=2)
    x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
    return CornerBox(x, y, x + w, y + h)


def random_center(rng: np.random.Generator, lo=0.02, hi=0.4) -> BoundingBox:
    return BoundingBox(*rng.uniform(0.05, 0.95, size=2), *rng.uniform(lo, hi, size=2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
