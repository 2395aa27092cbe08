"""Annotation I/O, augmentation and synthetic scenes.

Canonical annotation file: a JSON array with one object per image::

    {"image": "frames/0001.png", "size": [w, h],
     "heads": [[x1, y1, x2, y2], ...], "laeo_pairs": [[i, j], ...]}

Coordinates are pixels, corner form, origin top-left. Only positive pairs are
stored; every other head pair of the image is a negative instance, derived at
load time by :func:`to_ground_truth`.

Images are ``uint8`` arrays of shape ``[H, W, 3]`` throughout this module.
"""
from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .geometry import BoundingBox
from .instances import GroundTruthSet, MutualGazeInstance, derive_negatives

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class AnnotationError(ValueError):
    """Raised with one entry per offending record."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        lines = "\n".join(f"  record {rid}: {msg}" for rid, msg in problems)
        super().__init__(f"{len(problems)} malformed annotation record(s):\n{lines}")


@dataclass(frozen=True)
class AnnotationRecord:
    image_path: str
    image_size: tuple[int, int]
    heads: tuple[tuple[float, float, float, float], ...]
    positive_pairs: tuple[tuple[int, int], ...]
    # generator-side extras (e.g. gaze angles); never serialized
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def record_id(self) -> str:
        return self.image_path

    def to_json(self) -> dict:
        return {
            "image": self.image_path,
            "size": [int(self.image_size[0]), int(self.image_size[1])],
            "heads": [[float(v) for v in h] for h in self.heads],
            "laeo_pairs": [[int(i), int(j)] for i, j in self.positive_pairs],
        }


def _parse_record(obj, index: int) -> AnnotationRecord:
    if not isinstance(obj, dict):
        raise ValueError("record is not a JSON object")
    missing = {"image", "size", "heads", "laeo_pairs"} - obj.keys()
    if missing:
        raise ValueError(f"missing keys {sorted(missing)}")
    extra = obj.keys() - {"image", "size", "heads", "laeo_pairs"}
    if extra:
        raise ValueError(f"unknown keys {sorted(extra)}")
    if not isinstance(obj["image"], str) or not obj["image"]:
        raise ValueError("'image' must be a non-empty string")
    size = obj["size"]
    if not (isinstance(size, list) and len(size) == 2 and all(isinstance(v, int) and v > 0 for v in size)):
        raise ValueError(f"'size' must be two positive integers, got {size!r}")
    w, h = size
    heads = []
    for k, box in enumerate(obj["heads"]):
        if not (isinstance(box, list) and len(box) == 4 and all(isinstance(v, (int, float)) for v in box)):
            raise ValueError(f"head {k} is not four numbers: {box!r}")
        x1, y1, x2, y2 = (min(max(float(v), 0.0), float(lim)) for v, lim in zip(box, (w, h, w, h)))
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"head {k} is degenerate after clipping to the image: {box!r}")
        heads.append((x1, y1, x2, y2))
    pairs, seen = [], set()
    for pair in obj["laeo_pairs"]:
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(v, int) for v in pair)):
            raise ValueError(f"pair {pair!r} is not two integers")
        i, j = pair
        if not (0 <= i < len(heads) and 0 <= j < len(heads)):
            raise ValueError(f"pair {pair!r} references a head index out of range (have {len(heads)} heads)")
        if i == j:
            raise ValueError(f"self-pair {pair!r}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise ValueError(f"duplicate pair {pair!r}")
        seen.add(key)
        pairs.append((i, j))
    return AnnotationRecord(obj["image"], (w, h), tuple(heads), tuple(pairs))


def load_annotations(path: str | Path) -> list[AnnotationRecord]:
    text = Path(path).read_text()
    if not text.strip():
        return []
    data = json.loads(text)
    if not isinstance(data, list):
        raise AnnotationError([("<file>", "top level must be a JSON array")])
    records, problems = [], []
    for n, obj in enumerate(data):
        rid = obj.get("image", f"#{n}") if isinstance(obj, dict) else f"#{n}"
        try:
            records.append(_parse_record(obj, n))
        except ValueError as exc:
            problems.append((str(rid), str(exc)))
    if problems:
        raise AnnotationError(problems)
    return records


def save_annotations(records: Sequence[AnnotationRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.to_json() for r in records], indent=1) + "\n")
    return path


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def to_ground_truth(rec: AnnotationRecord) -> GroundTruthSet:
    w, h = rec.image_size
    heads = [
        BoundingBox((x1 + x2) / (2 * w), (y1 + y2) / (2 * h), (x2 - x1) / w, (y2 - y1) / h)
        for x1, y1, x2, y2 in rec.heads
    ]
    return derive_negatives(heads, rec.positive_pairs, rec.record_id, (w, h))


# ---------------------------------------------------------------- images


def normalize_image(image: np.ndarray) -> torch.Tensor:
    """``uint8 [H,W,3]`` -> float ``[3,H,W]`` standardized per channel."""
    x = torch.from_numpy(np.array(image, copy=True)).permute(2, 0, 1).to(torch.float32) / 255.0
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


def denormalize_image(t: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`normalize_image`, as floats in [0, 1], ``[H,W,3]``."""
    mean = torch.tensor(IMAGENET_MEAN, dtype=t.dtype).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=t.dtype).view(3, 1, 1)
    return (t * std + mean).permute(1, 2, 0).numpy()


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    hflip_prob: float = 0.5
    photometric_prob: float = 0.5
    brightness: tuple[float, float] = (0.75, 1.25)
    contrast: tuple[float, float] = (0.75, 1.25)
    crop_prob: float = 0.5
    crop_min_frac: float = 0.6  # smallest crop side, as a fraction of the image side
    resize_scales: tuple[float, ...] = (0.6, 0.8, 1.0, 1.2)
    base_short_side: int | None = 512  # None: scales apply to the incoming short side
    min_keep: float = 0.25  # heads keeping less of their area than this are dropped
    max_tries: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("hflip_prob", "photometric_prob", "crop_prob", "min_keep"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not self.resize_scales:
            raise ValueError("resize_scales must not be empty")
        if not 0.0 < self.crop_min_frac <= 1.0:
            raise ValueError("crop_min_frac must lie in (0, 1]")
        object.__setattr__(self, "resize_scales", tuple(self.resize_scales))
        object.__setattr__(self, "brightness", tuple(self.brightness))
        object.__setattr__(self, "contrast", tuple(self.contrast))


NO_AUGMENTATION = AugmentationConfig(
    hflip_prob=0.0, photometric_prob=0.0, crop_prob=0.0, resize_scales=(1.0,), base_short_side=None
)


def _map_instances(gt: GroundTruthSet, fn, image_size) -> GroundTruthSet:
    return GroundTruthSet(
        tuple(MutualGazeInstance(fn(i.head_a), fn(i.head_b), i.laeo) for i in gt.instances),
        gt.image_id,
        image_size,
    )


def hflip(image: np.ndarray, gt: GroundTruthSet) -> tuple[np.ndarray, GroundTruthSet]:
    flipped = np.ascontiguousarray(image[:, ::-1])
    return flipped, _map_instances(gt, lambda b: replace(b, cx=1.0 - b.cx), gt.image_size)


def adjust_brightness_contrast(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    x = image.astype(np.float32) * brightness
    gray = x.mean()
    x = (x - gray) * contrast + gray
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def crop(
    image: np.ndarray, gt: GroundTruthSet, region: tuple[int, int, int, int], min_keep: float = 0.25
) -> tuple[np.ndarray, GroundTruthSet, float]:
    """Crop to pixel region ``(x0, y0, x1, y1)``.

    Boxes are clipped to the crop and re-normalized to its frame. An instance
    is dropped when either of its heads keeps less than ``min_keep`` of its
    area. Returns the dropped fraction of instances as the third element.
    """
    H, W = image.shape[:2]
    x0, y0, x1, y1 = region
    cw, ch = x1 - x0, y1 - y0
    out = np.ascontiguousarray(image[y0:y1, x0:x1])

    def remap(b: BoundingBox):
        bx1, bx2 = (b.cx - b.w / 2) * W, (b.cx + b.w / 2) * W
        by1, by2 = (b.cy - b.h / 2) * H, (b.cy + b.h / 2) * H
        nx1, nx2 = min(max(bx1 - x0, 0.0), cw), min(max(bx2 - x0, 0.0), cw)
        ny1, ny2 = min(max(by1 - y0, 0.0), ch), min(max(by2 - y0, 0.0), ch)
        keep = (nx2 - nx1) * (ny2 - ny1) / ((bx2 - bx1) * (by2 - by1))
        if keep < min_keep or nx2 <= nx1 or ny2 <= ny1:
            return None
        return BoundingBox((nx1 + nx2) / (2 * cw), (ny1 + ny2) / (2 * ch), (nx2 - nx1) / cw, (ny2 - ny1) / ch)

    kept = []
    for inst in gt.instances:
        a, b = remap(inst.head_a), remap(inst.head_b)
        if a is not None and b is not None:
            kept.append(MutualGazeInstance(a, b, inst.laeo))
    dropped = 1.0 - len(kept) / len(gt) if len(gt) else 0.0
    return out, GroundTruthSet(tuple(kept), gt.image_id, (cw, ch)), dropped


def resize(image: np.ndarray, gt: GroundTruthSet, short_side: int) -> tuple[np.ndarray, GroundTruthSet]:
    H, W = image.shape[:2]
    s = short_side / min(H, W)
    nw, nh = max(1, round(W * s)), max(1, round(H * s))
    if (nw, nh) == (W, H):
        return image, gt
    out = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    return out, GroundTruthSet(gt.instances, gt.image_id, (nw, nh))


def augment(
    image: np.ndarray, gt: GroundTruthSet, cfg: AugmentationConfig, rng: np.random.Generator
) -> tuple[np.ndarray, GroundTruthSet]:
    """Random flip, brightness/contrast, crop and multi-scale resize.

    Labels never change, only geometry. If a draw leaves no instance of a
    non-empty ground truth, it is redrawn up to ``cfg.max_tries`` times before
    falling back to the unaugmented pair.
    """
    for _ in range(cfg.max_tries):
        img, g = image, gt
        if rng.random() < cfg.hflip_prob:
            img, g = hflip(img, g)
        if rng.random() < cfg.photometric_prob:
            img = adjust_brightness_contrast(img, rng.uniform(*cfg.brightness), rng.uniform(*cfg.contrast))
        if rng.random() < cfg.crop_prob:
            H, W = img.shape[:2]
            cw = int(rng.integers(math.ceil(cfg.crop_min_frac * W), W + 1))
            ch = int(rng.integers(math.ceil(cfg.crop_min_frac * H), H + 1))
            x0 = int(rng.integers(0, W - cw + 1))
            y0 = int(rng.integers(0, H - ch + 1))
            img, g, dropped = crop(img, g, (x0, y0, x0 + cw, y0 + ch), cfg.min_keep)
            if dropped:
                log.debug("crop dropped %.0f%% of instances in %s", 100 * dropped, gt.image_id)
        scale = cfg.resize_scales[int(rng.integers(len(cfg.resize_scales)))]
        base = cfg.base_short_side or min(image.shape[:2])
        img, g = resize(img, g, max(1, round(scale * base)))
        if len(g) or not len(gt):
            return img, g
    log.info("augmentation kept no instance of %s after %d tries; using it unaugmented", gt.image_id, cfg.max_tries)
    return image, gt


# ---------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SyntheticSceneSpec:
    image_size: tuple[int, int] = (96, 96)
    head_count: tuple[int, int] = (2, 4)  # inclusive
    head_radius: tuple[float, float] = (7.0, 11.0)  # pixels
    mutual_prob: float = 0.5  # chance that a drawn head pair is posed facing each other
    background: str = "plain"  # plain | noise
    seed: int = 0

    def __post_init__(self):
        if self.head_count[0] < 1 or self.head_count[0] > self.head_count[1]:
            raise ValueError(f"bad head_count {self.head_count}")
        if self.background not in ("plain", "noise"):
            raise ValueError(f"unknown background {self.background!r}")


def looks_at(src: np.ndarray, angle: float, dst: np.ndarray, dst_radius: float) -> bool:
    """Does the ray from ``src`` along ``angle`` pass within half a radius of ``dst``?"""
    u = np.array([math.cos(angle), math.sin(angle)])
    d = dst - src
    t = float(d @ u)
    if t <= 0:
        return False
    perp = abs(float(d[0] * u[1] - d[1] * u[0]))
    return perp < dst_radius / 2


def mutual_pairs(centers: np.ndarray, radii: np.ndarray, angles: np.ndarray) -> list[tuple[int, int]]:
    n = len(centers)
    return [
        (i, j)
        for i in range(n)
        for j in range(i + 1, n)
        if looks_at(centers[i], angles[i], centers[j], radii[j])
        and looks_at(centers[j], angles[j], centers[i], radii[i])
    ]


def _place_heads(spec: SyntheticSceneSpec, rng: np.random.Generator, n: int):
    W, H = spec.image_size
    for _ in range(100):
        centers, radii = [], []
        for _ in range(n):
            for _ in range(200):
                r = rng.uniform(*spec.head_radius)
                c = np.array([rng.uniform(r + 1, W - r - 1), rng.uniform(r + 1, H - r - 1)])
                if all(np.linalg.norm(c - c2) >= r + r2 + 4 for c2, r2 in zip(centers, radii)):
                    centers.append(c)
                    radii.append(r)
                    break
        if len(centers) == n:
            return np.array(centers), np.array(radii)
    raise RuntimeError(f"could not place {n} heads in a {W}x{H} image")


def render_scene(spec: SyntheticSceneSpec, centers, radii, angles, rng: np.random.Generator) -> np.ndarray:
    W, H = spec.image_size
    bg = tuple(int(v) for v in rng.integers(90, 170, size=3))
    im = Image.new("RGB", (W, H), bg)
    if spec.background == "noise":
        noise = rng.normal(0, 18, size=(H, W, 3))
        im = Image.fromarray(np.clip(np.asarray(im, dtype=np.float64) + noise, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(im)
    for c, r, a in zip(centers, radii, angles):
        tone = int(rng.integers(190, 246))
        color = (tone, int(tone * 0.82), int(tone * 0.7))
        draw.ellipse([c[0] - r, c[1] - r, c[0] + r, c[1] + r], fill=color)
        tip = (c[0] + 1.35 * r * math.cos(a), c[1] + 1.35 * r * math.sin(a))
        draw.line([tuple(c), tip], fill=(25, 25, 35), width=max(2, int(r / 3)))
    return np.asarray(im, dtype=np.uint8).copy()


def generate_scene(spec: SyntheticSceneSpec, index: int) -> tuple[np.ndarray, AnnotationRecord]:
    rng = np.random.default_rng([spec.seed, index])
    n = int(rng.integers(spec.head_count[0], spec.head_count[1] + 1))
    centers, radii = _place_heads(spec, rng, n)
    angles = rng.uniform(-math.pi, math.pi, size=n)
    order = rng.permutation(n)
    for i, j in zip(order[0::2], order[1::2]):
        if rng.random() < spec.mutual_prob:
            d = centers[j] - centers[i]
            dist = float(np.linalg.norm(d))
            base = math.atan2(d[1], d[0])
            # jitter keeps the ray well inside the half-radius tolerance
            ji = math.asin(min(1.0, 0.3 * radii[j] / dist))
            jj = math.asin(min(1.0, 0.3 * radii[i] / dist))
            angles[i] = base + rng.uniform(-ji, ji)
            angles[j] = base + math.pi + rng.uniform(-jj, jj)
    image = render_scene(spec, centers, radii, angles, rng)
    heads = tuple(
        (float(c[0] - r), float(c[1] - r), float(c[0] + r), float(c[1] + r)) for c, r in zip(centers, radii)
    )
    rec = AnnotationRecord(
        f"synth_{spec.seed}_{index:05d}.png",
        tuple(spec.image_size),
        heads,
        tuple(mutual_pairs(centers, radii, angles)),
        meta={"centers": centers, "radii": radii, "angles": angles},
    )
    return image, rec


def generate_synthetic(spec: SyntheticSceneSpec, n_images: int, start: int = 0) -> list[tuple[np.ndarray, AnnotationRecord]]:
    return [generate_scene(spec, start + k) for k in range(n_images)]
