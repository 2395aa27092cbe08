"""Mutual gaze triples: (head A, head B, label), with unordered-pair semantics."""
from __future__ import annotations

import itertools
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundingBox

# Person-confidence head vocabulary.
PERSON, NON_PERSON, NOT_MATCH = 0, 1, 2
# Gaze head vocabulary; NOT_MATCH (2) is shared.
LAEO, NOT_LAEO = 0, 1

PERSON_CLASSES = ("person", "non-person", "not-match")
GAZE_CLASSES = ("laeo", "not-laeo", "not-match")


def gaze_class(laeo: int) -> int:
    """Map a binary laeo label (1 = looking at each other) to a gaze-head index."""
    return LAEO if laeo else NOT_LAEO


class InvalidInstanceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MutualGazeInstance:
    head_a: BoundingBox
    head_b: BoundingBox
    laeo: int

    def __post_init__(self):
        if self.laeo not in (0, 1):
            raise InvalidInstanceError(f"laeo label must be 0 or 1, got {self.laeo!r}")
        if self.head_a == self.head_b:
            raise InvalidInstanceError("the two heads of an instance must be distinct boxes")

    def _key(self):
        a, b = sorted((self.head_a.as_tuple(), self.head_b.as_tuple()))
        return (a, b, self.laeo)

    def __eq__(self, other):
        if not isinstance(other, MutualGazeInstance):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def swapped(self) -> MutualGazeInstance:
        return MutualGazeInstance(self.head_b, self.head_a, self.laeo)

    def pair(self) -> frozenset:
        return frozenset((self.head_a, self.head_b))


def canonicalize(inst: MutualGazeInstance) -> MutualGazeInstance:
    """Order the heads lexicographically by (cx, cy, w, h)."""
    if inst.head_a.as_tuple() <= inst.head_b.as_tuple():
        return inst
    return inst.swapped()


@dataclass(frozen=True)
class GroundTruthSet:
    instances: tuple[MutualGazeInstance, ...]
    image_id: str = ""
    image_size: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        seen = set()
        for inst in self.instances:
            if inst.pair() in seen:
                raise InvalidInstanceError(
                    f"image {self.image_id!r}: head pair recorded twice ({inst.head_a}, {inst.head_b})"
                )
            seen.add(inst.pair())

    def __len__(self):
        return len(self.instances)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(boxes_a [M,4], boxes_b [M,4], gaze class indices [M]) in center form."""
        m = len(self.instances)
        a = np.array([i.head_a.as_tuple() for i in self.instances], dtype=np.float64).reshape(m, 4)
        b = np.array([i.head_b.as_tuple() for i in self.instances], dtype=np.float64).reshape(m, 4)
        labels = np.array([gaze_class(i.laeo) for i in self.instances], dtype=np.int64)
        return a, b, labels


def derive_negatives(
    heads: Sequence[BoundingBox],
    positives: Sequence[tuple[int, int]],
    image_id: str = "",
    image_size: tuple[int, int] = (0, 0),
) -> GroundTruthSet:
    """Enumerate every unordered head pair; listed pairs are positive, the rest negative."""
    n = len(heads)
    pos = set()
    for i, j in positives:
        if not (0 <= i < n and 0 <= j < n):
            raise InvalidInstanceError(f"image {image_id!r}: pair ({i}, {j}) references a missing head")
        if i == j:
            raise InvalidInstanceError(f"image {image_id!r}: self-pair ({i}, {j})")
        key = (min(i, j), max(i, j))
        if key in pos:
            raise InvalidInstanceError(f"image {image_id!r}: duplicate pair ({i}, {j})")
        pos.add(key)
    instances = [
        MutualGazeInstance(heads[i], heads[j], int((i, j) in pos))
        for i, j in itertools.combinations(range(n), 2)
    ]
    return GroundTruthSet(tuple(instances), image_id, image_size)


@dataclass(frozen=True)
class PredictedInstance:
    p_h1: np.ndarray
    p_h2: np.ndarray
    p_gaze: np.ndarray
    box_a: BoundingBox
    box_b: BoundingBox

    def __post_init__(self):
        for name in ("p_h1", "p_h2", "p_gaze"):
            p = np.asarray(getattr(self, name), dtype=np.float64)
            if p.shape != (3,) or (p < 0).any() or abs(p.sum() - 1) > 1e-5:
                raise InvalidInstanceError(f"{name} is not a 3-way probability vector: {p}")
            object.__setattr__(self, name, p)

    def swapped(self) -> PredictedInstance:
        return PredictedInstance(self.p_h2, self.p_h1, self.p_gaze, self.box_b, self.box_a)


@dataclass(frozen=True)
class PredictionSet:
    predictions: tuple[PredictedInstance, ...]
    image_id: str = ""
    num_queries: int | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "predictions", tuple(self.predictions))
        n = self.num_queries if self.num_queries is not None else len(self.predictions)
        if len(self.predictions) != n:
            raise InvalidInstanceError(
                f"image {self.image_id!r}: expected {n} predictions, got {len(self.predictions)}"
            )
        object.__setattr__(self, "num_queries", n)

    def __len__(self):
        return len(self.predictions)

    def __iter__(self):
        return iter(self.predictions)

    def __getitem__(self, i):
        return self.predictions[i]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "p_h1": np.stack([p.p_h1 for p in self.predictions]),
            "p_h2": np.stack([p.p_h2 for p in self.predictions]),
            "p_gaze": np.stack([p.p_gaze for p in self.predictions]),
            "box_a": np.array([p.box_a.as_tuple() for p in self.predictions]),
            "box_b": np.array([p.box_b.as_tuple() for p in self.predictions]),
        }


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode_predictions(
    logits_h1,
    logits_h2,
    logits_gaze,
    box_a_logits,
    box_b_logits,
    image_id: str = "",
) -> PredictionSet:
    """Turn raw head outputs for N queries into a :class:`PredictionSet`.

    Class scores go through a softmax and box logits through a sigmoid, so
    every box field lands in (0, 1).
    """
    raw = {
        "h1": np.asarray(logits_h1, dtype=np.float64),
        "h2": np.asarray(logits_h2, dtype=np.float64),
        "gaze": np.asarray(logits_gaze, dtype=np.float64),
        "box_a": np.asarray(box_a_logits, dtype=np.float64),
        "box_b": np.asarray(box_b_logits, dtype=np.float64),
    }
    n = raw["h1"].shape[0]
    for name, arr in raw.items():
        if arr.shape[0] != n:
            raise InvalidInstanceError(f"head {name} has {arr.shape[0]} rows, expected {n}")
        bad = ~np.isfinite(arr).reshape(n, -1).all(axis=1)
        if bad.any():
            raise InvalidInstanceError(
                f"image {image_id!r}: non-finite raw output in head {name} at query {int(np.argmax(bad))}"
            )
    probs = {k: _softmax(raw[k]) for k in ("h1", "h2", "gaze")}
    boxes = {k: _sigmoid(raw[k]) for k in ("box_a", "box_b")}
    preds = [
        PredictedInstance(
            probs["h1"][q],
            probs["h2"][q],
            probs["gaze"][q],
            _to_box(boxes["box_a"][q]),
            _to_box(boxes["box_b"][q]),
        )
        for q in range(n)
    ]
    return PredictionSet(tuple(preds), image_id, n)


def _to_box(v: np.ndarray) -> BoundingBox:
    # a saturated sigmoid can hit exactly 0 in float64; keep the extent positive
    w = max(float(v[2]), 1e-12)
    h = max(float(v[3]), 1e-12)
    return BoundingBox(float(v[0]), float(v[1]), w, h)
