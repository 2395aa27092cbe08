import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgtr.geometry import BoundingBox
from mgtr.instances import (
    GroundTruthSet,
    InvalidInstanceError,
    MutualGazeInstance,
    PredictionSet,
    canonicalize,
    decode_predictions,
    derive_negatives,
)

from conftest import random_center


def _inst(rng, laeo=1):
    return MutualGazeInstance(random_center(rng), random_center(rng), laeo)


def test_swap_equality_and_hash(rng):
    for _ in range(100):
        x = _inst(rng, int(rng.integers(2)))
        assert x == x.swapped()
        assert hash(x) == hash(x.swapped())
        assert len({x, x.swapped()}) == 1


def test_label_matters(rng):
    x = _inst(rng, 1)
    assert x != MutualGazeInstance(x.head_a, x.head_b, 0)


def test_identical_heads_rejected():
    b = BoundingBox(0.5, 0.5, 0.1, 0.1)
    with pytest.raises(InvalidInstanceError):
        MutualGazeInstance(b, b, 1)


def test_canonicalize(rng):
    for _ in range(1000):
        x = _inst(rng)
        c = canonicalize(x)
        assert canonicalize(c) is c
        assert canonicalize(x.swapped()) == c
        assert canonicalize(x.swapped()).head_a == c.head_a
        assert c.head_a.as_tuple() <= c.head_b.as_tuple()


def test_canonical_ties_broken_by_width():
    a = BoundingBox(0.5, 0.5, 0.1, 0.2)
    b = BoundingBox(0.5, 0.5, 0.2, 0.1)
    assert canonicalize(MutualGazeInstance(b, a, 0)).head_a == a


def _heads(n):
    return [BoundingBox(0.05 + 0.12 * k, 0.5, 0.1, 0.1) for k in range(n)]


def test_derive_negatives_three_heads():
    h = _heads(3)
    gt = derive_negatives(h, [(0, 1)])
    got = {(h.index(i.head_a), h.index(i.head_b), i.laeo) for i in gt.instances}
    assert got == {(0, 1, 1), (0, 2, 0), (1, 2, 0)}


def test_derive_negatives_two_heads_no_positive():
    gt = derive_negatives(_heads(2), [])
    assert [(i.laeo) for i in gt.instances] == [0]


@pytest.mark.parametrize("n", range(2, 9))
def test_derive_negatives_counts(n):
    pos = [(0, 1), (n - 1, n - 2)] if n >= 4 else [(0, 1)]
    gt = derive_negatives(_heads(n), pos)
    assert len(gt) == math.comb(n, 2)
    assert sum(i.laeo for i in gt.instances) == len(pos)


@pytest.mark.parametrize("bad", [[(0, 0)], [(0, 1), (1, 0)], [(0, 5)]])
def test_derive_negatives_rejects(bad):
    with pytest.raises(InvalidInstanceError, match=r"\(\d, \d\)"):
        derive_negatives(_heads(3), bad)


def test_ground_truth_rejects_duplicate_pairs(rng):
    x = _inst(rng)
    with pytest.raises(InvalidInstanceError):
        GroundTruthSet((x, x.swapped()), "img")


def test_decode_uniform_and_midpoint():
    n = 5
    p = decode_predictions(np.zeros((n, 3)), np.ones((n, 3)), np.full((n, 3), 7.0), np.zeros((n, 4)), np.zeros((n, 4)))
    assert len(p) == n
    for q in p:
        assert np.allclose(q.p_h1, 1 / 3) and np.allclose(q.p_gaze, 1 / 3)
        assert q.box_a.as_tuple() == (0.5, 0.5, 0.5, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_decode_probabilities_normalized(n, seed):
    r = np.random.default_rng(seed)
    p = decode_predictions(*(r.normal(0, 10, (n, 3)) for _ in range(3)), r.normal(0, 3, (n, 4)), r.normal(0, 3, (n, 4)))
    for q in p:
        for v in (q.p_h1, q.p_h2, q.p_gaze):
            assert abs(v.sum() - 1) < 1e-6 and (v >= 0).all()
        for b in (q.box_a, q.box_b):
            assert all(0 < x < 1 for x in b.as_tuple())


def test_decode_rejects_non_finite():
    raw = np.zeros((4, 3))
    raw[2, 1] = np.nan
    with pytest.raises(InvalidInstanceError, match="query 2"):
        decode_predictions(np.zeros((4, 3)), raw, np.zeros((4, 3)), np.zeros((4, 4)), np.zeros((4, 4)))


def test_prediction_set_length_enforced():
    p = decode_predictions(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 4)), np.zeros((3, 4)))
    with pytest.raises(InvalidInstanceError):
        PredictionSet(p.predictions, "x", num_queries=4)
