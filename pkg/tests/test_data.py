import json
import math

import numpy as np
import pytest
import torch

from mgtr.data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    NO_AUGMENTATION,
    AnnotationError,
    AnnotationRecord,
    AugmentationConfig,
    SyntheticSceneSpec,
    adjust_brightness_contrast,
    augment,
    crop,
    denormalize_image,
    generate_scene,
    generate_synthetic,
    hflip,
    load_annotations,
    mutual_pairs,
    normalize_image,
    save_annotations,
    to_ground_truth,
)


def _record(heads, pairs, size=(100, 100), name="img.png"):
    return AnnotationRecord(name, size, tuple(tuple(map(float, h)) for h in heads), tuple(pairs))


THREE = _record([(10, 10, 20, 20), (30, 40, 50, 60), (60, 20, 80, 40)], [(0, 2)])


# ---------------------------------------------------------------- loading


def test_empty_file(tmp_path):
    p = tmp_path / "a.json"
    p.write_text("")
    assert load_annotations(p) == []


def test_out_of_range_pair_names_record(tmp_path):
    p = tmp_path / "a.json"
    good = {"image": "ok.png", "size": [10, 10], "heads": [[0, 0, 5, 5], [5, 5, 9, 9]], "laeo_pairs": [[0, 1]]}
    bad = {"image": "broken.png", "size": [10, 10], "heads": [[0, 0, 5, 5]], "laeo_pairs": [[0, 3]]}
    worse = {"image": "worse.png", "size": [10, 10], "heads": [[0, 0, 5, 5]]}
    p.write_text(json.dumps([good, bad, worse]))
    with pytest.raises(AnnotationError) as exc:
        load_annotations(p)
    ids = [rid for rid, _ in exc.value.problems]
    assert ids == ["broken.png", "worse.png"]
    assert "broken.png" in str(exc.value)


def test_boxes_clipped_to_image(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps([{"image": "x", "size": [10, 8], "heads": [[-3, 1, 4, 20], [5, 5, 9, 7]], "laeo_pairs": []}]))
    (rec,) = load_annotations(p)
    assert rec.heads[0] == (0.0, 1.0, 4.0, 8.0)


def test_round_trip_fifty_records(tmp_path):
    records = [rec for _, rec in generate_synthetic(SyntheticSceneSpec(seed=5), 50)]
    p1 = save_annotations(records, tmp_path / "a.json")
    loaded = load_annotations(p1)
    assert loaded == records
    p2 = save_annotations(loaded, tmp_path / "b.json")
    assert p1.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------- ground truth


def test_two_heads_one_positive():
    gt = to_ground_truth(_record([(0, 0, 10, 10), (50, 50, 60, 60)], [(0, 1)]))
    assert len(gt) == 1 and gt.instances[0].laeo == 1


def test_four_heads_one_positive():
    gt = to_ground_truth(_record([(0, 0, 10, 10), (20, 20, 30, 30), (50, 50, 60, 60), (70, 0, 80, 10)], [(1, 3)]))
    assert len(gt) == 6
    assert sum(i.laeo for i in gt.instances) == 1


def test_full_image_box_normalizes():
    gt = to_ground_truth(_record([(0, 0, 64, 48), (0, 0, 32, 24)], [], size=(64, 48)))
    assert {gt.instances[0].head_a.as_tuple(), gt.instances[0].head_b.as_tuple()} >= {(0.5, 0.5, 1.0, 1.0)}


# ---------------------------------------------------------------- augmentation


def _image(h=100, w=100, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


def test_flip_twice_identity():
    gt = to_ground_truth(THREE)
    img = _image()
    img2, gt2 = hflip(*hflip(img, gt))
    assert np.array_equal(img2, img)
    for a, b in zip(gt.instances, gt2.instances):
        assert np.allclose(a.head_a.as_tuple(), b.head_a.as_tuple(), atol=1e-9)
        assert np.allclose(a.head_b.as_tuple(), b.head_b.as_tuple(), atol=1e-9)
        assert a.laeo == b.laeo


def test_flip_maps_cx():
    gt = to_ground_truth(THREE)
    _, f = hflip(_image(), gt)
    for a, b in zip(gt.instances, f.instances):
        assert b.head_a.cx == pytest.approx(1 - a.head_a.cx)
        assert b.head_a.cy == a.head_a.cy


def test_photometric_only_touches_pixels():
    gt = to_ground_truth(THREE)
    cfg = AugmentationConfig(hflip_prob=0, photometric_prob=1, crop_prob=0, resize_scales=(1.0,), base_short_side=None)
    img = _image()
    out, gt2 = augment(img, gt, cfg, np.random.default_rng(0))
    assert gt2 == gt and gt2.instances == gt.instances
    assert not np.array_equal(out, img)
    assert np.array_equal(adjust_brightness_contrast(img, 1.0, 1.0), img)


def test_crop_hand_computed():
    gt = to_ground_truth(THREE)
    _, g, dropped = crop(_image(), gt, (5, 5, 85, 85))
    assert dropped == 0 and g.image_size == (80, 80)
    expected = {
        (10, 10, 20, 20): (10 / 80, 10 / 80, 10 / 80, 10 / 80),
        (30, 40, 50, 60): (35 / 80, 45 / 80, 20 / 80, 20 / 80),
        (60, 20, 80, 40): (65 / 80, 25 / 80, 20 / 80, 20 / 80),
    }

    def pixel_box(b):
        return tuple(int(round(v * 100)) for v in (b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2))

    for old, new in zip(gt.instances, g.instances):
        for ob, nb in ((old.head_a, new.head_a), (old.head_b, new.head_b)):
            assert np.allclose(nb.as_tuple(), expected[pixel_box(ob)], atol=1e-12)


def test_crop_drops_mostly_outside_heads():
    gt = to_ground_truth(THREE)
    # keeps 2/20 of the third head's width: below the 25% survival threshold
    _, g, dropped = crop(_image(), gt, (0, 0, 62, 100))
    assert len(g) == 1 and dropped == pytest.approx(2 / 3)


def test_zero_survivors_falls_back_to_original():
    gt = to_ground_truth(_record([(0, 0, 10, 10), (90, 90, 100, 100)], [(0, 1)]))
    # small crops can rarely keep both corner heads
    cfg = AugmentationConfig(hflip_prob=0, photometric_prob=0, crop_prob=1, crop_min_frac=0.3,
                             resize_scales=(1.0,), base_short_side=None, max_tries=10)
    img = _image()
    rng = np.random.default_rng(0)
    outs = [augment(img, gt, cfg, rng) for _ in range(20)]
    assert all(len(g) == 1 for _, g in outs)
    assert any(o is img for o, _ in outs)


def test_augmentation_seeded_and_label_preserving():
    gt = to_ground_truth(THREE)
    img = _image()
    cfg = AugmentationConfig(base_short_side=64)
    a = [augment(img, gt, cfg, np.random.default_rng(9)) for _ in range(2)]
    assert np.array_equal(a[0][0], a[1][0]) and a[0][1] == a[1][1]
    rng = np.random.default_rng(1)
    for _ in range(50):
        _, g = augment(img, gt, cfg, rng)
        labels = sorted(i.laeo for i in g.instances)
        assert set(labels) <= {0, 1} and sum(labels) <= 1
        assert all(0 <= b.cx <= 1 for i in g.instances for b in i.pair())


def test_no_augmentation_is_identity():
    gt = to_ground_truth(THREE)
    img = _image()
    out, g = augment(img, gt, NO_AUGMENTATION, np.random.default_rng(0))
    assert np.array_equal(out, img) and g == gt


# ---------------------------------------------------------------- synthetic scenes


def test_facing_each_other_positive():
    c = np.array([[20.0, 50.0], [80.0, 50.0]])
    r = np.array([8.0, 8.0])
    assert mutual_pairs(c, r, np.array([0.0, math.pi])) == [(0, 1)]


def test_facing_away_negative():
    c = np.array([[20.0, 50.0], [80.0, 50.0]])
    r = np.array([8.0, 8.0])
    assert mutual_pairs(c, r, np.array([math.pi, 0.0])) == []
    assert mutual_pairs(c, r, np.array([0.0, 0.0])) == []


def _ray_hits(src, angle, dst, radius, step=0.01, reach=400.0):
    """Sample the ray densely and test its closest approach to dst."""
    t = np.arange(0.0, reach, step)
    pts = src[None] + t[:, None] * np.array([np.cos(angle), np.sin(angle)])[None]
    return bool(np.hypot(*(pts - dst).T).min() < radius / 2)


def test_labels_agree_with_ray_sampling_oracle():
    spec = SyntheticSceneSpec(seed=11)
    n_pos = n_pairs = 0
    for k in range(1000):
        _, rec = generate_scene(spec, k)
        c, r, a = rec.meta["centers"], rec.meta["radii"], rec.meta["angles"]
        oracle = {
            (i, j)
            for i in range(len(c))
            for j in range(i + 1, len(c))
            if _ray_hits(c[i], a[i], c[j], r[j]) and _ray_hits(c[j], a[j], c[i], r[i])
        }
        assert set(rec.positive_pairs) == oracle, f"scene {k}"
        n_pos += len(oracle)
        n_pairs += math.comb(len(c), 2)
    assert 0.05 < n_pos / n_pairs < 0.6


def test_synthetic_deterministic():
    spec = SyntheticSceneSpec(seed=3, background="noise")
    a, b = generate_scene(spec, 7), generate_scene(spec, 7)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    assert not np.array_equal(a[0], generate_scene(spec, 8)[0])


def test_synthetic_heads_inside_image():
    spec = SyntheticSceneSpec(seed=4)
    for img, rec in generate_synthetic(spec, 50):
        assert img.shape == (96, 96, 3) and img.dtype == np.uint8
        assert all(0 <= x1 < x2 <= 96 and 0 <= y1 < y2 <= 96 for x1, y1, x2, y2 in rec.heads)


# ---------------------------------------------------------------- normalization


def test_mean_pixel_maps_to_zero():
    px = np.array(IMAGENET_MEAN) * 255
    t = normalize_image(np.broadcast_to(px, (2, 2, 3)).astype(np.float32).round().astype(np.uint8))
    assert t.abs().max() < 0.5 / 255 / min(IMAGENET_STD) + 1e-6


def test_constant_image_constant_channels():
    t = normalize_image(np.full((5, 7, 3), 77, np.uint8))
    assert t.shape == (3, 5, 7)
    for ch in t:
        assert torch.all(ch == ch[0, 0])


def test_normalize_round_trip():
    img = _image(13, 17)
    back = denormalize_image(normalize_image(img).double())
    assert np.abs(back - img / 255.0).max() < 1e-6
