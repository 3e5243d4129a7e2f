import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reverse_aging.detector import (AnomalyResult, DetectConfig, area_open, blob_stats, center_abs_diff,
                                    clean_mask, clear_border, detect, detect_pair, dilate_octagon, iou,
                                    octagon, predict_fake, scaled_min_area, threshold_mask, to_gray)
from reverse_aging.models import GeneratorSpec, build_generator

from oracles import area_open_oracle, blobs_oracle, clear_border_oracle, dilate_oracle, random_mask

masks = arrays(bool, st.tuples(st.integers(1, 24), st.integers(1, 24)))


def test_to_gray_examples():
    white = np.ones((3, 2, 2))
    assert np.allclose(to_gray(white), 0.9999)
    green = np.zeros((3, 1, 1))
    green[1] = 1
    assert to_gray(green)[0, 0] == pytest.approx(0.5870)
    assert np.allclose(to_gray(np.full((3, 2, 2), 0.4)), 0.4 * 0.9999)
    with pytest.raises(ValueError):
        to_gray(np.zeros((4, 2, 2)))


def test_center_abs_diff_examples():
    g = np.random.default_rng(0).random((5, 5))
    assert np.all(center_abs_diff(g, g) == 0)
    real = np.array([0.1, 0.2, 0.3, 0.4, 0.9])
    out = center_abs_diff(real, np.zeros(5))
    np.testing.assert_allclose(out, [0.2, 0.1, 0.0, 0.1, 0.6], atol=1e-12)
    # even count: median is the mean of the two central values
    np.testing.assert_allclose(center_abs_diff(np.array([1.0, 2, 3, 10]), np.zeros(4)), [1.5, 0.5, 0.5, 7.5])
    with pytest.raises(ValueError):
        center_abs_diff(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.5, 0.5))
def test_center_abs_diff_bias_invariant(seed, bias):
    rng = np.random.default_rng(seed)
    real, fake = rng.random((8, 8)), rng.random((8, 8))
    base = center_abs_diff(real, fake)
    np.testing.assert_allclose(center_abs_diff(real, fake + bias), base, atol=1e-12)
    np.testing.assert_allclose(center_abs_diff(real + bias, fake), base, atol=1e-12)


def test_threshold_examples():
    diff = np.array([0.2, 0.1, 0.0, 0.1, 0.6])
    np.testing.assert_array_equal(threshold_mask(diff, DetectConfig("absolute", 0.25)), [0, 0, 0, 0, 1])
    zero = np.zeros(5)
    assert not threshold_mask(zero, DetectConfig("absolute", 0.1)).any()
    assert not threshold_mask(zero, DetectConfig("peak_fraction", 0.3)).any()
    np.testing.assert_array_equal(threshold_mask(diff, DetectConfig("peak_fraction", 0.5)),
                                  diff > 0.3)


def test_detect_config_validation():
    with pytest.raises(ValueError):
        DetectConfig(eps_value=0)
    with pytest.raises(ValueError):
        DetectConfig(eps_mode="median")
    with pytest.raises(ValueError):
        DetectConfig(min_area=-1)
    assert scaled_min_area(256) == 30 and scaled_min_area(64) == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
def test_threshold_monotone(seed, e1, e2):
    diff = np.random.default_rng(seed).random((10, 10))
    lo, hi = sorted((e1, e2))
    small = threshold_mask(diff, DetectConfig("absolute", hi))
    big = threshold_mask(diff, DetectConfig("absolute", lo))
    assert np.all(big | ~small)


def test_area_open_examples():
    m = np.zeros((5, 8), bool)
    m[0, 0:2] = True            # size 2
    m[3, 3:7] = True            # size 4
    out = area_open(m, 3)
    assert out.sum() == 4 and out[3, 3:7].all()
    diag = np.array([[1, 0], [0, 1]], bool)
    assert not area_open(diag, 2).any()


def test_octagon_shapes():
    assert octagon(0).tolist() == [[True]]
    np.testing.assert_array_equal(octagon(1), [[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    se = octagon(3)
    assert se.shape == (7, 7) and se.sum() == 37
    assert not se[0, 1] and se[0, 2] and se[3, 0]


def test_dilate_examples():
    m = np.random.default_rng(0).random((9, 9)) > 0.7
    np.testing.assert_array_equal(dilate_octagon(m, 0), m)
    dot = np.zeros((5, 5), bool)
    dot[2, 2] = True
    out = dilate_octagon(dot, 1)
    assert out.sum() == 5 and out[1, 2] and out[2, 1] and not out[1, 1]


def test_clear_border_examples():
    m = np.zeros((7, 7), bool)
    m[0, 3] = m[1, 3] = True     # touches top edge
    m[2, 4] = True               # diagonal neighbour of the border region
    m[4, 1:3] = True             # interior
    out = clear_border(m)
    assert out.sum() == 2 and out[4, 1] and out[4, 2]
    assert not clear_border(np.ones((4, 4), bool)).any()


def test_blob_stats_examples():
    assert blob_stats(np.zeros((4, 4), bool)) == []
    m = np.zeros((4, 4), bool)
    m[:2, :2] = True
    (b,) = blob_stats(m)
    assert b.area == 4 and b.bbox == (0, 0, 1, 1) and b.centroid == (0.5, 0.5)


@pytest.mark.parametrize("seed", range(40))
def test_morphology_matches_oracles(seed):
    rng = np.random.default_rng(seed)
    m = random_mask(rng, 32)
    k = int(rng.integers(0, 6))
    r = int(rng.integers(0, 4))
    np.testing.assert_array_equal(area_open(m, k), area_open_oracle(m, k))
    np.testing.assert_array_equal(dilate_octagon(m, r), dilate_oracle(m, r))
    np.testing.assert_array_equal(clear_border(m), clear_border_oracle(m))
    got = [(b.area, b.bbox) for b in blob_stats(m)]
    want = blobs_oracle(m)
    assert got == [(a, bb) for a, bb, _ in want]
    for b, (_, _, c) in zip(blob_stats(m), want):
        assert b.centroid == pytest.approx(c, abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(masks, st.integers(0, 6), st.integers(0, 3))
def test_morphology_algebra(m, k, r):
    d = dilate_octagon(m, r)
    assert np.all(d | ~m)                                   # extensive
    a = area_open(m, k)
    assert np.all(m | ~a)                                   # anti-extensive
    np.testing.assert_array_equal(area_open(a, k), a)       # idempotent
    c = clear_border(m)
    assert np.all(m | ~c)
    np.testing.assert_array_equal(clear_border(c), c)
    assert sum(b.area for b in blob_stats(m)) == m.sum()
    for b in blob_stats(m):
        assert b.area >= 1
        assert b.bbox[0] <= b.centroid[0] <= b.bbox[2] and b.bbox[1] <= b.centroid[1] <= b.bbox[3]


def test_clear_border_leaves_no_border_component():
    m = random_mask(np.random.default_rng(9), 40)
    out = clear_border(m)
    for b in blob_stats(out):
        r0, c0, r1, c1 = b.bbox
        assert r0 > 0 and c0 > 0 and r1 < m.shape[0] - 1 and c1 < m.shape[1] - 1


def test_iou_examples():
    t = np.zeros((4, 4), bool)
    t[1:3, 1:3] = True
    assert iou(t, t) == 1.0
    other = np.zeros_like(t)
    other[0, 0] = True
    assert iou(other, t) == 0.0
    half = np.zeros_like(t)
    half[1, 1:3] = True
    assert iou(half, t) == 0.5
    assert iou(np.zeros_like(t), np.zeros_like(t)) == 1.0
    with pytest.raises(ValueError):
        iou(t, t[:3])


def test_step_order_matters():
    # two 2-pixel fragments; area_open(3) deletes them before dilation,
    # but once dilated they merge into a component that survives
    m = np.zeros((20, 20), bool)
    m[8, 6:8] = True
    m[8, 10:12] = True
    cfg = DetectConfig("absolute", 0.5, min_area=3, octagon_radius=2, apply_clear_border=False)
    ordered = clean_mask(m.astype(float), cfg)
    swapped = area_open(dilate_octagon(m, 2), 3)
    assert not ordered.any()
    assert swapped.any()


def _identity_like(tile):
    return np.asarray(tile, np.float32)


def test_detect_identity_pair_is_empty():
    rng = np.random.default_rng(0)
    tile = rng.uniform(-1, 1, (3, 32, 32)).astype(np.float32)
    for cfg in (DetectConfig("absolute", 1e-6), DetectConfig("peak_fraction", 0.01, 0, 0, False)):
        res = detect_pair(tile, _identity_like(tile), cfg)
        assert isinstance(res, AnomalyResult)
        assert not res.mask.any() and res.blobs == [] and np.all(res.diff == 0)


def test_detect_finds_planted_difference():
    rng = np.random.default_rng(1)
    real = rng.uniform(-0.05, 0.05, (3, 32, 32)).astype(np.float32)
    fake = real.copy()
    real[:, 12:18, 10:16] -= 0.6
    res = detect_pair(real, fake, DetectConfig("absolute", 0.1, 2, 1))
    assert len(res.blobs) == 1
    assert res.blobs[0].bbox == (11, 9, 18, 16)


def test_predict_fake_with_generator():
    g = build_generator(GeneratorSpec(base_channels=4, n_residual_blocks=1, image_size=16), 0)
    tile = np.random.default_rng(0).uniform(-1, 1, (3, 16, 16)).astype(np.float32)
    a, b = predict_fake(g, tile), predict_fake(g, tile)
    assert a.shape == tile.shape and np.all(np.abs(a) <= 1)
    assert a.tobytes() == b.tobytes()
    res = detect(g, tile, DetectConfig())
    assert res.mask.shape == (16, 16) and res.diff.min() >= 0
