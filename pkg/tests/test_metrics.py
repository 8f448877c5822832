import math

import numpy as np
import pytest

from vesseldiff.metrics import (HIST_BINS, UndefinedMetricError, acc, ahd, auc,
                                dsc, hist_distance, histogram, score_pair)


# -- brute-force oracles ------------------------------------------------------

def dsc_brute(pred, gt):
    inter = fp = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        inter += int(p == 1 and g == 1)
        fp += int(p == 1 and g == 0)
        fn += int(p == 0 and g == 1)
    if inter == 0 and fp == 0 and fn == 0:
        return 1.0
    return 2.0 * inter / (2.0 * inter + fp + fn)


def auc_brute(scores, gt):
    s = scores.ravel()
    g = gt.ravel()
    pos = s[g == 1]
    neg = s[g == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            if a > b:
                total += 1.0
            elif a == b:
                total += 0.5
    return total / (len(pos) * len(neg))


def ahd_brute(pred, gt):
    p_pts = [tuple(q) for q in np.argwhere(pred == 1)]
    g_pts = [tuple(q) for q in np.argwhere(gt == 1)]
    if not p_pts and not g_pts:
        return 0.0
    if not p_pts or not g_pts:
        return math.hypot(*pred.shape)
    d1 = sum(min(math.dist(p, g) for g in g_pts) for p in p_pts) / len(p_pts)
    d2 = sum(min(math.dist(g, p) for p in p_pts) for g in g_pts) / len(g_pts)
    return 0.5 * (d1 + d2)


def test_oracles_200_random_instances():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        density = rng.uniform(0.1, 0.9)
        pred = (rng.random((8, 8)) < density).astype(float)
        gt = (rng.random((8, 8)) < density).astype(float)
        scores = rng.random((8, 8))
        # quantize to force score ties so the tie path is exercised
        scores = np.round(scores * 4) / 4
        worst = max(worst, abs(dsc(pred, gt) - dsc_brute(pred, gt)))
        worst = max(worst, abs(acc(pred, gt) - (pred == gt).mean()))
        worst = max(worst, abs(ahd(pred, gt) - ahd_brute(pred, gt)))
        if 0 < gt.sum() < gt.size:
            worst = max(worst, abs(auc(scores, gt) - auc_brute(scores, gt)))
    assert worst < 1e-12


class TestDsc:
    def test_both_empty(self):
        assert dsc(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0

    def test_disjoint(self):
        p = np.zeros((2, 2))
        g = np.zeros((2, 2))
        p[0, 0] = 1
        g[1, 1] = 1
        assert dsc(p, g) == 0.0

    def test_hand_value(self):
        p = np.array([[1.0, 1.0], [0.0, 0.0]])
        g = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert dsc(p, g) == pytest.approx(0.5)

    def test_nonbinary_rejected(self):
        with pytest.raises(ValueError):
            dsc(np.full((2, 2), 0.5), np.zeros((2, 2)))


class TestAuc:
    def test_perfect_separation(self):
        g = np.array([0.0, 0.0, 1.0, 1.0])
        assert auc(np.array([0.1, 0.2, 0.8, 0.9]), g) == 1.0
        assert auc(np.array([0.8, 0.9, 0.1, 0.2]), g) == 0.0

    def test_all_tied_half(self):
        g = np.array([0.0, 1.0, 0.0, 1.0])
        assert auc(np.full(4, 0.3), g) == pytest.approx(0.5)

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auc(np.random.default_rng(1).random(8), np.ones(8))


class TestAhd:
    def test_identical_sets_zero(self):
        m = (np.random.default_rng(2).random((8, 8)) > 0.5).astype(float)
        m[0, 0] = 1.0
        assert ahd(m, m) == 0.0

    def test_single_pixel_offset(self):
        p = np.zeros((8, 8))
        g = np.zeros((8, 8))
        p[1, 1] = 1
        g[4, 5] = 1
        assert ahd(p, g) == pytest.approx(5.0)

    def test_one_empty_sentinel(self):
        p = np.zeros((3, 4))
        g = np.zeros((3, 4))
        g[0, 0] = 1
        assert ahd(p, g) == pytest.approx(5.0)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a = (rng.random((8, 8)) > 0.6).astype(float)
        b = (rng.random((8, 8)) > 0.6).astype(float)
        assert ahd(a, b) == pytest.approx(ahd(b, a), abs=1e-15)


class TestHistogram:
    def test_sums_to_one(self):
        h = histogram(np.random.default_rng(4).random((16, 16)))
        assert h.sum() == pytest.approx(1.0)
        assert len(h) == HIST_BINS

    def test_constant_image_single_bin(self):
        h = histogram(np.full((4, 4), 0.5))
        assert (h > 0).sum() == 1
        assert h.max() == 1.0

    def test_value_one_in_last_bin(self):
        h = histogram(np.ones((2, 2)))
        assert h[-1] == 1.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            histogram(np.array([[1.5]]))


class TestHistDistance:
    def test_identical_zero(self):
        h = histogram(np.random.default_rng(5).random((8, 8)))
        e, c = hist_distance(h, h)
        assert e == 0.0
        assert c == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal_cosine_one(self):
        h1 = np.zeros(HIST_BINS)
        h2 = np.zeros(HIST_BINS)
        h1[0] = 1.0
        h2[-1] = 1.0
        e, c = hist_distance(h1, h2)
        assert e == pytest.approx(math.sqrt(2.0))
        assert c == pytest.approx(1.0)

    def test_euclidean_hand_value(self):
        h1 = np.zeros(4)
        h2 = np.zeros(4)
        h1[0], h2[0] = 1.0, 0.6
        h2[1] = 0.4
        e, _ = hist_distance(h1, h2)
        assert e == pytest.approx(math.hypot(0.4, 0.4))


def test_score_pair_consistency():
    rng = np.random.default_rng(6)
    probs = rng.random((8, 8))
    gt = (rng.random((8, 8)) > 0.5).astype(float)
    s = score_pair(probs, gt)
    pred = (probs >= 0.5).astype(float)
    assert s.dsc == dsc(pred, gt)
    assert s.auc == auc(probs, gt)
    assert s.acc == acc(pred, gt)
    assert s.ahd == ahd(pred, gt)
