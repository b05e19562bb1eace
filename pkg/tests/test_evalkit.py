import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from camogen.evalkit import (MetricReport, ProbeConfig, RandomConvFeatures, downstream_probe, e_measure,
                             feature_distance, fid_from_features, frechet_distance, kid_from_features,
                             kid_lower_bound, kid_subsets, mae, mean_metrics, s_measure, weighted_f)
from camogen.evalkit.metrics import gaussian_kernel, nearest_foreground

METRICS = [(mae, oracles.mae), (s_measure, oracles.s_measure), (e_measure, oracles.e_measure),
           (weighted_f, oracles.weighted_f)]


def all_3x3():
    return [np.array(bits, dtype=np.float64).reshape(3, 3) for bits in itertools.product((0, 1), repeat=9)]


def test_gaussian_kernel_matches_oracle():
    np.testing.assert_allclose(gaussian_kernel(7, 5.0), oracles.gaussian(), atol=1e-17)
    assert gaussian_kernel().sum() == pytest.approx(1.0, abs=1e-15)


def test_nearest_foreground_ties_lowest_index():
    gt = np.zeros((3, 3), bool)
    gt[0, 1] = gt[1, 0] = True
    dist, idx = nearest_foreground(gt)
    assert idx[0, 0] == 1 and dist[0, 0] == 1.0
    assert dist[2, 2] == np.sqrt(5) and idx[2, 2] == 1  # tie at sqrt(5): lowest flat index


def test_exhaustive_3x3_gt_against_oracles():
    # every binary gt, paired with four preds: itself, its complement, two random maps
    rng = np.random.default_rng(0)
    masks = all_3x3()
    for gt in masks:
        preds = [gt, 1 - gt, masks[rng.integers(512)], rng.uniform(size=(3, 3))]
        for pred in preds:
            for impl, ref in METRICS:
                assert abs(impl(pred, gt) - ref(pred.tolist(), gt.tolist())) < 1e-8, impl.__name__


def test_random_16x16_against_oracles():
    rng = np.random.default_rng(1)
    for k in range(100):
        gt = (rng.uniform(size=(16, 16)) < rng.uniform(0.05, 0.6)).astype(np.float64)
        if k % 3 == 0:
            pred = np.clip(gt * 0.7 + rng.normal(0, 0.25, gt.shape), 0, 1)
        else:
            pred = rng.uniform(size=(16, 16))
        for impl, ref in METRICS:
            assert abs(impl(pred, gt) - ref(pred.tolist(), gt.tolist())) < 1e-8, (k, impl.__name__)


def square(size=5, lo=1, hi=4):
    g = np.zeros((size, size))
    g[lo:hi, lo:hi] = 1
    return g


def test_hand_cases_5x5():
    gt = square()
    assert mae(gt, gt) == 0 and s_measure(gt, gt) == pytest.approx(1, abs=1e-12)
    assert e_measure(gt, gt) == pytest.approx(1, abs=1e-12)
    assert weighted_f(gt, gt) == pytest.approx(1, abs=1e-12)
    inv = 1 - gt
    assert mae(inv, gt) == 1.0 and s_measure(inv, gt) == 0.0
    # zero padding of the 7x7 blur dilutes the error near the border of tiny images
    assert 0 < weighted_f(inv, gt) < 0.3
    big = np.pad(gt, 10)
    assert weighted_f(1 - big, big) == pytest.approx(0, abs=1e-12)
    # one missed foreground pixel
    pred = gt.copy()
    pred[2, 2] = 0
    assert mae(pred, gt) == pytest.approx(1 / 25, abs=1e-15)
    assert 0 < weighted_f(pred, gt) < 1


def test_degenerate_gt():
    z = np.zeros((4, 4))
    assert s_measure(z, z) == 1.0 and e_measure(z, z) == 1.0 and weighted_f(z, z) == 1.0
    p = np.full((4, 4), 0.25)
    assert s_measure(p, z) == pytest.approx(0.75)
    o = np.ones((4, 4))
    assert s_measure(o, o) == 1.0 and e_measure(o, o) == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mae(np.zeros((3, 3)), np.zeros((3, 4)))


@st.composite
def pairs(draw):
    h, w = draw(st.integers(2, 10)), draw(st.integers(2, 10))
    gt = draw(arrays(np.float64, (h, w), elements=st.sampled_from([0.0, 1.0])))
    pred = draw(arrays(np.float64, (h, w), elements=st.floats(0, 1)))
    return pred, gt


@given(pairs())
@settings(max_examples=80, deadline=None)
def test_metric_ranges(pair):
    pred, gt = pair
    assert 0 <= mae(pred, gt) <= 1
    assert 0 <= s_measure(pred, gt) <= 1 + 1e-12
    assert 0 <= e_measure(pred, gt) <= 1 + 1e-12
    assert -1e-12 <= weighted_f(pred, gt) <= 1 + 1e-12


@given(arrays(np.float64, (6, 6), elements=st.sampled_from([0.0, 1.0])))
@settings(max_examples=60, deadline=None)
def test_perfect_prediction(gt):
    assert mae(gt, gt) == 0
    assert s_measure(gt, gt) == pytest.approx(1, abs=1e-9)
    assert e_measure(gt, gt) == pytest.approx(1, abs=1e-12)
    assert weighted_f(gt, gt) == pytest.approx(1, abs=1e-9)


def test_mean_metrics():
    gt = square()
    out = mean_metrics([gt, 1 - gt], [gt, gt])
    assert out["mae"] == 0.5
    with pytest.raises(ValueError):
        mean_metrics([], [])


# -- distances -----------------------------------------------------------------

def test_frechet_closed_form_commuting_covariances():
    rng = np.random.default_rng(2)
    for d in (1, 3, 8):
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        d1, d2 = rng.uniform(0.1, 3, d), rng.uniform(0.1, 3, d)
        s1, s2 = q @ np.diag(d1) @ q.T, q @ np.diag(d2) @ q.T
        mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
        closed = ((mu1 - mu2) ** 2).sum() + (d1 + d2 - 2 * np.sqrt(d1 * d2)).sum()
        assert abs(frechet_distance(mu1, s1, mu2, s2) - closed) < 1e-6


def test_fid_from_features_on_synthetic_gaussians():
    rng = np.random.default_rng(3)
    fa = rng.normal(0.0, 1.0, size=(4000, 4))
    fb = rng.normal(0.5, 2.0, size=(4000, 4))
    ma, mb = fa.mean(0), fb.mean(0)
    ca = (fa - ma).T @ (fa - ma) / (len(fa) - 1)
    cb = (fb - mb).T @ (fb - mb) / (len(fb) - 1)
    w, v = np.linalg.eigh(ca)
    ra = v @ np.diag(np.sqrt(w)) @ v.T
    w2, v2 = np.linalg.eigh(ra @ cb @ ra)
    tr = np.sqrt(np.clip(w2, 0, None)).sum()
    closed = ((ma - mb) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2 * tr
    assert abs(fid_from_features(fa, fb) - closed) < 1e-6
    # population value: 4 * 0.25 + 4 * (1 + 4 - 2 * 2)
    assert abs(fid_from_features(fa, fb) - 5.0) < 0.5
    assert fid_from_features(fa, fa) == 0.0


def test_kid_matches_double_loop():
    rng = np.random.default_rng(4)
    fa, fb = rng.normal(size=(12, 5)), rng.normal(0.3, 1, size=(9, 5))
    assert abs(kid_from_features(fa, fb) - oracles.kid(fa.tolist(), fb.tolist())) < 1e-10


def test_kid_identical_sets_within_bound():
    f = np.random.default_rng(5).normal(size=(64, 10))
    v = kid_from_features(f, f)
    # identical sets: the biased estimate is 0, so the unbiased one sits on its floor
    assert v <= 0 and abs(v - kid_lower_bound(f, f)) < 1e-12
    g = np.random.default_rng(6).normal(size=(64, 10))
    assert kid_from_features(f, g) >= kid_lower_bound(f, g) - 1e-12


def test_kid_separates_shifted_sets():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(64, 8)), rng.normal(size=(64, 8))
    assert kid_from_features(a, b + 1.0) > kid_from_features(a, b)
    mean, std = kid_subsets(a, b + 1.0, subsets=10)
    assert mean > 0 and std >= 0


def test_random_conv_features():
    ex = RandomConvFeatures(seed=0)
    imgs = np.random.default_rng(7).uniform(size=(3, 32, 32, 3))
    f = ex(imgs)
    assert f.shape == (3, 160) and f.dtype == np.float64
    assert np.array_equal(f, RandomConvFeatures(seed=0)(imgs))
    with pytest.raises(ValueError):
        ex(np.zeros((3, 32, 32)))


def test_feature_distance_contract():
    rng = np.random.default_rng(8)
    a = rng.uniform(size=(8, 16, 16, 3))
    assert feature_distance(a, a, kind="fid-proxy") == 0.0
    with pytest.raises(ValueError):
        feature_distance(a[:7], a)
    with pytest.raises(ValueError):
        feature_distance(a, a, kind="lpips")


# -- report and probe -------------------------------------------------------------

def test_metric_report_round_trip():
    r = MetricReport({"mae": 0.1, "s_measure": 0.8}, {"count": 2})
    back = MetricReport.from_json(r.to_json())
    assert back == r and json.loads(r.to_json())["metrics"]["mae"] == 0.1
    with pytest.raises(ValueError):
        MetricReport({"mae": float("nan")})


def test_probe_learns_a_trivial_task():
    rng = np.random.default_rng(9)
    pairs = []
    for _ in range(32):
        m = np.zeros((16, 16))
        y, x = rng.integers(2, 10, 2)
        m[y:y + 5, x:x + 5] = 1
        img = np.stack([m * 0.8 + 0.1] * 3, -1)
        pairs.append((img, m))
    out = downstream_probe(pairs[:24], pairs[24:], ProbeConfig(steps=150, batch_size=8, seed=0))
    assert out["weighted_f"] > 0.8 and out["mae"] < 0.1


def test_probe_deterministic():
    rng = np.random.default_rng(10)
    pairs = [(rng.uniform(size=(8, 8, 3)), (rng.uniform(size=(8, 8)) > 0.5).astype(float)) for _ in range(8)]
    cfg = ProbeConfig(steps=5, batch_size=4, seed=3)
    assert downstream_probe(pairs, pairs, cfg) == downstream_probe(pairs, pairs, cfg)
    with pytest.raises(ValueError):
        ProbeConfig(steps=-1)
