from fractions import Fraction

import numpy as np
import pytest

from advshift import metrics as M
from advshift.boxes import from_corners, iou, iou_matrix, to_corners
from advshift.detector import BoxLabel, Detection

from conftest import random_model


def test_iou_examples():
    b = (0.5, 0.5, 0.2, 0.2)
    assert iou(b, b) == 1.0
    assert iou(b, (0.1, 0.1, 0.1, 0.1)) == 0.0
    a = from_corners(0, 0, 2, 2)
    c = from_corners(1, 1, 3, 3)
    assert iou(a, c) == pytest.approx(1 / 7, abs=1e-15)
    assert iou((0.5, 0.5, 0.0, 0.2), b) == 0.0
    assert to_corners(from_corners(0.1, 0.2, 0.4, 0.8)) == pytest.approx((0.1, 0.2, 0.4, 0.8))


def test_iou_matrix_agrees_with_pairwise():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.1, 0.5, size=(5, 4))
    b = rng.uniform(0.1, 0.5, size=(4, 4))
    m = iou_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-15)


def test_ap_hand_case():
    gts = {0: [(0.2, 0.2, 0.2, 0.2), (0.7, 0.7, 0.2, 0.2)]}
    dets = [(0, 0.9, (0.2, 0.2, 0.2, 0.2)), (0, 0.8, (0.45, 0.45, 0.1, 0.1)), (0, 0.7, (0.7, 0.7, 0.2, 0.2))]
    # precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 -> 1/2 * 1 + 1/2 * 2/3
    assert M.average_precision(dets, gts) == pytest.approx(0.8333333333333334, abs=1e-12)


def test_ap_edge_cases():
    assert M.average_precision([], {0: []}) is None
    assert M.average_precision([(0, 0.5, (0.5, 0.5, 0.1, 0.1))], {0: []}) == 0.0
    assert M.average_precision([], {0: [(0.5, 0.5, 0.1, 0.1)]}) == 0.0
    b = (0.5, 0.5, 0.2, 0.2)
    # a duplicate detection of one GT is a false positive
    assert M.average_precision([(0, 0.9, b), (0, 0.8, b)], {0: [b]}) == 1.0
    assert M.average_precision([(0, 0.9, (0.1, 0.1, 0.1, 0.1)), (0, 0.8, b)], {0: [b]}) == 0.5


def _oracle_ap(dets, gts, thr=0.5):
    """Enumerate every score threshold, match from scratch, interpolate exactly."""
    n_gt = sum(len(v) for v in gts.values())
    scores = sorted({s for _, s, _ in dets}, reverse=True)
    points = []
    for t in scores:
        kept = sorted([d for d in dets if d[1] >= t], key=lambda d: -d[1])
        used = {k: [False] * len(v) for k, v in gts.items()}
        tp = 0
        for img, _, box in kept:
            cands = gts.get(img, [])
            if not cands:
                continue
            vals = [iou(box, g) for g in cands]
            j = max(range(len(vals)), key=lambda k: (vals[k], -k))
            if vals[j] >= thr and not used[img][j]:
                used[img][j] = True
                tp += 1
        points.append((Fraction(tp, n_gt), Fraction(tp, len(kept))))
    ap = Fraction(0)
    prev_r = Fraction(0)
    for k, (r, _) in enumerate(points):
        if r > prev_r:
            ap += (r - prev_r) * max(p for _, p in points[k:])
            prev_r = r
    return ap


def test_ap_matches_bruteforce_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n_img = int(rng.integers(1, 3))
        gts = {}
        for i in range(n_img):
            gts[i] = [tuple(rng.uniform(0.2, 0.8, 2)) + tuple(rng.uniform(0.1, 0.3, 2))
                      for _ in range(int(rng.integers(0, 3)))]
        if sum(len(v) for v in gts.values()) == 0:
            gts[0] = [(0.5, 0.5, 0.2, 0.2)]
        dets = []
        for _ in range(int(rng.integers(0, 11))):
            img = int(rng.integers(n_img))
            if gts.get(img) and rng.random() < 0.6:
                g = gts[img][int(rng.integers(len(gts[img])))]
                box = tuple(np.asarray(g) + rng.normal(0, 0.03, 4) * np.array([1, 1, 0.5, 0.5]))
            else:
                box = tuple(rng.uniform(0.2, 0.8, 2)) + tuple(rng.uniform(0.1, 0.3, 2))
            dets.append((img, float(rng.random()), box))
        got = M.average_precision(dets, gts)
        want = _oracle_ap(dets, gts) if dets else Fraction(0)
        assert abs(got - float(want)) <= 1e-12


def test_mean_ap_skips_undefined():
    assert M.mean_ap([0.5, None, 1.0]) == 0.75
    with pytest.raises(M.MetricError):
        M.mean_ap([None, None])


def test_evaluate_detections_per_class():
    labels = [[BoxLabel(0, 0.3, 0.3, 0.2, 0.2), BoxLabel(1, 0.7, 0.7, 0.2, 0.2)]]
    dets = [[Detection(0, 0.9, (0.3, 0.3, 0.2, 0.2)), Detection(0, 0.8, (0.7, 0.7, 0.2, 0.2))]]
    res = M.evaluate_detections(dets, labels, 3)
    assert res.per_class == [1.0, 0.0, None]
    assert res.mAP == 0.5
    assert res.row() == [1.0, 0.0, "", 0.5]


# ---------------------------------------------------------------------------
# Frechet distance


def test_fit_gaussian_examples():
    s = M.fit_gaussian(np.array([[0.0], [2.0]]))
    assert s.mu[0] == 1.0 and s.sigma[0, 0] == 2.0
    same = M.fit_gaussian(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert np.all(same.sigma == 0)
    r = M.fit_gaussian(np.random.default_rng(0).normal(size=(50, 6)))
    assert np.max(np.abs(r.sigma - r.sigma.T)) <= 1e-12
    with pytest.raises(M.MetricError):
        M.fit_gaussian(np.zeros((1, 3)))


def _stats(mu, sigma):
    return M.FeatureStats(np.atleast_1d(np.asarray(mu, float)), np.atleast_2d(np.asarray(sigma, float)), 10)


def test_fd_identity_and_closed_form():
    x = np.random.default_rng(1).normal(size=(40, 5))
    s = M.fit_gaussian(x)
    assert M.frechet_distance(s, s) < 1e-8
    assert abs(M.frechet_distance(_stats(0.0, 1.0), _stats(1.0, 4.0)) - 2.0) <= 1e-10


def test_fd_rotation_invariance_and_symmetry():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(60, 6))
    b = rng.normal(size=(60, 6)) * 1.5 + 0.3
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    fa, fb = M.fit_gaussian(a), M.fit_gaussian(b)
    ra, rb = M.fit_gaussian(a @ q), M.fit_gaussian(b @ q)
    assert abs(M.frechet_distance(fa, fb) - M.frechet_distance(ra, rb)) <= 1e-8
    assert abs(M.frechet_distance(fa, fb) - M.frechet_distance(fb, fa)) <= 1e-8


def test_fd_errors():
    with pytest.raises(M.MetricError):
        M.frechet_distance(_stats([0, 0], np.eye(2)), _stats([0], [[1]]))
    bad = _stats([0, 0], [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(M.MetricError):
        M.frechet_distance(bad, _stats([0, 0], np.eye(2)))


def test_fd_diagonal_closed_form():
    # commuting covariances: FD = |dmu|^2 + sum (sqrt(a) - sqrt(b))^2
    a = _stats([0, 1, 2], np.diag([1.0, 4.0, 9.0]))
    b = _stats([1, 1, 0], np.diag([4.0, 1.0, 1.0]))
    assert abs(M.frechet_distance(a, b) - (1 + 0 + 4 + 1 + 1 + 4)) <= 1e-10


def test_pooled_features_deterministic_and_order_free():
    params = random_model(0)
    imgs = np.random.default_rng(3).random((6, 64, 64, 3))
    f = M.extract_pooled_features(params, imgs, batch_size=4)
    assert f.shape == (6, 32)
    perm = [3, 1, 5, 0, 2, 4]
    g = M.extract_pooled_features(params, imgs[perm], batch_size=2)
    np.testing.assert_allclose(g, f[perm], rtol=0, atol=1e-12)
    assert M.extract_pooled_features(params, imgs, batch_size=4).tobytes() == f.tobytes()


def test_shift_analysis_self_is_standard():
    params = random_model(1)
    imgs = np.random.default_rng(4).random((8, 64, 64, 3))
    rep = M.shift_analysis(params, imgs, imgs)
    assert rep.fd < 1e-6
    assert rep.recommendation == "standard_training"
    assert rep.map_ratio is None
    rep = M.shift_analysis(params, imgs, imgs[::-1] * 0.5, map_st=0.0, map_at=0.3)
    assert rep.map_ratio is None and rep.recommendation in ("uncertain", "standard_training",
                                                            "adversarial_training")
    with pytest.raises(M.MetricError):
        M.shift_analysis(params, imgs[:0], imgs)


def test_calibration_and_recommendation():
    cal = M.Calibration.from_sweep([0.0, 1.0, 2.0, 3.0], [0.9, 0.95, 1.05, 1.1])
    assert cal.threshold == pytest.approx(1.5)
    assert M.recommend(2.0, cal) == "adversarial_training"
    assert M.recommend(1.0, cal) == "standard_training"
    assert M.recommend(1.6, cal) == "uncertain"
    assert M.recommend(5.0, None, 1.2) == "adversarial_training"
    assert M.recommend(5.0, None, 0.8) == "standard_training"
    assert M.recommend(5.0) == "uncertain"


def test_spearman_and_inversions():
    assert M.spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert M.spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert np.isnan(M.spearman([1, 2, 3], [5, 5, 5]))
    assert M.count_inversions([0, 1, 2, 1.5, 3]) == 1
    assert M.count_inversions([0, 1, 1, 2]) == 0
