"""Detection metrics (VOC-style AP at IoU 0.5) and Frechet-distance domain shift."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .boxes import iou, iou_matrix
from .detector import forward_f1, predict


class MetricError(ValueError):
    pass


def match_detections(detections, ground_truths, iou_threshold=0.5):
    """Greedy VOC matching for one class over a set of images.

    ``detections`` is a list of ``(image_id, score, box)``; ``ground_truths``
    maps image id to a list of boxes. Detections are visited by descending
    score (stable for ties); each one is compared with the ground truth of
    highest IoU in its image and counts as a true positive only if that box
    is still unmatched and clears the threshold.
    Returns the TP flags in visiting order and the GT count.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    matched = {img: np.zeros(len(b), dtype=bool) for img, b in ground_truths.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        img, _, box = detections[i]
        gts = ground_truths.get(img, [])
        if not gts:
            continue
        ious = iou_matrix([box], gts)[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold and not matched[img][j]:
            matched[img][j] = True
            tp[rank] = True
    n_gt = sum(len(b) for b in ground_truths.values())
    return tp, n_gt


def average_precision(detections, ground_truths, iou_threshold=0.5):
    """All-point interpolated AP for one class.

    Returns None when there is neither ground truth nor a detection.
    """
    tp, n_gt = match_detections(detections, ground_truths, iou_threshold)
    if n_gt == 0:
        return None if len(detections) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(per_class_aps):
    """Mean over the classes whose AP is defined."""
    vals = [a for a in per_class_aps if a is not None]
    if not vals:
        raise MetricError("no class has a defined AP")
    return float(sum(vals) / len(vals))


@dataclass
class EvalResult:
    per_class: list
    mAP: float

    def row(self):
        return [("" if a is None else a) for a in self.per_class] + [self.mAP]


def evaluate_detections(all_dets, all_labels, num_classes, iou_threshold=0.5):
    aps = []
    for c in range(num_classes):
        dets = [(i, d.score, d.box) for i, ds in enumerate(all_dets) for d in ds if d.class_id == c]
        gts = {i: [lab.box for lab in labs if lab.class_id == c] for i, labs in enumerate(all_labels)}
        aps.append(average_precision(dets, gts, iou_threshold))
    return EvalResult(aps, mean_ap(aps))


def evaluate(params, images, labels, iou_threshold=0.5, score_threshold=0.01):
    """Per-class AP and mAP of ``params`` on a labeled image set."""
    if len(images) == 0:
        raise MetricError("cannot evaluate on an empty dataset")
    dets = predict(params, images, score_threshold=score_threshold)
    return evaluate_detections(dets, labels, params.config.num_classes, iou_threshold)


# ---------------------------------------------------------------------------
# Frechet distance


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def extract_pooled_features(params, images, batch_size=64):
    """Global average pool of the F1 feature map, one row per image."""
    images = np.asarray(images, dtype=np.float64)
    rows = []
    for start in range(0, len(images), batch_size):
        feats, _ = forward_f1(params, images[start:start + batch_size])
        rows.append(feats.mean(axis=(1, 2)))
    return np.concatenate(rows, axis=0)


def fit_gaussian(features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise MetricError("need at least two feature rows to fit a Gaussian")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (x.shape[0] - 1)
    sigma = (sigma + sigma.T) / 2
    return FeatureStats(mu, sigma, x.shape[0])


def _sqrtm_psd(m, tol):
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -tol:
        raise MetricError(f"covariance is indefinite (eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T, w


def frechet_distance(a, b, tol=1e-8):
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product's square root is taken from the eigenvalues of
    the symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``.
    """
    if a.mu.shape != b.mu.shape:
        raise MetricError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    root_a, _ = _sqrtm_psd(a.sigma, tol)
    _sqrtm_psd(b.sigma, tol)
    inner = root_a @ b.sigma @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min() < -tol:
        raise MetricError(f"covariance product is indefinite (eigenvalue {w.min():.3e})")
    tr_root = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    diff = a.mu - b.mu
    fd = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_root
    return float(max(fd, 0.0))


def dataset_fd(params, images_a, images_b):
    fa = fit_gaussian(extract_pooled_features(params, images_a))
    fb = fit_gaussian(extract_pooled_features(params, images_b))
    return frechet_distance(fa, fb)


# ---------------------------------------------------------------------------
# shift analysis


@dataclass(frozen=True)
class Calibration:
    """FD where the AT/ST mAP ratio crosses 1, with a relative uncertainty band."""

    threshold: float
    band: float = 0.2

    @classmethod
    def from_sweep(cls, fds, ratios, band=0.2):
        """Linear interpolation at the first FD (in FD order) where the ratio reaches 1."""
        order = np.argsort(fds, kind="stable")
        f = np.asarray(fds, dtype=np.float64)[order]
        r = np.asarray(ratios, dtype=np.float64)[order]
        for i in range(len(f)):
            if r[i] >= 1.0:
                if i == 0:
                    return cls(float(f[0]), band)
                f0, f1, r0, r1 = f[i - 1], f[i], r[i - 1], r[i]
                t = (1.0 - r0) / (r1 - r0) if r1 != r0 else 1.0
                return cls(float(f0 + t * (f1 - f0)), band)
        return cls(float(f[-1]) if len(f) else float("inf"), band)


@dataclass
class ShiftReport:
    fd: float
    map_st: float | None
    map_at: float | None
    map_ratio: float | None
    recommendation: str
    threshold: float | None = None

    def to_dict(self):
        return asdict(self)


ZERO_SHIFT_FD = 1e-6


def recommend(fd, calibration=None, map_ratio=None):
    """Verdict from a calibration band if given, else from the measured ratio."""
    if calibration is not None:
        lo = calibration.threshold * (1 - calibration.band)
        hi = calibration.threshold * (1 + calibration.band)
        if fd > hi:
            return "adversarial_training"
        if fd < lo:
            return "standard_training"
        return "uncertain"
    if fd < ZERO_SHIFT_FD:
        return "standard_training"
    if map_ratio is not None:
        return "adversarial_training" if map_ratio > 1.0 else "standard_training"
    return "uncertain"


def shift_analysis(params, source_train, target_test, map_st=None, map_at=None, calibration=None):
    """FD between two image sets under a frozen extractor, plus the AT/ST verdict."""
    if len(source_train) == 0 or len(target_test) == 0:
        raise MetricError("both image sets must be nonempty")
    fd = dataset_fd(params, source_train, target_test)
    ratio = None
    if map_st is not None and map_at is not None and map_st > 0:
        ratio = map_at / map_st
    rec = recommend(fd, calibration, ratio)
    return ShiftReport(fd, map_st, map_at, ratio, rec,
                       None if calibration is None else calibration.threshold)


def spearman(x, y):
    """Spearman rank correlation (average ranks for ties); NaN if either side is constant."""
    if len(set(x)) < 2 or len(set(y)) < 2:
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)


def count_inversions(values):
    """Adjacent decreases in a sequence that should be nondecreasing."""
    v = np.asarray(values)
    return int(np.sum(v[1:] < v[:-1]))


__all__ = [
    "iou",
    "average_precision",
    "mean_ap",
    "evaluate",
    "extract_pooled_features",
    "fit_gaussian",
    "frechet_distance",
    "shift_analysis",
]
