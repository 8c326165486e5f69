"""Box geometry on normalized (cx, cy, w, h) coordinates."""
import numpy as np


def to_corners(box):
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def from_corners(x0, y0, x1, y1):
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def iou(box_a, box_b):
    """Intersection over union of two center-format boxes; 0 for degenerate boxes."""
    ax0, ay0, ax1, ay1 = to_corners(box_a)
    bx0, by0, bx1, by1 = to_corners(box_b)
    area_a = max(ax1 - ax0, 0.0) * max(ay1 - ay0, 0.0)
    area_b = max(bx1 - bx0, 0.0) * max(by1 - by0, 0.0)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return float(inter / (area_a + area_b - inter))


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU between two (N, 4) and (M, 4) arrays of center-format boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    a0 = a[:, :2] - a[:, 2:] / 2
    a1 = a[:, :2] + a[:, 2:] / 2
    b0 = b[:, :2] - b[:, 2:] / 2
    b1 = b[:, :2] + b[:, 2:] / 2
    lo = np.maximum(a0[:, None, :], b0[None, :, :])
    hi = np.minimum(a1[:, None, :], b1[None, :, :])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.prod(np.clip(a1 - a0, 0.0, None), axis=1)
    area_b = np.prod(np.clip(b1 - b0, 0.0, None), axis=1)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out
