"""Micro single-scale anchor detector with exact backpropagation.

The network is split into a feature extractor ``F1`` (strided 3x3 convs with SiLU) and
a head ``F2`` (two 3x3 convs) that emits an ``S x S x A x (5 + C)`` tensor of
box offsets, objectness logit and class logits per anchor. Everything runs in
float64 on NHWC arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .boxes import iou_matrix

LOSS_SELECTORS = ("det", "cls", "loc", "obj")


class ConfigurationError(ValueError):
    """Shapes or configuration values that cannot work together."""


class LabelError(ValueError):
    """A box label outside the normalized image square."""


@dataclass(frozen=True)
class DetectorConfig:
    grid_size: int = 8
    anchors: tuple = ((0.22, 0.22), (0.32, 0.32), (0.45, 0.45))
    num_classes: int = 3
    f1_channels: tuple = (8, 16, 32, 32)
    f1_strides: tuple = (2, 2, 2, 1)
    f2_channels: tuple = (32,)
    input_resolution: tuple = (64, 64)
    noobj_weight: float = 0.5

    def __post_init__(self):
        h, w = self.input_resolution
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if len(self.anchors) < 1:
            raise ConfigurationError("at least one anchor is required")
        if len(self.f1_channels) != len(self.f1_strides):
            raise ConfigurationError("f1_channels and f1_strides differ in length")
        if h % self.grid_size or w % self.grid_size:
            raise ConfigurationError(f"grid size {self.grid_size} does not divide {h}x{w}")
        down = math.prod(self.f1_strides)
        if h // down != self.grid_size or w // down != self.grid_size:
            raise ConfigurationError(
                f"F1 downsamples {h}x{w} by {down}, which does not give a "
                f"{self.grid_size}x{self.grid_size} grid"
            )

    @property
    def num_anchors(self):
        return len(self.anchors)

    @property
    def channels_per_anchor(self):
        return 5 + self.num_classes

    @property
    def feature_channels(self):
        return self.f1_channels[-1]

    def to_dict(self):
        return {
            "grid_size": self.grid_size,
            "anchors": [list(a) for a in self.anchors],
            "num_classes": self.num_classes,
            "f1_channels": list(self.f1_channels),
            "f1_strides": list(self.f1_strides),
            "f2_channels": list(self.f2_channels),
            "input_resolution": list(self.input_resolution),
            "noobj_weight": self.noobj_weight,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["anchors"] = tuple(tuple(float(v) for v in a) for a in d.get("anchors", cls.anchors))
        for key in ("f1_channels", "f1_strides", "f2_channels", "input_resolution"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class DetectorParams:
    """Named conv kernels ``(3, 3, Cin, Cout)`` and biases, ordered F1 then F2."""

    config: DetectorConfig
    arrays: dict = field(default_factory=dict)

    @property
    def f1_layers(self):
        return [f"f1.{i}" for i in range(len(self.config.f1_channels))]

    @property
    def f2_layers(self):
        return [f"f2.{i}" for i in range(len(self.config.f2_channels) + 1)]

    @property
    def f1_names(self):
        return [f"{layer}.{p}" for layer in self.f1_layers for p in ("w", "b")]

    @property
    def f2_names(self):
        return [f"{layer}.{p}" for layer in self.f2_layers for p in ("w", "b")]

    def names(self):
        return list(self.arrays)

    def copy(self):
        return DetectorParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def __getitem__(self, key):
        return self.arrays[key]


def _layer_shapes(config):
    shapes = []
    cin = 3
    for i, (cout, stride) in enumerate(zip(config.f1_channels, config.f1_strides)):
        shapes.append((f"f1.{i}", cin, cout, stride))
        cin = cout
    head = list(config.f2_channels) + [config.num_anchors * config.channels_per_anchor]
    for i, cout in enumerate(head):
        shapes.append((f"f2.{i}", cin, cout, 1))
        cin = cout
    return shapes


def init_params(config=None, seed=0):
    """He-normal kernels, zero biases; objectness bias starts at a low prior."""
    config = config or DetectorConfig()
    rng = np.random.default_rng(seed)
    arrays = {}
    shapes = _layer_shapes(config)
    for idx, (name, cin, cout, _) in enumerate(shapes):
        last = idx == len(shapes) - 1
        std = 0.01 if last else math.sqrt(2.0 / (9 * cin))
        arrays[f"{name}.w"] = rng.normal(0.0, std, size=(3, 3, cin, cout))
        b = np.zeros(cout)
        if last:
            b.reshape(config.num_anchors, config.channels_per_anchor)[:, 4] = -4.0
        arrays[f"{name}.b"] = b
    return DetectorParams(config, arrays)


def zero_params(config=None):
    config = config or DetectorConfig()
    arrays = {}
    for name, cin, cout, _ in _layer_shapes(config):
        arrays[f"{name}.w"] = np.zeros((3, 3, cin, cout))
        arrays[f"{name}.b"] = np.zeros(cout)
    return DetectorParams(config, arrays)


# ---------------------------------------------------------------------------
# conv primitives


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _conv_forward(x, w, b, stride):
    n, h, wd, cin = x.shape
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = kernels.im2col(xp, 3, stride, ho, wo)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(n, ho, wo, -1), (cols, x.shape, stride)


def _conv_backward(dout, w, cache, need_dx=True):
    cols, xshape, stride = cache
    n, h, wd, cin = xshape
    cout = w.shape[-1]
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(n, dout.shape[1], dout.shape[2], 3, 3, cin)
    dxp = kernels.col2im(np.ascontiguousarray(dcols), stride, h + 2, wd + 2)
    return dxp[:, 1:-1, 1:-1, :], dw, db


def silu(z):
    return z * _sigmoid(z)


def silu_grad(dout, z):
    s = _sigmoid(z)
    return dout * s * (1.0 + z * (1.0 - s))


def _as_batch(image, config):
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    h, w = config.input_resolution
    if x.ndim != 4 or x.shape[1:] != (h, w, 3):
        raise ConfigurationError(f"expected images of shape ({h}, {w}, 3), got {x.shape[-3:]}")
    return x, single


INPUT_MEAN = 0.5
INPUT_SCALE = 4.0


def forward_f1(params, x):
    """Run F1 on a batch; returns features and a backprop cache.

    Pixels are centered and scaled (``(x - 0.5) * 4``) before the first conv.
    """
    caches = []
    h = (x - INPUT_MEAN) * INPUT_SCALE
    for layer, stride in zip(params.f1_layers, params.config.f1_strides):
        z, conv_cache = _conv_forward(h, params[f"{layer}.w"], params[f"{layer}.b"], stride)
        caches.append((layer, conv_cache, z))
        h = silu(z)
    return h, caches


def forward_f2(params, feats):
    cfg = params.config
    caches = []
    h = feats
    layers = params.f2_layers
    for i, layer in enumerate(layers):
        z, conv_cache = _conv_forward(h, params[f"{layer}.w"], params[f"{layer}.b"], 1)
        last = i == len(layers) - 1
        caches.append((layer, conv_cache, None if last else z))
        h = z if last else silu(z)
    n = feats.shape[0]
    raw = h.reshape(n, cfg.grid_size, cfg.grid_size, cfg.num_anchors, cfg.channels_per_anchor)
    return raw, caches


def forward_batch(params, images):
    """Batched forward: returns ``(features, raw, cache)``."""
    x, _ = _as_batch(images, params.config)
    feats, c1 = forward_f1(params, x)
    raw, c2 = forward_f2(params, feats)
    return feats, raw, (c1, c2)


def forward(params, image):
    """F1 features and raw predictions for one image (or a batch)."""
    x, single = _as_batch(image, params.config)
    feats, c1 = forward_f1(params, x)
    raw, _ = forward_f2(params, feats)
    if single:
        return feats[0], raw[0]
    return feats, raw


def backward_f2(params, caches, d_raw, grads):
    cfg = params.config
    n = d_raw.shape[0]
    d = d_raw.reshape(n, cfg.grid_size, cfg.grid_size, -1)
    for layer, conv_cache, z in reversed(caches):
        if z is not None:
            d = silu_grad(d, z)
        d, dw, db = _conv_backward(d, params[f"{layer}.w"], conv_cache)
        _accumulate(grads, f"{layer}.w", dw)
        _accumulate(grads, f"{layer}.b", db)
    return d


def backward_f1(params, caches, d_feats, grads, need_input=True):
    d = d_feats
    for idx in range(len(caches) - 1, -1, -1):
        layer, conv_cache, z = caches[idx]
        d = silu_grad(d, z)
        need_dx = need_input or idx > 0
        d, dw, db = _conv_backward(d, params[f"{layer}.w"], conv_cache, need_dx=need_dx)
        _accumulate(grads, f"{layer}.w", dw)
        _accumulate(grads, f"{layer}.b", db)
    return None if d is None else d * INPUT_SCALE


def _accumulate(grads, key, value):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def backward(params, cache, d_raw, d_feats_extra=None, need_input=True):
    """Backprop ``d_raw`` (and an optional extra F1-output gradient).

    Returns ``(param_grads, input_grad)``; ``input_grad`` is None unless
    requested.
    """
    c1, c2 = cache
    grads = {}
    d_feats = backward_f2(params, c2, d_raw, grads)
    if d_feats_extra is not None:
        d_feats = d_feats + d_feats_extra
    dx = backward_f1(params, c1, d_feats, grads, need_input=need_input)
    ordered = {k: grads[k] for k in params.arrays}
    return ordered, dx


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class BoxLabel:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    @property
    def box(self):
        return (self.cx, self.cy, self.w, self.h)

    def validate(self, num_classes=None, tol=1e-9):
        if num_classes is not None and not 0 <= self.class_id < num_classes:
            raise LabelError(f"class {self.class_id} outside [0, {num_classes})")
        if not (self.w > 0 and self.h > 0):
            raise LabelError(f"non-positive box size {self.w}x{self.h}")
        lo_x, hi_x = self.cx - self.w / 2, self.cx + self.w / 2
        lo_y, hi_y = self.cy - self.h / 2, self.cy + self.h / 2
        if lo_x < -tol or lo_y < -tol or hi_x > 1 + tol or hi_y > 1 + tol:
            raise LabelError(f"box {self.box} leaves the unit square")

    def to_dict(self):
        return {"class": self.class_id, "cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["class"]), float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]))


@dataclass(frozen=True)
class LossBreakdown:
    l_det: float
    l_cls: float
    l_loc: float
    l_obj: float


def _bce_with_logits(z, t):
    return np.logaddexp(0.0, z) - t * z


def assign_targets(labels, config):
    """Responsible (cell, anchor) for each label.

    The responsible cell holds the box center; the anchor is the one whose
    centered box has the highest IoU with the label (lowest index on ties).
    A label landing on an already-claimed (cell, anchor) is dropped.
    Returns a list of ``(row, col, anchor, label)``.
    """
    s = config.grid_size
    anchors = np.array([(0.0, 0.0, aw, ah) for aw, ah in config.anchors])
    taken = set()
    out = []
    for lab in labels:
        lab.validate(config.num_classes)
        row = min(int(lab.cy * s), s - 1)
        col = min(int(lab.cx * s), s - 1)
        ious = iou_matrix([(0.0, 0.0, lab.w, lab.h)], anchors)[0]
        a = int(np.argmax(ious))
        if (row, col, a) in taken:
            continue
        taken.add((row, col, a))
        out.append((row, col, a, lab))
    return out


def _sample_loss(raw, labels, config):
    """Per-sample loss terms and their gradient w.r.t. ``raw``."""
    s, na, nc = config.grid_size, config.num_anchors, config.num_classes
    grad = np.zeros_like(raw)
    assigned = assign_targets(labels, config)
    npos = len(assigned)
    norm = 1.0 / max(npos, 1)

    obj_t = np.zeros((s, s, na))
    for row, col, a, _ in assigned:
        obj_t[row, col, a] = 1.0
    obj_logit = raw[..., 4]
    weight = np.where(obj_t > 0, 1.0, config.noobj_weight) * norm
    l_obj = float(np.sum(weight * _bce_with_logits(obj_logit, obj_t)))
    grad[..., 4] = weight * (_sigmoid(obj_logit) - obj_t)

    l_cls = 0.0
    l_loc = 0.0
    for row, col, a, lab in assigned:
        cell = raw[row, col, a]
        cls_t = np.zeros(nc)
        cls_t[lab.class_id] = 1.0
        logits = cell[5:]
        l_cls += float(np.sum(_bce_with_logits(logits, cls_t))) * norm
        grad[row, col, a, 5:] = (_sigmoid(logits) - cls_t) * norm

        aw, ah = config.anchors[a]
        tx_t = lab.cx * s - col
        ty_t = lab.cy * s - row
        tw_t = math.log(lab.w / aw)
        th_t = math.log(lab.h / ah)
        sx, sy = _sigmoid(cell[0]), _sigmoid(cell[1])
        diffs = np.array([sx - tx_t, sy - ty_t, cell[2] - tw_t, cell[3] - th_t])
        l_loc += float(np.sum(diffs**2)) * norm
        grad[row, col, a, 0] = 2 * diffs[0] * sx * (1 - sx) * norm
        grad[row, col, a, 1] = 2 * diffs[1] * sy * (1 - sy) * norm
        grad[row, col, a, 2] = 2 * diffs[2] * norm
        grad[row, col, a, 3] = 2 * diffs[3] * norm
    return (l_cls, l_loc, l_obj), grad


def task_mask(config, selector):
    """Channel mask over the last raw axis selecting one task's outputs."""
    m = np.zeros(config.channels_per_anchor)
    if selector == "det":
        m[:] = 1.0
    elif selector == "loc":
        m[:4] = 1.0
    elif selector == "obj":
        m[4] = 1.0
    elif selector == "cls":
        m[5:] = 1.0
    else:
        raise ValueError(f"unknown loss selector {selector!r}")
    return m


def batch_loss(raw, labels_batch, config):
    """Per-sample losses ``(N, 3)`` as columns cls, loc, obj, plus d(loss_i)/d(raw_i)."""
    terms = np.zeros((raw.shape[0], 3))
    grad = np.zeros_like(raw)
    for i, labels in enumerate(labels_batch):
        t, g = _sample_loss(raw[i], labels, config)
        terms[i] = t
        grad[i] = g
    return terms, grad


def loss_det(raw, labels, config):
    """Classification, localization and objectness losses for one prediction tensor."""
    (l_cls, l_loc, l_obj), _ = _sample_loss(np.asarray(raw, dtype=np.float64), labels, config)
    return LossBreakdown(l_cls + l_loc + l_obj, l_cls, l_loc, l_obj)


def selected_loss(terms, selector):
    """Pick a loss column from ``batch_loss`` terms; ``det`` sums all three."""
    if selector == "det":
        return terms.sum(axis=1)
    return terms[:, {"cls": 0, "loc": 1, "obj": 2}[selector]]


def per_sample_losses(params, images, labels_batch, selector="det"):
    _, raw, _ = forward_batch(params, images)
    terms, _ = batch_loss(raw, labels_batch, params.config)
    return selected_loss(terms, selector)


def input_gradients(params, images, labels_batch, selector="det"):
    """Per-sample input gradients for a batch: row ``i`` is d loss_i / d x_i."""
    _, raw, cache = forward_batch(params, images)
    terms, g = batch_loss(raw, labels_batch, params.config)
    g = g * task_mask(params.config, selector)
    _, dx = backward(params, cache, g, need_input=True)
    return dx, selected_loss(terms, selector)


def input_gradient(params, sample, loss_selector="det"):
    """Exact gradient of the selected loss w.r.t. the pixels of ``sample.image``."""
    if loss_selector not in LOSS_SELECTORS:
        raise ValueError(f"unknown loss selector {loss_selector!r}")
    dx, _ = input_gradients(params, sample.image[None], [sample.labels], loss_selector)
    return dx[0]


def param_gradients(params, batch, loss_selector="det"):
    """Gradient of the batch-mean selected loss w.r.t. every parameter.

    ``batch`` is a sequence of samples carrying ``image`` and ``labels``.
    Returns ``(grads, mean_loss)``.
    """
    images = np.stack([s.image for s in batch])
    _, raw, cache = forward_batch(params, images)
    terms, g = batch_loss(raw, [s.labels for s in batch], params.config)
    n = len(batch)
    g = g * task_mask(params.config, loss_selector) / n
    grads, _ = backward(params, cache, g, need_input=False)
    return grads, float(selected_loss(terms, loss_selector).mean())


# ---------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple


def decode(raw, config, score_threshold=0.01):
    """Turn one raw tensor into score-sorted detections (best class per anchor)."""
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError("score_threshold must lie in [0, 1]")
    raw = np.asarray(raw, dtype=np.float64)
    s = config.grid_size
    obj = _sigmoid(raw[..., 4])
    cls_p = _sigmoid(raw[..., 5:])
    cls_id = np.argmax(cls_p, axis=-1)
    score = obj * np.take_along_axis(cls_p, cls_id[..., None], axis=-1)[..., 0]
    rows, cols, anchors = np.nonzero(score >= score_threshold)
    dets = []
    for r, c, a in zip(rows, cols, anchors):
        tx, ty, tw, th = raw[r, c, a, :4]
        aw, ah = config.anchors[a]
        cx = (c + _sigmoid(tx)) / s
        cy = (r + _sigmoid(ty)) / s
        w = aw * math.exp(min(tw, 10.0))
        h = ah * math.exp(min(th, 10.0))
        x0, y0 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
        x1, y1 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
        box = ((x0 + x1) / 2, (y0 + y1) / 2, max(x1 - x0, 0.0), max(y1 - y0, 0.0))
        dets.append(Detection(int(cls_id[r, c, a]), float(score[r, c, a]), tuple(float(v) for v in box)))
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    return [dets[i] for i in order]


def nms(detections, iou_threshold=0.5):
    """Greedy per-class non-maximum suppression; keeps descending score order."""
    ordered = sorted(detections, key=lambda d: -d.score)
    kept = []
    for det in ordered:
        same = [k.box for k in kept if k.class_id == det.class_id]
        if same and iou_matrix([det.box], same).max() > iou_threshold:
            continue
        kept.append(det)
    return kept


def predict(params, images, score_threshold=0.01, iou_threshold=0.5, batch_size=64):
    """Decoded, NMS-filtered detections for each image."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for start in range(0, len(images), batch_size):
        _, raw = forward(params, images[start:start + batch_size])
        for r in raw:
            out.append(nms(decode(r, params.config, score_threshold), iou_threshold))
    return out
