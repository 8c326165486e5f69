"""Local adversarial feature alignment on the F1 feature map.

A per-location domain discriminator (two 1x1 convolutions and a sigmoid)
predicts 0 for source and 1 for target at every feature-map cell. Its
least-squares losses are minimized by the discriminator, while a gradient
reversal layer makes F1 ascend them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detector import (
    ConfigurationError,
    _sigmoid,
    backward,
    backward_f1,
    batch_loss,
    forward_batch,
    forward_f1,
    selected_loss,
    silu,
    silu_grad,
)
from .perturb import apply


@dataclass(frozen=True)
class AlignmentConfig:
    """Reversal weight ``lam``; ``schedule="ramp"`` grows it as ``lam * (2 / (1 + exp(-10 p)) - 1)``."""

    lam: float = 1.0
    schedule: str = "ramp"

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and >= 0")
        if self.schedule not in ("constant", "ramp"):
            raise ValueError(f"unknown lambda schedule {self.schedule!r}")

    def at(self, progress):
        """Reversal weight at training progress ``progress`` in [0, 1]."""
        if self.schedule == "constant":
            return self.lam
        return self.lam * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


@dataclass
class DiscriminatorParams:
    arrays: dict = field(default_factory=dict)

    @property
    def in_channels(self):
        return self.arrays["d.0.w"].shape[0]

    def copy(self):
        return DiscriminatorParams({k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, key):
        return self.arrays[key]


def init_discriminator(in_channels=32, hidden=32, seed=0):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD15C]))
    return DiscriminatorParams({
        "d.0.w": rng.normal(0.0, np.sqrt(2.0 / in_channels), size=(in_channels, hidden)),
        "d.0.b": np.zeros(hidden),
        "d.1.w": rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 1)),
        "d.1.b": np.zeros(1),
    })


def zero_discriminator(in_channels=32, hidden=32):
    return DiscriminatorParams({
        "d.0.w": np.zeros((in_channels, hidden)),
        "d.0.b": np.zeros(hidden),
        "d.1.w": np.zeros((hidden, 1)),
        "d.1.b": np.zeros(1),
    })


def _forward(dp, feats):
    if feats.shape[-1] != dp.in_channels:
        raise ConfigurationError(
            f"discriminator expects {dp.in_channels} channels, got {feats.shape[-1]}"
        )
    z0 = feats @ dp["d.0.w"] + dp["d.0.b"]
    h = silu(z0)
    z1 = h @ dp["d.1.w"] + dp["d.1.b"]
    p = _sigmoid(z1[..., 0])
    return p, (feats, z0, h, p)


def _backward(dp, cache, dp_map):
    feats, z0, h, p = cache
    dz1 = (dp_map * p * (1.0 - p))[..., None]
    cin = feats.shape[-1]
    hid = h.shape[-1]
    grads = {
        "d.1.w": h.reshape(-1, hid).T @ dz1.reshape(-1, 1),
        "d.1.b": dz1.reshape(-1, 1).sum(axis=0),
    }
    dh = dz1 @ dp["d.1.w"].T
    dz0 = silu_grad(dh, z0)
    grads["d.0.w"] = feats.reshape(-1, cin).T @ dz0.reshape(-1, hid)
    grads["d.0.b"] = dz0.reshape(-1, hid).sum(axis=0)
    dfeats = dz0 @ dp["d.0.w"].T
    return {k: grads[k] for k in dp.arrays}, dfeats


def discriminate(dp, feature_map):
    """Domain probability per feature-map location (``Hf x Wf`` or batched)."""
    p, _ = _forward(dp, np.asarray(feature_map, dtype=np.float64))
    return p


def afl_loss_source(pred_map):
    """Mean squared distance of the predictions from the source label 0."""
    return float(np.mean(np.square(pred_map)))


def afl_loss_target(pred_map):
    """Mean squared distance of the predictions from the target label 1."""
    return float(np.mean(np.square(1.0 - np.asarray(pred_map))))


def grl_backward(upstream_gradient, lam):
    """Gradient reversal: identity forward, ``-lam * g`` backward."""
    return -lam * upstream_gradient


def afl_gradients(dp, feats_source, feats_target):
    """Unreversed gradients of ``L_s + L_t`` w.r.t. D and both feature maps.

    Losses are means over every location of every sample in each batch.
    """
    p_s, cache_s = _forward(dp, feats_source)
    p_t, cache_t = _forward(dp, feats_target)
    l_s = afl_loss_source(p_s)
    l_t = afl_loss_target(p_t)
    g_s, dfeat_s = _backward(dp, cache_s, 2.0 * p_s / p_s.size)
    g_t, dfeat_t = _backward(dp, cache_t, -2.0 * (1.0 - p_t) / p_t.size)
    grads = {k: g_s[k] + g_t[k] for k in dp.arrays}
    return l_s, l_t, grads, dfeat_s, dfeat_t


@dataclass
class StepGradients:
    detector: dict
    discriminator: dict | None
    l_cls: float
    l_loc: float
    l_obj: float
    l_afl_s: float = 0.0
    l_afl_t: float = 0.0

    @property
    def l_det(self):
        return self.l_cls + self.l_loc + self.l_obj


def objective_gradients(params, dp, source_images, source_labels, delta_star,
                        target_images=None, lam=1.0):
    """Gradients of ``L_det(x_s + d*) + lam * (L_afl_s + L_afl_t)``.

    The detector and discriminator descend the objective; F1 receives the
    alignment gradient through the reversal layer, so it ascends the
    alignment terms. With ``target_images=None`` this is plain
    (adversarial) training.
    """
    x_s = apply(np.asarray(source_images, dtype=np.float64), delta_star)
    n = x_s.shape[0]
    feats_s, raw_s, cache_s = forward_batch(params, x_s)
    terms, g_raw = batch_loss(raw_s, source_labels, params.config)
    g_raw = g_raw / n
    means = terms.mean(axis=0)
    if target_images is None:
        grads, _ = backward(params, cache_s, g_raw, need_input=False)
        return StepGradients(grads, None, *map(float, means))

    feats_t, cache_t = forward_f1(params, np.asarray(target_images, dtype=np.float64))
    l_s, l_t, d_grads, dfeat_s, dfeat_t = afl_gradients(dp, feats_s, feats_t)
    d_grads = {k: lam * v for k, v in d_grads.items()}
    grads, _ = backward(params, cache_s, g_raw, d_feats_extra=grl_backward(dfeat_s, lam),
                        need_input=False)
    backward_f1(params, cache_t, grl_backward(dfeat_t, lam), grads, need_input=False)
    return StepGradients(grads, d_grads, *map(float, means), l_s, l_t)


def combined_losses(params, dp, source_sample, delta_star, target_image, lam):
    """``(l_det, l_afl_s, l_afl_t, total)`` for one source/target pair."""
    x_s = apply(np.asarray(source_sample.image, dtype=np.float64)[None], delta_star)
    feats_s, raw_s, _ = forward_batch(params, x_s)
    terms, _ = batch_loss(raw_s, [source_sample.labels], params.config)
    l_det = float(selected_loss(terms, "det")[0])
    feats_t, _ = forward_f1(params, np.asarray(target_image, dtype=np.float64)[None])
    l_s = afl_loss_source(discriminate(dp, feats_s))
    l_t = afl_loss_target(discriminate(dp, feats_t))
    return l_det, l_s, l_t, l_det + lam * (l_s + l_t)


def f1_alignment_gradients(params, dp, source_images, target_images, lam=None):
    """F1 parameter gradients of ``L_s + L_t`` alone.

    ``lam=None`` returns the plain gradient; a number routes it through the
    reversal layer with that weight.
    """
    feats_s, cache_s = forward_f1(params, np.asarray(source_images, dtype=np.float64))
    feats_t, cache_t = forward_f1(params, np.asarray(target_images, dtype=np.float64))
    _, _, _, dfeat_s, dfeat_t = afl_gradients(dp, feats_s, feats_t)
    if lam is not None:
        dfeat_s = grl_backward(dfeat_s, lam)
        dfeat_t = grl_backward(dfeat_t, lam)
    grads = {}
    backward_f1(params, cache_s, dfeat_s, grads, need_input=False)
    backward_f1(params, cache_t, dfeat_t, grads, need_input=False)
    return grads
