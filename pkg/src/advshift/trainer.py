"""Training loop for ST, ST+AFL, AT and AT+AFL.

Randomness is counter-based: shuffles are keyed by ``(seed, epoch)`` and
per-sample draws by ``(seed, epoch, index)``, so a run is a pure function
of its config and data.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorConfig, init_params
from .featalign import AlignmentConfig, init_discriminator, objective_gradients
from .perturb import PerturbationSpec, perturb_batch

log = logging.getLogger(__name__)

MODES = ("ST", "ST_AFL", "AT", "AT_AFL")
_MODE_ALIASES = {"st": "ST", "st-afl": "ST_AFL", "at": "AT", "at-afl": "AT_AFL"}

_SHUFFLE = 0x5EED
_TARGET = 0x7A67
_ATTACK = 0xA77C
_FLIP = 0xF119


class TrainingConfigError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    """Training hit a non-finite gradient; carries where it happened."""

    def __init__(self, epoch, batch, losses):
        self.epoch, self.batch, self.losses = epoch, batch, losses
        super().__init__(f"non-finite gradient at epoch {epoch}, batch {batch}; losses {losses}")


def canonical_mode(mode):
    m = _MODE_ALIASES.get(str(mode).lower(), str(mode).upper().replace("-", "_").replace("+", "_"))
    if m not in MODES:
        raise TrainingConfigError(f"unknown mode {mode!r}; expected one of st, st-afl, at, at-afl")
    return m


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "ST"
    epochs: int = 50
    batch_size: int = 16
    target_batch_size: int = 16
    momentum: float = 0.937
    weight_decay: float = 5.0e-4
    lr_max: float = 1.0e-2
    lr_min: float = 2.0e-3
    warmup_epochs: float = 3.0
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    seed: int = 0
    runs: int = 3
    flip: bool = False
    grad_clip: float | None = 10.0
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if self.epochs < 1 or self.batch_size < 1 or self.target_batch_size < 1:
            raise TrainingConfigError("epochs and batch sizes must be >= 1")
        if self.runs < 1:
            raise TrainingConfigError("runs must be >= 1")
        if self.mode in ("AT", "AT_AFL") and self.perturbation.method == "none":
            raise TrainingConfigError("adversarial modes need a perturbation method other than none")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise TrainingConfigError("grad_clip must be > 0 or null")
        if not self.warmup_epochs >= 0:
            raise TrainingConfigError("warmup_epochs must be >= 0")

    @property
    def adversarial(self):
        return self.mode in ("AT", "AT_AFL")

    @property
    def aligned(self):
        return self.mode in ("ST_AFL", "AT_AFL")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["detector"] = self.detector.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "perturbation" in d:
            d["perturbation"] = PerturbationSpec.from_dict(d["perturbation"])
        if "alignment" in d:
            d["alignment"] = AlignmentConfig(**d["alignment"])
        if "detector" in d:
            d["detector"] = DetectorConfig.from_dict(d["detector"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainingConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def lr_schedule(epoch_fraction, config):
    """Linear warmup from 0 to ``lr_max``, then cosine decay to ``lr_min``.

    Runs shorter than the warmup spend all of it warming up.
    """
    if not 0.0 <= epoch_fraction <= 1.0:
        raise ValueError("epoch_fraction must lie in [0, 1]")
    warm = min(config.warmup_epochs / config.epochs, 1.0)
    if warm > 0 and epoch_fraction < warm:
        return config.lr_max * epoch_fraction / warm
    s = (epoch_fraction - warm) / (1.0 - warm) if warm < 1 else 0.0
    return config.lr_min + (config.lr_max - config.lr_min) * (1 + math.cos(math.pi * s)) / 2


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def sgd_step(params, grads, lr, momentum, weight_decay, velocity):
    """``v' = m v + (g + wd p)``, ``p' = p - lr v'`` on dicts of arrays."""
    new_p, new_v = {}, {}
    for k, p in params.items():
        v = momentum * velocity[k] + (grads[k] + weight_decay * p)
        new_v[k] = v
        new_p[k] = p - lr * v
    return new_p, new_v


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_det: float
    l_cls: float
    l_loc: float
    l_obj: float
    l_afl_s: float
    l_afl_t: float
    wall_time: float


HISTORY_COLUMNS = [f.name for f in dataclasses.fields(EpochRecord)]


@dataclass
class TrainState:
    params: object
    dparams: object
    velocity: dict
    d_velocity: dict
    epoch: int = 0
    history: list = field(default_factory=list)


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _flip(images, labels, seed, epoch, indices):
    imgs = images.copy()
    out = []
    for i, idx in enumerate(indices):
        if _rng(seed, epoch, idx, _FLIP).random() < 0.5:
            imgs[i] = imgs[i, :, ::-1]
            out.append([dataclasses.replace(lab, cx=1.0 - lab.cx) for lab in labels[i]])
        else:
            out.append(labels[i])
    return imgs, out


def initial_state(config):
    params = init_params(config.detector, config.seed)
    dparams = init_discriminator(config.detector.feature_channels, seed=config.seed)
    return TrainState(
        params,
        dparams,
        {k: np.zeros_like(v) for k, v in params.arrays.items()},
        {k: np.zeros_like(v) for k, v in dparams.arrays.items()},
    )


def _target_order(n_target, seed, cycle):
    return _rng(seed, cycle, _TARGET).permutation(n_target)


def train(config, source_images, source_labels, target_images=None, state=None,
          stop_after_epoch=None, on_epoch_end=None):
    """Train a detector (and discriminator for AFL modes).

    ``target_images`` are images only: target labels never reach this
    function. Pass ``state`` to resume; ``stop_after_epoch`` stops early
    (used for checkpoint round trips). Returns the final ``TrainState``.
    """
    if config.aligned and (target_images is None or len(target_images) == 0):
        raise TrainingConfigError(f"mode {config.mode} needs target images")
    source_images = np.asarray(source_images, dtype=np.float64)
    n = len(source_images)
    if n == 0:
        raise TrainingConfigError("source dataset is empty")
    if state is None:
        state = initial_state(config)
    params, dparams = state.params, state.dparams
    spec = config.perturbation if config.adversarial else None
    bs = config.batch_size
    batches_per_epoch = math.ceil(n / bs)
    total_steps = batches_per_epoch * config.epochs
    last_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)

    n_t = 0 if target_images is None else len(target_images)
    t_bs = min(config.target_batch_size, n_t) if n_t else 0
    # target cursor is derived from the global step so resuming needs no extra state
    for epoch in range(state.epoch, last_epoch):
        t0 = time.perf_counter()
        order = _rng(config.seed, epoch, _SHUFFLE).permutation(n)
        sums = np.zeros(6)
        lr = 0.0
        for b in range(batches_per_epoch):
            step = epoch * batches_per_epoch + b
            idx = order[b * bs:(b + 1) * bs]
            x = source_images[idx]
            labels = [source_labels[i] for i in idx]
            if config.flip:
                x, labels = _flip(x, labels, config.seed, epoch, idx)
            if spec is not None:
                rngs = [_rng(config.seed, epoch, i, _ATTACK) for i in idx]
                delta = perturb_batch(params, x, labels, spec, rngs)
            else:
                delta = np.zeros_like(x)
            x_t = None
            if config.aligned:
                x_t = _target_batch(target_images, t_bs, step, config.seed)
            lam = config.alignment.at(step / total_steps)
            sg = objective_gradients(params, dparams, x, labels, delta, x_t, lam)
            grads = sg.detector
            finite = all(np.all(np.isfinite(g)) for g in grads.values())
            if sg.discriminator is not None:
                finite = finite and all(np.all(np.isfinite(g)) for g in sg.discriminator.values())
            if not finite:
                raise NonFiniteGradient(epoch, b, {
                    "l_det": sg.l_det, "l_afl_s": sg.l_afl_s, "l_afl_t": sg.l_afl_t})
            lr = lr_schedule((step + 1) / total_steps, config)
            grads = clip_grad_norm(grads, config.grad_clip)
            new_p, state.velocity = sgd_step(params.arrays, grads, lr, config.momentum,
                                             config.weight_decay, state.velocity)
            params.arrays = new_p
            if sg.discriminator is not None:
                new_d, state.d_velocity = sgd_step(dparams.arrays,
                                                   clip_grad_norm(sg.discriminator, config.grad_clip), lr,
                                                   config.momentum, config.weight_decay,
                                                   state.d_velocity)
                dparams.arrays = new_d
            sums += [sg.l_det, sg.l_cls, sg.l_loc, sg.l_obj, sg.l_afl_s, sg.l_afl_t]
        means = sums / batches_per_epoch
        rec = EpochRecord(epoch + 1, lr, *map(float, means), time.perf_counter() - t0)
        state.history.append(rec)
        state.epoch = epoch + 1
        log.debug("epoch %d lr %.5f l_det %.4f", rec.epoch, lr, rec.l_det)
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


def _target_batch(target_images, t_bs, step, seed):
    n_t = len(target_images)
    per_cycle = n_t // t_bs
    cycle, pos = divmod(step, per_cycle)
    order = _target_order(n_t, seed, cycle)
    return np.asarray(target_images[order[pos * t_bs:(pos + 1) * t_bs]], dtype=np.float64)


@dataclass
class ReplicateResult:
    metrics: dict
    per_run: list
    states: list = field(default_factory=list)


def run_replicates(config, source_images, source_labels, target_images=None, evaluate=None,
                   keep_states=False):
    """Train ``config.runs`` models with seeds ``seed + 0 .. runs - 1``.

    ``evaluate(state) -> dict`` produces the per-run metrics; the result
    holds their arithmetic means and the per-run values.
    """
    per_run, states = [], []
    for r in range(config.runs):
        cfg = dataclasses.replace(config, seed=config.seed + r)
        st = train(cfg, source_images, source_labels, target_images)
        per_run.append(evaluate(st) if evaluate is not None else {})
        if keep_states:
            states.append(st)
    keys = per_run[0].keys() if per_run else []
    means = {k: float(np.mean([m[k] for m in per_run])) for k in keys}
    return ReplicateResult(means, per_run, states)
