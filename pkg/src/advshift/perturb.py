"""L-infinity adversarial perturbations for the detector (FGSM, PGD, max-task).

All attacks are computed per sample. A perturbation ``delta`` is applied as
``clip(x + delta, 0, 1)``, and the signed gradient is taken w.r.t. the
perturbed input.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .detector import (
    backward,
    batch_loss,
    forward_batch,
    selected_loss,
    task_mask,
)

METHODS = ("none", "fgsm_zero", "fgsm_random", "pgd")
SELECTORS = ("det", "cls", "loc", "obj", "mtl")
TASKS = ("cls", "loc", "obj")


@dataclass(frozen=True)
class PerturbationSpec:
    method: str = "fgsm_zero"
    epsilon: float = 1 / 255
    steps: int = 10
    step_size: float | None = None
    loss_selector: str = "det"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown perturbation method {self.method!r}")
        if self.loss_selector not in SELECTORS:
            raise ValueError(f"unknown loss selector {self.loss_selector!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.method == "pgd":
            if self.steps < 1:
                raise ValueError("pgd needs steps >= 1")
            if self.step_size is not None and self.step_size <= 0:
                raise ValueError("pgd step_size must be > 0")

    @property
    def alpha(self):
        """PGD step size; defaults to 1.5 * epsilon / steps."""
        if self.step_size is not None:
            return self.step_size
        return 1.5 * self.epsilon / self.steps

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def project_linf(delta, epsilon):
    """Clamp every entry to ``[-epsilon, epsilon]``."""
    return np.clip(delta, -epsilon, epsilon)


def apply(images, delta):
    return np.clip(images + delta, 0.0, 1.0)


def initial_delta(shape, spec, rngs=None):
    """Zero start, or uniform in ``[-eps, eps]`` for ``fgsm_random``.

    ``rngs`` holds one generator per sample so the draw does not depend on
    batch composition.
    """
    if spec.method != "fgsm_random":
        return np.zeros(shape)
    if rngs is None:
        rngs = [np.random.default_rng(spec.seed)]
    per = shape[1:]
    return np.stack([r.uniform(-spec.epsilon, spec.epsilon, size=per) for r in rngs])


def _input_grad(params, x, labels, selector):
    _, raw, cache = forward_batch(params, x)
    terms, g = batch_loss(raw, labels, params.config)
    g = g * task_mask(params.config, selector)
    _, dx = backward(params, cache, g, need_input=True)
    return dx


def det_losses(params, images, labels):
    _, raw, _ = forward_batch(params, images)
    terms, _ = batch_loss(raw, labels, params.config)
    return selected_loss(terms, "det")


def signed_step(params, images, labels, delta, step, epsilon, selector):
    """One ascent step ``P[delta + step * sign(grad)]`` for a single loss."""
    g = _input_grad(params, apply(images, delta), labels, selector)
    return project_linf(delta + step * np.sign(g), epsilon)


def select_max_task(params, images, labels, candidates):
    """Per sample, the candidate with the largest detection loss.

    ``candidates`` is an ordered mapping task -> delta batch; ties go to the
    earliest entry (cls, loc, obj).
    """
    names = list(candidates)
    losses = np.stack([det_losses(params, apply(images, candidates[k]), labels) for k in names])
    best = np.argmax(losses, axis=0)
    stacked = np.stack([candidates[k] for k in names])
    return stacked[best, np.arange(images.shape[0])], best


def _step(params, images, labels, delta, step, spec):
    if spec.loss_selector == "mtl":
        cands = {
            t: signed_step(params, images, labels, delta, step, spec.epsilon, t) for t in TASKS
        }
        chosen, _ = select_max_task(params, images, labels, cands)
        return chosen
    return signed_step(params, images, labels, delta, step, spec.epsilon, spec.loss_selector)


def perturb_batch(params, images, labels, spec, rngs=None):
    """Adversarial deltas for a batch according to ``spec``."""
    images = np.asarray(images, dtype=np.float64)
    if spec.method == "none":
        return np.zeros_like(images)
    delta = initial_delta(images.shape, spec, rngs)
    if spec.method == "pgd":
        for _ in range(spec.steps):
            delta = _step(params, images, labels, delta, spec.alpha, spec)
        return delta
    return _step(params, images, labels, delta, spec.epsilon, spec)


def pgd_trajectory(params, images, labels, spec, rngs=None):
    """Every PGD iterate, for checking the projection invariant at each step."""
    delta = initial_delta(np.shape(images), spec, rngs)
    out = [delta]
    for _ in range(spec.steps):
        delta = _step(params, images, labels, delta, spec.alpha, spec)
        out.append(delta)
    return out


def _single(sample):
    return np.asarray(sample.image, dtype=np.float64)[None], [sample.labels]


def _check_labeled(sample):
    if sample.labels is None:
        raise ValueError("attacks need a labeled sample; the detection loss is undefined otherwise")


def fgsm(params, sample, spec, rng=None):
    """Zero- or random-initialized FGSM perturbation for one sample."""
    if spec.method not in ("fgsm_zero", "fgsm_random"):
        raise ValueError(f"fgsm called with method {spec.method!r}")
    _check_labeled(sample)
    x, labels = _single(sample)
    rngs = [rng] if rng is not None else None
    return perturb_batch(params, x, labels, spec, rngs)[0]


def pgd(params, sample, spec, rng=None):
    if spec.method != "pgd":
        raise ValueError(f"pgd called with method {spec.method!r}")
    _check_labeled(sample)
    x, labels = _single(sample)
    rngs = [rng] if rng is not None else None
    return perturb_batch(params, x, labels, spec, rngs)[0]


def per_task_deltas(params, sample, spec, rng=None):
    """FGSM perturbations from each task loss alone: ``{cls, loc, obj}``."""
    _check_labeled(sample)
    x, labels = _single(sample)
    rngs = [rng] if rng is not None else None
    delta0 = initial_delta(x.shape, spec, rngs)
    return {
        t: signed_step(params, x, labels, delta0, spec.epsilon, spec.epsilon, t)[0] for t in TASKS
    }


def select_mtl(params, sample, candidate_deltas):
    """The task perturbation that maximizes the total detection loss."""
    if not candidate_deltas:
        raise ValueError("no candidate perturbations")
    x, labels = _single(sample)
    cands = {k: np.asarray(v)[None] for k, v in candidate_deltas.items()}
    chosen, _ = select_max_task(params, x, labels, cands)
    return chosen[0]
