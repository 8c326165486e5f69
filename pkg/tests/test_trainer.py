import dataclasses

import numpy as np
import pytest

from advshift import trainer as T
from advshift.datagen import DomainSpec, SceneSpec, build_dataset
from advshift.featalign import AlignmentConfig
from advshift.perturb import PerturbationSpec
from advshift.trainer import TrainConfig, TrainingConfigError


@pytest.fixture(scope="module")
def data():
    src = build_dataset(SceneSpec(), DomainSpec(nonrobust_amplitude=8 / 255), 24, 1)
    tgt = build_dataset(SceneSpec(), DomainSpec(beta=1.0, nonrobust_present=False), 12, 2)
    return src, tgt


def _same_state(a, b):
    for k in a.params.arrays:
        assert a.params.arrays[k].tobytes() == b.params.arrays[k].tobytes(), k
    for k in a.velocity:
        assert a.velocity[k].tobytes() == b.velocity[k].tobytes(), k


def test_lr_schedule_examples():
    cfg = TrainConfig(epochs=50)
    assert T.lr_schedule(0.0, cfg) == 0.0
    assert T.lr_schedule(3 / 50, cfg) == pytest.approx(1e-2, abs=1e-12)
    assert T.lr_schedule(1.0, cfg) == pytest.approx(2e-3, abs=1e-12)
    mid = (3 / 50 + 1) / 2
    assert T.lr_schedule(mid, cfg) == pytest.approx(6e-3, abs=1e-12)
    assert T.lr_schedule(1.5 / 50, cfg) == pytest.approx(5e-3, abs=1e-12)
    with pytest.raises(ValueError):
        T.lr_schedule(1.5, cfg)


def test_lr_schedule_monotone_after_warmup():
    cfg = TrainConfig(epochs=20)
    fr = np.linspace(3 / 20, 1, 200)
    lrs = [T.lr_schedule(f, cfg) for f in fr]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sgd_step_hand_case():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.5])}
    v = {"w": np.array([0.1, 0.0])}
    new_p, new_v = T.sgd_step(p, g, 0.1, 0.9, 0.01, v)
    np.testing.assert_allclose(new_v["w"], [0.09 + 0.5 + 0.01, 0.5 - 0.02])
    np.testing.assert_allclose(new_p["w"], [1.0 - 0.1 * 0.6, -2.0 - 0.1 * 0.48])
    assert p["w"][0] == 1.0  # inputs untouched


def test_config_validation():
    with pytest.raises(TrainingConfigError):
        TrainConfig(mode="adv")
    with pytest.raises(TrainingConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(TrainingConfigError):
        TrainConfig(mode="at", perturbation=PerturbationSpec(method="none"))
    with pytest.raises(TrainingConfigError):
        TrainConfig.from_dict({"epochs": 2, "learning_rate": 0.1})
    assert TrainConfig(mode="at-afl").mode == "AT_AFL"
    cfg = TrainConfig(mode="st-afl", epochs=4, alignment=AlignmentConfig(lam=0.3))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig.from_dict(cfg.to_dict()).digest() == cfg.digest()


def test_afl_modes_need_target(data):
    src, _ = data
    with pytest.raises(TrainingConfigError):
        T.train(TrainConfig(mode="st-afl", epochs=1), src.images, src.labels)


def test_training_is_deterministic(data):
    src, tgt = data
    cfg = TrainConfig(mode="at-afl", epochs=2, batch_size=8, target_batch_size=4,
                      perturbation=PerturbationSpec(method="fgsm_random"), flip=True)
    a = T.train(cfg, src.images, src.labels, tgt.images)
    b = T.train(cfg, src.images, src.labels, tgt.images)
    _same_state(a, b)
    assert len(a.history) == 2
    assert [r.epoch for r in a.history] == [1, 2]
    c = T.train(dataclasses.replace(cfg, seed=1), src.images, src.labels, tgt.images)
    assert not np.array_equal(a.params.arrays["f1.0.w"], c.params.arrays["f1.0.w"])


def test_at_with_zero_epsilon_is_st(data):
    src, _ = data
    st = T.train(TrainConfig(mode="st", epochs=2, batch_size=8), src.images, src.labels)
    at = T.train(TrainConfig(mode="at", epochs=2, batch_size=8,
                             perturbation=PerturbationSpec(epsilon=0.0)), src.images, src.labels)
    _same_state(st, at)


def test_at_afl_with_zero_lambda_is_at(data):
    src, tgt = data
    base = TrainConfig(mode="at", epochs=2, batch_size=8)
    at = T.train(base, src.images, src.labels)
    aligned = T.train(dataclasses.replace(base, mode="at-afl", alignment=AlignmentConfig(lam=0.0)),
                      src.images, src.labels, tgt.images)
    _same_state(at, aligned)


def test_resume_is_bit_exact(data):
    src, tgt = data
    cfg = TrainConfig(mode="at-afl", epochs=3, batch_size=8, target_batch_size=5)
    full = T.train(cfg, src.images, src.labels, tgt.images)
    half = T.train(cfg, src.images, src.labels, tgt.images, stop_after_epoch=1)
    assert half.epoch == 1
    resumed = T.train(cfg, src.images, src.labels, tgt.images, state=half)
    _same_state(full, resumed)
    for k in full.dparams.arrays:
        assert full.dparams.arrays[k].tobytes() == resumed.dparams.arrays[k].tobytes()


def test_target_labels_never_needed(data):
    src, tgt = data
    # images only: a bare array works
    st = T.train(TrainConfig(mode="st-afl", epochs=1, batch_size=8), src.images, src.labels,
                 np.asarray(tgt.images))
    assert st.history[0].l_afl_s > 0


def test_loss_decreases_in_smoke_runs():
    src = build_dataset(SceneSpec(), DomainSpec(), 64, 3)
    for seed in range(3):
        cfg = TrainConfig(mode="st", epochs=6, batch_size=16, warmup_epochs=1, seed=seed)
        st = T.train(cfg, src.images, src.labels)
        assert st.history[-1].l_det < st.history[0].l_det


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_gradient_is_reported(data):
    src, _ = data
    state = T.initial_state(TrainConfig())
    state.params.arrays["f1.0.w"][...] = np.nan
    with pytest.raises(T.NonFiniteGradient, match="epoch 0, batch 0"):
        T.train(TrainConfig(epochs=1), src.images, src.labels, state=state)


def test_run_replicates_means(data):
    src, _ = data
    cfg = TrainConfig(mode="st", epochs=1, batch_size=8, runs=3, seed=5)
    rep = T.run_replicates(cfg, src.images, src.labels,
                           evaluate=lambda st: {"x": float(st.params.arrays["f2.1.b"][0])},
                           keep_states=True)
    vals = [float(s.params.arrays["f2.1.b"][0]) for s in rep.states]
    assert len(rep.per_run) == 3
    assert rep.metrics["x"] == pytest.approx(np.mean(vals), abs=1e-15)
    one = T.train(dataclasses.replace(cfg, seed=6), src.images, src.labels)
    _same_state(one, rep.states[1])


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    out = T.clip_grad_norm(g, 1.0)
    np.testing.assert_allclose(out["a"], [0.6, 0.0])
    np.testing.assert_allclose(out["b"], [[0.8]])
    assert T.clip_grad_norm(g, 5.0) is g
    assert T.clip_grad_norm(g, None) is g
    with pytest.raises(TrainingConfigError):
        TrainConfig(grad_clip=0.0)


def test_short_runs_warm_up_throughout():
    cfg = TrainConfig(epochs=2)
    assert T.lr_schedule(1.0, cfg) == pytest.approx(1e-2)
    assert T.lr_schedule(0.5, cfg) == pytest.approx(5e-3)
