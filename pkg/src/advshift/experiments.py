"""Experiment grids: mode comparison, epsilon sweep, loss comparison, beta sweep.

Every grid point is a pure function of its configs, so points can run in
worker processes (``ADVSHIFT_WORKERS``) without changing any result.
"""
from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import DomainSpec, SceneSpec, build_dataset, domain_from_dict, scene_from_dict
from .metrics import (Calibration, count_inversions, evaluate, extract_pooled_features, fit_gaussian,
                      frechet_distance, spearman)
from .perturb import PerturbationSpec
from .trainer import TrainConfig, run_replicates

WORKERS_ENV = "ADVSHIFT_WORKERS"
DEFAULT_BETAS = tuple(round(0.1 * i, 1) for i in range(11))
DEFAULT_EPSILONS = (0.0, 0.5 / 255, 1 / 255, 2 / 255)
ATTACK_METHODS = ("fgsm_zero", "fgsm_random", "pgd")
LOSS_SELECTORS = ("det", "mtl", "cls", "loc", "obj")
MODE_ROWS = ("st", "st-afl", "at", "at-afl")

_SPLITS = {"source_train": 0, "source_test": 1, "target_train": 2, "target_test": 3}


def split_seed(seed, split):
    """Independent dataset seed for each split of a benchmark."""
    ss = np.random.SeedSequence([int(seed), _SPLITS[split], 0xDA7A])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class BenchmarkSpec:
    """Source train/test and target train/test splits of one synthetic benchmark.

    The target split is the source domain restyled at ``target_beta``; its
    cues are randomized unless ``target_cues`` is set.
    """

    scene: SceneSpec = field(default_factory=SceneSpec)
    domain: DomainSpec = field(default_factory=DomainSpec)
    target_beta: float = 1.0
    target_cues: bool = False
    n_source_train: int = 500
    n_source_test: int = 200
    n_target_train: int = 500
    n_target_test: int = 200
    seed: int = 0

    def target_domain(self):
        return replace(self.domain, beta=self.target_beta, nonrobust_present=self.target_cues)

    def source_domain(self):
        return replace(self.domain, beta=0.0, nonrobust_present=True)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "scene" in d:
            d["scene"] = scene_from_dict(d["scene"])
        if "domain" in d:
            d["domain"] = domain_from_dict(d["domain"])
        return cls(**d)


@dataclass
class Benchmark:
    spec: BenchmarkSpec
    source_train: object
    source_test: object
    target_train: object
    target_test: object


def build_benchmark(spec=None):
    spec = spec or BenchmarkSpec()
    src, tgt = spec.source_domain(), spec.target_domain()
    return Benchmark(
        spec,
        build_dataset(spec.scene, src, spec.n_source_train, split_seed(spec.seed, "source_train"), "source"),
        build_dataset(spec.scene, src, spec.n_source_test, split_seed(spec.seed, "source_test"), "source"),
        build_dataset(spec.scene, tgt, spec.n_target_train, split_seed(spec.seed, "target_train"), "target"),
        build_dataset(spec.scene, tgt, spec.n_target_test, split_seed(spec.seed, "target_test"), "target"),
    )


def workers():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def _parallel_map(fn, items):
    n = workers()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(n, len(items))) as ex:
        return list(ex.map(fn, items))


def _ap_metrics(params, ds):
    res = evaluate(params, ds.images, ds.labels)
    out = {f"AP_class{c}": (math.nan if a is None else a) for c, a in enumerate(res.per_class)}
    out["mAP"] = res.mAP
    return out


def _train_and_eval(job):
    config, bench = job
    rep = run_replicates(
        config,
        bench.source_train.images,
        bench.source_train.labels,
        bench.target_train.images,
        evaluate=lambda st: _ap_metrics(st.params, bench.target_test),
    )
    return rep


def _row(base, rep):
    row = dict(base)
    row.update(rep.metrics)
    row["mAP_runs"] = " ".join(repr(r["mAP"]) for r in rep.per_run)
    return row


def mode_compare(bench, config=None, modes=MODE_ROWS):
    """Target-test APs for each training mode (one row per mode)."""
    config = config or TrainConfig()
    jobs = [(replace(config, mode=m), bench) for m in modes]
    reps = _parallel_map(_train_and_eval, jobs)
    return [_row({"mode": m}, r) for m, r in zip(modes, reps)]


def epsilon_sweep(bench, config=None, methods=ATTACK_METHODS, epsilons=DEFAULT_EPSILONS):
    """Target mAP of AT per (method, epsilon). ``epsilon = 0`` is trained once as ST."""
    config = config or TrainConfig()
    points, jobs = [], []
    if any(e == 0 for e in epsilons):
        points.append(("none", 0.0))
        jobs.append((replace(config, mode="ST"), bench))
    for m in methods:
        for e in epsilons:
            if e == 0:
                continue
            spec = replace(config.perturbation, method=m, epsilon=float(e))
            points.append((m, float(e)))
            jobs.append((replace(config, mode="AT", perturbation=spec), bench))
    reps = _parallel_map(_train_and_eval, jobs)
    return [
        _row({"method": m, "epsilon": e, "epsilon_255": round(e * 255, 6)}, r)
        for (m, e), r in zip(points, reps)
    ]


def best_per_method(rows):
    """Highest-mAP row for every attack method (the ST baseline is skipped)."""
    best = {}
    for r in rows:
        if r["method"] == "none":
            continue
        if r["method"] not in best or r["mAP"] > best[r["method"]]["mAP"]:
            best[r["method"]] = r
    return best


def loss_compare(bench, config=None, selectors=LOSS_SELECTORS):
    """Target mAP of AT when the attack ascends each loss selector."""
    config = config or TrainConfig()
    jobs = []
    for s in selectors:
        spec = replace(config.perturbation, loss_selector=s)
        jobs.append((replace(config, mode="AT", perturbation=spec), bench))
    reps = _parallel_map(_train_and_eval, jobs)
    return [_row({"selector": s}, r) for s, r in zip(selectors, reps)]


def sweep_domain(domain, beta):
    """Stylized test domain at ``beta``: cues agree with the class with probability ``1 - beta``."""
    return replace(domain, beta=beta, nonrobust_present=True, cue_fidelity=1.0 - beta)


def beta_test_sets(bench, betas=DEFAULT_BETAS):
    spec = bench.spec
    return [
        build_dataset(spec.scene, sweep_domain(spec.domain, b), spec.n_target_test,
                      split_seed(spec.seed, "target_test"), "target")
        for b in betas
    ]


def beta_sweep(bench, config_st=None, config_at=None, betas=DEFAULT_BETAS, trained=None):
    """FD and AT/ST mAP ratio over stylized test sets.

    Features come from the first ST replicate (the frozen extractor); the
    mAPs are replicate means. ``trained`` may supply already trained
    ``(st_params_list, at_params_list)``. Returns the rows and a ``Calibration``.
    """
    tests = beta_test_sets(bench, betas)
    src = bench.source_train
    if trained is None:
        config_st = replace(config_st or TrainConfig(), mode="ST")
        config_at = replace(config_at or TrainConfig(), mode="AT")
        st = run_replicates(config_st, src.images, src.labels, keep_states=True).states
        at = run_replicates(config_at, src.images, src.labels, keep_states=True).states
        trained = ([s.params for s in st], [s.params for s in at])
    st_params, at_params = trained
    extractor = st_params[0]
    src_stats = fit_gaussian(extract_pooled_features(extractor, src.images))
    rows = []
    for b, t in zip(betas, tests):
        m_st = float(np.mean([evaluate(p, t.images, t.labels).mAP for p in st_params]))
        m_at = float(np.mean([evaluate(p, t.images, t.labels).mAP for p in at_params]))
        rows.append({
            "beta": float(b),
            "fd": frechet_distance(src_stats, fit_gaussian(extract_pooled_features(extractor, t.images))),
            "map_st": m_st,
            "map_at": m_at,
            "ratio": m_at / m_st if m_st > 0 else math.nan,
        })
    return rows, calibrate(rows)


def calibrate(rows, band=0.2):
    valid = [r for r in rows if not math.isnan(r["ratio"])]
    return Calibration.from_sweep([r["fd"] for r in valid], [r["ratio"] for r in valid], band)


def sweep_summary(rows):
    """Spearman(FD, ratio) and the number of FD decreases along the grid."""
    valid = [r for r in rows if not math.isnan(r["ratio"])]
    return {
        "spearman": spearman([r["fd"] for r in valid], [r["ratio"] for r in valid]),
        "fd_inversions": count_inversions([r["fd"] for r in rows]),
    }


# ---------------------------------------------------------------------------
# presets


PRESETS = ("beta-sweep", "epsilon-sweep", "loss-compare", "mode-compare")


@dataclass
class ExperimentPreset:
    name: str
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    betas: tuple = DEFAULT_BETAS
    epsilons: tuple = DEFAULT_EPSILONS
    methods: tuple = ATTACK_METHODS
    selectors: tuple = LOSS_SELECTORS
    modes: tuple = MODE_ROWS

    def __post_init__(self):
        if self.name not in PRESETS:
            raise ValueError(f"unknown preset {self.name!r}; expected one of {', '.join(PRESETS)}")

    def to_dict(self):
        return {
            "name": self.name,
            "benchmark": self.benchmark.to_dict(),
            "train": self.train.to_dict(),
            "betas": list(self.betas),
            "epsilons": list(self.epsilons),
            "methods": list(self.methods),
            "selectors": list(self.selectors),
            "modes": list(self.modes),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "benchmark" in d:
            d["benchmark"] = BenchmarkSpec.from_dict(d["benchmark"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        for k in ("betas", "epsilons", "methods", "selectors", "modes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def run_preset(preset):
    """Run a preset; returns ``(columns, rows, extra)`` where extra is a summary dict."""
    bench = build_benchmark(preset.benchmark)
    cfg = preset.train
    nc = preset.benchmark.scene.num_classes
    ap_cols = [f"AP_class{c}" for c in range(nc)] + ["mAP", "mAP_runs"]
    if preset.name == "mode-compare":
        rows = mode_compare(bench, cfg, preset.modes)
        return ["mode"] + ap_cols, rows, {}
    if preset.name == "epsilon-sweep":
        rows = epsilon_sweep(bench, cfg, preset.methods, preset.epsilons)
        best = {m: {"epsilon": r["epsilon"], "mAP": r["mAP"]} for m, r in best_per_method(rows).items()}
        return ["method", "epsilon", "epsilon_255"] + ap_cols, rows, {"best": best}
    if preset.name == "loss-compare":
        rows = loss_compare(bench, cfg, preset.selectors)
        return ["selector"] + ap_cols, rows, {}
    rows, cal = beta_sweep(bench, cfg, cfg, preset.betas)
    extra = sweep_summary(rows)
    extra["calibration"] = {"threshold": cal.threshold, "band": cal.band}
    return ["beta", "fd", "map_st", "map_at", "ratio"], rows, extra
