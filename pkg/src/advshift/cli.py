"""``advshift`` command line: generate, train, evaluate, fd, sweep, report.

Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
failures while running. Every command that takes ``--config`` copies the
resolved configuration into its output directory.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

from . import artifacts
from .datagen import domain_from_dict, generate_dataset, load_dataset, scene_from_dict, write_dataset
from .experiments import PRESETS, BenchmarkSpec, ExperimentPreset, build_benchmark, run_preset
from .metrics import Calibration, MetricError, evaluate, shift_analysis
from .trainer import TrainConfig, train

log = logging.getLogger("advshift")


class ConfigError(Exception):
    """Bad input from the user; reported with exit code 2."""


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _require(d, name, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    if name not in d:
        raise ConfigError(f"{where}: missing required field '{name}'")
    return d[name]


def _build(factory, d, where):
    try:
        return factory(d)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _eps_text(eps):
    f = Fraction(eps * 255).limit_denominator(1000)
    return f"{f.numerator}/{255 * f.denominator}" if f.denominator != 1 else f"{f.numerator}/255"


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args):
    """Without a config: the default benchmark (source/target train/test splits).

    A config with ``"kind": "dataset"`` renders one dataset and needs ``n``;
    any other config is read as a benchmark spec.
    """
    cfg = _read_json(args.config) if args.config else {}
    out = Path(args.out)
    if cfg.get("kind") == "dataset":
        n = _require(cfg, "n", "dataset config")
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        scene = _build(scene_from_dict, cfg.get("scene", {}), "scene")
        domain = _build(domain_from_dict, cfg.get("domain", {}), "domain")
        if not isinstance(n, int) or n < 1:
            raise ConfigError("dataset config: field 'n' must be a positive integer")
        ds = generate_dataset(scene, domain, n, seed, out, cfg.get("domain_tag"))
        resolved = {"kind": "dataset", "n": n, "seed": seed,
                    "scene": dataclasses.asdict(scene), "domain": dataclasses.asdict(domain)}
        _write_json(out / "config.json", resolved)
        print(ds.manifest["content_hash"])
        return 0
    body = {k: v for k, v in cfg.items() if k != "kind"}
    if args.seed is not None:
        body["seed"] = args.seed
    spec = _build(BenchmarkSpec.from_dict, body, "benchmark config")
    bench = build_benchmark(spec)
    for split in ("source_train", "source_test", "target_train", "target_test"):
        ds = getattr(bench, split)
        write_dataset(ds, out / split)
        print(f"{split} {ds.manifest['content_hash']}")
    _write_json(out / "config.json", {"kind": "benchmark", **spec.to_dict()})
    return 0


# ---------------------------------------------------------------------------
# train


def _load_split(path, where):
    try:
        ds = load_dataset(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    if len(ds) == 0:
        raise ConfigError(f"{where}: dataset {path} is empty")
    return ds


def cmd_train(args):
    """Config: ``{"source": dir, "target": dir?, "train": {TrainConfig fields}}``."""
    cfg = _read_json(args.config)
    source_path = _require(cfg, "source", "train config")
    train_dict = dict(cfg.get("train", {}))
    if args.seed is not None:
        train_dict["seed"] = args.seed
    if args.runs is not None:
        train_dict["runs"] = args.runs
    config = _build(TrainConfig.from_dict, train_dict, "train")
    src = _load_split(source_path, "source")
    tgt_images = None
    if cfg.get("target"):
        tgt_images = _load_split(cfg["target"], "target").images
    elif config.aligned:
        raise ConfigError(f"train config: mode {config.mode} needs field 'target'")
    _check_classes(src, config.detector.num_classes, "source")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {**cfg, "train": config.to_dict()})
    print(f"mode {config.mode}")
    if config.adversarial:
        p = config.perturbation
        print(f"attack {p.method} selector {p.loss_selector} epsilon {_eps_text(p.epsilon)}")

    state = None
    if args.resume:
        state, saved = artifacts.load_checkpoint(args.resume)
        if saved.digest() != config.digest():
            raise ConfigError("resume: checkpoint was written with a different train config")
    runs = 1 if args.resume else config.runs
    for r in range(runs):
        run_cfg = dataclasses.replace(config, seed=config.seed + r)
        st = train(run_cfg, src.images, src.labels, tgt_images, state=state,
                   stop_after_epoch=args.stop_after)
        tag = f"run{r}"
        artifacts.save_checkpoint(out / f"{tag}.ckpt", st, run_cfg)
        artifacts.write_history_csv(out / f"{tag}_history.csv", st.history)
        last = st.history[-1] if st.history else None
        if last is not None:
            print(f"{tag} epoch {last.epoch} l_det {last.l_det:.6f}")
    return 0


def _check_classes(ds, num_classes, where):
    scene = ds.manifest.get("scene") if ds.manifest else None
    if scene and scene.get("num_classes") not in (None, num_classes):
        raise ConfigError(
            f"{where}: dataset has {scene['num_classes']} classes, detector expects {num_classes}")
    seen = max((lab.class_id for labs in ds.labels for lab in labs), default=-1)
    if seen >= num_classes:
        raise ConfigError(f"{where}: label class {seen} out of range for {num_classes} classes")


# ---------------------------------------------------------------------------
# evaluate / fd


def _load_ckpt(path):
    try:
        return artifacts.load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except artifacts.CheckpointError as exc:
        raise ConfigError(str(exc)) from None


def cmd_evaluate(args):
    state, config = _load_ckpt(args.checkpoint)
    ds = _load_split(args.dataset, "dataset")
    nc = config.detector.num_classes
    _check_classes(ds, nc, "dataset")
    res = evaluate(state.params, ds.images, ds.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_eval_csv(out / "eval.csv", [(config.mode, res)], nc)
    _write_json(out / "config.json", {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset)})
    print(f"mAP {res.mAP:.6f}")
    return 0


def cmd_fd(args):
    state, _ = _load_ckpt(args.checkpoint)
    a = _load_split(args.dataset_a, "dataset_a")
    b = _load_split(args.dataset_b, "dataset_b")
    if len(a) < 2 or len(b) < 2:
        raise ConfigError("fd: each dataset needs at least 2 images")
    cal = None
    if args.calibration:
        c = _read_json(args.calibration)
        cal = Calibration(float(_require(c, "threshold", "calibration")), float(c.get("band", 0.2)))
    rep = shift_analysis(state.params, a.images, b.images, args.map_st, args.map_at, cal)
    out = Path(args.out)
    _write_json(out / "shift_report.json", rep.to_dict())
    _write_json(out / "config.json", {
        "checkpoint": str(args.checkpoint), "dataset_a": str(args.dataset_a),
        "dataset_b": str(args.dataset_b), "map_st": args.map_st, "map_at": args.map_at,
        "calibration": None if cal is None else dataclasses.asdict(cal)})
    print(f"fd {rep.fd:.6f} recommendation {rep.recommendation}")
    return 0


# ---------------------------------------------------------------------------
# sweep / report


def cmd_sweep(args):
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; expected one of {', '.join(PRESETS)}")
    cfg = _read_json(args.config) if args.config else {}
    cfg = {**cfg, "name": args.preset}
    preset = _build(ExperimentPreset.from_dict, cfg, "preset")
    if args.seed is not None:
        preset.train = dataclasses.replace(preset.train, seed=args.seed)
        preset.benchmark = dataclasses.replace(preset.benchmark, seed=args.seed)
    if args.runs is not None:
        preset.train = _build(lambda r: dataclasses.replace(preset.train, runs=r), args.runs, "--runs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", preset.to_dict())
    columns, rows, extra = run_preset(preset)
    artifacts.write_table_csv(out / f"{preset.name}.csv", columns, rows)
    _write_json(out / "summary.json", {"preset": preset.name, **extra})
    print(f"wrote {out / (preset.name + '.csv')} ({len(rows)} rows)")
    return 0


def cmd_report(args):
    """Print a sweep directory's table and summary as Markdown."""
    root = Path(args.out)
    cfg_path = root / "config.json"
    if not cfg_path.exists():
        raise ConfigError(f"report: {root} has no config.json")
    name = _read_json(cfg_path).get("name")
    table = root / f"{name}.csv"
    if name not in PRESETS or not table.exists():
        raise ConfigError(f"report: {root} is not a sweep output directory")
    with open(table, newline="") as fh:
        rows = list(csv.reader(fh))
    header = [c for c in rows[0] if c != "mAP_runs"]
    keep = [i for i, c in enumerate(rows[0]) if c != "mAP_runs"]
    lines = [f"## {name}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows[1:]:
        lines.append("| " + " | ".join(_short(r[i]) for i in keep) + " |")
    summary = root / "summary.json"
    if summary.exists():
        lines += ["", "```json", json.dumps(_read_json(summary), indent=1, sort_keys=True), "```"]
    text = "\n".join(lines) + "\n"
    (root / "report.md").write_text(text)
    print(text, end="")
    return 0


def _short(v):
    try:
        return f"{float(v):.4f}"
    except ValueError:
        return v


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="advshift", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render synthetic datasets")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train detectors; writes checkpoints and history CSVs")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--runs", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="stop after this many epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="per-class AP and mAP at IoU 0.5")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("fd", help="Frechet distance between two datasets plus a shift report")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--dataset-a", required=True)
    f.add_argument("--dataset-b", required=True)
    f.add_argument("--map-st", type=float)
    f.add_argument("--map-at", type=float)
    f.add_argument("--calibration", help="JSON with threshold (and band)")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fd)

    s = sub.add_parser("sweep", help="run an experiment preset")
    s.add_argument("preset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--runs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="summarize a sweep output directory")
    r.add_argument("--out", required=True, help="sweep output directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("command failed", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
