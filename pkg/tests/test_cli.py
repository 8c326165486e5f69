import csv
import json
import subprocess
import sys

import pytest

from advshift.cli import main

TINY_SCENE = {"num_classes": 3}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for name, beta, seed in (("src", 0.0, 1), ("tgt", 1.0, 2)):
        cfg = _write(root / f"{name}.json",
                     {"kind": "dataset", "n": 12, "seed": seed, "scene": TINY_SCENE,
                      "domain": {"beta": beta}})
        assert main(["generate", "--config", cfg, "--out", str(root / name)]) == 0
    train_cfg = _write(root / "train.json", {
        "source": str(root / "src"), "target": str(root / "tgt"),
        "train": {"mode": "at-afl", "epochs": 2, "batch_size": 6, "target_batch_size": 4, "runs": 1},
    })
    assert main(["train", "--config", train_cfg, "--out", str(root / "run")]) == 0
    return root


def test_generate_writes_config_and_is_reproducible(workdir, tmp_path, capsys):
    cfg = str(workdir / "src.json")
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    h = capsys.readouterr().out.strip()
    manifest = json.loads((workdir / "src" / "manifest.json").read_text())
    assert h == manifest["content_hash"]
    resolved = json.loads((tmp_path / "again" / "config.json").read_text())
    assert resolved["n"] == 12 and resolved["domain"]["beta"] == 0.0


def test_generate_benchmark_default_layout(tmp_path, capsys):
    cfg = _write(tmp_path / "b.json", {"n_source_train": 3, "n_source_test": 2,
                                       "n_target_train": 3, "n_target_test": 2})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out.split()
    assert out[0::2] == ["source_train", "source_test", "target_train", "target_test"]
    for split in out[0::2]:
        assert (tmp_path / "b" / split / "manifest.json").exists()


def test_train_outputs(workdir, capsys):
    run = workdir / "run"
    assert (run / "run0.ckpt").exists()
    assert (run / "config.json").exists()
    with open(run / "run0_history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert {"epoch", "lr", "l_det", "l_cls", "l_loc", "l_obj", "l_afl_s", "l_afl_t"} <= set(rows[0])


def test_train_prints_mode_and_attack(workdir, tmp_path, capsys):
    cfg = _write(tmp_path / "t.json", {"source": str(workdir / "src"),
                                      "train": {"mode": "at", "epochs": 1, "runs": 1}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "mode AT" in out
    assert "attack fgsm_zero selector det epsilon 1/255" in out


def test_resume_matches_uninterrupted(workdir, tmp_path):
    cfg = str(workdir / "train.json")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a"), "--stop-after", "1"]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "b"),
                 "--resume", str(tmp_path / "a" / "run0.ckpt")]) == 0
    assert (tmp_path / "b" / "run0.ckpt").read_bytes() == (workdir / "run" / "run0.ckpt").read_bytes()


def test_evaluate_and_fd(workdir, tmp_path, capsys):
    ckpt = str(workdir / "run" / "run0.ckpt")
    assert main(["evaluate", "--checkpoint", ckpt, "--dataset", str(workdir / "tgt"),
                 "--out", str(tmp_path / "e")]) == 0
    header = (tmp_path / "e" / "eval.csv").read_text().splitlines()[0]
    assert header == "model,AP_class0,AP_class1,AP_class2,mAP"
    cal = _write(tmp_path / "cal.json", {"threshold": 1.0, "band": 0.2})
    assert main(["fd", "--checkpoint", ckpt, "--dataset-a", str(workdir / "src"),
                 "--dataset-b", str(workdir / "tgt"), "--calibration", cal,
                 "--out", str(tmp_path / "f")]) == 0
    rep = json.loads((tmp_path / "f" / "shift_report.json").read_text())
    assert rep["fd"] > 0
    assert rep["recommendation"] in ("standard_training", "adversarial_training", "uncertain")
    assert (tmp_path / "f" / "config.json").exists()


@pytest.mark.parametrize("cfg, message", [
    ({"train": {}}, "missing required field 'source'"),
    ({"source": "x", "train": {"mode": "fast"}}, "unknown mode"),
    ({"source": "x", "train": {"epochs": 1, "lr": 3}}, "unknown train config fields"),
])
def test_train_config_errors_exit_2(tmp_path, capsys, cfg, message):
    path = _write(tmp_path / "bad.json", cfg)
    assert main(["train", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert message in capsys.readouterr().err


def test_missing_n_and_bad_json(tmp_path, capsys):
    path = _write(tmp_path / "d.json", {"kind": "dataset"})
    assert main(["generate", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert "missing required field 'n'" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{")
    assert main(["generate", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path / "o")]) == 2


def test_class_count_mismatch_exit_2(workdir, tmp_path, capsys):
    cfg = _write(tmp_path / "t.json", {"source": str(workdir / "src"),
                                      "train": {"epochs": 1, "detector": {"num_classes": 2}}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "classes" in capsys.readouterr().err


def test_missing_checkpoint_exit_2(workdir, tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--dataset", str(workdir / "tgt"), "--out", str(tmp_path / "e")]) == 2


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_sweep_and_report(tmp_path, capsys):
    cfg = _write(tmp_path / "p.json", {
        "benchmark": {"n_source_train": 8, "n_source_test": 2, "n_target_train": 8, "n_target_test": 6},
        "train": {"epochs": 1, "batch_size": 8, "runs": 1},
        "modes": ["st", "at"],
    })
    assert main(["sweep", "mode-compare", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    with open(tmp_path / "s" / "mode-compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["mode"] for r in rows] == ["st", "at"]
    assert main(["report", "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "report.md").read_text().startswith("## mode-compare")
    assert main(["sweep", "nonsense", "--out", str(tmp_path / "x")]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "advshift", "report", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "no config.json" in proc.stderr
