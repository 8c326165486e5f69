"""On-disk artifacts: checkpoints, history and evaluation CSVs.

A checkpoint is an 8-byte little-endian header length, a UTF-8 JSON header,
then every array as raw little-endian float64 in header order. Floats
round-trip exactly, so resuming from a checkpoint is bit-exact.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .detector import DetectorParams
from .featalign import DiscriminatorParams
from .trainer import HISTORY_COLUMNS, EpochRecord, TrainConfig, TrainState

MAGIC = "advshift-checkpoint"
VERSION = 1
_GROUPS = ("params", "dparams", "velocity", "d_velocity")


class CheckpointError(ValueError):
    pass


def _group_arrays(state, group):
    if group == "params":
        return state.params.arrays
    if group == "dparams":
        return state.dparams.arrays
    return getattr(state, group)


def save_checkpoint(path, state, config):
    """Write ``state`` (trained with ``config``) to ``path``."""
    layout, chunks = [], []
    for group in _GROUPS:
        for name, arr in _group_arrays(state, group).items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            layout.append({"group": group, "name": name, "shape": list(arr.shape)})
            chunks.append(arr.tobytes())
    header = {
        "format": MAGIC,
        "version": VERSION,
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "epoch": state.epoch,
        # all randomness is keyed by (seed, epoch, index), so this is the whole rng state
        "rng": {"seed": config.seed, "epoch": state.epoch},
        # wall time is left out so equal runs give byte-identical files
        "history": [{k: v for k, v in dataclasses.asdict(r).items() if k != "wall_time"}
                    for r in state.history],
        "arrays": layout,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", raw)
        header = json.loads(fh.read(n).decode())
    if header.get("format") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    return header


def load_checkpoint(path):
    """Return ``(state, config)`` from a checkpoint file."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + n].decode())
    if header.get("format") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    config = TrainConfig.from_dict(header["config"])
    groups = {g: {} for g in _GROUPS}
    offset = 8 + n
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: payload shorter than header says")
        arr = np.frombuffer(data[offset:end], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        groups[entry["group"]][entry["name"]] = arr
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    state = TrainState(
        DetectorParams(config.detector, groups["params"]),
        DiscriminatorParams(groups["dparams"]),
        groups["velocity"],
        groups["d_velocity"],
        epoch=int(header["epoch"]),
        history=[EpochRecord(**{"wall_time": 0.0, **r}) for r in header["history"]],
    )
    return state, config


def write_history_csv(path, history, include_timing=True):
    cols = HISTORY_COLUMNS if include_timing else [c for c in HISTORY_COLUMNS if c != "wall_time"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in history:
            d = dataclasses.asdict(rec)
            w.writerow([_fmt(d[c]) for c in cols])


def read_history_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        vals = {k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()}
        vals.setdefault("wall_time", 0.0)
        out.append(EpochRecord(**vals))
    return out


def eval_columns(num_classes):
    return [f"AP_class{c}" for c in range(num_classes)] + ["mAP"]


def write_eval_csv(path, rows, num_classes):
    """``rows`` is a list of ``(label, EvalResult)``; one row per model."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + eval_columns(num_classes))
        for label, res in rows:
            w.writerow([label] + [_fmt(v) for v in res.row()])


def write_table_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
