"""On-disk formats: corpus text files, curve CSVs, JSON records and model checkpoints."""
from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

import numpy as np

from ..models import AutoregressiveModel, TabularModel
from ..space import enumerate_space
from ..synth import Corpora

CHECKPOINT_VERSION = 1
CURVE_COLUMNS = ("step", "direction", "loss_name", "value", "seed", "strategy")
CORPUS_FILES = {
    "parallel": "parallel.tsv",
    "mono_x": "mono_x.txt",
    "mono_y": "mono_y.txt",
    "valid": "valid.tsv",
    "test": "test.tsv",
}


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def format_sentence(s) -> str:
    return " ".join(s)


def parse_sentence(line: str) -> tuple:
    return tuple(line.split())


def write_corpora(corpora: Corpora, directory) -> None:
    """One sentence per line, symbols space separated; pairs tab separated."""
    d = Path(directory)
    for name, fname in CORPUS_FILES.items():
        items = getattr(corpora, name)
        if name.startswith("mono"):
            lines = [format_sentence(s) for s in items]
        else:
            lines = [format_sentence(s) + "\t" + format_sentence(t) for s, t in items]
        _write_text(d / fname, "".join(line + "\n" for line in lines))


def read_corpora(directory) -> Corpora:
    d = Path(directory)
    parts = {}
    for name, fname in CORPUS_FILES.items():
        path = d / fname
        if not path.exists():
            raise FileNotFoundError(f"missing corpus file {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        if name.startswith("mono"):
            parts[name] = [parse_sentence(line) for line in lines]
        else:
            pairs = []
            for k, line in enumerate(lines):
                if "\t" not in line:
                    raise ValueError(f"{path}:{k + 1}: expected a tab-separated pair")
                s, t = line.split("\t", 1)
                pairs.append((parse_sentence(s), parse_sentence(t)))
            parts[name] = pairs
    return Corpora(**parts)


def write_curves(rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in rows:
        w.writerow([r["step"], r["direction"], r["loss_name"], repr(float(r["value"])), r["seed"], r["strategy"]])
    _write_text(Path(path), buf.getvalue())


def read_curves(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
            raise ValueError(f"{path}: unexpected curve columns {reader.fieldnames}")
        return [
            {"step": int(r["step"]), "direction": r["direction"], "loss_name": r["loss_name"],
             "value": float(r["value"]), "seed": int(r["seed"]), "strategy": r["strategy"]}
            for r in reader
        ]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(obj, path) -> None:
    _write_text(Path(path), json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# -- checkpoints -----------------------------------------------------------------


def _model_arrays(prefix, model):
    return {
        f"{prefix}_type": np.array(type(model).__name__),
        f"{prefix}_logits": model.logits,
        f"{prefix}_src_alphabet": np.array(model.src_space.alphabet, dtype=str),
        f"{prefix}_dst_alphabet": np.array(model.dst_space.alphabet, dtype=str),
        f"{prefix}_max_len": np.array([model.src_space.max_len, model.dst_space.max_len]),
    }


def save_checkpoint(path, p_theta, q_phi, meta=None) -> None:
    """Versioned ``.npz`` container with both directions and JSON metadata."""
    arrays = {"format_version": np.array(CHECKPOINT_VERSION)}
    arrays.update(_model_arrays("forward", p_theta))
    arrays.update(_model_arrays("backward", q_phi))
    arrays["meta"] = np.array(json.dumps(_jsonable(meta or {}), sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _load_model(data, prefix, spaces):
    kind = str(data[f"{prefix}_type"])
    cls = {"TabularModel": TabularModel, "AutoregressiveModel": AutoregressiveModel}.get(kind)
    if cls is None:
        raise ValueError(f"unknown model type {kind!r} in checkpoint")
    n_src, n_dst = (int(v) for v in data[f"{prefix}_max_len"])
    key_s = (tuple(str(c) for c in data[f"{prefix}_src_alphabet"]), n_src)
    key_d = (tuple(str(c) for c in data[f"{prefix}_dst_alphabet"]), n_dst)
    for key in (key_s, key_d):
        if key not in spaces:
            spaces[key] = enumerate_space(*key)
    return cls(spaces[key_s], spaces[key_d], data[f"{prefix}_logits"])


def load_checkpoint(path):
    """``(p_theta, q_phi, meta)`` from :func:`save_checkpoint` output."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        spaces: dict = {}
        p = _load_model(data, "forward", spaces)
        q = _load_model(data, "backward", spaces)
        meta = json.loads(str(data["meta"]))
    return p, q, meta


def default_out_root() -> Path:
    return Path(os.environ.get("DUALREC_OUT", "dualrec-out"))
