"""File formats: JSON configs, dataset CSV + sidecar, binary model file, manifests.

Model file layout::

    bytes 0-7   magic  b"QRFVAR\\r\\n"
    byte  8     format version (currently 1)
    bytes 9-    uncompressed ``.npz`` archive (loaded with allow_pickle=False)

The archive holds the flat forest arrays (``x``, ``y``, ``feature``,
``threshold``, ``left``, ``right``, ``leaf_start``, ``leaf_count``,
``node_offset``, ``members``, ``member_offset``, ``structure``,
``structure_offset``), a UTF-8 JSON blob ``meta`` (forest config, training
provenance) and, for calibrated models, ``calib_alphas``, ``calib_offsets``
and ``calib_scores`` (one row of conformity scores per level).
"""

import csv
import datetime as _dt
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import ConformalModel
from .errors import ConfigError, ModelFormatError
from .forest import Forest, ForestConfig
from .market import MarketConfig, OfflineDataset

MAGIC = b"QRFVAR\r\n"
FORMAT_VERSION = 1

_FOREST_ARRAYS = ("x", "y", "feature", "threshold", "left", "right", "leaf_start", "leaf_count",
                  "node_offset", "members", "member_offset", "structure", "structure_offset")


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode())


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_json(path, what="config"):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(what, f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(what, f"{path} is not valid JSON ({exc.msg} at line {exc.lineno})") from None


def load_market_config(path):
    return MarketConfig.from_dict(read_json(path, "market"))


def load_forest_config(path):
    return ForestConfig.from_dict(read_json(path, "forest"))


# -- datasets ----------------------------------------------------------------


def format_float(v):
    return repr(float(v))


def save_dataset(dataset, path, metadata=None):
    """CSV with header ``x1..xd,loss``; ``metadata`` goes to ``<path>.meta.json``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x{k + 1}" for k in range(dataset.d)] + ["loss"])
    for row, loss in zip(dataset.x, dataset.loss):
        writer.writerow([format_float(v) for v in row] + [format_float(loss)])
    atomic_write_text(path, buf.getvalue())
    if metadata is not None:
        atomic_write_text(metadata_path(path), json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def metadata_path(path):
    return Path(str(path) + ".meta.json")


def load_dataset(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise ConfigError("data", f"dataset not found: {path}") from None
    if not rows:
        raise ConfigError("data", f"{path} is empty")
    header = rows[0]
    d = len(header) - 1
    if d < 1 or header != [f"x{k + 1}" for k in range(d)] + ["loss"]:
        raise ConfigError("data", f"{path}: header must be x1,...,xd,loss")
    try:
        values = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, d + 1)
    except ValueError:
        raise ConfigError("data", f"{path}: non-numeric or ragged rows") from None
    seed = 0
    meta = metadata_path(path)
    if meta.exists():
        seed = json.loads(meta.read_text()).get("seed", 0)
    return OfflineDataset(values[:, :d], values[:, d], seed)


# -- models ------------------------------------------------------------------


@dataclass
class ModelBundle:
    forest: Forest
    conformal: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_model(path, forest, conformal=None, meta=None):
    conformal = conformal or {}
    meta = dict(meta or {})
    meta["forest_config"] = forest.config.to_dict()
    meta["format_version"] = FORMAT_VERSION
    arrays = {name: getattr(forest, name) for name in _FOREST_ARRAYS}
    if conformal:
        alphas = sorted(conformal)
        modes = {conformal[a].correction_mode for a in alphas}
        if len(modes) != 1:
            raise ValueError("all calibrations in one model must share a correction mode")
        meta["correction_mode"] = modes.pop()
        arrays["calib_alphas"] = np.array(alphas, dtype=float)
        arrays["calib_offsets"] = np.array([conformal[a].offset for a in alphas], dtype=float)
        arrays["calib_scores"] = np.vstack([conformal[a].scores for a in alphas])
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, MAGIC + bytes([FORMAT_VERSION]) + buf.getvalue())


def load_model(path):
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise ModelFormatError(f"model file not found: {path}") from None
    if raw[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path} is not a model file (bad magic header)")
    version = raw[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path} has format version {version}, this build reads {FORMAT_VERSION}")
    try:
        npz = np.load(io.BytesIO(raw[len(MAGIC) + 1 :]), allow_pickle=False)
        data = {k: npz[k] for k in npz.files}
        meta = json.loads(data.pop("meta").tobytes().decode())
    except Exception as exc:
        raise ModelFormatError(f"{path}: corrupt payload ({exc})") from None
    config = ForestConfig.from_dict(meta["forest_config"])
    forest = Forest(config, *(data[name] for name in _FOREST_ARRAYS))
    conformal = {}
    if "calib_alphas" in data:
        mode = meta.get("correction_mode", "finite_sample")
        for a, off, scores in zip(data["calib_alphas"], data["calib_offsets"], data["calib_scores"]):
            conformal[float(a)] = ConformalModel(forest, float(off), float(a), scores, mode)
    return ModelBundle(forest, conformal, meta)


# -- manifests ---------------------------------------------------------------


def now_iso():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path, command, args, artifacts, configs=None, seeds=None, extra=None, started=None):
    """Record what was run and what it produced, with artifact checksums."""
    manifest = {
        "tool": "qrfvar",
        "version": __version__,
        "command": command,
        "args": args,
        "configs": configs or {},
        "seeds": seeds or {},
        "artifacts": {
            role: {"path": str(p), "sha256": sha256_file(p)} for role, p in artifacts.items() if Path(p).exists()
        },
        "started": started,
        "finished": now_iso(),
    }
    if extra:
        manifest.update(extra)
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
