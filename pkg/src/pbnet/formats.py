"""On-disk formats: TOML configs, JSON checkpoints, JSON Lines records.

Every file carries a ``format_version``. Floats are written with 17
significant digits so a load reproduces the exact binary value, and keys are
emitted in a fixed order so identical runs give byte-identical files.
"""

import dataclasses
import json
import math

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .model import ModelParams
from .training import AdamState, SparseSample, TrainConfig, TrainState

CONFIG_VERSION = 1
CHECKPOINT_VERSION = 1
DATASET_VERSION = 1
METRICS_COLUMNS = ("epoch", "batch", "train_loss", "alpha", "lambda")


def format_float(x):
    x = float(x)
    if not math.isfinite(x):
        return "null"
    return "%.17g" % x


def dumps(obj):
    """Compact JSON with floats at 17 significant digits and insertion-ordered keys."""
    if isinstance(obj, bool) or obj is None:
        return {True: "true", False: "false", None: "null"}[obj]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{dumps(str(k))}: {dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def jsonl(rows):
    return "".join(dumps(r) + "\n" for r in rows)


def metrics_rows(metrics):
    return [{k: row[k] for k in METRICS_COLUMNS} for row in metrics]


def config_to_dict(config):
    return dataclasses.asdict(config)


def config_from_mapping(data, base=None):
    """Build a validated :class:`TrainConfig` from ``data``, overriding ``base``.

    Unknown keys are rejected.
    """
    data = dict(data)
    version = data.pop("format_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config format_version {version!r}", "format_version")
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}", key)
    base = TrainConfig() if base is None else base
    return dataclasses.replace(base, **data).validate()


def load_config(path, base=None):
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_mapping(data, base)


def config_to_toml(config):
    lines = [f"format_version = {CONFIG_VERSION}"]
    for key, value in config_to_dict(config).items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def checkpoint_to_text(config, state):
    p, adam = state.params, state.adam
    doc = {
        "format": "pbnet-checkpoint",
        "format_version": CHECKPOINT_VERSION,
        "J": p.J,
        "K": p.K,
        "N": p.N,
        "A": p.A,
        "alpha": p.alpha,
        "lambda": p.lam,
        "epochs_done": state.epochs_done,
        "adam": {
            "t": adam.t,
            "m": {k: adam.m[k] for k in ("A", "alpha", "lambda")},
            "v": {k: adam.v[k] for k in ("A", "alpha", "lambda")},
        },
        "config": config_to_dict(config),
        "seed": config.seed,
    }
    return dumps(doc) + "\n"


def checkpoint_from_text(text):
    """Parse a checkpoint; returns ``(config, TrainState)``."""
    try:
        doc = json.loads(text)
        if doc.get("format") != "pbnet-checkpoint":
            raise ConfigError("not a pbnet checkpoint", "format")
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint format_version {doc.get('format_version')!r}",
                              "format_version")
        config = config_from_mapping(doc["config"])
        A = np.array(doc["A"], dtype=np.float64)
        if A.shape != (doc["J"], doc["K"]):
            raise ConfigError(f"A has shape {A.shape}, header says {(doc['J'], doc['K'])}", "A")
        params = ModelParams(A, doc["alpha"], doc["lambda"], doc["N"])
        adam_doc = doc["adam"]
        adam = AdamState(
            {k: np.array(v, dtype=np.float64) for k, v in adam_doc["m"].items()},
            {k: np.array(v, dtype=np.float64) for k, v in adam_doc["v"].items()},
            int(adam_doc["t"]),
        )
        return config, TrainState(params, adam, int(doc["epochs_done"]))
    except (AttributeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"corrupt checkpoint: {exc!r}") from exc


def dataset_to_text(samples, header):
    head = {"format": "pbnet-dataset", "format_version": DATASET_VERSION, **header, "count": len(samples)}
    rows = [{"index": i, "support": list(s.support), "x_gt": s.x_gt} for i, s in enumerate(samples)]
    return jsonl([head] + rows)


def dataset_from_text(text):
    lines = text.splitlines()
    head = json.loads(lines[0])
    if head.get("format") != "pbnet-dataset" or head.get("format_version") != DATASET_VERSION:
        raise ConfigError("not a supported pbnet dataset file", "format")
    samples = []
    for line in lines[1:]:
        rec = json.loads(line)
        samples.append(SparseSample(np.array(rec["x_gt"], dtype=np.float64), tuple(rec["support"])))
    return head, samples
