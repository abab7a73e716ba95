"""Experiment configuration: schema, strict validation, hashing.

Configs are JSON with nested sections (model / train / data plus mode
and a few optional blocks).  Unknown keys anywhere are rejected.
Overrides use dotted paths ("train.lr=1e-3"); the adapter keys accept
the short "saa." prefix as an alias for "model.saa.".
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .adapter import CONTROLLERS, FUSIONS, OPERATOR_NAMES
from .data import SHAPE_NAMES, DatasetSpec
from .errors import ConfigError
from .model import TUNING_MODES, ModelConfig
from .serialization import CurveKind

MODES = ("train", "eval", "analyze", "ablate", "complexity", "generate")
ABLATION_AXES = ("curves", "r", "controller", "fusion", "modulate", "components")

_DEFAULTS: dict = {
    "mode": "train",
    "model": {
        "d": 96,
        "n": 32,
        "K": 16,
        "blocks": 4,
        "N": 16,
        "curves": ["hilbert", "trans-hilbert"],
        "d_o": 32,
        "d_proj": 128,
        "bits": 10,
        "adapters_on": True,
        "saa": {
            "d_phi": 64,
            "r": 8,
            "controller": "soft",
            "fusion": "concat_mlp",
            "modulate": ["A", "B", "C", "Delta"],
        },
    },
    "train": {
        "lr": 5e-4,
        "wd": 5e-2,
        "epochs": 200,
        "warmup": 10,
        "batch": 16,
        "seed": 0,
        "alpha": 100.0,
        "beta": 0.05,
        "tau": 1.0,
        "tuning": "mantis",
        "augment": False,
    },
    "data": {
        "classes": list(SHAPE_NAMES),
        "points": 128,
        "noise": 0.0,
        "samples_per_class": 16,
    },
    "checkpoint": None,
    "ablate": {"axis": "components"},
    "complexity": {"lengths": [64, 128, 256, 512, 1024], "probe_d": 256},
}


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    wd: float
    epochs: int
    warmup: int
    batch: int
    seed: int
    alpha: float
    beta: float
    tau: float
    tuning: str
    augment: bool


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    model: ModelConfig
    train: TrainConfig
    data: DatasetSpec
    checkpoint: str | None
    ablation_axis: str
    complexity_lengths: tuple[int, ...]
    complexity_probe_d: int
    raw: dict
    digest: str


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a section")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("null", "none"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if "," in text:
        return [_coerce(part) for part in text.split(",")]
    return text


def apply_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, _, value = assignment.partition("=")
    key = key.strip()
    if key.startswith("saa."):
        key = "model." + key
    parts = key.split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {part!r} of {key!r}")
    node[parts[-1]] = _coerce(value.strip())


def config_digest(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _validate(resolved: dict) -> None:
    if resolved["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    m = resolved["model"]
    for key in ("d", "n", "K", "blocks", "N", "d_o", "d_proj", "bits"):
        if not isinstance(m[key], int) or m[key] < 1:
            raise ConfigError(f"model.{key} must be a positive integer")
    if len(m["curves"]) != 2:
        raise ConfigError("model.curves must name exactly two serializations")
    for c in m["curves"]:
        CurveKind.parse(c)
    saa = m["saa"]
    if saa["controller"] not in CONTROLLERS:
        raise ConfigError(f"saa.controller must be one of {CONTROLLERS}")
    if saa["fusion"] not in FUSIONS:
        raise ConfigError(f"saa.fusion must be one of {FUSIONS}")
    bad = set(saa["modulate"]) - set(OPERATOR_NAMES)
    if bad:
        raise ConfigError(f"saa.modulate has unknown operators {sorted(bad)}")
    if saa["r"] < 0 or saa["d_phi"] < 1:
        raise ConfigError("saa.r must be >= 0 and saa.d_phi >= 1")
    t = resolved["train"]
    if t["tuning"] not in TUNING_MODES:
        raise ConfigError(f"train.tuning must be one of {TUNING_MODES}")
    for key in ("lr", "wd", "alpha", "beta"):
        if t[key] < 0:
            raise ConfigError(f"train.{key} must be non-negative")
    if t["tau"] <= 0:
        raise ConfigError("train.tau must be positive")
    for key in ("epochs", "warmup", "batch"):
        if not isinstance(t[key], int) or t[key] < 1:
            raise ConfigError(f"train.{key} must be a positive integer")
    if resolved["ablate"]["axis"] not in ABLATION_AXES:
        raise ConfigError(f"ablate.axis must be one of {ABLATION_AXES}")
    lengths = resolved["complexity"]["lengths"]
    if any(b <= a for a, b in zip(lengths, lengths[1:])) or len(lengths) < 2:
        raise ConfigError("complexity.lengths must be strictly increasing")


def resolve(raw: dict, overrides: list[str] | None = None) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    for assignment in overrides or []:
        apply_override(raw, assignment)
    resolved = _merge(_DEFAULTS, raw)
    env_seed = os.environ.get("MANTIS_SEED")
    if env_seed is not None:
        resolved["train"]["seed"] = int(env_seed)
    _validate(resolved)

    m, t, d = resolved["model"], resolved["train"], resolved["data"]
    data_spec = DatasetSpec(tuple(d["classes"]), d["points"], d["noise"],
                            d["samples_per_class"])
    model_cfg = ModelConfig(
        d=m["d"], n=m["n"], k=m["K"], blocks=m["blocks"], n_state=m["N"],
        d_phi=m["saa"]["d_phi"], r=m["saa"]["r"],
        controller=m["saa"]["controller"], fusion=m["saa"]["fusion"],
        modulate=tuple(m["saa"]["modulate"]), curves=tuple(m["curves"]),
        d_o=m["d_o"], d_proj=m["d_proj"], classes=len(data_spec.classes),
        bits=m["bits"], adapters_on=m["adapters_on"])
    train_cfg = TrainConfig(
        lr=float(t["lr"]), wd=float(t["wd"]), epochs=t["epochs"],
        warmup=t["warmup"], batch=t["batch"], seed=t["seed"],
        alpha=float(t["alpha"]), beta=float(t["beta"]), tau=float(t["tau"]),
        tuning=t["tuning"], augment=bool(t["augment"]))
    return ExperimentConfig(
        mode=resolved["mode"], model=model_cfg, train=train_cfg,
        data=data_spec, checkpoint=resolved["checkpoint"],
        ablation_axis=resolved["ablate"]["axis"],
        complexity_lengths=tuple(resolved["complexity"]["lengths"]),
        complexity_probe_d=resolved["complexity"]["probe_d"],
        raw=resolved, digest=config_digest(resolved))


def load_config(path: str | Path | None,
                overrides: list[str] | None = None) -> ExperimentConfig:
    if path is None:
        return resolve({}, overrides)
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return resolve(raw, overrides)
