"""Run configuration: one JSON file merged over defaults.

Unknown keys are rejected at every level except inside ``fen`` (whose
``columns`` list is free-form and validated by ``FenConfig``).
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import InvalidConfig, MalformedManifest, MissingFile

DEFAULTS: dict = {
    "seed": 0,
    "paths": {
        "manifest": None,
        "test_manifest": None,
        "violent": None,
        "nonviolent": None,
        "output": "runs",
    },
    "density": {"sigma": 4.0},
    "fen": {"input_channels": 3, "channels": [16, 32, 16, 8]},
    "rot_head": {"widths": [64, 128]},
    "stage1": {
        "steps": 1000,
        "crop_size": 112,
        "optimizer": {"name": "adam", "lr": 1e-3, "batch_size": 32},
    },
    "density_head": {"widths": [64, 128], "trainable": [True, True, True]},
    "stage2": {
        "steps": 1000,
        "crop_size": 112,
        "supervised": False,
        "calibration_crops": 64,
        "optimizer": {"name": "adam", "lr": 1e-4, "batch_size": 32},
    },
    "prior": {"alpha": 2.0, "cmin": 1.0, "cmax": 100.0},
    "sinkhorn": {"eps": 0.01, "max_iter": 500, "tol": 1e-6},
    "augment": {"flip_p": 1.0, "zoom": 1.3, "brightness": [1.0, 1.3], "rotation_deg": [-25, 25]},
    "frames": {"max_frames": 20, "size": 128},
    "anomaly": {
        "vgg": {"widths": [64, 128, 256, 512, 512]},
        "wdrb": {"layers": 2, "widen_factor": 2},
        "lstm": {"hidden": 256, "dropout": 0.2},
        "train": {"lr": 1e-3, "epochs": 50, "batch_size": 8, "share_streams": False},
        "pretrained": None,
        "augment_copies": 0,
    },
}

_FREE_FORM = {("fen",), ("augment",)}  # validated by their own dataclasses


def _merge(base: dict, override: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base and path not in _FREE_FORM:
            where = ".".join(path + (key,))
            raise InvalidConfig(f"unknown config key {where!r}")
        if isinstance(base.get(key), dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file, then ``overrides`` (dotted keys allowed)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"config not found: {path}")
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise MalformedManifest(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise InvalidConfig("config root must be an object")
        cfg = _merge(cfg, user)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        nested: dict = {}
        cursor = nested
        keys = dotted.split(".")
        for k in keys[:-1]:
            cursor = cursor.setdefault(k, {})
        cursor[keys[-1]] = value
        cfg = _merge(cfg, nested)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise InvalidConfig(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    return cfg


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def fen_config(cfg: dict):
    from .fen import FenConfig

    return FenConfig.from_dict(cfg["fen"])


def anomaly_spec(cfg: dict):
    from .anomaly import AnomalyModelSpec, LstmSpec, Vgg19Spec, WdrbSpec

    a = cfg["anomaly"]
    return AnomalyModelSpec(
        Vgg19Spec.from_dict(a["vgg"]),
        WdrbSpec.from_dict(a["wdrb"]),
        LstmSpec.from_dict(a["lstm"]),
        bool(a["train"]["share_streams"]),
    )
