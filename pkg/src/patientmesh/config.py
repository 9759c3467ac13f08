"""Pipeline configuration: YAML file + dotted overrides -> typed sub-configs."""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .camera import CameraIntrinsics, CameraSamplingConfig
from .errors import ConfigError
from .fusion import BranchProfile, FusionSimConfig, FusionTrainConfig
from .regressor import TrainConfig
from .synthgen import GenConfig, HeatmapParams, config_hash

OUTPUT_ROOT_ENV = "PATIENTMESH_OUTPUT_ROOT"

DEFAULTS = {
    "model": {"source": "mini", "seed": 7},
    "pose_bank": {"source": "procedural", "n": 2000, "seed": 0},
    "gen": {"count": 20000, "beta_std": 1.0, "pose_noise": 0.05, "seed": 7, "shard_size": 1000,
            "workers": 1, "heatmap_dtype": "f16", "min_visible": None},
    "camera": {"tx": [-0.20, 0.0], "ty": [-0.20, 0.20], "tz": [2.0, 2.2], "fixed_rotation": True,
               "roll_deg": 10.0},
    "intrinsics": {"fx": 500.0, "fy": 500.0, "cx": 320.0, "cy": 240.0, "width": 640, "height": 480},
    "heatmap": {"resolution": [64, 64], "stride": 10.0, "sigma": 20.0, "origin": [0.0, -80.0]},
    "train": {"lr": 1e-3, "batch_size": 64, "epochs": 30, "seed": 0, "w_param": 1.0,
              "w_joint": 100.0, "optimizer": "adam", "lr_schedule": "cosine", "hidden": [512, 256],
              "input_kind": "pooled", "pool": [16, 16], "augment": False,
              "jitter_px": 1.0},
    "eval": {"pck_alpha": 0.2, "temperature": 0.1},
    "fusion": {"frames": 4000, "train_fraction": 0.75, "seed": 0, "pose_seed": 11,
               "clean": {"jitter_px": 1.0, "amplitude": [0.85, 1.0], "sigma_scale": 1.0, "noise": 0.02},
               "corrupted": {"jitter_px": 8.0, "amplitude": [0.3, 0.7], "sigma_scale": 1.6, "noise": 0.02},
               "classifier": {"hidden": 16, "lr": 0.01, "epochs": 200, "batch_size": 256,
                              "weight_decay": 1e-4, "seed": 0}},
    "isocenter": {"calibration": None, "region": "abdomen"},
    "output_dir": "runs",
}


def _merge(base, over, path=""):
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and base[k] and not isinstance(v, dict):
            raise ConfigError(f"config key {where!r} must be a mapping")
        if isinstance(base[k], dict) and base[k]:
            _merge(base[k], v, where + ".")
        else:
            base[k] = v


def set_dotted(doc, key, value):
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc
    return key.strip(), value


def load_config(path=None, overrides=()):
    """Defaults <- YAML file <- overrides (list of (dotted key, value))."""
    doc = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: cannot parse config ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        _merge(doc, user)
    for key, value in overrides:
        set_dotted(doc, key, value)
    validate(doc)
    return doc


def validate(doc):
    gen_config(doc)
    train_config(doc)
    fusion_config(doc)


def output_root(doc):
    env = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(env) if env else Path(doc["output_dir"])


def hash_of(doc, *sections):
    return config_hash({s: doc[s] for s in sections} if sections else doc)


def _build(cls, kw, section):
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def camera_config(doc):
    c = dict(doc["camera"])
    c = {k: tuple(v) if isinstance(v, list) else v for k, v in c.items()}
    return _build(CameraSamplingConfig, c, "camera")


def intrinsics(doc):
    return _build(CameraIntrinsics, dict(doc["intrinsics"]), "intrinsics")


def heatmap_params(doc):
    h = doc["heatmap"]
    return _build(HeatmapParams, {"resolution": tuple(h["resolution"]), "stride": float(h["stride"]),
                                  "sigma": float(h["sigma"]), "origin": tuple(h["origin"])}, "heatmap")


def gen_config(doc):
    g = dict(doc["gen"])
    return _build(GenConfig, dict(g, camera=camera_config(doc), intrinsics=intrinsics(doc),
                                  heatmap=heatmap_params(doc)), "gen")


def train_config(doc):
    t = dict(doc["train"])
    t["hidden"] = tuple(t["hidden"])
    t["pool"] = tuple(t["pool"])
    return _build(TrainConfig, t, "train")


def fusion_config(doc):
    f = doc["fusion"]
    h = heatmap_params(doc)
    prof = lambda d: _build(BranchProfile, dict(d, amplitude=tuple(d["amplitude"])), "fusion profile")
    return _build(FusionSimConfig, {
        "frames": f["frames"], "train_fraction": f["train_fraction"], "seed": f["seed"],
        "clean": prof(f["clean"]), "corrupted": prof(f["corrupted"]),
        "resolution": h.resolution, "stride": h.stride, "sigma": h.sigma, "origin": h.origin,
        "temperature": doc["eval"]["temperature"],
        "train": _build(FusionTrainConfig, dict(f["classifier"]), "fusion.classifier"),
    }, "fusion")


def dump(doc):
    return yaml.safe_dump(doc, sort_keys=False)
