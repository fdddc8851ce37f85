"""Run configuration: one YAML document mirroring every module config.

A config file supplies a subset of the keys below; anything missing
falls back to the defaults, anything unknown is an error.  Command-line
overrides use dotted paths (``train.seed=3``).  Every command echoes its
fully resolved config into its output directory so a run can be
reproduced from the artifacts alone.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from pointfold.denoiser import DenoiserConfig
from pointfold.schedule import ScheduleSpec
from pointfold.synthdata import FigureSpec, SkirtSpec
from pointfold.training import TrainConfig

DEFAULTS: dict = {
    "data": {
        "n_frames": 2000,
        "n_points": 512,
        "seed": 0,
        "split_ratio": 0.8,
        "jitter": 0.2,
        "skirt": {
            "top_z": 98.0,
            "hem_z": 68.0,
            "top_radius": 12.0,
            "hem_radius": 45.0,
            "sway_amplitude": 10.0,
            "n_modes": 3,
            "mode_amplitude": 0.35,
            "budget_fraction": 0.5,
        },
    },
    "schedule": {
        "kind": "quartic_scaled",
        "T": 1000,
        "beta_max": None,
    },
    "denoiser": {
        "layers": 8,
        "heads": 4,
        "head_dim": 128,
        "model_dim": 512,
        "n_freqs": 7,
        "mlp_ratio": 4,
        "attention_mode": "self_plus_cross",
    },
    "train": {
        "total_steps": 10000,
        "learning_rate": 1e-4,
        "batch_size": 8,
        "seed": 0,
        "n_points": 512,
        "checkpoint_every": 1000,
        "completion_ratio": 0.0,
        "log_every": 1,
    },
    "sample": {
        "n_points": 512,
        "seed": 0,
        "n_seeds": 10,
        "t_edit": 100,
        "trace_every": None,
    },
    "workers": 1,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{here!r} must be a mapping")
            out[key] = _merge(base[key], val, here)
        else:
            out[key] = val
    return out


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    """Resolve defaults + optional YAML file + dotted overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text())
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        cfg = _merge(cfg, doc)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        cfg = _merge(cfg, _nest(dotted.strip(), yaml.safe_load(raw)))
    return cfg


def _nest(dotted: str, value) -> dict:
    doc: dict = {}
    node = doc
    parts = dotted.split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return doc


def write_resolved(cfg: dict, out_dir) -> Path:
    """Echo the resolved config into out_dir; re-parsing the file yields
    identical settings."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


# -- builders: config dict -> module objects --------------------------------

def figure_spec(cfg: dict) -> FigureSpec:
    d = cfg["data"]
    return FigureSpec(n_points=d["n_points"], jitter=d["jitter"],
                      skirt=SkirtSpec(**d["skirt"]))


def schedule_spec(cfg: dict) -> ScheduleSpec:
    s = cfg["schedule"]
    return ScheduleSpec(kind=s["kind"], T=int(s["T"]), beta_max=s["beta_max"])


def denoiser_config(cfg: dict) -> DenoiserConfig:
    return DenoiserConfig(**cfg["denoiser"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(total_steps=t["total_steps"],
                       learning_rate=t["learning_rate"],
                       batch_size=t["batch_size"],
                       seed=t["seed"],
                       n_points=t["n_points"],
                       schedule=schedule_spec(cfg),
                       denoiser=denoiser_config(cfg),
                       checkpoint_every=t["checkpoint_every"],
                       completion_ratio=t["completion_ratio"])
