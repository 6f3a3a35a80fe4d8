"""Run configuration: sectioned TOML/JSON files and matching command-line flags.

Every config key ``[section] key`` has exactly one flag ``--section-key``.
Precedence: built-in defaults < config file < flags.
"""

from __future__ import annotations

import argparse
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import SplitSpec
from .model import DetectorConfig
from .preprocess import PreprocessConfig, normalization_for_init
from .train import TrainConfig

CACHE_ENV = "DFDETECT_CACHE"


class ConfigError(ValueError):
    pass


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _floats(s) -> list[float]:
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    return [float(x) for x in str(s).split(",") if x.strip()]


def _strs(s) -> list[str]:
    if isinstance(s, (list, tuple)):
        return [str(x) for x in s]
    return [x.strip() for x in str(s).split(",") if x.strip()]


def _opt_str(s):
    return None if s in (None, "") else str(s)


def _opt_float(s):
    return None if s in (None, "") else float(s)


@dataclass(frozen=True)
class Key:
    type: Callable
    default: Any
    help: str


SCHEMA: dict[str, dict[str, Key]] = {
    "paths": {
        "manifest": Key(_opt_str, None, "manifest CSV (path,label,split)"),
        "root": Key(_opt_str, None, "directory relative image paths resolve against"),
        "splits": Key(_opt_str, None, "splits.json from `prepare`"),
        "cache_dir": Key(_opt_str, None, f"resized image cache (default ${CACHE_ENV})"),
    },
    "split": {
        "val_fraction_of_train": Key(float, 0.10, "fraction of train reserved for validation"),
        "seed": Key(int, 0, "validation carve-out seed"),
        "stratified": Key(_bool, True, "stratify the carve-out by class"),
    },
    "preprocess": {
        "cache_short_side": Key(int, 384, "short side of cached images"),
        "crop_low": Key(float, 0.5, "smallest random crop fraction"),
        "crop_high": Key(float, 1.0, "largest random crop fraction"),
        "crop_mode": Key(str, "side", "crop fraction applies to the 'side' or the 'area'"),
        "image_size": Key(int, 256, "train and eval input side"),
    },
    "detector": {
        "arch": Key(str, "convnext_base", "resnet50 | vit_b32 | convnext_base"),
        "init": Key(str, "clip", "random | imagenet | clip"),
        "freeze_backbone": Key(_bool, False, "train the head only"),
        "dropout_rate": Key(float, 0.2, "dropout before the linear head"),
        "head_seed": Key(int, 0, "seed for head and random-backbone initialization"),
        "weights_path": Key(_opt_str, None, "local pretrained weight file"),
    },
    "train": {
        "lr0": Key(float, 1e-5, "initial learning rate"),
        "scheduler": Key(str, "cosine", "cosine | step"),
        "step_factor": Key(float, 0.5, "step decay multiplier"),
        "step_period": Key(int, 2, "step decay period (epochs)"),
        "cosine_t0": Key(float, 2.0, "first cosine cycle length (epochs)"),
        "cosine_tmult": Key(float, 2.0, "cosine cycle growth factor"),
        "cosine_eta_min": Key(_opt_float, None, "cosine floor (default lr0/100)"),
        "weight_decay": Key(float, 1e-4, "L2 coefficient"),
        "batch_size": Key(int, 32, "batch size"),
        "max_epochs": Key(int, 50, "epoch budget"),
        "patience": Key(int, 5, "early-stopping patience (epochs)"),
        "seed": Key(int, 0, "training seed"),
        "num_workers": Key(int, 0, "data loader workers"),
        "device": Key(str, "cpu", "torch device"),
    },
    "sweep": {
        "archs": Key(_strs, ["resnet50", "vit_b32", "convnext_base"], "architectures"),
        "inits": Key(_strs, ["random", "imagenet", "clip"], "initializations"),
        "schedulers": Key(_strs, ["cosine", "step"], "schedulers"),
        "lrs": Key(_floats, [1e-3, 1e-4, 1e-5], "initial learning rates"),
        "seeds": Key(int, 1, "seeds per cell (mean±sd when > 1)"),
    },
}


def flag_name(section: str, key: str) -> str:
    return f"--{section}-{key.replace('_', '-')}"


def dest_name(section: str, key: str) -> str:
    return f"{section}__{key}"


def add_flags(parser: argparse.ArgumentParser, sections) -> None:
    for section in sections:
        group = parser.add_argument_group(f"[{section}]")
        for key, spec in SCHEMA[section].items():
            group.add_argument(flag_name(section, key), dest=dest_name(section, key), type=spec.type,
                               default=None, metavar=key.upper(),
                               help=f"{spec.help} (default: {spec.default})")


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except Exception as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return data


def resolve(sections, file_data: dict | None = None, args: argparse.Namespace | None = None) -> dict:
    """Merge defaults, file values and flags; unknown sections or keys are rejected."""
    file_data = file_data or {}
    unknown = set(file_data) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    out = {}
    for section in sections:
        given = file_data.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{section}] must be a table")
        bad = set(given) - set(SCHEMA[section])
        if bad:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
        values = {}
        for key, spec in SCHEMA[section].items():
            value = spec.default
            if key in given:
                try:
                    value = spec.type(given[key])
                except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
            if args is not None:
                flag = getattr(args, dest_name(section, key), None)
                if flag is not None:
                    value = flag
            values[key] = value
        out[section] = values
    if "paths" in out and not out["paths"].get("cache_dir"):
        out["paths"]["cache_dir"] = os.environ.get(CACHE_ENV) or None
    return out


# -- conversion into library objects -----------------------------------------------------

def split_spec(cfg: dict) -> SplitSpec:
    s = cfg["split"]
    return SplitSpec(s["val_fraction_of_train"], s["seed"], s["stratified"])


def preprocess_config(cfg: dict, init: str) -> PreprocessConfig:
    p = cfg["preprocess"]
    return PreprocessConfig(
        cache_short_side=p["cache_short_side"],
        train_crop_fraction_range=(p["crop_low"], p["crop_high"]),
        train_side=p["image_size"], eval_side=p["image_size"],
        normalization=normalization_for_init(init), crop_mode=p["crop_mode"],
    )


def detector_config(cfg: dict, arch: str | None = None, init: str | None = None) -> DetectorConfig:
    d = cfg["detector"]
    return DetectorConfig(
        arch=arch or d["arch"], init=init or d["init"], freeze_backbone=d["freeze_backbone"],
        dropout_rate=d["dropout_rate"], image_size=cfg["preprocess"]["image_size"],
        head_seed=d["head_seed"], weights_path=d["weights_path"],
    )


def scheduler_params(t: dict) -> dict:
    if t["scheduler"] == "step":
        return {"factor": t["step_factor"], "period": t["step_period"]}
    if t["scheduler"] == "cosine":
        return {"T0": t["cosine_t0"], "Tmult": t["cosine_tmult"], "eta_min": t["cosine_eta_min"]}
    raise ConfigError(f"unknown scheduler {t['scheduler']!r}")


def train_config(cfg: dict, lr0: float | None = None, scheduler: str | None = None) -> TrainConfig:
    t = dict(cfg["train"])
    if lr0 is not None:
        t["lr0"] = lr0
    if scheduler is not None:
        t["scheduler"] = scheduler
    params = scheduler_params(t)
    if t["scheduler"] == "cosine" and params["eta_min"] is None:
        params.pop("eta_min")
    return TrainConfig(
        lr0=t["lr0"], scheduler=t["scheduler"], scheduler_params=params,
        weight_decay=t["weight_decay"], batch_size=t["batch_size"], max_epochs=t["max_epochs"],
        patience=t["patience"], seed=t["seed"], num_workers=t["num_workers"], device=t["device"],
    )
