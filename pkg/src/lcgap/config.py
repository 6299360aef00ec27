"""Run configuration: YAML file, defaults and command-line overrides.

Precedence is flag > file > default. Every key below has a default, so an
empty file (or none at all) is a valid configuration.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .descriptors import DescriptorConfig
from .hyperopt import DEFAULT_ALPHAS, DEFAULT_R_CUTS, HyperGrid
from .regression import KernelParams, NoiseModel

DEFAULTS = {
    "dataset": {"path": None, "format": "extxyz"},
    "target": "atomization_energy",
    "targets": None,
    "descriptor": {
        "kind": "reduced",
        "alpha": 5.0,
        "r_cut": 6.0,
        "max_occupancy": None,  # None: sized from the data
        "headroom": 2,
    },
    "kernel": {"sigma": 100.0, "length_scale": 10.0, "optimize": "per_fold"},
    "noise": {"sigma_n": 0.1, "optimize": False},
    "cv": {"k": 5, "seed": 0},
    "transfer": {"heavy_atoms": 6},
    "grid": {"alphas": list(DEFAULT_ALPHAS), "r_cuts": list(DEFAULT_R_CUTS), "protocol": "cv"},
    "contrib": {"bin_width": 2.0},
    "output": {"dir": "lcgap_out", "model": None},
    "workers": 1,
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; the message names the field."""


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration field {name!r}")
        if isinstance(base[key], dict):
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"configuration field {name!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{name}.")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Resolve a configuration dict from an optional YAML file plus overrides.

    ``overrides`` uses dotted keys (``{"descriptor.alpha": 4.0}``); ``None``
    values are ignored so unset CLI flags fall through.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {str(path)!r}: {exc}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {str(path)!r} is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a mapping at top level")
        cfg = _merge(cfg, raw)
        base = Path(path).resolve().parent
        p = cfg["dataset"]["path"]
        if p is not None and not Path(p).is_absolute():
            cfg["dataset"]["path"] = str(base / p)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"unknown configuration field {dotted!r}")
        node[leaf] = value
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    def check(cond, field, msg):
        if not cond:
            raise ConfigError(f"{field}: {msg}")

    d = cfg["descriptor"]
    try:
        descriptor_config(cfg, m=d["max_occupancy"] or 1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"descriptor: {exc}") from None
    check(isinstance(d["headroom"], int) and d["headroom"] >= 0, "descriptor.headroom", "must be a non-negative integer")
    try:
        kernel_params(cfg)
        noise_model(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"kernel/noise: {exc}") from None
    check(cfg["kernel"]["optimize"] in ("per_fold", "shared", "none"), "kernel.optimize",
          "must be per_fold, shared or none")
    check(cfg["dataset"]["format"] in ("extxyz", "csv_xyz"), "dataset.format", "must be extxyz or csv_xyz")
    check(isinstance(cfg["cv"]["k"], int) and cfg["cv"]["k"] >= 2, "cv.k", "must be an integer >= 2")
    check(isinstance(cfg["cv"]["seed"], int), "cv.seed", "must be an integer")
    check(isinstance(cfg["transfer"]["heavy_atoms"], int) and cfg["transfer"]["heavy_atoms"] >= 1,
          "transfer.heavy_atoms", "must be a positive integer")
    check(cfg["grid"]["protocol"] in ("cv", "transfer"), "grid.protocol", "must be cv or transfer")
    try:
        hyper_grid(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"grid: {exc}") from None
    check(float(cfg["contrib"]["bin_width"]) > 0, "contrib.bin_width", "must be positive")
    check(isinstance(cfg["workers"], int) and cfg["workers"] >= 1, "workers", "must be a positive integer")
    t = cfg["targets"]
    check(t is None or (isinstance(t, list) and t and all(isinstance(x, str) for x in t)),
          "targets", "must be a non-empty list of property names")


def descriptor_config(cfg: dict, m: int | None = None) -> DescriptorConfig:
    d = cfg["descriptor"]
    return DescriptorConfig(d["kind"], float(d["alpha"]), float(d["r_cut"]), int(m or d["max_occupancy"] or 1))


def kernel_params(cfg: dict) -> KernelParams:
    return KernelParams(float(cfg["kernel"]["sigma"]), float(cfg["kernel"]["length_scale"]))


def noise_model(cfg: dict) -> NoiseModel:
    return NoiseModel(float(cfg["noise"]["sigma_n"]))


def hyper_grid(cfg: dict) -> HyperGrid:
    return HyperGrid(tuple(cfg["grid"]["alphas"]), tuple(cfg["grid"]["r_cuts"]))
