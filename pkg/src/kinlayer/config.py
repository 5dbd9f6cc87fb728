"""Run configuration: schema, presets, JSON loading, and validation.

A run is described by a flat dataclass; on disk the same data is a nested
JSON object with dotted sections (``domain``, ``grids``, ``decomposition``,
``tolerances``, ``data``).  Precedence, lowest to highest: preset defaults,
config file, command-line flags.  Every numeric field is range-checked so
the command line can fail fast with a pointer to the offending key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError

__all__ = ["RunConfig", "load_config", "apply_preset", "PRESETS", "DATA_PRESETS"]


@dataclass(frozen=True)
class RunConfig:
    """Validated description of one study; see ``schema`` in the README."""

    preset: str = "disk-default"
    out_dir: str = "runs"
    domain_coefficients: tuple = (1.0,)
    epsilons: tuple = (0.1,)
    alpha: float = 0.5
    decomposition_enabled: bool = True
    n_eta: int = 160
    n_phi: int = 96
    n_ordinates: int = 64
    mesh_resolution: int = 12
    clustering: bool = True
    n_tau: int = 32
    milne_tol: float = 1e-10
    transport_tol: float = 1e-9
    max_iter: int = 2000
    m: int = 6
    K0: float = 0.1
    data: str = "one_plus_half_sin_phi"
    layer_tables: bool = False
    threads: Optional[int] = None

    @property
    def epsilon(self) -> float:
        """Leading epsilon, used by the single-run subcommands."""
        return self.epsilons[0]


# named experiment setups; each is a partial field override
PRESETS = {
    "disk-default": {},
    "limit-study": {
        "epsilons": (0.2, 0.1, 0.05),
        "mesh_resolution": 24,
        "n_ordinates": 192,
    },
    "verify": {},
}

# named boundary data g(tau, phi) and volumetric sources f(x, w); the
# manufactured pair exercises the a-priori bracket with both terms active
DATA_PRESETS = ("constant", "one_plus_half_sin_phi", "sin_phi_cos_tau",
                "manufactured")

# (key path, config field, parser) triples defining the JSON schema
_SCHEMA = {
    "preset": ("preset", str),
    "out_dir": ("out_dir", str),
    "epsilons": ("epsilons", "float_list"),
    "m": ("m", int),
    "K0": ("K0", float),
    "domain.cosine_coefficients": ("domain_coefficients", "float_list"),
    "grids.n_eta": ("n_eta", int),
    "grids.n_phi": ("n_phi", int),
    "grids.n_ordinates": ("n_ordinates", int),
    "grids.mesh_resolution": ("mesh_resolution", int),
    "grids.clustering": ("clustering", "on_off"),
    "grids.n_tau": ("n_tau", int),
    "decomposition.alpha": ("alpha", float),
    "decomposition.enabled": ("decomposition_enabled", bool),
    "tolerances.milne_tol": ("milne_tol", float),
    "tolerances.transport_tol": ("transport_tol", float),
    "tolerances.max_iter": ("max_iter", int),
    "data.kind": ("data", str),
    "output.layer_tables": ("layer_tables", bool),
    "threads": ("threads", int),
}


def _parse_value(key: str, raw, kind):
    if kind == "float_list":
        if not isinstance(raw, (list, tuple)) or not raw:
            raise ConfigError(f"{key} must be a non-empty list of numbers", key=key)
        try:
            return tuple(float(v) for v in raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must contain only numbers", key=key)
    if kind == "on_off":
        if raw in ("on", True):
            return True
        if raw in ("off", False):
            return False
        raise ConfigError(f"{key} must be 'on' or 'off'", key=key)
    if kind is bool:
        if not isinstance(raw, bool):
            raise ConfigError(f"{key} must be true or false", key=key)
        return raw
    if kind is int:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or int(raw) != raw:
            raise ConfigError(f"{key} must be an integer", key=key)
        return int(raw)
    if kind is float:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{key} must be a number", key=key)
        return float(raw)
    if not isinstance(raw, str):
        raise ConfigError(f"{key} must be a string", key=key)
    return raw


def _flatten(obj: dict, prefix: str = "") -> dict:
    flat = {}
    for name, value in obj.items():
        path = f"{prefix}{name}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{path}."))
        else:
            flat[path] = value
    return flat


def validate(config: RunConfig) -> RunConfig:
    """Range-check every field; returns the config unchanged on success."""
    for eps in config.epsilons:
        if not (0.0 < eps <= 0.5):
            raise ConfigError(
                f"epsilon {eps} outside the supported range (0, 0.5]",
                key="epsilons",
            )
    if not (0.0 < config.alpha < 1.0):
        raise ConfigError("alpha must lie in (0, 1)", key="decomposition.alpha")
    if config.m < 2:
        raise ConfigError("m must be an integer >= 2", key="m")
    if config.K0 < 0.0:
        raise ConfigError("K0 must be nonnegative", key="K0")
    if config.mesh_resolution < 4:
        raise ConfigError("mesh_resolution must be at least 4",
                          key="grids.mesh_resolution")
    for key, attr, lo in (
        ("grids.n_eta", "n_eta", 8),
        ("grids.n_phi", "n_phi", 8),
        ("grids.n_ordinates", "n_ordinates", 4),
        ("grids.n_tau", "n_tau", 4),
        ("tolerances.max_iter", "max_iter", 1),
    ):
        if getattr(config, attr) < lo:
            raise ConfigError(f"{key} must be at least {lo}", key=key)
    for key, attr in (("tolerances.milne_tol", "milne_tol"),
                      ("tolerances.transport_tol", "transport_tol")):
        if not (0.0 < getattr(config, attr) < 1.0):
            raise ConfigError(f"{key} must lie in (0, 1)", key=key)
    if config.preset not in PRESETS:
        raise ConfigError(
            f"unknown preset '{config.preset}' (choose from {sorted(PRESETS)})",
            key="preset",
        )
    if config.data not in DATA_PRESETS:
        raise ConfigError(
            f"unknown data preset '{config.data}' (choose from {DATA_PRESETS})",
            key="data.kind",
        )
    if config.threads is not None and config.threads < 1:
        raise ConfigError("threads must be a positive integer", key="threads")
    if len(config.domain_coefficients) < 1:
        raise ConfigError("domain needs at least the constant coefficient",
                          key="domain.cosine_coefficients")
    return config


def apply_preset(name: str) -> RunConfig:
    """Config with one preset's overrides on top of the field defaults."""
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset '{name}' (choose from {sorted(PRESETS)})",
            key="preset",
        )
    return validate(replace(RunConfig(preset=name), **PRESETS[name]))


def load_config(path=None, preset: Optional[str] = None, overrides=None) -> RunConfig:
    """Assemble a validated config from preset, JSON file, and overrides.

    ``overrides`` maps RunConfig field names to already-parsed values (the
    command line produces these).  Unknown JSON keys are rejected with the
    dotted key path in the error.
    """
    file_updates = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}", key=None)
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object", key=None)
        for key, value in _flatten(raw).items():
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key '{key}'", key=key)
            attr, kind = _SCHEMA[key]
            file_updates[attr] = _parse_value(key, value, kind)
    name = preset or file_updates.get("preset") or RunConfig.preset
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset '{name}' (choose from {sorted(PRESETS)})",
            key="preset",
        )
    merged = {**PRESETS[name], **file_updates, "preset": name}
    if overrides:
        known = {f.name for f in fields(RunConfig)}
        for attr, value in overrides.items():
            if attr not in known:
                raise ConfigError(f"unknown config field '{attr}'", key=attr)
            if value is not None:
                merged[attr] = value
    return validate(replace(RunConfig(), **merged))


def config_echo(config: RunConfig) -> dict:
    """Nested JSON-ready copy of the config, inverse of the flat schema."""
    out: dict = {}
    for key, (attr, _) in _SCHEMA.items():
        value = getattr(config, attr)
        if isinstance(value, tuple):
            value = list(value)
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out
