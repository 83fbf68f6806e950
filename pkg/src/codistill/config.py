"""Experiment configuration: one flat TOML table, strictly validated.

Every key, its type and its default live in ``FIELDS`` below; nothing else
defines a default. Unknown keys, duplicate keys, nested tables, wrong types
and out-of-range values are all rejected with the offending key named.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

STRATEGIES = ("spectral_codistill", "fedavg", "local_only", "ditto_l2")
DATASETS = ("gaussian_blobs", "two_spirals", "csv")
PROTOCOLS = ("compute_and_wait", "wait_free")
TIMING_KEYS = ("t_gm_epoch", "t_pm_epoch", "t_up", "t_down")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "gaussian_blobs"
    csv_path: str = ""
    label_column: Any = -1
    n_samples: int = 4000
    num_classes: int = 10
    in_dim: int = 16
    noise: float = 0.5
    spread: float = 1.0
    alpha: float = 0.1
    test_fraction: float = 0.2
    # federation
    n_clients: int = 20
    n_new_clients: int = 0
    rounds: int = 50
    participation: float = 1.0
    strategy: str = "spectral_codistill"
    mu_ditto: float = 0.1
    # model and local optimisation
    hidden: tuple = (64, 32)
    eta_g: float = 0.5
    eta_p: float = 0.5
    e_g: int = 1
    e_p: int = 1
    batch_size: int = 0
    # spectral distillation
    lambda_p: float = 1e-4
    lambda_g: float = 1e-5
    tau: float = 0.2
    eps: float = 1e-12
    normalize_spectrum: bool = False
    # new-client fine-tuning
    finetune_epochs: int = 5
    finetune_eta: float = 0.5
    # simulated clock; a number means every client, a list gives one value per client
    t_gm_epoch: Any = 1.0
    t_pm_epoch: Any = 1.0
    t_up: Any = 1.0
    t_down: Any = 1.0
    t_agg: float = 0.0
    protocols: tuple = PROTOCOLS
    target_acc: float = 0.8
    # seeds
    data_seed: int = 0
    init_seed: int = 0
    sampling_seed: int = 0
    # output
    out_dir: str = "runs"

    def __post_init__(self):
        _validate(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.replace(data_seed=seed, init_seed=seed, sampling_seed=seed)


REQUIRED = ("dataset", "n_clients", "rounds")
FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


def _require(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(key, message)


def _validate(c: ExperimentConfig) -> None:
    for name, f in FIELDS.items():
        value = getattr(c, name)
        if f.type == "int":
            _require(_is_int(value), name, f"expected an integer, got {value!r}")
        elif f.type == "float":
            _require(_is_num(value), name, f"expected a number, got {value!r}")
        elif f.type == "str":
            _require(isinstance(value, str), name, f"expected a string, got {value!r}")
        elif f.type == "bool":
            _require(isinstance(value, bool), name, f"expected true/false, got {value!r}")

    _require(c.dataset in DATASETS, "dataset", f"must be one of {DATASETS}")
    _require(c.dataset != "csv" or bool(c.csv_path), "csv_path", "required when dataset = 'csv'")
    _require(_is_int(c.label_column) or isinstance(c.label_column, str), "label_column",
             "expected a column index or name")
    _require(c.n_samples >= c.num_classes >= 2, "n_samples", "need n_samples >= num_classes >= 2")
    _require(c.in_dim >= 2, "in_dim", "must be >= 2")
    _require(c.noise >= 0, "noise", "must be >= 0")
    _require(c.spread > 0, "spread", "must be > 0")
    _require(c.alpha > 0, "alpha", "must be > 0")
    _require(0 < c.test_fraction < 0.5, "test_fraction", "must lie in (0, 0.5)")
    _require(c.n_clients >= 1, "n_clients", "must be >= 1")
    _require(c.n_new_clients >= 0, "n_new_clients", "must be >= 0")
    _require(c.rounds >= 0, "rounds", "must be >= 0")
    _require(0 < c.participation <= 1, "participation", "must lie in (0, 1]")
    _require(c.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
    _require(c.mu_ditto >= 0, "mu_ditto", "must be >= 0")
    _require(isinstance(c.hidden, (tuple, list)) and all(_is_int(h) and h > 0 for h in c.hidden),
             "hidden", "expected a list of positive integers")
    _require(c.eta_g > 0, "eta_g", "must be > 0")
    _require(c.eta_p > 0, "eta_p", "must be > 0")
    _require(c.e_g >= 0, "e_g", "must be >= 0")
    _require(c.e_p >= 0, "e_p", "must be >= 0")
    _require(c.batch_size >= 0, "batch_size", "must be >= 0 (0 = full batch)")
    _require(c.lambda_p >= 0, "lambda_p", "must be >= 0")
    _require(c.lambda_g >= 0, "lambda_g", "must be >= 0")
    _require(0 < c.tau <= 1, "tau", "must lie in (0, 1]")
    _require(c.eps > 0, "eps", "must be > 0")
    _require(c.finetune_epochs >= 0, "finetune_epochs", "must be >= 0")
    _require(c.finetune_eta > 0, "finetune_eta", "must be > 0")
    total = c.n_clients + c.n_new_clients
    for key in TIMING_KEYS:
        value = getattr(c, key)
        if isinstance(value, (list, tuple)):
            _require(len(value) == total, key, f"per-client list needs {total} entries")
            _require(all(_is_num(v) and v >= 0 for v in value), key, "entries must be finite and >= 0")
        else:
            _require(_is_num(value) and value >= 0, key, "must be a finite number >= 0")
    _require(c.t_agg >= 0, "t_agg", "must be >= 0")
    _require(isinstance(c.protocols, (list, tuple)) and len(c.protocols) > 0
             and all(p in PROTOCOLS for p in c.protocols), "protocols", f"subset of {PROTOCOLS}")
    _require(0 <= c.target_acc <= 1, "target_acc", "must lie in [0, 1]")
    for key in ("data_seed", "init_seed", "sampling_seed"):
        _require(0 <= getattr(c, key) < 2**63, key, "must be a non-negative 63-bit integer")


def config_from_dict(raw: dict, require: bool = True) -> ExperimentConfig:
    kwargs = {}
    for key, value in raw.items():
        if key not in FIELDS:
            raise ConfigError(key, "unknown key")
        if isinstance(value, dict):
            raise ConfigError(key, "nested tables are not allowed; the config is flat")
        if FIELDS[key].type == "float" and _is_int(value):
            value = float(value)
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    if require:
        for key in REQUIRED:
            if key not in kwargs:
                raise ConfigError(key, "required key missing")
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # covers duplicate keys as well as syntax errors
        raise ConfigError("config", f"malformed config: {exc}") from None
    return config_from_dict(raw)


def parse_config(source) -> ExperimentConfig:
    """Read a config from a path, or from stdin when ``source`` is ``'-'``."""
    if source == "-" or source is None:
        return parse_config_text(sys.stdin.read())
    return parse_config_text(Path(source).read_text(encoding="utf-8"))
