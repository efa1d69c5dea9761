"""Flat key=value experiment configuration with schema validation.

Lines are ``key = value``; ``#`` starts a comment. Every key must be in the
schema. CLI ``--override key=value`` entries are applied on top.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """Invalid configuration; maps to CLI exit code 1."""


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _int_list(s: str):
    return tuple(int(v) for v in s.split(",") if v.strip())


METHODS = ("unipts", "pot-baseline", "erk+dst", "uniform+dst", "oneshot")

OUT_ROOT_ENV = "PTSPARSE_OUT_ROOT"


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"              # synthetic | idx
    classes: int = 10
    image_size: int = 16
    channels: int = 1
    train_size: int = 4096
    eval_size: int = 1024
    data_noise: float = 1.5
    data_blobs: int = 24
    data_sigma_min: float = 0.5
    data_sigma_max: float = 1.0
    data_offset: float = 2.0
    data_seed: int = 0
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_eval_images: str = ""
    idx_eval_labels: str = ""
    # teacher
    preset: str = "convnet-small"
    teacher_checkpoint: str = ""
    teacher_epochs: int = 4
    teacher_lr: float = 0.05
    # calibration
    calib_size: int = 1024
    calib_balanced: bool = True
    # sparsity target
    sparsity: float = 0.9
    nm_pattern: str = ""                    # e.g. "2:4"; mutually exclusive with sparsity
    exclude_layers: tuple = ()
    # method / pipeline
    method: str = "unipts"
    seeds: tuple = (0,)
    out_dir: str = "runs"
    record_timing: bool = False
    # search
    population: int = 32
    generations: int = 20
    mutation_std: float = 0.5
    crossover_rate: float = 0.5
    elites: int = 2
    tournament: int = 4
    noise_std: float = 0.1
    # training
    iterations: int = 16000
    batch_size: int = 64
    lr: float = 0.01
    alpha: float = 3e-5
    weight_decay: float = 0.0
    delta_t: int = 1
    gamma: float = 0.99
    schedule_unit: str = "epoch"
    clamp_min: float = 0.05
    objective: str = "base_decayed_kl"
    momentum: float = 0.0
    metrics_every: int = 200

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method {self.method!r} not in {METHODS}")
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigError(f"dataset {self.dataset!r} must be synthetic or idx")
        if self.nm_pattern:
            try:
                n, m = (int(v) for v in self.nm_pattern.split(":"))
            except ValueError as exc:
                raise ConfigError(f"bad nm_pattern {self.nm_pattern!r}") from exc
            if not 1 <= n < m:
                raise ConfigError(f"bad nm_pattern {self.nm_pattern!r} (need n < m)")
        elif not 0.0 < self.sparsity < 1.0:
            raise ConfigError(f"sparsity {self.sparsity} outside (0,1)")
        if self.dataset == "idx":
            for key in ("idx_train_images", "idx_train_labels",
                        "idx_eval_images", "idx_eval_labels"):
                path = getattr(self, key)
                if not path or not os.path.exists(path):
                    raise ConfigError(f"{key} missing or not found: {path!r}")
        if self.teacher_checkpoint and not os.path.exists(self.teacher_checkpoint):
            raise ConfigError(f"teacher_checkpoint not found: {self.teacher_checkpoint!r}")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        return self

    def resolved_out_dir(self) -> str:
        root = os.environ.get(OUT_ROOT_ENV, "")
        return os.path.join(root, self.out_dir) if root else self.out_dir


_PARSERS = {int: int, float: float, str: str, bool: _bool, tuple: _int_list}


def _field_map():
    return {f.name: f for f in fields(ExperimentConfig)}


def parse_config(path: str | None = None, overrides=()) -> ExperimentConfig:
    pairs = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            for ln, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key = value")
                key, value = (s.strip() for s in line.split("=", 1))
                pairs[key] = value
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must be key=value")
        key, value = (s.strip() for s in ov.split("=", 1))
        pairs[key] = value

    fmap = _field_map()
    kwargs = {}
    for key, value in pairs.items():
        if key not in fmap:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = fmap[key].type
        base = {"int": int, "float": float, "str": str, "bool": bool,
                "tuple": tuple}.get(str(ftype), str)
        try:
            kwargs[key] = _PARSERS[base](value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from exc
    return ExperimentConfig(**kwargs).validate()
