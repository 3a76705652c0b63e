"""Run configuration: one schema drives the config-file parser, CLI flags and help text.

Config files are UTF-8 ``key = value`` lines; ``#`` starts a comment.
Precedence is command-line flag, then config file, then built-in default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from .losses import BucketConfig, LossWeights
from .trainer import TrainConfig

__all__ = ["ConfigError", "Key", "SCHEMA", "parse_config_file", "resolve", "build_train_config"]


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text) -> float:
    x = float(text)
    if math.isnan(x):
        raise ValueError("NaN is not allowed")
    return x


def _thresholds(text) -> Optional[tuple]:
    if text is None or str(text).strip().lower() in ("", "quartile", "quartiles"):
        return None
    return tuple(float(t) for t in str(text).split(","))


def _opt_int(text) -> Optional[int]:
    if text is None or str(text).strip().lower() in ("", "none", "0"):
        return None
    return int(text)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    group: str
    help: str
    check: Optional[Callable[[Any], bool]] = None


_POS = lambda x: x > 0  # noqa: E731
_NONNEG = lambda x: x >= 0  # noqa: E731

SCHEMA = (
    # training
    Key("learning_rate", _float, 1e-4, "train", "Adam step size", _POS),
    Key("adam_beta1", _float, 0.9, "train", "Adam first-moment decay", lambda x: 0 < x < 1),
    Key("adam_beta2", _float, 0.999, "train", "Adam second-moment decay", lambda x: 0 < x < 1),
    Key("adam_eps", _float, 1e-8, "train", "Adam denominator guard", _POS),
    Key("epochs", int, 50, "train", "number of passes over the training assays", _POS),
    Key("batch_assays", int, 8, "train", "assays per batch", _POS),
    Key("seed", int, 0, "train", "master seed for every random draw"),
    Key("grad_clip", _float, 10.0, "train", "global gradient-norm clip", _POS),
    Key("schedule", str, "constant", "train", "learning-rate schedule: constant or cosine",
        lambda x: x in ("constant", "cosine")),
    Key("embed_dim", int, 32, "train", "embedding dimension shared by all heads", _POS),
    Key("hidden_dim", _opt_int, None, "train", "hidden tanh layer width (0 or none = affine heads)",
        lambda x: x is None or x > 0),
    Key("init_scale", _float, 1.0, "train", "weight init std times sqrt(fan_in)", _POS),
    Key("kappa", _float, 1.0, "train", "curvature of the hyperboloid", _POS),
    Key("tau", _float, 0.07, "train", "logit temperature", _POS),
    Key("learn_tau", _bool, False, "train", "learn log(tau) with the heads"),
    # loss weights
    Key("alpha_poc", _float, 1.0, "weights", "pocket tower weight", _NONNEG),
    Key("alpha_seq", _float, 0.5, "weights", "sequence tower weight", _NONNEG),
    Key("lambda_rank", _float, 1.0, "weights", "listwise loss weight inside each tower", _NONNEG),
    Key("gamma_cone", _float, 1.0, "weights", "cone loss weight", _NONNEG),
    Key("lambda_rad", _float, 1.0, "weights", "radial hinge weight inside the cone loss", _NONNEG),
    Key("lambda_ang_cone", _float, 1.0, "weights", "angular hinge weight inside the cone loss",
        _NONNEG),
    Key("lambda_ang_reg", _float, 0.1, "weights", "angular-margin regulariser weight", _NONNEG),
    Key("lambda_het", _float, 0.1, "weights", "heterogeneity regulariser weight", _NONNEG),
    Key("margin", _float, 0.1, "weights", "angular margin m", _NONNEG),
    Key("affinity_threshold", _float, math.inf, "weights",
        "heterogeneity term uses actives with affinity below this (larger = stronger scale)"),
    # buckets
    Key("thresholds", _thresholds, None, "buckets",
        "comma-separated increasing bucket edges on -affinity, or 'quartile'"),
    Key("base_radius", _float, 0.1, "buckets", "radius cap of the strongest tier", _POS),
    Key("radius_step", _float, 0.5, "buckets", "radius cap increment per tier", _POS),
    Key("base_angle_scale", _float, 1.0, "buckets", "aperture scale of tier 0", _POS),
    Key("angle_step", _float, 0.2, "buckets", "aperture scale decrement per tier", _POS),
    Key("aperture_r0", _float, 0.1, "buckets", "half-aperture constant r0", _POS),
    # paths and runtime
    Key("assays", str, None, "paths", "assay JSON-lines file"),
    Key("features", str, None, "paths", "feature matrix file"),
    Key("checkpoint", str, "model.ckpt", "paths", "checkpoint output path"),
    Key("loss_log", str, "loss_log.tsv", "paths", "loss log path (appended)"),
    Key("run_log", str, "run.log", "paths", "run log for clipping and tie notices (appended)"),
    Key("threads", int, 1, "paths", "worker count (1 is bit-reproducible)", _POS),
)

_BY_NAME = {k.name: k for k in SCHEMA}


def _coerce(key: Key, raw, where: str):
    try:
        value = key.parse(raw) if isinstance(raw, str) else raw
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad value for {key.name!r}: {exc}") from None
    if key.check is not None and value is not None and not key.check(value):
        raise ConfigError(f"{where}: value {raw!r} is out of range for {key.name!r}")
    return value


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; unknown keys and malformed lines are errors."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not valid UTF-8") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        name, raw = (s.strip() for s in line.split("=", 1))
        if name not in _BY_NAME:
            raise ConfigError(f"{path}:{lineno}: unknown key {name!r}")
        out[name] = _coerce(_BY_NAME[name], raw, f"{path}:{lineno}")
    return out


def resolve(file_values: Optional[dict] = None, flag_values: Optional[dict] = None) -> dict:
    """Merge defaults, config-file values and flags (flags win)."""
    merged = {k.name: k.default for k in SCHEMA}
    for source, values in (("config", file_values or {}), ("flag", flag_values or {})):
        for name, raw in values.items():
            if name not in _BY_NAME:
                raise ConfigError(f"unknown key {name!r}")
            if raw is None:
                continue
            merged[name] = _coerce(_BY_NAME[name], raw, f"{source} --{name.replace('_', '-')}")
    return merged


def build_train_config(values: dict) -> TrainConfig:
    try:
        weights = LossWeights(**{k.name: values[k.name] for k in SCHEMA if k.group == "weights"})
        buckets = BucketConfig(**{k.name: values[k.name] for k in SCHEMA if k.group == "buckets"})
        train_keys = {k.name: values[k.name] for k in SCHEMA if k.group == "train"}
        return TrainConfig(weights=weights, buckets=buckets, **train_keys)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
