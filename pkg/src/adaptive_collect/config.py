"""Experiment configuration: flat ``key = value`` files with presets and overrides.

Resolution order is defaults, then the preset, then the file, then
command-line overrides.  The resolved configuration (every field) is
written next to the results of each run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

PREDICTORS = ("lstm", "ar4_kalman", "none")
POLICIES = ("drqn", "uniform")
ESTIMATORS = ("lstm", "gpr", "none")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = ""
    data: str = ""
    seed: int = 0
    split: str = "0.7,0.2,0.1"
    preset: str = "full"
    predictor: str = "lstm"
    policy: str = "drqn"
    estimator: str = "lstm"
    out: str = "runs/run"
    # location counts taken from each split after the permutation; 0 keeps all
    train_locations: int = 0
    val_locations: int = 0
    test_locations: int = 0
    max_episodes_per_location: int = 0
    # episode
    horizon: int = 168
    budget: int = 28
    window: int = 12
    w1: float = 1.0
    w2: float = 10.0
    uniform_interval: int = 6
    # predictor
    pred_hidden: int = 128
    pred_layers: int = 2
    pred_epochs: int = 30
    pred_batch: int = 32
    pred_lr: float = 1e-4
    # controller
    drqn_dense: str = "128,128,64"
    drqn_hidden: int = 64
    drqn_episodes: int = 5000
    drqn_envs: int = 8
    drqn_batch: int = 32
    drqn_lr: float = 1e-4
    drqn_train_per_decision: float = 1.0
    gamma: float = 0.99
    sync_every: int = 200
    buffer_size: int = 5000
    seq_len: int = 12
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_frac: float = 0.6
    # estimator
    est_hidden: int = 256
    est_layers: int = 2
    est_epochs: int = 20
    est_batch: int = 32
    est_lr: float = 1e-4
    est_use_mask: bool = True
    gpr_length_scale: float = 6.0
    gpr_signal_var: float = 0.0  # 0 uses the variance of the normalized training data
    gpr_noise_var: float = 1e-4
    clip: float = 5.0

    @property
    def label(self) -> str:
        return self.name or f"{self.predictor}+{self.policy}+{self.estimator}"

    @property
    def split_ratios(self) -> tuple[float, float, float]:
        parts = [float(x) for x in self.split.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"split needs three ratios, got {self.split!r}")
        return parts[0], parts[1], parts[2]

    @property
    def drqn_dense_widths(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self.drqn_dense.split(","))

    def validate(self) -> "ExperimentConfig":
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"predictor must be one of {PREDICTORS}, got {self.predictor!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {tuple(PRESETS)}, got {self.preset!r}")
        if self.policy == "drqn" and self.predictor == "none":
            raise ConfigError("the DRQN policy needs a predictor for its state")
        r = self.split_ratios
        if abs(sum(r) - 1.0) > 1e-9 or min(r) < 0:
            raise ConfigError(f"split ratios must be nonnegative and sum to 1: {self.split!r}")
        if not (1 <= self.budget <= self.horizon):
            raise ConfigError("budget must be in [1, horizon]")
        if self.window < 1 or self.seq_len < 1 or self.drqn_envs < 1:
            raise ConfigError("window, seq_len and drqn_envs must be >= 1")
        if not self.data:
            raise ConfigError("data path is required")
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    "desk": {
        "train_locations": 30,
        "val_locations": 8,
        "test_locations": 8,
        "pred_hidden": 32,
        "pred_epochs": 12,
        "pred_lr": 1e-3,
        "drqn_dense": "64,64,32",
        "drqn_hidden": 32,
        "drqn_episodes": 1200,
        "drqn_lr": 5e-4,
        "est_hidden": 32,
        "est_epochs": 16,
        "est_lr": 1e-3,
    },
}


def _fmt(v: Any) -> str:
    return repr(v) if isinstance(v, float) else str(v)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def parse_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = _coerce(k.strip(), v)
    return out


def resolve(
    file_values: Mapping[str, Any] | None = None,
    overrides: Mapping[str, Any] | None = None,
    preset: str | None = None,
) -> ExperimentConfig:
    merged = {**(file_values or {}), **(overrides or {})}
    preset = preset or merged.get("preset", "full")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    values = {**PRESETS[preset], **merged, "preset": preset}
    for k in values:
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
    return replace(ExperimentConfig(), **values).validate()


def load(path: str | Path, overrides: Mapping[str, str] | None = None, preset: str | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    file_values = parse_text(p.read_text())
    typed = {k: _coerce(k, v) if isinstance(v, str) else v for k, v in (overrides or {}).items()}
    return resolve(file_values, typed, preset)
