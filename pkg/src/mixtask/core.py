"""Shared configuration, seeded randomness and running statistics."""

from __future__ import annotations

import dataclasses
import math
import os
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch


class ConfigError(ValueError):
    """Raised when a config file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ValueError):
    """Raised when a config value violates an invariant."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


# Env suites whose table column uses the mixture latent space (K=4, d_z=8).
NONPARAMETRIC_SUITES = {"point-multi"}
# Suite-specific defaults applied when the file does not set the key.
SUITE_DEFAULTS: dict[str, dict[str, Any]] = {
    "point-multi": {"num_classes": 4, "latent_size": 8, "n_train_tasks": 70,
                    "n_eval_tasks": 35, "num_train_tasks_per_episode": 70,
                    "num_train_epochs": 3001},
    "point-vel-nonstat": {"max_path_length": 500, "use_contrastive": False},
}


@dataclass(frozen=True)
class RunConfig:
    # general
    env: str = "point-vel"
    seed: int = 0
    n_train_tasks: int = 100
    n_eval_tasks: int = 30
    num_train_epochs: int = 501
    num_train_tasks_per_episode: int = 30
    batch_size_reconstruction: int = 256
    batch_size_policy: int = 256
    max_path_length: int = 200
    num_eval_trajectories: int = 1
    eval_interval: int = 10
    desk_scale: float = 1.0
    # policy
    sac_layer_size: int = 300
    policy_net_lr: float = 3e-4
    sac_alpha: float = 0.2
    gamma: float = 0.99
    tau_polyak: float = 0.005
    reward_scale: float = 1.0
    num_training_steps_policy: int = 2048
    num_transitions_initial: int = 200
    num_transitions_per_episode: int = 200
    time_steps: int = 64
    use_trajectory_sample_sac: bool = False
    retain_hidden: bool = False
    use_reward_normalization: bool = True
    bayes_adaptive: bool = True
    policy_uses_cat_probs: bool = True
    policy_full_belief: bool = False
    policy_dim_preprocess: bool = True
    state_embed_dim: int = 32
    latent_embed_dim: int = 32
    clip_grad_policy: bool = True
    max_grad_norm_policy: float = 0.5
    # task inference
    lr_encoder: float = 3e-4
    lr_decoder: float = 3e-4
    num_classes: int = 1
    latent_size: int = 5
    alpha: float = 1.0
    beta: float = 1.0
    encoder_hidden_size: int = 128
    decoder_hidden_size: int = 64
    num_training_steps_reconstruction: int = 128
    clip_grad_vae: bool = True
    max_grad_norm_vae: float = 1.0
    use_global_prior: bool = False
    online_inference: bool = True
    # contrastive
    use_contrastive: bool = True
    contrastive_weight: float = 1.0
    contrastive_queries: int = 16
    contrastive_keys: int = 8
    # replay
    replay_capacity: int = 100_000

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def reconstruction_steps(self) -> int:
        return max(1, round(self.num_training_steps_reconstruction * self.desk_scale))

    @property
    def policy_steps(self) -> int:
        return max(1, round(self.num_training_steps_policy * self.desk_scale))


_POSITIVE_INTS = (
    "num_classes", "latent_size", "batch_size_reconstruction", "batch_size_policy",
    "time_steps", "max_path_length", "n_train_tasks", "n_eval_tasks",
    "num_train_epochs", "num_train_tasks_per_episode", "num_eval_trajectories",
    "eval_interval", "sac_layer_size", "state_embed_dim", "latent_embed_dim",
    "encoder_hidden_size", "decoder_hidden_size", "num_training_steps_policy",
    "num_training_steps_reconstruction", "num_transitions_initial",
    "num_transitions_per_episode", "contrastive_queries", "contrastive_keys",
    "replay_capacity",
)
_POSITIVE_REALS = ("lr_encoder", "lr_decoder", "policy_net_lr", "desk_scale",
                   "reward_scale", "max_grad_norm_policy", "max_grad_norm_vae")
_NONNEGATIVE_REALS = ("alpha", "beta", "sac_alpha", "contrastive_weight")


def validate(cfg: RunConfig) -> None:
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        expected = _field_type(f)
        if expected is bool and not isinstance(value, bool):
            raise ValidationError(f.name, f"expected bool, got {value!r}")
        if expected is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise ValidationError(f.name, f"expected int, got {value!r}")
        if expected is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ValidationError(f.name, f"expected real, got {value!r}")
        if expected is float and not math.isfinite(value):
            raise ValidationError(f.name, "must be finite")
    for name in _POSITIVE_INTS:
        if getattr(cfg, name) < 1:
            raise ValidationError(name, "must be >= 1")
    for name in _POSITIVE_REALS:
        if not getattr(cfg, name) > 0:
            raise ValidationError(name, "must be > 0")
    for name in _NONNEGATIVE_REALS:
        if getattr(cfg, name) < 0:
            raise ValidationError(name, "must be >= 0")
    if not 0.0 < cfg.gamma < 1.0:
        raise ValidationError("gamma", f"must lie in (0, 1), got {cfg.gamma}")
    if not 0.0 < cfg.tau_polyak <= 1.0:
        raise ValidationError("tau_polyak", "must lie in (0, 1]")
    if cfg.use_contrastive and cfg.contrastive_keys < 2:
        raise ValidationError("contrastive_keys", "needs >= 2 keys (one negative) when use_contrastive is set")
    if cfg.time_steps > cfg.max_path_length:
        raise ValidationError("time_steps", "cannot exceed max_path_length")
    from .envs import SUITES  # late import: envs depends on core

    if cfg.env not in SUITES:
        raise ValidationError("env", f"unknown suite {cfg.env!r}; choose from {sorted(SUITES)}")


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_type(f: dataclasses.Field) -> type:
    return _TYPES[f.type] if isinstance(f.type, str) else f.type


def _coerce(raw: str, typ: type, key: str, line: int) -> Any:
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text.replace("_", ""))
        if typ is float:
            return float(text.replace("_", ""))
        return text
    except ValueError:
        raise ConfigError(f"cannot read {key!r} value {raw.strip()!r} as {typ.__name__}", line) from None


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse flat ``key: value`` lines into typed values (no defaults applied)."""
    known = {f.name: _field_type(f) for f in fields(RunConfig)}
    values: dict[str, Any] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"expected 'key: value', got {raw_line.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split(":", 1))
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        if not value:
            raise ConfigError(f"missing value for {key!r}", lineno)
        values[key] = _coerce(value, known[key], key, lineno)
    return values


def build_config(values: dict[str, Any], use_env: bool = True) -> RunConfig:
    """Apply suite defaults, the ``MOSS_SEED`` override and validate."""
    values = dict(values)
    suite = values.get("env", RunConfig.env)
    for key, default in SUITE_DEFAULTS.get(suite, {}).items():
        values.setdefault(key, default)
    if use_env and os.environ.get("MOSS_SEED"):
        try:
            values["seed"] = int(os.environ["MOSS_SEED"])
        except ValueError:
            raise ValidationError("seed", f"MOSS_SEED is not an integer: {os.environ['MOSS_SEED']!r}") from None
    return RunConfig(**values)


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None,
                use_env: bool = True) -> RunConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path is not None else {}
    values.update(overrides or {})
    return build_config(values, use_env=use_env)


def parse_overrides(items: list[str]) -> dict[str, Any]:
    """Parse ``key=value`` strings with the same typing rules as config files."""
    text = "\n".join(item.replace("=", ": ", 1) for item in items)
    return parse_config_text(text)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}: {value}")
    return "\n".join(lines) + "\n"


# --- randomness -----------------------------------------------------------

STREAMS = ("env", "tasks", "vae", "sac", "contrastive", "eval", "init", "replay")


def _seed_sequence(seed: int, stream_label: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(stream_label.encode("utf-8"))])


def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Independent, reproducible numpy stream for one (seed, subsystem) pair."""
    return np.random.Generator(np.random.PCG64(_seed_sequence(seed, stream_label)))


def torch_generator(seed: int, stream_label: str) -> torch.Generator:
    state = _seed_sequence(seed, "torch/" + stream_label).generate_state(2, dtype=np.uint32)
    gen = torch.Generator()
    gen.manual_seed(int(state[0]) << 32 | int(state[1]))
    return gen


# --- running statistics ---------------------------------------------------

@dataclass
class RunningNormalizer:
    """Welford running mean/variance with clipped standardisation."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    clip: float = 10.0

    def update(self, x: float) -> "RunningNormalizer":
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)
        return self

    def update_many(self, xs) -> "RunningNormalizer":
        for x in np.asarray(xs, dtype=np.float64).ravel():
            self.update(float(x))
        return self

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count >= 2 else float("nan")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def normalize(self, x):
        if self.count < 2:
            return x
        std = max(self.std, 1e-8)
        return np.clip((np.asarray(x) - self.mean) / std, -self.clip, self.clip)

    def state_dict(self) -> dict[str, float]:
        return {"count": self.count, "mean": self.mean, "m2": self.m2, "clip": self.clip}


def normalizer_update(n: RunningNormalizer, x: float) -> RunningNormalizer:
    """Functional Welford step: returns a new normalizer, ``n`` is untouched."""
    return dataclasses.replace(n).update(x)
