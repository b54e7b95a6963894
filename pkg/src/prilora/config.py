"""Flat key=value experiment configs with explicit versioning.

Files look like::

    config_version = 1
    name = demo
    plan.kind = linear
    plan.first_rank = 2
    plan.last_rank = 6
    prune.ratio = 0.5

Every key has a typed default below; unknown keys and duplicates are
errors, so a config never silently misspells a parameter. After the file
is read, any PRILORA_* environment variable overrides the matching key
(dots become double underscores: prune.ratio -> PRILORA_PRUNE__RATIO).
"""

from __future__ import annotations

import os
from typing import Mapping

from .errors import ConfigError
from .model import MATRIX_KINDS, ModelDims
from .prune_engine import PruneConfig
from .rank_plan import (
    RankPlan,
    concentrated_plan,
    deberta_base_preset,
    explicit_plan,
    inverted_plan,
    linear_plan,
    uniform_plan,
)
from .tasks import SyntheticTask
from .train_harness import TrainConfig

__all__ = [
    "CONFIG_VERSION",
    "ENV_PREFIX",
    "DEFAULTS",
    "parse_config_text",
    "apply_env_overrides",
    "load_config",
    "resolved_text",
    "build_plan",
    "build_task",
    "build_dims",
    "build_train_config",
]

CONFIG_VERSION = 1
ENV_PREFIX = "PRILORA_"

# Key -> default. The default's Python type decides how values are coerced;
# a seed of -1 on the task means "follow the run seed".
DEFAULTS: dict[str, object] = {
    "config_version": CONFIG_VERSION,
    "name": "run",
    "seed": 0,
    "task.kind": "token_majority",
    "task.vocab_size": 16,
    "task.seq_len": 16,
    "task.train_count": 2000,
    "task.eval_count": 512,
    "task.seed": -1,
    "model.layers": 2,
    "model.d_model": 32,
    "model.heads": 2,
    "model.d_ff": 64,
    "plan.kind": "linear",
    "plan.first_rank": 2,
    "plan.last_rank": 6,
    "plan.rank": 4,
    "plan.ranks": "",
    "prune.strategy": "prilora_A",
    "prune.ratio": 0.5,
    "prune.interval": 40,
    "train.steps": 500,
    "train.lr": 5e-3,
    "train.batch_size": 16,
    "train.optimizer": "adam",
    "train.eval_interval": 50,
    "train.schedule": "linear",
    "train.warmup_steps": 50,
    "train.ema_decay": 0.9,
    "train.ema_init_first_batch": False,
    "train.trajectory_coords": 0,
    "adapter.std": 0.02,
    "adapter.scale": 1.0,
    "adapter.kinds": ",".join(MATRIX_KINDS),
}


def _coerce(key: str, text: str) -> object:
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse file contents into a fully defaulted, typed mapping."""
    values: dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = _coerce(key, value)
    if "config_version" not in values:
        raise ConfigError(f"{source}: missing required key config_version")
    if values["config_version"] != CONFIG_VERSION:
        raise ConfigError(
            f"{source}: config_version {values['config_version']} is not "
            f"supported (this build reads version {CONFIG_VERSION})"
        )
    merged = dict(DEFAULTS)
    merged.update(values)
    return merged


def env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "__")


def apply_env_overrides(cfg: dict[str, object], env: Mapping[str, str] | None = None) -> dict[str, object]:
    env = os.environ if env is None else env
    out = dict(cfg)
    for key in DEFAULTS:
        name = env_name(key)
        if name in env:
            out[key] = _coerce(key, env[name])
    if out["config_version"] != CONFIG_VERSION:
        raise ConfigError(
            f"config_version {out['config_version']} is not supported "
            f"(this build reads version {CONFIG_VERSION})"
        )
    return out


def load_config(path, env: Mapping[str, str] | None = None) -> dict[str, object]:
    """Read, default, and environment-override a config file."""
    try:
        with open(path, "r", encoding="utf-8") as fp:
            text = fp.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config_text(text, source=str(path))
    return apply_env_overrides(cfg, env)


def resolved_text(cfg: Mapping[str, object]) -> str:
    """Canonical dump of a resolved config, one sorted key per line."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Object builders


def _parse_int_list(text: str, what: str) -> list[int]:
    items = [piece.strip() for piece in str(text).split(",") if piece.strip()]
    try:
        return [int(piece) for piece in items]
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from None


def build_plan(cfg: Mapping[str, object], num_layers: int | None = None) -> RankPlan:
    layers = int(cfg["model.layers"]) if num_layers is None else num_layers
    kind = cfg["plan.kind"]
    if kind == "linear":
        return linear_plan(layers, int(cfg["plan.first_rank"]), int(cfg["plan.last_rank"]))
    if kind == "uniform":
        return uniform_plan(layers, int(cfg["plan.rank"]))
    if kind == "inverted":
        return inverted_plan(layers, int(cfg["plan.first_rank"]), int(cfg["plan.last_rank"]))
    if kind == "concentrated":
        return concentrated_plan(layers, int(cfg["plan.last_rank"]))
    if kind == "preset":
        preset = deberta_base_preset()
        if layers != preset.num_layers:
            raise ConfigError(
                f"the preset plan covers {preset.num_layers} layers; model.layers is {layers}"
            )
        return preset
    if kind == "explicit":
        ranks = _parse_int_list(str(cfg["plan.ranks"]), "plan.ranks")
        if not ranks:
            raise ConfigError("plan.kind explicit requires plan.ranks")
        return explicit_plan(ranks)
    raise ConfigError(
        f"unknown plan.kind {kind!r}; choose from linear, uniform, inverted, "
        "concentrated, preset, explicit"
    )


def build_task(cfg: Mapping[str, object], run_seed: int) -> SyntheticTask:
    task_seed = int(cfg["task.seed"])
    if task_seed < 0:
        task_seed = run_seed
    return SyntheticTask(
        kind=str(cfg["task.kind"]),
        vocab_size=int(cfg["task.vocab_size"]),
        seq_len=int(cfg["task.seq_len"]),
        train_count=int(cfg["task.train_count"]),
        eval_count=int(cfg["task.eval_count"]),
        seed=task_seed,
    )


def build_dims(cfg: Mapping[str, object], task: SyntheticTask) -> ModelDims:
    num_outputs = 1 if task.kind == "linear_probe" else 2
    return ModelDims(
        num_layers=int(cfg["model.layers"]),
        d_model=int(cfg["model.d_model"]),
        num_heads=int(cfg["model.heads"]),
        d_ff=int(cfg["model.d_ff"]),
        vocab_size=task.vocab_size,
        seq_len=task.seq_len,
        num_outputs=num_outputs,
    )


def build_train_config(cfg: Mapping[str, object], plan: RankPlan, seed: int) -> TrainConfig:
    kinds = tuple(
        piece.strip() for piece in str(cfg["adapter.kinds"]).split(",") if piece.strip()
    )
    prune = PruneConfig(
        prune_ratio=float(cfg["prune.ratio"]),
        interval_steps=int(cfg["prune.interval"]),
        strategy=str(cfg["prune.strategy"]),
    )
    return TrainConfig(
        plan=plan,
        prune=prune,
        lr=float(cfg["train.lr"]),
        batch_size=int(cfg["train.batch_size"]),
        steps=int(cfg["train.steps"]),
        optimizer=str(cfg["train.optimizer"]),
        seed=seed,
        eval_interval=int(cfg["train.eval_interval"]),
        schedule=str(cfg["train.schedule"]),
        warmup_steps=int(cfg["train.warmup_steps"]),
        adapter_std=float(cfg["adapter.std"]),
        adapter_scale=float(cfg["adapter.scale"]),
        adapt_kinds=kinds,
        ema_decay=float(cfg["train.ema_decay"]),
        ema_init_first_batch=bool(cfg["train.ema_init_first_batch"]),
        trajectory_coords=int(cfg["train.trajectory_coords"]),
    )
