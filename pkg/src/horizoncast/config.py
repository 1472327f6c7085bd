"""Run configuration: one strict JSON document with per-subsystem sections.

Unknown keys are rejected so that sweep configs cannot silently drift, and
every output artifact embeds ``config_hash(cfg)`` so results can be traced
back to the exact configuration that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigurationError

FORMAT_VERSION = "1"


@dataclass(frozen=True)
class WorldConfig:
    width: int = 32
    height: int = 32
    n_objects: int = 3
    max_objects: int = 4
    mask_budget: int = 8
    clip_len: int = 16
    max_speed: int = 3
    size_min: int = 6
    size_max: int = 12
    static: bool = False
    n_clips: int = 8


@dataclass(frozen=True)
class CodecConfig:
    patch: int = 2
    modalities: tuple[str, ...] = ("rgb", "depth", "flow")
    flow_sigma: float = 0.15


@dataclass(frozen=True)
class SchedulerConfig:
    groups: int = 2
    group_size: int = 2
    short_term: int = 2
    long_term: int = 2
    t_m_train: tuple[float, float] = (0.7, 0.9)
    t_m_infer: float = 0.8
    train_timesteps: int = 1000


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    blocks: int = 2
    heads: int = 4
    param_budget: int = 500_000


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    steps: int = 500
    batch_size: int = 2
    uniform_prob: float = 0.1
    noise_mode: str = "grouped"  # grouped | per-frame-random | linear-ramp
    uniform_overrides_memory: bool = False
    grad_clip: float | None = 1.0
    dtype: str = "f32"  # f32 | f64
    eval_every: int = 0
    checkpoint_every: int = 0


@dataclass(frozen=True)
class RolloutConfig:
    n_steps_per_group: int = 5
    n_frames: int = 16
    renoise_each_step: bool = False


@dataclass(frozen=True)
class MetricsConfig:
    frame_rate: int = 4
    drift_window_seconds: float = 5.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    format_version: str = FORMAT_VERSION
    world: WorldConfig = field(default_factory=WorldConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)


_SECTION_TYPES = {
    "world": WorldConfig,
    "codec": CodecConfig,
    "scheduler": SchedulerConfig,
    "model": ModelConfig,
    "trainer": TrainerConfig,
    "rollout": RolloutConfig,
    "metrics": MetricsConfig,
}

_TUPLE_FIELDS = {"modalities", "t_m_train"}


def _type_ok(value: Any, tp: Any) -> bool:
    origin = typing.get_origin(tp)
    if origin is None:
        if tp is float:
            return isinstance(value, (int, float)) and not isinstance(value, bool)
        if tp is int:
            return isinstance(value, int) and not isinstance(value, bool)
        return isinstance(value, tp)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, arg) for arg in typing.get_args(tp))
    if origin is tuple:
        if not isinstance(value, tuple):
            return False
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return all(_type_ok(item, args[0]) for item in value)
        return len(value) == len(args) and all(
            _type_ok(item, arg) for item, arg in zip(value, args)
        )
    return isinstance(value, origin)


def _check_types(cls: type, kwargs: dict, path: str) -> None:
    hints = typing.get_type_hints(cls)
    for key, value in kwargs.items():
        tp = hints[key]
        if not _type_ok(value, tp):
            name = tp.__name__ if isinstance(tp, type) else str(tp)
            where = f"{path}.{key}" if path else key
            raise ConfigurationError(
                f"config key '{where}' must be {name}, "
                f"got {type(value).__name__} ({value!r})"
            )


def _build_section(cls: type, data: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) {sorted(unknown)} in config section '{path}'"
        )
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    _check_types(cls, kwargs, path)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad config section '{path}': {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    """Parse a config dict strictly; unknown keys anywhere are an error."""
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a JSON object")
    top_names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - top_names
    if unknown:
        raise ConfigurationError(f"unknown top-level config key(s) {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    scalars: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigurationError(f"config section '{key}' must be an object")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
            scalars[key] = value
    _check_types(RunConfig, scalars, "")
    cfg = config_from_kwargs(kwargs)
    validate_config(cfg)
    return cfg


def config_from_kwargs(kwargs: dict) -> RunConfig:
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad config: {exc}") from exc


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def validate_config(cfg: RunConfig) -> None:
    w = cfg.world
    if w.width < 8 or w.height < 8:
        raise ConfigurationError("world dimensions must be at least 8x8")
    if w.n_objects < 0:
        raise ConfigurationError("world.n_objects must be >= 0")
    if w.n_objects > w.mask_budget:
        raise ConfigurationError(
            f"world.n_objects ({w.n_objects}) exceeds mask budget ({w.mask_budget})"
        )
    if w.max_objects < w.n_objects:
        raise ConfigurationError("world.max_objects must be >= world.n_objects")
    c = cfg.codec
    if "rgb" not in c.modalities:
        raise ConfigurationError("codec.modalities must include 'rgb'")
    bad = [m for m in c.modalities if m not in ("rgb", "depth", "flow", "seg")]
    if bad:
        raise ConfigurationError(f"unknown modalities {bad}")
    if c.patch < 1:
        raise ConfigurationError("codec.patch must be >= 1")
    if c.flow_sigma <= 0:
        raise ConfigurationError("codec.flow_sigma must be > 0")
    s = cfg.scheduler
    if s.groups < 1:
        raise ConfigurationError("scheduler.groups must be >= 1")
    if s.group_size < 1:
        raise ConfigurationError("scheduler.group_size must be >= 1")
    if s.short_term < 1 or s.long_term < 0:
        raise ConfigurationError("scheduler.short_term must be >= 1, long_term >= 0")
    lo, hi = s.t_m_train
    if not (0.0 <= lo < hi <= 1.0):
        raise ConfigurationError("scheduler.t_m_train must satisfy 0 <= lo < hi <= 1")
    if not (0.0 <= s.t_m_infer <= 1.0):
        raise ConfigurationError("scheduler.t_m_infer must lie in [0, 1]")
    t = cfg.trainer
    if not (0.0 <= t.uniform_prob <= 1.0):
        raise ConfigurationError("trainer.uniform_prob must lie in [0, 1]")
    if t.noise_mode not in ("grouped", "per-frame-random", "linear-ramp"):
        raise ConfigurationError(f"unknown trainer.noise_mode '{t.noise_mode}'")
    if t.dtype not in ("f32", "f64"):
        raise ConfigurationError("trainer.dtype must be 'f32' or 'f64'")
    if cfg.rollout.n_steps_per_group < 1:
        raise ConfigurationError("rollout.n_steps_per_group must be >= 1")
    window = s.short_term + s.long_term + s.groups * s.group_size
    if window > w.clip_len:
        raise ConfigurationError(
            f"training window ({window} frames) exceeds world.clip_len ({w.clip_len})"
        )


def _canonical(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    """Short stable hash of the experiment configuration.

    The output directory is excluded: it names where artifacts land, not what
    experiment produced them, so the same run written elsewhere hashes alike.
    """
    payload = config_to_dict(cfg)
    payload.pop("out_dir", None)
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()[:12]


def descriptor_dim(cfg: RunConfig) -> int:
    """Length of the scene-descriptor conditioning vector (6 entries per slot)."""
    return 6 * cfg.world.max_objects


def arch_fingerprint(cfg: RunConfig) -> str:
    """Hash of everything a checkpoint's weights are structurally tied to.

    Deliberately excludes the memory noise levels (t_m) and rollout settings so
    that inference-time sweeps can reuse one checkpoint.
    """
    data = {
        "width": cfg.world.width,
        "height": cfg.world.height,
        "max_objects": cfg.world.max_objects,
        "patch": cfg.codec.patch,
        "modalities": list(cfg.codec.modalities),
        "groups": cfg.scheduler.groups,
        "group_size": cfg.scheduler.group_size,
        "short_term": cfg.scheduler.short_term,
        "long_term": cfg.scheduler.long_term,
        "d_model": cfg.model.d_model,
        "blocks": cfg.model.blocks,
        "heads": cfg.model.heads,
    }
    return hashlib.sha256(_canonical(data).encode()).hexdigest()[:12]
