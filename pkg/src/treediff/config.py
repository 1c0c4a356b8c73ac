"""Experiment configuration, deterministic seeding, and config hashing.

A single config file drives both training stages so the diffusion stage can
verify it refines a compatible tree checkpoint. Defaults are the desk-scale
profile; the full-scale values from the training tables remain selectable.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

from .errors import ConfigError, ValidationError

PATTERN_NAMES = ("disk", "cross", "checker", "square", "ring", "hstripes", "vstripes", "diag")


@dataclass
class SyntheticClusterSpec:
    """Deterministic clustered-image corpus used for fast tests."""

    num_clusters: int = 4
    image_size: int = 16
    patterns: tuple[str, ...] = ("disk", "cross", "checker", "square")
    intensity: float = 1.0
    noise_std: float = 0.05
    samples_per_cluster: int = 160

    def validate(self, prefix: str = "data.synthetic") -> None:
        if self.num_clusters < 2:
            raise ValidationError(f"{prefix}.num_clusters must be >= 2")
        if self.noise_std < 0:
            raise ValidationError(f"{prefix}.noise_std must be >= 0")
        if len(self.patterns) != self.num_clusters:
            raise ValidationError(f"{prefix}.patterns must list one pattern per cluster")
        if len(set(self.patterns)) != len(self.patterns):
            raise ValidationError(f"{prefix}.patterns must be pairwise distinct")
        for p in self.patterns:
            if p not in PATTERN_NAMES:
                raise ValidationError(f"{prefix}.patterns: unknown pattern {p!r}")


@dataclass
class DataConfig:
    name: str = "synthetic"  # synthetic | idx
    resolution: int = 16
    channels: int = 1
    images_path: str | None = None
    labels_path: str | None = None
    synthetic: SyntheticClusterSpec = field(default_factory=SyntheticClusterSpec)
    subset: int | None = None  # cap on sample count after loading
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.channels not in (1, 3):
            raise ValidationError("data.channels must be 1 or 3")
        if self.name not in ("synthetic", "idx"):
            raise ValidationError(f"data.name: unknown dataset kind {self.name!r}")
        if not 0 < self.test_fraction < 1:
            raise ValidationError("data.test_fraction must be in (0, 1)")
        self.synthetic.validate()


@dataclass
class TreeConfig:
    max_depth: int = 3
    max_leaves: int = 4
    latent_channels: int = 4
    repr_size: int = 4
    bottom_up_channels: int = 16

    def validate(self) -> None:
        if self.max_depth < 1:
            raise ValidationError("tree.max_depth must be >= 1")
        if self.max_leaves < 2:
            raise ValidationError("tree.max_leaves must be >= 2")
        for key in ("latent_channels", "repr_size", "bottom_up_channels"):
            if getattr(self, key) < 1:
                raise ValidationError(f"tree.{key} must be >= 1")


@dataclass
class TreeTrainConfig:
    initial_epochs: int = 40
    smalltree_epochs: int = 30
    intermediate_epochs: int = 15
    finetune_epochs: int = 15
    learning_rate: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-5
    lr_decay_rate: float = 0.1
    lr_decay_step: int = 100
    path_expectation: str = "exact"  # exact | mc

    def validate(self) -> None:
        for key in ("initial_epochs", "smalltree_epochs", "intermediate_epochs", "finetune_epochs"):
            if getattr(self, key) < 0:
                raise ValidationError(f"tree_train.{key} must be >= 0")
        if self.path_expectation not in ("exact", "mc"):
            raise ValidationError("tree_train.path_expectation must be 'exact' or 'mc'")
        if self.lr_decay_step < 1:
            raise ValidationError("tree_train.lr_decay_step must be >= 1")


@dataclass
class DiffusionConfig:
    steps: int = 200  # T
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2)
    res_blocks: int = 1
    attention_resolutions: tuple[int, ...] = ()
    dropout: float = 0.0
    learning_rate: float = 2e-4
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    anneal_steps: int = 100
    loss_type: str = "l2"  # l2 | weighted
    variant: str = "recon+path"
    batch_size: int = 64
    epochs: int = 40

    def validate(self) -> None:
        if self.steps < 2:
            raise ValidationError("diffusion.steps must be >= 2")
        if not (0 < self.beta_start and self.beta_end < 1):
            raise ValidationError("diffusion beta range must lie in (0, 1)")
        if not self.beta_start < self.beta_end:
            raise ValidationError("diffusion.beta_start < diffusion.beta_end violated")
        if not 0 < self.ema_decay < 1:
            raise ValidationError("diffusion.ema_decay must be in (0, 1)")
        if self.loss_type not in ("l2", "weighted"):
            raise ValidationError("diffusion.loss_type must be 'l2' or 'weighted'")
        if self.res_blocks < 1:
            raise ValidationError("diffusion.res_blocks must be >= 1")
        if any(m < 1 for m in self.channel_multipliers):
            raise ValidationError("diffusion.channel_multipliers must be positive")


@dataclass
class EvalConfig:
    classifier_epochs: int = 6
    fid_samples: int = 512
    ddim_steps: int = 20
    ddim_eta: float = 0.0
    min_leaf_mass: float = 0.01

    def validate(self) -> None:
        if self.ddim_steps < 1:
            raise ValidationError("eval.ddim_steps must be >= 1")
        if self.fid_samples < 2:
            raise ValidationError("eval.fid_samples must be >= 2")


_SECTIONS = {
    "data": DataConfig,
    "tree": TreeConfig,
    "tree_train": TreeTrainConfig,
    "diffusion": DiffusionConfig,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    tree_train: TreeTrainConfig = field(default_factory=TreeTrainConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.seed < 0:
            raise ValidationError("seed must be a non-negative integer")
        for section in _SECTIONS:
            getattr(self, section).validate()
        # the denoiser halves the resolution once per extra multiplier level
        down = 2 ** (len(self.diffusion.channel_multipliers) - 1)
        if self.data.resolution % down != 0:
            raise ValidationError(
                "data.resolution must be divisible by "
                "2**(len(diffusion.channel_multipliers) - 1)"
            )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Stable digest of the full config, used for checkpoint compatibility."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, default=_jsonify)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _jsonify(obj: Any) -> Any:
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj)!r}")


def _coerce(value: Any, target_type: Any, key: str) -> Any:
    """Best-effort coercion of a parsed YAML value to a dataclass field type."""
    if value is None:
        return None
    origin = getattr(target_type, "__origin__", None)
    if target_type in (int,):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r}: expected integer, got {value!r}")
        return value
    if target_type in (float,):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"config key {key!r}: expected number, got {value!r}")
        return float(value)
    if target_type is str:
        return str(value)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {key!r}: expected a list")
        inner = target_type.__args__[0]
        return tuple(_coerce(v, inner, key) for v in value)
    return value


def _apply_section(obj: Any, values: dict[str, Any], prefix: str) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {prefix}.{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}.{key}: expected a mapping")
            _apply_section(current, value, f"{prefix}.{key}")
            continue
        ftype = fields[key].type
        resolved = _FIELD_TYPES.get((type(obj).__name__, key), ftype)
        setattr(obj, key, _coerce(value, resolved, f"{prefix}.{key}"))


# dataclass field types are strings under `from __future__ import annotations`;
# record the handful that need structural coercion explicitly.
_FIELD_TYPES: dict[tuple[str, str], Any] = {
    ("DiffusionConfig", "channel_multipliers"): tuple[int, ...],
    ("DiffusionConfig", "attention_resolutions"): tuple[int, ...],
    ("SyntheticClusterSpec", "patterns"): tuple[str, ...],
    ("DataConfig", "images_path"): str,
    ("DataConfig", "labels_path"): str,
    ("DataConfig", "subset"): int,
}


def _resolve_scalar_types(obj: Any) -> None:
    """Fill _FIELD_TYPES with concrete scalar types taken from the defaults."""
    for f in dataclasses.fields(obj):
        current = getattr(obj, f.name)
        if dataclasses.is_dataclass(current):
            _resolve_scalar_types(current)
        elif (type(obj).__name__, f.name) not in _FIELD_TYPES and current is not None:
            _FIELD_TYPES[(type(obj).__name__, f.name)] = type(current)


_resolve_scalar_types(ExperimentConfig())


def config_from_dict(values: dict[str, Any]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in (values or {}).items():
        if key == "seed":
            cfg.seed = _coerce(value, int, "seed")
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r}: expected a mapping")
            _apply_section(getattr(cfg, key), value, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    """Load a YAML config file; an empty file yields the desk-scale defaults.

    ``overrides`` are ``key=value`` pairs with dotted keys, e.g.
    ``diffusion.steps=1000``; values are parsed as YAML scalars.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} failed to parse: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping at top level")
    for item in overrides or []:
        raw = _merge_override(raw, item)
    return config_from_dict(raw)


def _merge_override(raw: dict[str, Any], item: str) -> dict[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, _, text = item.partition("=")
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key!r}: bad value {text!r}") from exc
    node = raw
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} conflicts with a scalar section")
    node[parts[-1]] = value
    return raw


class Rng:
    """Reproducibility handle: paired numpy and torch generators.

    Two handles built from equal seeds produce bit-identical draws; ``spawn``
    derives independent child streams so parallel consumers stay reproducible.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.numpy = np.random.default_rng(self.seed)
        self.torch = torch.Generator().manual_seed(self.seed)

    def spawn(self, tag: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "big") % (2**63))

    def next_seed(self) -> int:
        return int(self.numpy.integers(0, 2**63 - 1))


def seed_all(seed: int) -> Rng:
    """Seed every stochastic source and return the run's rng handle.

    The global torch seed covers module initialization and dropout; explicit
    sampling paths draw from the returned handle's generators.
    """
    if seed < 0:
        raise ValidationError("seed must be a non-negative integer")
    torch.manual_seed(seed)
    return Rng(seed)
