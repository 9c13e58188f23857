"""Experiment configuration: TOML/JSON parsing with full default
materialization and deterministic seed fan-out."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .core import RdiError
from .data import NuisanceSharing, SyntheticSpec
from .protocol import OptimizerConfig
from .rdi import EmptyMaskPolicy, MaskSource, PoolingMode, RdiConfig


class ConfigError(RdiError):
    """A config file is malformed or holds an invalid field value."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" | "directory" | "manifest"
    root: str = ""  # directory source only
    image_size: int = 32
    class_count: int = 28
    samples_per_class: int = 60
    signal_patch_size: int = 16
    nuisance_patch_size: int = 8
    nuisance_sharing: str = "shared_across_classes"
    noise_sigma: float = 0.05
    test_fraction: float = 0.25
    signal_amplitude: float = 0.5
    nuisance_amplitude: float = 0.5
    background_amplitude: float = 0.4
    signal_orientations: int = 1
    base_count: int = 12
    sessions: int = 8
    way: int = 2
    shot: int = 5
    # manifest source only (schedule-only protocol checks)
    train_per_class: int = 50
    test_per_class: int = 10

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(
            image_size=self.image_size,
            class_count=self.class_count,
            samples_per_class=self.samples_per_class,
            signal_patch_size=self.signal_patch_size,
            nuisance_patch_size=self.nuisance_patch_size,
            nuisance_sharing=NuisanceSharing(self.nuisance_sharing),
            noise_sigma=self.noise_sigma,
            seed=seed,
            test_fraction=self.test_fraction,
            signal_amplitude=self.signal_amplitude,
            nuisance_amplitude=self.nuisance_amplitude,
            background_amplitude=self.background_amplitude,
            signal_orientations=self.signal_orientations,
        )


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "small-conv-4"
    in_channels: int = 1
    temperature: float = 16.0


@dataclass(frozen=True)
class RdiSection:
    threshold: float = 0.0
    lam: float = 1.0
    beta: float = 1.0
    pooling_mode: str = "masked_mean"
    mask_source: str = "online"
    alr_empty_policy: str = "fallback_global"
    ali_empty_policy: str = "skip_term"
    base_loss_includes_dummy: bool = False

    def rdi_config(self) -> RdiConfig:
        return RdiConfig(
            threshold=self.threshold,
            lam=self.lam,
            beta=self.beta,
            pooling_mode=PoolingMode(self.pooling_mode),
            mask_source=MaskSource(self.mask_source),
            alr_empty_policy=EmptyMaskPolicy(self.alr_empty_policy),
            ali_empty_policy=EmptyMaskPolicy(self.ali_empty_policy),
            base_loss_includes_dummy=self.base_loss_includes_dummy,
        )


@dataclass(frozen=True)
class ProtocolConfig:
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs_stage1: int = 20
    epochs_stage2: int = 25
    cosine_decay: bool = True
    prototype_pooling: str = "global"  # "global" | "alr"

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
            batch_size=self.batch_size, epochs_stage1=self.epochs_stage1,
            epochs_stage2=self.epochs_stage2, cosine_decay=self.cosine_decay,
        )


@dataclass(frozen=True)
class AnalysisConfig:
    enabled: bool = True
    mask_export_samples: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    run_id: str = "run"
    run_root: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rdi: RdiSection = field(default_factory=RdiSection)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_json_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **top_level) -> "ExperimentConfig":
        d = self.to_json_dict()
        d.update(top_level)
        return config_from_dict(d)


def derive_seed(master: int, label: str) -> int:
    """Deterministic sub-seed: one master seed fans out per randomness source."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


_SECTION_TYPES = {
    "data": DataConfig,
    "model": ModelConfig,
    "rdi": RdiSection,
    "protocol": ProtocolConfig,
    "analysis": AnalysisConfig,
}


def _build_section(cls, obj: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"[{name}] has unknown fields: {sorted(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def config_from_dict(obj: dict) -> ExperimentConfig:
    obj = dict(obj)
    sections: dict[str, Any] = {}
    for name, cls in _SECTION_TYPES.items():
        raw = obj.pop(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build_section(cls, raw, name)
    known = {"seed", "run_id", "run_root"}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown top-level fields: {sorted(unknown)}")
    cfg = ExperimentConfig(
        seed=int(obj.get("seed", 0)),
        run_id=str(obj.get("run_id", "run")),
        run_root=str(obj.get("run_root", "runs")),
        **sections,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    d = cfg.data
    if d.source not in ("synthetic", "directory", "manifest"):
        raise ConfigError(f"data.source {d.source!r} must be synthetic, directory or manifest")
    if d.source == "directory" and not d.root:
        raise ConfigError("data.root is required for a directory source")
    if d.source == "synthetic":
        try:
            d.synthetic_spec(seed=0).validate()
        except ValueError as exc:
            raise ConfigError(f"[data]: {exc}") from exc
    try:
        NuisanceSharing(d.nuisance_sharing)
    except ValueError as exc:
        raise ConfigError(f"data.nuisance_sharing: {exc}") from exc
    if cfg.model.temperature <= 0:
        raise ConfigError("model.temperature must be positive")
    if cfg.model.arch not in ("small-conv-4", "tile-conv-4", "resnet12", "resnet18"):
        raise ConfigError(f"model.arch {cfg.model.arch!r} unknown")
    try:
        cfg.rdi.rdi_config()
    except ValueError as exc:
        raise ConfigError(f"[rdi]: {exc}") from exc
    if cfg.protocol.prototype_pooling not in ("global", "alr"):
        raise ConfigError("protocol.prototype_pooling must be 'global' or 'alr'")
    for name in ("lr", "batch_size"):
        if getattr(cfg.protocol, name) <= 0:
            raise ConfigError(f"protocol.{name} must be positive")
    for name in ("epochs_stage1", "epochs_stage2"):
        if getattr(cfg.protocol, name) < 0:
            raise ConfigError(f"protocol.{name} must be >= 0")


def load_config(path: Path) -> ExperimentConfig:
    """Read a TOML config (or a JSON echo of a resolved config)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        with open(path) as f:
            raw = json.load(f)
    else:
        with open(path, "rb") as f:
            try:
                raw = tomllib.load(f)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def echo_config(cfg: ExperimentConfig, path: Path) -> None:
    """Write the fully resolved config; rerunning from it reproduces the run."""
    with open(path, "w") as f:
        json.dump(cfg.to_json_dict(), f, indent=2, sort_keys=True)
