"""Run configuration: one JSON file, every field overridable from the command line."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .core import RelationshipTaxonomy
from .losses import canonical_loss_name


@dataclass
class DataConfig:
    annotations: str | None = None
    manifest: str | None = None
    proposals: str | None = None
    splits: str | None = None
    train_split: str = "train_consistent"
    eval_split: str = "test"


@dataclass
class ModelConfig:
    k: int = 64
    backbone_widths: list[int] = field(default_factory=lambda: [8, 16])
    kernel_size: int = 3
    patch_size: int = 24
    context_size: int = 64
    roi_grid: list[int] = field(default_factory=lambda: [2, 2])
    geometry_dim: int = 64


@dataclass
class LossSection:
    kind: str = "adaptive_focal"
    gamma: float | None = None
    beta: float = 0.5
    balance_classes: bool = True
    epsilon: float = 1e-12


@dataclass
class OptimConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    momentum: float = 0.9


@dataclass
class RegionConfig:
    tau_u: float = 0.7
    m: int = 30


@dataclass
class TrainingConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    tol: float = 1e-3
    patience: int = 3
    augment: bool = True
    num_workers: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    taxonomy: dict | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    region: RegionConfig = field(default_factory=RegionConfig)
    aggregation: str = "attention"
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0
    deterministic: bool = True
    overlay_limit: int | None = 20
    out_dir: str = "runs/default"

    # fields that do not change results and stay out of the hash
    _UNHASHED = ("out_dir", "overlay_limit")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        with open(path) as fh:
            cfg = cls.from_dict(json.load(fh))
        cfg.resolve_paths(path.parent)
        return cfg

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def resolve_paths(self, base: Path) -> None:
        for name in ("annotations", "manifest", "proposals", "splits"):
            value = getattr(self.data, name)
            if value and not Path(value).is_absolute():
                setattr(self.data, name, str((base / value).resolve()))

    def override(self, dotted: str, value: Any) -> None:
        """Set ``section.field`` (or a top-level field) from a string or value."""
        parts = dotted.replace("-", "_").split(".")
        target = self
        for part in parts[:-1]:
            target = getattr(target, part)
        name = parts[-1]
        if not hasattr(target, name):
            raise KeyError(f"unknown config field {dotted!r}")
        current = getattr(target, name)
        if isinstance(value, str):
            value = _parse_value(value, current)
        setattr(target, name, value)
        self.validate()

    def validate(self) -> None:
        self.loss.kind = canonical_loss_name(self.loss.kind)
        if self.aggregation not in ("attention", "avg", "max"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if not 0 < self.region.tau_u <= 1:
            raise ValueError("tau_u must lie in (0, 1]")
        if self.region.m < 1:
            raise ValueError("m must be positive")

    def config_hash(self) -> str:
        d = self.to_dict()
        for key in self._UNHASHED:
            d.pop(key, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def get_taxonomy(self) -> RelationshipTaxonomy:
        if self.taxonomy is None:
            return RelationshipTaxonomy.default()
        if set(self.taxonomy) == {"include_no_relation"}:
            return RelationshipTaxonomy.default(bool(self.taxonomy["include_no_relation"]))
        return RelationshipTaxonomy.from_dict(self.taxonomy)

    def estimator_params(self) -> dict:
        m, t = self.model, self.training
        return {
            "k": m.k,
            "backbone_widths": tuple(m.backbone_widths),
            "kernel_size": m.kernel_size,
            "patch_size": m.patch_size,
            "context_size": m.context_size,
            "roi_grid": tuple(m.roi_grid),
            "geometry_dim": m.geometry_dim,
            "tau_u": self.region.tau_u,
            "max_regions": self.region.m,
            "aggregation": self.aggregation,
            "loss": self.loss.kind,
            "gamma": self.loss.gamma,
            "beta": self.loss.beta,
            "balance_classes": self.loss.balance_classes,
            "epsilon": self.loss.epsilon,
            "learning_rate": self.optim.learning_rate,
            "momentum": self.optim.momentum,
            "batch_size": self.optim.batch_size,
            "stage1_epochs": t.stage1_epochs,
            "stage2_epochs": t.stage2_epochs,
            "tol": t.tol,
            "patience": t.patience,
            "augment": t.augment,
            "num_workers": t.num_workers,
            "deterministic": self.deterministic,
            "random_state": self.seed,
        }


def _build(cls, d):
    if d is None:
        return cls()
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in d.items():
        if key not in known:
            raise KeyError(f"unknown config field {key!r} in {cls.__name__}")
        sub = _dataclass_type(cls, key)
        kwargs[key] = _build(sub, value) if sub is not None and isinstance(value, dict) else value
    obj = cls(**kwargs)
    if isinstance(obj, RunConfig):
        obj.validate()
    return obj


def _dataclass_type(cls, name):
    default = cls.__dataclass_fields__[name].default_factory  # type: ignore[attr-defined]
    if callable(default):
        probe = default()
        if is_dataclass(probe):
            return type(probe)
    return None


def _parse_value(text: str, current: Any) -> Any:
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if text.lower() in ("null", "none"):
        return None
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, (list, dict)) or current is None:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    return text
