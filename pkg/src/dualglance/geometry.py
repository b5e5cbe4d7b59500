"""Box arithmetic, contextual-region selection and geometry features."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import BoundingBox
from .exceptions import DataError, DimensionMismatch

DEFAULT_TAU_U = 0.7
DEFAULT_MAX_REGIONS = 30
GEOMETRY_DIM = 5


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes, computed on continuous areas."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class RegionProposal:
    box: BoundingBox
    objectness: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.objectness) or not 0.0 <= self.objectness <= 1.0:
            raise DataError(f"objectness must lie in [0, 1], got {self.objectness}")

    def flip_horizontal(self, image_width: float) -> "RegionProposal":
        return RegionProposal(self.box.flip_horizontal(image_width), self.objectness)

    def to_json(self) -> dict:
        return {"box": self.box.to_list(), "objectness": self.objectness}

    @classmethod
    def from_json(cls, obj: Mapping) -> "RegionProposal":
        return cls(BoundingBox.from_sequence(obj["box"]), float(obj.get("objectness", 1.0)))


def select_contextual_regions(
    proposals: Sequence[RegionProposal],
    b1: BoundingBox,
    b2: BoundingBox,
    tau_u: float = DEFAULT_TAU_U,
    m: int | None = DEFAULT_MAX_REGIONS,
) -> list[RegionProposal]:
    """Keep proposals whose IoU with both people is below ``tau_u``.

    The survivors are ranked by descending objectness (ties keep input
    order) and the first ``m`` are returned; ``m=None`` disables the cap.
    """
    if not 0.0 < tau_u <= 1.0:
        raise ValueError(f"tau_u must be in (0, 1], got {tau_u}")
    if m is not None and m < 1:
        raise ValueError(f"m must be positive, got {m}")
    kept = [c for c in proposals if max(iou(c.box, b1), iou(c.box, b2)) < tau_u]
    kept.sort(key=lambda c: -c.objectness)
    return kept if m is None else kept[:m]


def encode_geometry(box: BoundingBox, image_width: float, image_height: float) -> np.ndarray:
    """Relative (x_min, y_min, x_max, y_max, area) of a box, before standardization."""
    return np.array([
        box.x_min / image_width,
        box.y_min / image_height,
        box.x_max / image_width,
        box.y_max / image_height,
        box.area / (image_width * image_height),
    ])


def pair_geometry(b1: BoundingBox, b2: BoundingBox, image_width: float, image_height: float) -> np.ndarray:
    return np.concatenate([encode_geometry(b1, image_width, image_height),
                           encode_geometry(b2, image_width, image_height)])


@dataclass(frozen=True)
class GeometryNormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]
    # area is made relative to the image first, then standardized with the rest
    order: str = "relative_then_standardize"

    def __post_init__(self):
        if len(self.mean) != GEOMETRY_DIM or len(self.std) != GEOMETRY_DIM:
            raise DimensionMismatch("geometry stats must have 5 entries")
        if any(not s > 0 for s in self.std):
            raise ValueError("geometry std entries must be positive")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "order": self.order}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeometryNormStats":
        return cls(tuple(d["mean"]), tuple(d["std"]), d.get("order", "relative_then_standardize"))


def _chunks(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] % GEOMETRY_DIM:
        raise DimensionMismatch(f"last axis must be a multiple of 5, got {raw.shape[-1]}")
    return raw.reshape(raw.shape[:-1] + (raw.shape[-1] // GEOMETRY_DIM, GEOMETRY_DIM))


def normalize_geometry(raw, stats: GeometryNormStats) -> np.ndarray:
    """Standardize one or more concatenated 5-d geometry features."""
    raw = np.asarray(raw, dtype=np.float64)
    out = (_chunks(raw) - np.asarray(stats.mean)) / np.asarray(stats.std)
    return out.reshape(raw.shape)


def denormalize_geometry(normed, stats: GeometryNormStats) -> np.ndarray:
    normed = np.asarray(normed, dtype=np.float64)
    out = _chunks(normed) * np.asarray(stats.std) + np.asarray(stats.mean)
    return out.reshape(normed.shape)


class GeometryScaler(TransformerMixin, BaseEstimator):
    """Zero-mean, unit-variance scaling of box geometry features.

    Accepts rows of 5 (one box) or 10 (a person pair) raw features; both
    boxes of a pair share the same statistics. Fit on the training split
    only.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        per_box = _chunks(X).reshape(-1, GEOMETRY_DIM)
        std = per_box.std(axis=0)
        std[std == 0] = 1.0
        self.mean_ = per_box.mean(axis=0)
        self.scale_ = std
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def stats_(self) -> GeometryNormStats:
        check_is_fitted(self, "mean_")
        return GeometryNormStats(tuple(self.mean_.tolist()), tuple(self.scale_.tolist()))

    @classmethod
    def from_stats(cls, stats: GeometryNormStats) -> "GeometryScaler":
        scaler = cls()
        scaler.mean_ = np.asarray(stats.mean, dtype=np.float64)
        scaler.scale_ = np.asarray(stats.std, dtype=np.float64)
        scaler.n_features_in_ = 2 * GEOMETRY_DIM
        return scaler

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64)
        return normalize_geometry(X, self.stats_)

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64)
        return denormalize_geometry(X, self.stats_)


def read_proposals(path: str | Path) -> dict[str, list[RegionProposal]]:
    """Proposal file: JSON Lines of ``{"image_id": ..., "proposals": [{box, objectness}, ...]}``."""
    out: dict[str, list[RegionProposal]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                props = [RegionProposal.from_json(p) for p in obj["proposals"]]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: bad proposal line ({exc})") from None
            out.setdefault(str(obj["image_id"]), []).extend(props)
    return out


def write_proposals(path: str | Path, proposals: Mapping[str, Iterable[RegionProposal]]) -> None:
    with open(path, "w") as fh:
        for image_id, props in proposals.items():
            line = {"image_id": image_id, "proposals": [p.to_json() for p in props]}
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def sliding_window_proposals(
    feature_map: np.ndarray,
    window_sizes: Sequence[int] = (12, 20, 28),
    stride: int = 8,
    image_size: tuple[float, float] | None = None,
) -> list[RegionProposal]:
    """Heuristic proposals for images without a proposal file.

    Square windows slide over ``feature_map`` (H x W or H x W x C) and are
    scored by their mean activation energy, the squared deviation from the
    per-channel map mean. Scores are rescaled so the best window gets 1.
    Boxes are reported in ``image_size`` coordinates (defaults to the map
    size).
    """
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim == 2:
        fmap = fmap[..., None]
    h, w = fmap.shape[:2]
    energy = ((fmap - fmap.mean(axis=(0, 1))) ** 2).sum(axis=-1)
    integral = np.pad(energy.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    sx = (image_size[0] / w) if image_size else 1.0
    sy = (image_size[1] / h) if image_size else 1.0

    boxes, scores = [], []
    for size in window_sizes:
        if size > h or size > w:
            continue
        for y in range(0, h - size + 1, stride):
            for x in range(0, w - size + 1, stride):
                total = (integral[y + size, x + size] - integral[y, x + size]
                         - integral[y + size, x] + integral[y, x])
                boxes.append(BoundingBox(x * sx, y * sy, (x + size) * sx, (y + size) * sy))
                scores.append(total / (size * size))
    if not boxes:
        return []
    scores = np.asarray(scores)
    top = scores.max()
    scores = scores / top if top > 0 else np.zeros_like(scores)
    return [RegionProposal(b, float(min(max(s, 0.0), 1.0))) for b, s in zip(boxes, scores)]
