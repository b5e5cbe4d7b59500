"""Annotation ingestion, consistent/ambiguous splits and augmentation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .core import (
    AnnotationRecord,
    RelationshipTaxonomy,
    build_soft_label,
    classify_consistency,
    read_annotations,
    read_manifest,
    validate_record,
)
from .exceptions import DataError, EmptySplit, EmptyVotes, MissingSplit
from .geometry import RegionProposal, read_proposals, sliding_window_proposals
from .losses import ClassFrequency

__all__ = [
    "PairSample", "DatasetSplit", "SPLIT_KINDS", "build_soft_label", "classify_consistency",
    "augment", "annotation_class_counts", "make_splits", "balanced_image_sample",
    "load_samples", "load_image", "read_split_manifest", "write_split_manifest",
]

logger = logging.getLogger(__name__)

SPLIT_KINDS = ("train_consistent", "train_ambiguous", "val", "test")


@dataclass
class PairSample:
    """A person pair together with its image and the image's region proposals."""

    record: AnnotationRecord
    image: np.ndarray  # H x W x C, float32 in [0, 1]
    proposals: list[RegionProposal] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


def flip_sample(sample: PairSample) -> PairSample:
    w = sample.width
    rec = sample.record.with_boxes(sample.record.box_1.flip_horizontal(w),
                                   sample.record.box_2.flip_horizontal(w))
    return PairSample(rec, np.ascontiguousarray(sample.image[:, ::-1]),
                      [p.flip_horizontal(w) for p in sample.proposals])


def reverse_pair(sample: PairSample) -> PairSample:
    rec = sample.record.with_boxes(sample.record.box_2, sample.record.box_1)
    return PairSample(rec, sample.image, sample.proposals)


def augment(sample: PairSample) -> list[PairSample]:
    """Original, horizontal mirror and swapped pair order; labels are untouched."""
    return [sample, flip_sample(sample), reverse_pair(sample)]


@dataclass
class DatasetSplit:
    records: list[AnnotationRecord]
    split_kind: str

    def __post_init__(self):
        if self.split_kind not in SPLIT_KINDS:
            raise ValueError(f"unknown split kind {self.split_kind!r}")
        if self.split_kind in ("val", "test", "train_consistent"):
            bad = [r.record_id for r in self.records if not r.is_consistent]
            if bad:
                raise DataError(f"{self.split_kind} split may only hold consistent records: {bad[:3]}")

    def __len__(self):
        return len(self.records)

    @property
    def record_ids(self) -> list[str]:
        return [r.record_id for r in self.records]


def annotation_class_counts(split: DatasetSplit | Sequence[AnnotationRecord],
                            beta: float = 0.5) -> ClassFrequency:
    """Sum raw relationship votes per class over a split."""
    records = split.records if isinstance(split, DatasetSplit) else list(split)
    if not records:
        raise EmptySplit("cannot count annotations of an empty split")
    total = sum(r.vote_vector() for r in records)
    return ClassFrequency(tuple(int(c) for c in total), beta)


def make_splits(records: Iterable[AnnotationRecord], image_split: Mapping[str, str]) -> dict[str, DatasetSplit]:
    """Build the four standard splits from an image -> {train, val, test} assignment.

    Evaluation splits and the consistent training split keep only records
    with a 60% majority; the ambiguous training split adds the remaining
    trainable training records to the consistent ones.
    """
    buckets: dict[str, list[AnnotationRecord]] = {k: [] for k in SPLIT_KINDS}
    for rec in records:
        part = image_split.get(rec.image_id)
        if part is None or not rec.trainable:
            continue
        if part == "train":
            buckets["train_ambiguous"].append(rec)
            if rec.is_consistent:
                buckets["train_consistent"].append(rec)
        elif part in ("val", "test"):
            if rec.is_consistent:
                buckets[part].append(rec)
        else:
            raise DataError(f"unknown image split {part!r} for {rec.image_id}")
    return {k: DatasetSplit(v, k) for k, v in buckets.items()}


def balanced_image_sample(records: Sequence[AnnotationRecord], per_class: int, num_classes: int,
                          rng=None, tolerance: int = 0, exclude: Iterable[str] = ()) -> list[str]:
    """Pick whole images so each class gets close to ``per_class`` consistent records.

    Images are visited in random order and taken while no class would
    exceed ``per_class + tolerance``; sampling stops once every class has
    at least ``per_class - tolerance``.
    """
    rng = np.random.default_rng(rng)
    excluded = set(exclude)
    by_image: dict[str, list[int]] = {}
    for rec in records:
        if rec.image_id in excluded or not rec.is_consistent:
            continue
        by_image.setdefault(rec.image_id, []).append(rec.majority_label)
    images = sorted(by_image)
    rng.shuffle(images)
    counts = np.zeros(num_classes, dtype=np.int64)
    chosen = []
    for image_id in images:
        add = np.bincount(by_image[image_id], minlength=num_classes)
        if np.any(counts + add > per_class + tolerance):
            continue
        chosen.append(image_id)
        counts += add
        if np.all(counts >= per_class - tolerance):
            break
    return chosen


def write_split_manifest(path: str | Path, splits: Mapping[str, DatasetSplit]) -> None:
    with open(path, "w") as fh:
        json.dump({k: s.record_ids for k, s in splits.items()}, fh, indent=1, sort_keys=True)


def read_split_manifest(path: str | Path, records: Sequence[AnnotationRecord]) -> dict[str, DatasetSplit]:
    with open(path) as fh:
        raw = json.load(fh)
    by_id = {r.record_id: r for r in records}
    out = {}
    for kind, ids in raw.items():
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"split {kind!r} references unknown records {missing[:3]}")
        out[kind] = DatasetSplit([by_id[i] for i in ids], kind)
    return out


def get_split(splits: Mapping[str, DatasetSplit], name: str) -> DatasetSplit:
    try:
        return splits[name]
    except KeyError:
        raise MissingSplit(f"split {name!r} not found; have {sorted(splits)}") from None


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def load_samples(
    records: Sequence[AnnotationRecord],
    manifest: Mapping[str, Mapping],
    proposals: Mapping[str, list[RegionProposal]] | None = None,
) -> list[PairSample]:
    """Validate records against image sizes and attach images and proposals.

    Untrainable records (only "not sure" votes) are skipped with a
    warning. Images without proposals fall back to sliding-window
    proposals scored on the image itself.
    """
    images: dict[str, np.ndarray] = {}
    heuristic: dict[str, list[RegionProposal]] = {}
    samples = []
    for rec in records:
        info = manifest.get(rec.image_id)
        if info is None:
            raise DataError(f"image {rec.image_id!r} missing from manifest")
        try:
            rec = validate_record(rec, info["width"], info["height"])
        except EmptyVotes:
            logger.warning("skipping %s: no relationship votes", rec.record_id)
            continue
        if rec.image_id not in images:
            images[rec.image_id] = load_image(info["path"])
        image = images[rec.image_id]
        if proposals is not None and rec.image_id in proposals:
            props = proposals[rec.image_id]
        else:
            if rec.image_id not in heuristic:
                heuristic[rec.image_id] = sliding_window_proposals(
                    image, image_size=(info["width"], info["height"]))
            props = heuristic[rec.image_id]
        samples.append(PairSample(rec, image, props))
    return samples


def load_corpus(annotations: str | Path, manifest: str | Path, proposals: str | Path | None = None,
                taxonomy: RelationshipTaxonomy | None = None):
    """Read annotation, manifest and (optional) proposal files in one go."""
    records = read_annotations(annotations, taxonomy)
    man = read_manifest(manifest)
    props = read_proposals(proposals) if proposals else None
    return records, man, props
