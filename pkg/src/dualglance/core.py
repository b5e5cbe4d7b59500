"""Shared domain types: taxonomy, boxes, soft labels and annotation records."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import DataError, DegenerateBox, EmptyVotes, UnknownClass

CONSISTENCY_THRESHOLD = 0.6

RELATIONSHIPS = ("Friends", "Family", "Couple", "Professional", "Commercial")
NO_RELATION = "No-Relation"
DOMAIN_OF = {
    "Friends": "Intimate",
    "Family": "Intimate",
    "Couple": "Intimate",
    "Professional": "Non-Intimate",
    "Commercial": "Non-Intimate",
}


@dataclass(frozen=True)
class RelationshipTaxonomy:
    """Ordered relationship classes and the domain each one belongs to.

    Class indices follow the order of ``relationships`` and never change
    within a run; the taxonomy is serialized next to every checkpoint and
    metrics file so indices can be checked on reload.
    """

    relationships: tuple[str, ...]
    domain_of: Mapping[str, str]
    domains: tuple[str, ...] = ()

    def __post_init__(self):
        rels = tuple(self.relationships)
        if not rels:
            raise ValueError("taxonomy needs at least one relationship")
        if len(set(rels)) != len(rels):
            raise ValueError(f"duplicate relationship names in {rels}")
        missing = [r for r in rels if r not in self.domain_of]
        if missing:
            raise ValueError(f"relationships without a domain: {missing}")
        domains = tuple(self.domains) or tuple(dict.fromkeys(self.domain_of[r] for r in rels))
        unknown = {self.domain_of[r] for r in rels} - set(domains)
        if unknown:
            raise ValueError(f"domains not declared: {sorted(unknown)}")
        object.__setattr__(self, "relationships", rels)
        object.__setattr__(self, "domains", domains)
        object.__setattr__(self, "domain_of", {r: self.domain_of[r] for r in rels})

    @classmethod
    def default(cls, include_no_relation: bool = False) -> "RelationshipTaxonomy":
        rels = RELATIONSHIPS + ((NO_RELATION,) if include_no_relation else ())
        domain_of = dict(DOMAIN_OF)
        domains = ("Intimate", "Non-Intimate")
        if include_no_relation:
            domain_of[NO_RELATION] = NO_RELATION
            domains = domains + (NO_RELATION,)
        return cls(rels, domain_of, domains)

    @property
    def num_classes(self) -> int:
        return len(self.relationships)

    def index(self, name: str) -> int:
        try:
            return self.relationships.index(name)
        except ValueError:
            raise UnknownClass(name) from None

    def domain_index(self, class_index: int) -> int:
        return self.domains.index(self.domain_of[self.relationships[class_index]])

    def domain_taxonomy(self) -> "RelationshipTaxonomy":
        """Taxonomy whose classes are the domains (for the coarse task)."""
        return RelationshipTaxonomy(self.domains, {d: d for d in self.domains}, self.domains)

    def to_domain_votes(self, votes: Mapping[str, int]) -> dict[str, int]:
        out = {d: 0 for d in self.domains}
        for name, count in votes.items():
            out[self.domain_of[name]] += count
        return out

    def to_dict(self) -> dict:
        return {
            "relationships": list(self.relationships),
            "domains": list(self.domains),
            "domain_of": dict(self.domain_of),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RelationshipTaxonomy":
        return cls(tuple(d["relationships"]), dict(d["domain_of"]), tuple(d.get("domains", ())))


@dataclass(frozen=True, order=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = tuple(float(v) for v in (self.x_min, self.y_min, self.x_max, self.y_max))
        for name, v in zip(("x_min", "y_min", "x_max", "y_max"), vals):
            object.__setattr__(self, name, v)
        if not all(math.isfinite(v) for v in vals):
            raise DegenerateBox(f"non-finite box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DegenerateBox(f"box has zero or negative extent: {vals}")

    @classmethod
    def from_sequence(cls, seq: Sequence[float]) -> "BoundingBox":
        if len(seq) != 4:
            raise DataError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_list(self) -> list[float]:
        return list(self.as_tuple())

    def clamp(self, width: float, height: float) -> "BoundingBox":
        """Clip to ``[0, width] x [0, height]``; raises DegenerateBox if nothing is left."""
        return BoundingBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )

    def union(self, other: "BoundingBox") -> "BoundingBox":
        """Tightest box covering both."""
        return BoundingBox(
            min(self.x_min, other.x_min),
            min(self.y_min, other.y_min),
            max(self.x_max, other.x_max),
            max(self.y_max, other.y_max),
        )

    def flip_horizontal(self, image_width: float) -> "BoundingBox":
        return BoundingBox(image_width - self.x_max, self.y_min, image_width - self.x_min, self.y_max)


@dataclass(frozen=True)
class SoftLabel:
    """Distribution over relationship classes built from annotator votes."""

    probs: tuple[float, ...]

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if any(p < 0 or p > 1 for p in probs):
            raise ValueError(f"soft label entries must lie in [0, 1]: {probs}")
        if abs(math.fsum(probs) - 1.0) > 1e-9:
            raise ValueError(f"soft label must sum to 1, got {math.fsum(probs)}")
        object.__setattr__(self, "probs", probs)

    def __len__(self):
        return len(self.probs)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)

    @classmethod
    def one_hot(cls, index: int, num_classes: int) -> "SoftLabel":
        probs = [0.0] * num_classes
        probs[index] = 1.0
        return cls(tuple(probs))


def build_soft_label(votes: Mapping[str, int], taxonomy: RelationshipTaxonomy | None = None) -> SoftLabel:
    """Normalize per-class vote counts into a soft label.

    ``votes`` maps class names to counts; "not sure" votes must not be
    included. Classes absent from the mapping count as zero.
    """
    taxonomy = taxonomy or RelationshipTaxonomy.default()
    counts = [0] * taxonomy.num_classes
    for name, count in votes.items():
        if count < 0:
            raise DataError(f"negative vote count for {name!r}")
        counts[taxonomy.index(name)] += int(count)
    total = sum(counts)
    if total < 1:
        raise EmptyVotes("no relationship votes to build a soft label from")
    return SoftLabel(tuple(c / total for c in counts))


def classify_consistency(label: SoftLabel) -> tuple[bool, int | None]:
    """Apply the majority rule: consistent when one class holds >= 60% of votes."""
    probs = label.probs
    best = max(range(len(probs)), key=probs.__getitem__)
    # k/n comes from integer votes; allow for the rounding of e.g. 3/5
    if probs[best] >= CONSISTENCY_THRESHOLD - 1e-12:
        return True, best
    return False, None


@dataclass(frozen=True)
class AnnotationRecord:
    """One annotated person pair.

    Build records with :meth:`create` so the derived fields (soft label,
    majority class and consistency flag) always agree with the votes.
    """

    image_id: str
    box_1: BoundingBox
    box_2: BoundingBox
    votes: Mapping[str, int]
    unsure_count: int = 0
    pair_index: int = 0
    soft_label: SoftLabel | None = None
    majority_label: int | None = None
    is_consistent: bool = False
    taxonomy: RelationshipTaxonomy = field(default_factory=RelationshipTaxonomy.default, compare=False, repr=False)

    @classmethod
    def create(
        cls,
        image_id: str,
        box_1: BoundingBox | Sequence[float],
        box_2: BoundingBox | Sequence[float],
        votes: Mapping[str, int],
        unsure_count: int = 0,
        pair_index: int = 0,
        taxonomy: RelationshipTaxonomy | None = None,
    ) -> "AnnotationRecord":
        taxonomy = taxonomy or RelationshipTaxonomy.default()
        if not isinstance(box_1, BoundingBox):
            box_1 = BoundingBox.from_sequence(box_1)
        if not isinstance(box_2, BoundingBox):
            box_2 = BoundingBox.from_sequence(box_2)
        if unsure_count < 0:
            raise DataError("unsure count must be nonnegative")
        clean = {}
        for name, count in votes.items():
            taxonomy.index(name)
            if int(count) != count or count < 0:
                raise DataError(f"vote count for {name!r} must be a nonnegative integer")
            clean[name] = int(count)
        soft, majority, consistent = None, None, False
        if sum(clean.values()) >= 1:
            soft = build_soft_label(clean, taxonomy)
            consistent, majority = classify_consistency(soft)
        return cls(image_id, box_1, box_2, clean, int(unsure_count), int(pair_index),
                   soft, majority, consistent, taxonomy)

    @property
    def record_id(self) -> str:
        return f"{self.image_id}:{self.pair_index}"

    @property
    def total_votes(self) -> int:
        return sum(self.votes.values())

    @property
    def trainable(self) -> bool:
        return self.soft_label is not None

    def vote_vector(self) -> np.ndarray:
        out = np.zeros(self.taxonomy.num_classes, dtype=np.int64)
        for name, count in self.votes.items():
            out[self.taxonomy.index(name)] += count
        return out

    def with_boxes(self, box_1: BoundingBox, box_2: BoundingBox) -> "AnnotationRecord":
        return replace(self, box_1=box_1, box_2=box_2)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "pair": self.pair_index,
            "box_1": self.box_1.to_list(),
            "box_2": self.box_2.to_list(),
            "votes": dict(self.votes),
            "unsure": self.unsure_count,
        }

    @classmethod
    def from_json(cls, obj: Mapping, taxonomy: RelationshipTaxonomy | None = None,
                  pair_index: int | None = None) -> "AnnotationRecord":
        try:
            return cls.create(
                str(obj["image_id"]),
                obj["box_1"],
                obj["box_2"],
                obj.get("votes", {}),
                unsure_count=int(obj.get("unsure", 0)),
                pair_index=int(obj.get("pair", pair_index or 0)),
                taxonomy=taxonomy,
            )
        except KeyError as exc:
            if isinstance(exc, UnknownClass):
                raise
            raise DataError(f"annotation missing key {exc}") from None


def validate_record(record: AnnotationRecord, image_width: float, image_height: float) -> AnnotationRecord:
    """Clamp both boxes to the image and recompute derived fields.

    Raises DegenerateBox if a box has no extent inside the image and
    EmptyVotes if every annotator answered "not sure".
    """
    box_1 = record.box_1.clamp(image_width, image_height)
    box_2 = record.box_2.clamp(image_width, image_height)
    if record.total_votes < 1:
        raise EmptyVotes(f"record {record.record_id} has no relationship votes")
    return AnnotationRecord.create(
        record.image_id, box_1, box_2, record.votes, record.unsure_count,
        record.pair_index, record.taxonomy,
    )


def read_annotations(path: str | Path, taxonomy: RelationshipTaxonomy | None = None) -> list[AnnotationRecord]:
    """Read a JSON Lines annotation file.

    Records without an explicit ``pair`` key are numbered in file order
    within their image.
    """
    records = []
    seen: dict[str, int] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            idx = seen.get(str(obj.get("image_id")), 0)
            rec = AnnotationRecord.from_json(obj, taxonomy, pair_index=idx)
            seen[rec.image_id] = max(idx, rec.pair_index) + 1
            records.append(rec)
    return records


def write_annotations(path: str | Path, records: Iterable[AnnotationRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict[str, dict]:
    """Image manifest: image_id -> {width, height, path}. Relative paths resolve against the manifest."""
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    out = {}
    for image_id, info in raw.items():
        try:
            entry = {"width": float(info["width"]), "height": float(info["height"])}
        except KeyError as exc:
            raise DataError(f"manifest entry {image_id!r} missing {exc}") from None
        if "path" in info:
            p = Path(info["path"])
            entry["path"] = str(p if p.is_absolute() else path.parent / p)
        out[str(image_id)] = entry
    return out
