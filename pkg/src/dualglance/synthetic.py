"""Procedural pair-relationship datasets for desk-scale experiments.

Every image holds one or more person pairs and a few objects. The label
of a pair is fixed by construction:

* "local" classes are encoded in the colors of the two people,
* "context" classes share one neutral person appearance and are encoded
  by the color of one object placed away from the pair.

So a model that only looks at the pair can tell the local classes apart
but not the context classes, while a model that attends to the right
proposal can recover all of them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import AnnotationRecord, BoundingBox, RelationshipTaxonomy, write_annotations
from .data import make_splits, write_split_manifest
from .exceptions import InvalidSpec
from .geometry import RegionProposal, write_proposals

# person body colors for local classes: (person 1, person 2)
LOCAL_COLORS = [
    ((0.9, 0.15, 0.15), (0.15, 0.8, 0.2)),
    ((0.15, 0.3, 0.95), (0.95, 0.9, 0.1)),
    ((0.95, 0.5, 0.05), (0.6, 0.1, 0.8)),
    ((0.1, 0.85, 0.85), (0.9, 0.2, 0.6)),
    ((0.5, 0.9, 0.1), (0.1, 0.1, 0.5)),
    ((0.9, 0.6, 0.7), (0.3, 0.6, 0.3)),
]
CONTEXT_COLORS = [
    (0.95, 0.1, 0.9),
    (0.1, 0.95, 0.95),
    (0.98, 0.6, 0.0),
    (0.2, 0.9, 0.2),
    (0.2, 0.2, 0.95),
    (0.95, 0.95, 0.2),
]
NEUTRAL_PERSON = (0.55, 0.5, 0.45)
SKIN = (0.85, 0.7, 0.55)


@dataclass(frozen=True)
class SyntheticSpec:
    num_images: int = 400
    pairs_per_image: int = 1
    num_context_regions: int = 4
    context_informative_fraction: float = 0.6
    image_size: int = 64
    ambiguity: float = 0.0
    num_annotators: int = 5
    unsure_rate: float = 0.0
    include_no_relation: bool = False
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.num_images < 1 or self.pairs_per_image < 1:
            raise InvalidSpec("need at least one image and one pair per image")
        if not 0.0 <= self.context_informative_fraction <= 1.0:
            raise InvalidSpec("context_informative_fraction must lie in [0, 1]")
        if not 0.0 <= self.ambiguity <= 1.0 or not 0.0 <= self.unsure_rate <= 1.0:
            raise InvalidSpec("ambiguity and unsure_rate must lie in [0, 1]")
        if self.image_size < 32:
            raise InvalidSpec("image_size must be at least 32")
        if self.pairs_per_image > 3:
            raise InvalidSpec("at most 3 pairs fit in one synthetic image")
        if self.num_annotators != 5:
            raise InvalidSpec("vote patterns are defined for 5 annotators")
        if self.train_fraction <= 0 or self.val_fraction < 0 or self.train_fraction + self.val_fraction >= 1:
            raise InvalidSpec("split fractions must leave room for a test split")
        if self.context_classes and self.num_context_regions < 1:
            raise InvalidSpec("context-dependent classes need at least one context region")
        if self.num_context_regions > 8:
            raise InvalidSpec("at most 8 context regions per image")

    @property
    def taxonomy(self) -> RelationshipTaxonomy:
        return RelationshipTaxonomy.default(self.include_no_relation)

    @property
    def context_classes(self) -> list[int]:
        r = self.taxonomy.num_classes
        n = int(round(self.context_informative_fraction * r))
        return list(range(r - n, r))


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    images: dict[str, np.ndarray]
    proposals: dict[str, list[RegionProposal]]
    records: list[AnnotationRecord]
    image_split: dict[str, str]
    true_labels: dict[str, int]

    @property
    def manifest(self) -> dict[str, dict]:
        return {k: {"width": v.shape[1], "height": v.shape[0], "path": f"images/{k}.png"}
                for k, v in self.images.items()}


def _overlaps(a: BoundingBox, b: BoundingBox, margin: float = 1.0) -> bool:
    return not (a.x_max + margin <= b.x_min or b.x_max + margin <= a.x_min
                or a.y_max + margin <= b.y_min or b.y_max + margin <= a.y_min)


def _paint(img, box: BoundingBox, color, rng, jitter=0.04):
    x0, y0, x1, y1 = (int(v) for v in box.as_tuple())
    c = np.clip(np.asarray(color) + rng.uniform(-jitter, jitter, 3), 0, 1)
    img[y0:y1, x0:x1] = c


def _paint_person(img, box: BoundingBox, body, rng):
    head_h = max(int(box.height // 4), 2)
    _paint(img, BoundingBox(box.x_min + 2, box.y_min, box.x_max - 2, box.y_min + head_h), SKIN, rng)
    _paint(img, BoundingBox(box.x_min, box.y_min + head_h, box.x_max, box.y_max), body, rng)


def _place(rng, size, w, h, avoid, tries=200):
    for _ in range(tries):
        bw, bh = w, h
        x = int(rng.integers(1, size - bw - 1))
        y = int(rng.integers(1, size - bh - 1))
        box = BoundingBox(x, y, x + bw, y + bh)
        if not any(_overlaps(box, other) for other in avoid):
            return box
    return None


def _votes(rng, true: int, spec: SyntheticSpec) -> tuple[dict[str, int], int]:
    names = spec.taxonomy.relationships
    others = [i for i in range(len(names)) if i != true]
    counts = np.zeros(len(names), dtype=np.int64)
    if spec.ambiguity > 0 and rng.random() < spec.ambiguity:
        # no class reaches 3 of 5 votes
        counts[true] = 2
        picks = rng.permutation(others)
        if rng.random() < 0.5:
            counts[picks[0]] += 2
            counts[picks[1]] += 1
        else:
            counts[picks[:3]] += 1
    else:
        noise = 0 if spec.ambiguity == 0 else int(rng.choice(3, p=[0.5, 0.3, 0.2]))
        counts[true] = spec.num_annotators - noise
        for i in rng.choice(others, size=noise, replace=True):
            counts[i] += 1
    unsure = int(rng.random() < spec.unsure_rate)
    return {names[i]: int(c) for i, c in enumerate(counts) if c > 0}, unsure


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Draw a dataset; the result is a pure function of ``spec``."""
    spec.validate()
    taxonomy = spec.taxonomy
    r = taxonomy.num_classes
    context = set(spec.context_classes)
    local = [c for c in range(r) if c not in context]
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size

    classes = rng.permutation(np.arange(spec.num_images) % r)
    n_train = int(round(spec.train_fraction * spec.num_images))
    n_val = int(round(spec.val_fraction * spec.num_images))

    images, proposals, records, image_split, true_labels = {}, {}, [], {}, {}
    for idx in range(spec.num_images):
        image_id = f"img{idx:05d}"
        c = int(classes[idx])
        img = np.clip(0.45 + rng.normal(0, 0.03, (size, size, 3)), 0, 1)
        img += rng.uniform(-0.05, 0.05, 3)

        pairs = []
        unions = []
        for _ in range(spec.pairs_per_image):
            for _attempt in range(200):
                w1, w2 = rng.integers(7, 11, size=2)
                h1, h2 = rng.integers(14, 21, size=2)
                gap = int(rng.integers(1, 8))
                total_w = int(w1 + w2 + gap)
                x = int(rng.integers(1, size - total_w - 1))
                y = int(rng.integers(size // 3, size - max(h1, h2) - 1))
                b1 = BoundingBox(x, y, x + int(w1), y + int(h1))
                b2 = BoundingBox(x + int(w1) + gap, y + int(rng.integers(-2, 3)) if y > 3 else y,
                                 x + total_w, y + int(h2))
                b2 = BoundingBox(b2.x_min, b2.y_min, b2.x_max, max(b2.y_max, b2.y_min + 8))
                u = b1.union(b2)
                if b2.y_max < size - 1 and not any(_overlaps(u, o) for o in unions):
                    break
            else:
                raise InvalidSpec("could not place person pairs; use a larger image")
            unions.append(u)
            pairs.append((b1, b2))

        objects = []
        avoid = list(unions)
        for j in range(spec.num_context_regions):
            side = int(rng.integers(8, 14))
            box = _place(rng, size, side, side, avoid)
            if box is None:
                raise InvalidSpec("could not place context regions; use fewer or a larger image")
            avoid.append(box)
            informative = j == 0 and c in context
            if informative:
                color = CONTEXT_COLORS[sorted(context).index(c) % len(CONTEXT_COLORS)]
            else:
                g = rng.uniform(0.2, 0.4)
                color = (g, g * 0.9, g * 0.8)
            _paint(img, box, color, rng, jitter=0.03)
            objects.append(box)

        for b1, b2 in pairs:
            if c in local:
                body1, body2 = LOCAL_COLORS[local.index(c) % len(LOCAL_COLORS)]
            else:
                body1 = body2 = NEUTRAL_PERSON
            _paint_person(img, b1, body1, rng)
            _paint_person(img, b2, body2, rng)

        img = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
        images[image_id] = img.astype(np.float32) / 255.0

        props = []
        for box in objects:
            jit = rng.integers(-1, 2, size=4)
            jb = BoundingBox(max(box.x_min + jit[0], 0), max(box.y_min + jit[1], 0),
                             min(box.x_max + jit[2], size), min(box.y_max + jit[3], size))
            props.append(RegionProposal(jb, float(rng.uniform(0.75, 1.0))))
        for b1, b2 in pairs:
            props.append(RegionProposal(b1, float(rng.uniform(0.8, 1.0))))
            props.append(RegionProposal(b2, float(rng.uniform(0.8, 1.0))))
        for _ in range(3):
            s = int(rng.integers(6, size // 2))
            x, y = (int(v) for v in rng.integers(0, size - s, size=2))
            props.append(RegionProposal(BoundingBox(x, y, x + s, y + s), float(rng.uniform(0.0, 0.5))))
        proposals[image_id] = props

        for p, (b1, b2) in enumerate(pairs):
            votes, unsure = _votes(rng, c, spec)
            rec = AnnotationRecord.create(image_id, b1, b2, votes, unsure, p, taxonomy)
            records.append(rec)
            true_labels[rec.record_id] = c

        image_split[image_id] = "train" if idx < n_train else ("val" if idx < n_train + n_val else "test")

    return SyntheticDataset(spec, images, proposals, records, image_split, true_labels)


def write_synthetic(dataset: SyntheticDataset, out_dir: str | Path) -> dict[str, Path]:
    """Serialize a dataset to the on-disk formats the loaders read."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for image_id, img in dataset.images.items():
        arr = (img * 255).round().astype(np.uint8)
        Image.fromarray(arr).save(out / "images" / f"{image_id}.png")
    paths = {
        "annotations": out / "annotations.jsonl",
        "manifest": out / "manifest.json",
        "proposals": out / "proposals.jsonl",
        "splits": out / "splits.json",
        "spec": out / "synthetic_spec.json",
    }
    write_annotations(paths["annotations"], dataset.records)
    with open(paths["manifest"], "w") as fh:
        json.dump(dataset.manifest, fh, indent=1, sort_keys=True)
    write_proposals(paths["proposals"], dataset.proposals)
    write_split_manifest(paths["splits"], make_splits(dataset.records, dataset.image_split))
    with open(paths["spec"], "w") as fh:
        json.dump(asdict(dataset.spec), fh, indent=1, sort_keys=True)
    return paths
