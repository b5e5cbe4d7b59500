"""Two-stage training, evaluation runs, sweeps and artifact emission."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .config import RunConfig
from .core import read_annotations, read_manifest
from .data import (
    PairSample,
    annotation_class_counts,
    get_split,
    load_samples,
    make_splits,
    read_split_manifest,
    write_split_manifest,
)
from .estimator import DualGlanceClassifier
from .exceptions import DataError, IncompatibleCheckpoint
from .geometry import read_proposals
from .metrics import EvalResult
from .viz import plot_attention_overlay, plot_confusion, top_regions

logger = logging.getLogger(__name__)

SWEEP_AXES = {
    "tau_u": "region.tau_u",
    "m": "region.m",
    "gamma": "loss.gamma",
    "loss_kind": "loss.kind",
    "aggregation": "aggregation",
}


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(est: DualGlanceClassifier, path: str | Path, config: RunConfig | None = None) -> Path:
    ckpt = est.to_checkpoint()
    if config is not None:
        ckpt["config"] = config.to_dict()
        ckpt["config_hash"] = config.config_hash()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt, path)
    return path


def load_checkpoint(path: str | Path, config: RunConfig | None = None) -> DualGlanceClassifier:
    ckpt = torch.load(path, weights_only=True)
    est = DualGlanceClassifier.from_checkpoint(ckpt)
    if config is not None:
        want = config.get_taxonomy().relationships
        if est.taxonomy_.relationships != want:
            raise IncompatibleCheckpoint(
                f"checkpoint classes {est.taxonomy_.relationships} differ from config classes {want}")
    return est


# -- data ------------------------------------------------------------------


@dataclass
class RunData:
    splits: dict
    samples: dict[str, list[PairSample]]

    def get(self, name: str) -> list[PairSample]:
        get_split(self.splits, name)
        return self.samples[name]


def load_run_data(config: RunConfig) -> RunData:
    d = config.data
    if not d.annotations or not d.manifest:
        raise DataError("config needs data.annotations and data.manifest")
    taxonomy = config.get_taxonomy()
    records = read_annotations(d.annotations, taxonomy)
    manifest = read_manifest(d.manifest)
    proposals = read_proposals(d.proposals) if d.proposals else None
    if d.splits:
        splits = read_split_manifest(d.splits, records)
    else:
        rng = np.random.default_rng(config.seed)
        images = sorted({r.image_id for r in records})
        order = rng.permutation(len(images))
        n_train, n_val = int(0.6 * len(images)), int(0.2 * len(images))
        assign = {}
        for rank, i in enumerate(order):
            assign[images[i]] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        splits = make_splits(records, assign)
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_split_manifest(out / "splits.json", splits)
    samples = {}
    for name, split in splits.items():
        samples[name] = load_samples(split.records, manifest, proposals) if split.records else []
    return RunData(splits, samples)


# -- training --------------------------------------------------------------


def _train_samples(config: RunConfig, data: RunData):
    samples = data.get(config.data.train_split)
    if not samples:
        raise DataError(f"training split {config.data.train_split!r} is empty")
    counts = annotation_class_counts([s.record for s in samples], config.loss.beta)
    return samples, counts


def train_stage1(config: RunConfig, data: RunData | None = None) -> tuple[DualGlanceClassifier, Path]:
    """Train the pair branch and write ``checkpoint_stage1.bin``."""
    data = data or load_run_data(config)
    samples, counts = _train_samples(config, data)
    est = DualGlanceClassifier(**config.estimator_params())
    est.fit_first_glance(samples, annotation_counts=counts)
    path = save_checkpoint(est, Path(config.out_dir) / "checkpoint_stage1.bin", config)
    return est, path


def train_stage2(config: RunConfig, stage1_checkpoint: str | Path | DualGlanceClassifier,
                 data: RunData | None = None) -> tuple[DualGlanceClassifier, Path]:
    """Freeze the pair branch of a stage-1 model and train the context branch."""
    data = data or load_run_data(config)
    if isinstance(stage1_checkpoint, DualGlanceClassifier):
        est = stage1_checkpoint
    else:
        est = load_checkpoint(stage1_checkpoint, config)
        # run-time knobs come from the current config, architecture from the checkpoint
        est.set_params(tau_u=config.region.tau_u, max_regions=config.region.m,
                       stage2_epochs=config.training.stage2_epochs,
                       learning_rate=config.optim.learning_rate, momentum=config.optim.momentum,
                       batch_size=config.optim.batch_size, num_workers=config.training.num_workers,
                       deterministic=config.deterministic)
    if est.aggregation != config.aggregation:
        raise IncompatibleCheckpoint(
            f"checkpoint was built for {est.aggregation!r} aggregation, config asks for {config.aggregation!r}")
    samples, _ = _train_samples(config, data)
    before = est.first_glance_digest()
    est.fit_second_glance(samples)
    after = est.first_glance_digest()
    if before != after:
        raise RuntimeError("first-glance parameters changed during stage 2")
    path = save_checkpoint(est, Path(config.out_dir) / "checkpoint.bin", config)
    with open(Path(config.out_dir) / "freeze_check.json", "w") as fh:
        json.dump({"first_glance_sha256_before": before, "first_glance_sha256_after": after,
                   "config_hash": config.config_hash(), "version": __version__}, fh, indent=2)
    return est, path


def train(config: RunConfig, data: RunData | None = None) -> tuple[DualGlanceClassifier, Path]:
    data = data or load_run_data(config)
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    config.save(Path(config.out_dir) / "config.json")
    est, _ = train_stage1(config, data)
    return train_stage2(config, est, data)


# -- evaluation ------------------------------------------------------------


def _artifact_header(config: RunConfig) -> dict:
    return {"config_hash": config.config_hash(), "version": __version__}


def write_metrics(path: str | Path, result: EvalResult, config: RunConfig, split: str,
                  extra: dict | None = None) -> None:
    payload = {**_artifact_header(config), "split": split, "result": result.to_dict()}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def read_metrics(path: str | Path) -> EvalResult:
    with open(path) as fh:
        return EvalResult.from_dict(json.load(fh)["result"])


def write_attention(config: RunConfig, est: DualGlanceClassifier, samples: Sequence[PairSample],
                    out_dir: Path, overlay_limit: int | None) -> list[dict]:
    """Dump per-region attention to ``attention.json`` and draw overlays."""
    explanations = est.explain(samples)
    header = _artifact_header(config)
    att_dir = out_dir / "attention"
    att_dir.mkdir(parents=True, exist_ok=True)
    names = list(est.taxonomy_.relationships)
    for i, (s, ex) in enumerate(zip(samples, explanations)):
        ex["top_regions"] = top_regions(ex)
        if overlay_limit is None or i < overlay_limit:
            plot_attention_overlay(s.image, ex, att_dir / f"{ex['image_id']}_{ex['pair']}.png", names,
                                   header["config_hash"], header["version"])
    with open(out_dir / "attention.json", "w") as fh:
        json.dump({**header, "samples": explanations}, fh, indent=1, sort_keys=True)
    return explanations


def evaluate_run(config: RunConfig, checkpoint: str | Path | DualGlanceClassifier, split: str | None = None,
                 data: RunData | None = None, stage: str = "fused") -> EvalResult:
    """Evaluate on a split and write metrics.json, confusion.png and attention overlays."""
    split = split or config.data.eval_split
    data = data or load_run_data(config)
    est = checkpoint if isinstance(checkpoint, DualGlanceClassifier) else load_checkpoint(checkpoint, config)
    samples = data.get(split)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    result = est.evaluate(samples, stage=stage)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.json", result, config, split, {"stage": stage})
    header = _artifact_header(config)
    plot_confusion(result.confusion, list(est.taxonomy_.relationships), out / "confusion.png",
                   header["config_hash"], header["version"])
    if stage == "fused" and est.stage_ >= 2:
        write_attention(config, est, samples, out, config.overlay_limit)
    return result


# -- sweeps ----------------------------------------------------------------


def sweep(config: RunConfig, axis: str, values: Sequence, data: RunData | None = None) -> list[dict]:
    """One full train + eval run per value of ``axis``; writes sweep.csv and sweep.json."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    data = data or load_run_data(config)
    base_out = Path(config.out_dir)
    rows = []
    for value in values:
        sub = copy.deepcopy(config)
        sub.override(SWEEP_AXES[axis], value)
        sub.out_dir = str(base_out / f"{axis}={value}")
        est, _ = train(sub, data)
        result = evaluate_run(sub, est, data=data)
        samples = data.get(sub.data.eval_split)
        n_regions = [len(est.select_regions(s)) for s in samples]
        rows.append({
            "axis": axis,
            "value": value,
            "map": result.map,
            "accuracy": result.accuracy,
            "mean_regions": float(np.mean(n_regions)),
            "per_class_ap": result.per_class_ap,
            "config_hash": sub.config_hash(),
            "version": __version__,
        })
    base_out.mkdir(parents=True, exist_ok=True)
    with open(base_out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "map", "accuracy", "mean_regions", "config_hash", "version"])
        for row in rows:
            writer.writerow([row["axis"], row["value"], f"{row['map']:.6f}", f"{row['accuracy']:.6f}",
                             f"{row['mean_regions']:.4f}", row["config_hash"], row["version"]])
    with open(base_out / "sweep.json", "w") as fh:
        json.dump({**_artifact_header(config), "rows": rows}, fh, indent=2, sort_keys=True)
    return rows
