"""scikit-learn style estimator wrapping the two-stage training procedure."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch.utils.data import DataLoader

from . import __version__
from .core import BoundingBox, RelationshipTaxonomy
from .data import PairSample, annotation_class_counts, augment as augment_sample
from .exceptions import DegenerateBox, DivergenceDetected, IncompatibleCheckpoint, RegionOutsideMap
from .geometry import GeometryNormStats, GeometryScaler, RegionProposal, pair_geometry, select_contextual_regions
from .losses import LossConfig, batch_loss, class_alpha
from .metrics import evaluate
from .model import BackboneSpec, DualGlanceNet, crop_resize, roi_bins
from .validation import check_pair_samples, check_targets, targets_from_records

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1


@dataclass
class EncodedPairs:
    """Tensors for a list of samples; images are stored once and indexed."""

    p1: torch.Tensor
    p2: torch.Tensor
    pu: torch.Tensor
    geom_raw: np.ndarray
    images: torch.Tensor
    image_index: torch.Tensor
    bins: torch.Tensor
    mask: torch.Tensor
    regions: list[list[RegionProposal]]

    def __len__(self):
        return self.p1.shape[0]


def converged(losses, tol: float, patience: int) -> bool:
    """True once the best loss of the last ``patience`` epochs improves on the
    loss just before them by less than ``tol`` (relative)."""
    if len(losses) <= patience:
        return False
    ref = losses[-patience - 1]
    best = min(losses[-patience:])
    return (ref - best) / max(abs(ref), 1e-12) < tol


def parameter_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class DualGlanceClassifier(ClassifierMixin, BaseEstimator):
    """Pair relationship classifier with a pair branch and a context branch.

    ``X`` is a sequence of :class:`~dualglance.data.PairSample`. ``y`` is
    optional: by default targets come from the records (soft labels for
    the soft-label losses, majority labels otherwise). Pass class indices
    ``(n,)`` or label distributions ``(n, R)`` to override.

    :meth:`fit` runs both stages: the pair branch is trained alone until
    its loss converges, then frozen while the context branch and the
    fusion weights are trained.
    """

    def __init__(
        self,
        k=64,
        backbone_widths=(8, 16),
        kernel_size=3,
        patch_size=24,
        context_size=64,
        roi_grid=(2, 2),
        geometry_dim=64,
        tau_u=0.7,
        max_regions=30,
        aggregation="attention",
        loss="adaptive_focal",
        gamma=None,
        beta=0.5,
        balance_classes=True,
        epsilon=1e-12,
        learning_rate=0.01,
        momentum=0.9,
        batch_size=32,
        stage1_epochs=30,
        stage2_epochs=30,
        tol=1e-3,
        patience=3,
        augment=True,
        num_workers=0,
        deterministic=True,
        random_state=0,
        verbose=0,
    ):
        self.k = k
        self.backbone_widths = backbone_widths
        self.kernel_size = kernel_size
        self.patch_size = patch_size
        self.context_size = context_size
        self.roi_grid = roi_grid
        self.geometry_dim = geometry_dim
        self.tau_u = tau_u
        self.max_regions = max_regions
        self.aggregation = aggregation
        self.loss = loss
        self.gamma = gamma
        self.beta = beta
        self.balance_classes = balance_classes
        self.epsilon = epsilon
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.tol = tol
        self.patience = patience
        self.augment = augment
        self.num_workers = num_workers
        self.deterministic = deterministic
        self.random_state = random_state
        self.verbose = verbose

    # -- setup -------------------------------------------------------------

    @property
    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec("toy_cnn", tuple(self.backbone_widths), self.kernel_size, self.patch_size,
                            getattr(self, "n_channels_", 3))

    def _seed(self, offset: int = 0) -> None:
        if self.deterministic:
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(int(self.random_state) + offset)

    def _build_network(self) -> DualGlanceNet:
        self._seed()
        return DualGlanceNet(self.backbone_spec, self.k, self.n_classes_, tuple(self.roi_grid),
                             self.aggregation, self.geometry_dim)

    def _setup(self, samples, y, annotation_counts):
        taxonomy = samples[0].record.taxonomy
        self.taxonomy_ = taxonomy
        self.n_classes_ = taxonomy.num_classes
        self.classes_ = np.arange(self.n_classes_)
        self.n_channels_ = samples[0].image.shape[2]
        base = LossConfig(self.loss, self.gamma, None, self.epsilon)
        if self.balance_classes:
            counts = annotation_counts
            if counts is None:
                counts = annotation_class_counts([s.record for s in samples], self.beta)
            alpha = tuple(class_alpha(counts, self.beta).tolist())
        else:
            alpha = None
        self.loss_config_ = LossConfig(base.kind, base.gamma, alpha, self.epsilon)
        raw = np.stack([self._raw_geometry(s) for s in samples])
        self.geometry_scaler_ = GeometryScaler().fit(raw)
        self.network_ = self._build_network()
        self.stage_ = 0
        self.history_ = {"stage1": [], "stage2": []}

    def _targets(self, samples, y):
        soft = LossConfig(self.loss).uses_soft_labels
        if y is None:
            y = targets_from_records(samples, soft)
        return check_targets(y, len(samples), self.n_classes_, soft)

    # -- encoding ----------------------------------------------------------

    @staticmethod
    def _raw_geometry(s: PairSample) -> np.ndarray:
        return pair_geometry(s.record.box_1, s.record.box_2, s.width, s.height)

    def select_regions(self, sample: PairSample) -> list[RegionProposal]:
        valid = []
        for prop in sample.proposals:
            try:
                box = prop.box.clamp(sample.width, sample.height)
            except DegenerateBox:
                continue
            valid.append(prop if box == prop.box else RegionProposal(box, prop.objectness))
        return select_contextual_regions(valid, sample.record.box_1, sample.record.box_2,
                                         self.tau_u, self.max_regions)

    def _encode(self, samples: list[PairSample]) -> EncodedPairs:
        spec = self.backbone_spec
        size = self.context_size
        stride = spec.feature_stride
        fmap = size // stride
        grid = tuple(self.roi_grid)
        n_bins = grid[0] * grid[1]

        p1, p2, pu, geoms, regions, all_bins = [], [], [], [], [], []
        image_slots: dict[int, int] = {}
        images, image_index = [], []
        for s in samples:
            rec = s.record
            a, b, u = (crop_resize(s.image, box, spec.patch_size)
                       for box in (rec.box_1, rec.box_2, rec.box_1.union(rec.box_2)))
            p1.append(a)
            p2.append(b)
            pu.append(u)
            geoms.append(self._raw_geometry(s))
            key = id(s.image)
            if key not in image_slots:
                image_slots[key] = len(images)
                img = torch.from_numpy(np.ascontiguousarray(s.image, dtype=np.float32)).permute(2, 0, 1)
                if img.shape[1:] != (size, size):
                    img = F.interpolate(img[None], size=(size, size), mode="bilinear", align_corners=False)[0]
                images.append(img)
            image_index.append(image_slots[key])

            sx, sy = size / s.width, size / s.height
            chosen, bins = [], []
            for prop in self.select_regions(s):
                box = prop.box
                scaled = BoundingBox(box.x_min * sx, box.y_min * sy, box.x_max * sx, box.y_max * sy)
                try:
                    bins.append(roi_bins(scaled, fmap, fmap, grid, stride))
                except RegionOutsideMap:
                    continue
                chosen.append(prop)
            regions.append(chosen)
            all_bins.append(bins)

        m = max(1, max(len(b) for b in all_bins))
        bins_t = torch.zeros((len(samples), m, n_bins, 4), dtype=torch.long)
        bins_t[..., 1] = 1
        bins_t[..., 3] = 1
        mask = torch.zeros((len(samples), m), dtype=torch.bool)
        for i, bins in enumerate(all_bins):
            if bins:
                bins_t[i, : len(bins)] = torch.from_numpy(np.stack(bins))
                mask[i, : len(bins)] = True

        def stack(patches):
            return torch.from_numpy(np.stack(patches)).permute(0, 3, 1, 2).contiguous()

        return EncodedPairs(stack(p1), stack(p2), stack(pu), np.stack(geoms), torch.stack(images),
                            torch.tensor(image_index, dtype=torch.long), bins_t, mask, regions)

    def _batch(self, enc: EncodedPairs, idx: torch.Tensor) -> dict:
        geom = self.geometry_scaler_.transform(enc.geom_raw[idx.numpy()])
        return {
            "p1": enc.p1[idx],
            "p2": enc.p2[idx],
            "pu": enc.pu[idx],
            "geom": torch.from_numpy(geom).float(),
            "image": enc.images[enc.image_index[idx]],
            "bins": enc.bins[idx],
            "mask": enc.mask[idx],
        }

    # -- training ----------------------------------------------------------

    def _loader(self, n: int, stage: int):
        gen = torch.Generator()
        gen.manual_seed(int(self.random_state) * 1000 + stage)
        workers = 0 if self.deterministic else int(self.num_workers)
        return DataLoader(torch.arange(n), batch_size=int(self.batch_size), shuffle=True,
                          generator=gen, num_workers=workers)

    def _train_loop(self, params, n, stage, max_epochs, step_loss, early_stop=True):
        history = self.history_[f"stage{stage}"]
        if max_epochs <= 0 or not params:
            return
        opt = torch.optim.SGD(params, lr=self.learning_rate, momentum=self.momentum)
        loader = self._loader(n, stage)
        for epoch in range(int(max_epochs)):
            total, count = 0.0, 0
            for idx in loader:
                loss = step_loss(idx)
                if not torch.isfinite(loss):
                    raise DivergenceDetected(f"stage {stage} loss became {loss.item()} in epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            history.append(total / count)
            if self.verbose:
                logger.info("stage %d epoch %d loss %.5f", stage, epoch, history[-1])
            if early_stop and converged(history, self.tol, self.patience):
                break

    def _prepare_training(self, X, y):
        samples = check_pair_samples(X)
        targets = self._targets(samples, y)
        if self.augment:
            expanded, rep = [], []
            for s in samples:
                aug = augment_sample(s)
                expanded.extend(aug)
                rep.append(len(aug))
            targets = np.repeat(targets, rep, axis=0)
            samples = expanded
        enc = self._encode(samples)
        t = torch.from_numpy(targets)
        t = t.float() if t.dim() == 2 else t.long()
        return enc, t

    def fit_first_glance(self, X, y=None, annotation_counts=None):
        """Stage one: set up the network and train the pair branch alone."""
        samples = check_pair_samples(X)
        self._setup(samples, y, annotation_counts)
        enc, t = self._prepare_training(samples, y)
        net = self.network_
        cfg = self.loss_config_

        def step(idx):
            batch = self._batch(enc, idx)
            s1, _ = net.first(batch["p1"], batch["p2"], batch["pu"], batch["geom"])
            return batch_loss(cfg, s1, t[idx])

        self._seed(1)
        net.train()
        self._train_loop(list(net.first.parameters()), len(enc), 1, self.stage1_epochs, step)
        self.stage_ = 1
        return self

    def fit_second_glance(self, X, y=None):
        """Stage two: freeze the pair branch, train the context branch and fusion weights."""
        check_is_fitted(self, "network_")
        samples = check_pair_samples(X)
        self._check_taxonomy(samples)
        enc, t = self._prepare_training(samples, y)
        net = self.network_
        cfg = self.loss_config_
        for p in net.first.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            s1_all, top_all = self._first_outputs(enc)

        def step(idx):
            batch = self._batch(enc, idx)
            s2, _, has = net.second(batch["image"], batch["bins"], batch["mask"], top_all[idx])
            s = torch.where(has.unsqueeze(1), s1_all[idx] + net.fusion_w * s2, s1_all[idx])
            return batch_loss(cfg, s, t[idx])

        self._seed(2)
        params = list(net.second.parameters()) + [net.fusion_w]
        # fixed budget: stage 2 opens on a flat stretch that the plateau rule mistakes for convergence
        self._train_loop(params, len(enc), 2, self.stage2_epochs, step, early_stop=False)
        for p in net.first.parameters():
            p.requires_grad_(True)
        self.stage_ = 2
        return self

    def fit(self, X, y=None, annotation_counts=None):
        samples = check_pair_samples(X)
        self.fit_first_glance(samples, y, annotation_counts)
        return self.fit_second_glance(samples, y)

    def _check_taxonomy(self, samples):
        if samples[0].record.taxonomy.relationships != self.taxonomy_.relationships:
            raise IncompatibleCheckpoint("samples use a different taxonomy than the fitted model")

    def _first_outputs(self, enc: EncodedPairs, chunk: int = 256):
        net = self.network_
        net.eval()
        s1s, tops = [], []
        for start in range(0, len(enc), chunk):
            idx = torch.arange(start, min(start + chunk, len(enc)))
            batch = self._batch(enc, idx)
            s1, top = net.first(batch["p1"], batch["p2"], batch["pu"], batch["geom"])
            s1s.append(s1)
            tops.append(top)
        net.train()
        return torch.cat(s1s), torch.cat(tops)

    # -- inference ---------------------------------------------------------

    def _forward_all(self, samples, stage: str = "fused", chunk: int = 256):
        check_is_fitted(self, "network_")
        samples = check_pair_samples(samples)
        enc = self._encode(samples)
        net = self.network_
        use_second = stage == "fused" and self.stage_ >= 2
        net.eval()
        out = {"S": [], "S1": [], "S2": [], "attention": [], "has": []}
        with torch.no_grad():
            for start in range(0, len(enc), chunk):
                idx = torch.arange(start, min(start + chunk, len(enc)))
                batch = self._batch(enc, idx)
                s1, top = net.first(batch["p1"], batch["p2"], batch["pu"], batch["geom"])
                if use_second:
                    s2, attn, has = net.second(batch["image"], batch["bins"], batch["mask"], top)
                    s = torch.where(has.unsqueeze(1), s1 + net.fusion_w * s2, s1)
                else:
                    s = s1
                    s2 = torch.zeros_like(s1)
                    attn = torch.zeros_like(batch["mask"], dtype=s1.dtype)
                    has = torch.zeros(len(idx), dtype=torch.bool)
                out["S"].append(s)
                out["S1"].append(s1)
                out["S2"].append(s2)
                out["attention"].append(attn)
                out["has"].append(has)
        net.train()
        res = {k: torch.cat(v).double().numpy() if k != "has" else torch.cat(v).numpy() for k, v in out.items()}
        res["regions"] = enc.regions
        return res

    def decision_function(self, X, stage: str = "fused"):
        return self._forward_all(X, stage)["S"]

    def predict_proba(self, X, stage: str = "fused"):
        """Class probabilities; ``stage="first"`` uses the pair branch only."""
        s = self.decision_function(X, stage)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, stage: str = "fused"):
        return self.predict_proba(X, stage).argmax(axis=1)

    def evaluate(self, X, y=None, stage: str = "fused"):
        samples = check_pair_samples(X)
        if y is None:
            y = targets_from_records(samples, soft=False)
        return evaluate(self.predict_proba(samples, stage), y, self.n_classes_,
                        list(self.taxonomy_.relationships))

    def explain(self, X) -> list[dict]:
        """Per-sample scores, selected regions and their attention weights."""
        samples = check_pair_samples(X)
        res = self._forward_all(samples)
        out = []
        for i, s in enumerate(samples):
            n = len(res["regions"][i])
            probs = np.exp(res["S"][i] - res["S"][i].max())
            out.append({
                "record_id": s.record.record_id,
                "image_id": s.record.image_id,
                "pair": s.record.pair_index,
                "box_1": s.record.box_1.to_list(),
                "box_2": s.record.box_2.to_list(),
                "regions": [p.box.to_list() for p in res["regions"][i]],
                "objectness": [p.objectness for p in res["regions"][i]],
                "attention": res["attention"][i][:n].tolist() if res["has"][i] else [],
                "probs": (probs / probs.sum()).tolist(),
                "used_context": bool(res["has"][i]),
            })
        return out

    # -- persistence -------------------------------------------------------

    def first_glance_digest(self) -> str:
        check_is_fitted(self, "network_")
        return parameter_digest(self.network_.first)

    def to_checkpoint(self) -> dict:
        check_is_fitted(self, "network_")
        params = {}
        for key, value in self.get_params().items():
            params[key] = list(value) if isinstance(value, tuple) else value
        alpha = self.loss_config_.alpha
        return {
            "schema": CHECKPOINT_SCHEMA,
            "version": __version__,
            "estimator_params": params,
            "taxonomy": self.taxonomy_.to_dict(),
            "geometry_stats": self.geometry_scaler_.stats_.to_dict(),
            "loss": self.loss_config_.to_dict(),
            "alpha": None if alpha is None else list(alpha),
            "stage": self.stage_,
            "n_channels": self.n_channels_,
            "history": {k: list(v) for k, v in self.history_.items()},
            "tensors": {k: v.detach().clone() for k, v in self.network_.state_dict().items()},
        }

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "DualGlanceClassifier":
        if ckpt.get("schema") != CHECKPOINT_SCHEMA:
            raise IncompatibleCheckpoint(f"unsupported checkpoint schema {ckpt.get('schema')}")
        params = dict(ckpt["estimator_params"])
        for key in ("backbone_widths", "roi_grid"):
            params[key] = tuple(params[key])
        est = cls(**params)
        est.taxonomy_ = RelationshipTaxonomy.from_dict(ckpt["taxonomy"])
        est.n_classes_ = est.taxonomy_.num_classes
        est.classes_ = np.arange(est.n_classes_)
        est.n_channels_ = int(ckpt["n_channels"])
        est.loss_config_ = LossConfig.from_dict(ckpt["loss"])
        est.geometry_scaler_ = GeometryScaler.from_stats(GeometryNormStats.from_dict(ckpt["geometry_stats"]))
        est.network_ = est._build_network()
        try:
            est.network_.load_state_dict(ckpt["tensors"])
        except RuntimeError as exc:
            raise IncompatibleCheckpoint(str(exc)) from None
        est.stage_ = int(ckpt["stage"])
        est.history_ = {k: list(v) for k, v in ckpt.get("history", {}).items()} or {"stage1": [], "stage2": []}
        return est
