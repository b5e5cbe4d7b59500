"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import itertools
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from dualglance.attention import AttentionParams, aggregate, second_glance_backward, second_glance_scores
from dualglance.config import RunConfig
from dualglance.core import BoundingBox
from dualglance.data import PairSample, annotation_class_counts, make_splits
from dualglance.estimator import DualGlanceClassifier
from dualglance.geometry import RegionProposal, iou, select_contextual_regions
from dualglance.harness import evaluate_run, train
from dualglance.losses import (
    LossConfig,
    adaptive_focal_loss,
    cross_entropy,
    entropy,
    focal_loss,
    kl_divergence_loss,
    loss_gradient,
    loss_value,
    soft_cross_entropy,
    softmax,
)
from dualglance.metrics import average_precision, evaluate
from dualglance.synthetic import SyntheticSpec, generate_synthetic, write_synthetic


def report(number: int, ok: bool, title: str, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1 ---------------------------------------------------------------------


def test_criterion_1_loss_identities():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_fl, worst_ada = 0.0, 0.0
    draws = 2000
    for _ in range(draws):
        n = int(rng.integers(2, 8))
        p = softmax(rng.normal(scale=3, size=n))
        t = int(rng.integers(n))
        alpha = rng.uniform(0.05, 1, n) if rng.random() < 0.5 else None
        gamma = float(rng.choice([0.5, 1.0, 2.0, 3.0, rng.uniform(0, 5)]))
        worst_fl = max(worst_fl, abs(focal_loss(p, t, 0.0, alpha) - cross_entropy(p, t, alpha)))
        onehot = np.eye(n)[t]
        worst_ada = max(worst_ada, abs(adaptive_focal_loss(p, onehot, gamma, alpha) - focal_loss(p, t, gamma, alpha)))
    elapsed = time.perf_counter() - start
    ok = worst_fl <= 1e-12 and worst_ada <= 1e-12 and elapsed < 5
    report(1, ok, "loss identities",
           f"{draws} draws, max |FL0-CE|={worst_fl:.1e}, max |AdaFL(onehot)-FL|={worst_ada:.1e}, {elapsed:.2f}s")


# -- 2 ---------------------------------------------------------------------


def _fd(f, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def _rel(a, b):
    diff = np.linalg.norm(np.ravel(a) - np.ravel(b))
    scale = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)))
    return 0.0 if diff == 0 else diff / max(scale, 1e-300)


def test_criterion_2_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    per_combo = 100
    worst_loss, n_loss = 0.0, 0
    for kind, gamma, weighted in itertools.product(
            ["cross_entropy", "focal", "kl_divergence", "adaptive_focal"], [0.0, 1.0, 2.0], [False, True]):
        done = 0
        while done < per_combo:
            n = int(rng.integers(2, 7))
            z = rng.normal(scale=2, size=n)
            alpha = tuple(rng.uniform(0.1, 1, n)) if weighted else None
            cfg = LossConfig(kind, gamma=gamma, alpha=alpha)
            if cfg.uses_soft_labels:
                target = rng.dirichlet(np.ones(n))
                if np.min(np.abs(target - softmax(z))) < 1e-3:
                    continue  # max(q - p, 0) has a kink at q = p
            else:
                target = int(rng.integers(n))
            ana = loss_gradient(cfg, z, target)
            num = _fd(lambda x: loss_value(cfg, x, target), z, 1e-5)
            worst_loss = max(worst_loss, _rel(ana, num))
            done += 1
            n_loss += 1

    worst_att, n_att = 0.0, 0
    while n_att < per_combo:
        k, R, n = int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 6))
        p = AttentionParams.random(k, R, rng=rng)
        V, vt, g = rng.normal(size=(n, k)), rng.normal(size=k), rng.normal(size=R)
        if np.min(np.abs(V + p.w_top * vt)) < 1e-3:
            continue  # ReLU kink
        grads = second_glance_backward(V, vt, p, g)

        def f_of(name):
            def f(x):
                q = AttentionParams(p.W_s, p.b_s, p.w_top, p.W_ha, p.b_a)
                bag, top = V, vt
                if name == "bag":
                    bag = x
                elif name == "v_top":
                    top = x
                elif name == "b_a":
                    q.b_a = float(x)
                else:
                    setattr(q, name, x)
                return float(g @ second_glance_scores(bag, top, q)[0])
            return f

        values = {"bag": V, "v_top": vt, "W_s": p.W_s, "b_s": p.b_s, "w_top": p.w_top, "W_ha": p.W_ha,
                  "b_a": np.array(p.b_a)}
        ana = np.concatenate([np.ravel(grads[k_]) for k_ in values])
        num = np.concatenate([np.ravel(_fd(f_of(k_), np.array(v, dtype=np.float64), 1e-6)) for k_, v in values.items()])
        worst_att = max(worst_att, _rel(ana, num))
        n_att += 1
    elapsed = time.perf_counter() - start
    ok = worst_loss <= 1e-5 and worst_att <= 1e-5 and elapsed < 60
    report(2, ok, "analytic gradients vs central differences",
           f"{n_loss} loss instances max rel {worst_loss:.1e}; {n_att} attention-chain instances max rel "
           f"{worst_att:.1e}; {elapsed:.1f}s")


# -- 3 ---------------------------------------------------------------------


def test_criterion_3_kl_decomposition():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(5000):
        n = int(rng.integers(2, 8))
        p = rng.dirichlet(np.ones(n) * rng.uniform(0.2, 3))
        q = rng.dirichlet(np.ones(n) * rng.uniform(0.2, 3))
        q[rng.random(n) < 0.25] = 0.0
        if q.sum() == 0:
            q[int(rng.integers(n))] = 1.0
        q /= q.sum()
        worst = max(worst, abs(kl_divergence_loss(p, q) + entropy(q) - soft_cross_entropy(p, q)))
    report(3, worst <= 1e-9, "KL + H = soft cross entropy", f"5000 draws, max error {worst:.1e}")


# -- 4 ---------------------------------------------------------------------


def _raster(a, b):
    def cells(box):
        return {(x, y) for x in range(int(box.x_min), int(box.x_max)) for y in range(int(box.y_min), int(box.y_max))}
    ca, cb = cells(a), cells(b)
    return len(ca & cb) / len(ca | cb)


def _box(rng, lo=0, hi=30, integer=False):
    if integer:
        x0, y0 = rng.integers(lo, hi, 2)
        w, h = rng.integers(1, 12, 2)
    else:
        x0, y0 = rng.uniform(lo, hi, 2)
        w, h = rng.uniform(0.01, 15, 2)
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def test_criterion_4_geometry():
    rng = np.random.default_rng(404)
    pairs = 10_000
    sym = bounds = ident = True
    worst_raster = 0.0
    for i in range(pairs):
        a, b = _box(rng), _box(rng)
        v = iou(a, b)
        sym &= v == iou(b, a)
        bounds &= 0.0 <= v <= 1.0
        ident &= iou(a, a) == 1.0
        ai, bi = _box(rng, integer=True), _box(rng, integer=True)
        worst_raster = max(worst_raster, abs(iou(ai, bi) - _raster(ai, bi)))

    bound_ok = mono_ok = True
    taus = [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0]
    for _ in range(300):
        b1, b2 = _box(rng), _box(rng)
        props = [RegionProposal(_box(rng), float(rng.random())) for _ in range(int(rng.integers(0, 40)))]
        props += [RegionProposal(b1, 0.9)]
        prev = set()
        for tau in taus:
            chosen = select_contextual_regions(props, b1, b2, tau, m=None)
            bound_ok &= all(max(iou(c.box, b1), iou(c.box, b2)) < tau for c in chosen)
            ids = {id(c) for c in chosen}
            mono_ok &= prev <= ids
            prev = ids
            capped = select_contextual_regions(props, b1, b2, tau, m=5)
            bound_ok &= len(capped) <= 5 and capped == chosen[:5]
    ok = sym and bounds and ident and worst_raster <= 1e-6 and bound_ok and mono_ok
    report(4, ok, "IoU properties and region selection",
           f"{pairs} pairs, symmetric={sym}, bounded={bounds}, raster max err {worst_raster:.1e}, "
           f"selection bound={bound_ok}, monotone in tau={mono_ok}")


# -- 5 ---------------------------------------------------------------------


def test_criterion_5_aggregation():
    rng = np.random.default_rng(505)
    bitwise = True
    for _ in range(200):
        s = rng.normal(size=(int(rng.integers(1, 12)), int(rng.integers(2, 7))))
        bitwise &= np.array_equal(aggregate(s, np.ones(len(s)), "attention"), aggregate(s, mode="avg"))
    shuffles, worst = 0, 0.0
    p = AttentionParams.random(6, 5, rng=rng)
    V, vt = rng.normal(size=(9, 6)), rng.normal(size=6)
    base = {m: second_glance_scores(V, vt, p, m)[0] for m in ("attention", "avg", "max")}
    for _ in range(150):
        perm = rng.permutation(9)
        for mode in base:
            worst = max(worst, float(np.max(np.abs(second_glance_scores(V[perm], vt, p, mode)[0] - base[mode]))))
        shuffles += 1
    example = aggregate([[1.0, 2.0], [3.0, 4.0]], [1.0, 0.0], "attention").tolist()
    ok = bitwise and worst <= 1e-12 and example == [0.5, 1.0]
    report(5, ok, "aggregation modes",
           f"unit-weight attention == avg bitwise: {bitwise}; {shuffles} shuffles max diff {worst:.1e}; "
           f"worked example -> {example}")


# -- 6 ---------------------------------------------------------------------


def _sweep_ap(scores, positives):
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(positives)
    tp, prev, ap = 0, 0.0, 0.0
    for cut, i in enumerate(ranked, start=1):
        tp += positives[i]
        ap += (tp / cut) * (tp / n_pos - prev)
        prev = tp / n_pos
    return ap


def test_criterion_6_average_precision():
    start = time.perf_counter()
    checked, worst = 0, 0.0
    # every ranked label sequence up to 10 samples (distinct scores)
    for n in range(1, 11):
        scores = list(range(n, 0, -1))
        for pos in itertools.product((0, 1), repeat=n):
            if any(pos):
                worst = max(worst, abs(average_precision(scores, pos) - _sweep_ap(scores, pos)))
                checked += 1
    # every tie pattern over three score levels up to 6 samples
    for n in range(1, 7):
        for scores in itertools.product((0, 1, 2), repeat=n):
            for pos in itertools.product((0, 1), repeat=n):
                if any(pos):
                    worst = max(worst, abs(average_precision(scores, pos) - _sweep_ap(scores, pos)))
                    checked += 1
    rng = np.random.default_rng(606)
    truths = rng.integers(0, 5, 200)
    perfect = evaluate(np.eye(5)[truths], truths).map
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and perfect == 1.0 and elapsed < 30
    report(6, ok, "average precision vs brute-force sweep",
           f"{checked} datasets, max err {worst:.1e}, perfect mAP={perfect}, {elapsed:.1f}s")


# -- 7 and 8 ---------------------------------------------------------------

EXPERIMENT_IMAGES = 600


def _samples(ds, split):
    return [PairSample(r, ds.images[r.image_id], ds.proposals[r.image_id]) for r in split.records]


@pytest.mark.slow
def test_criterion_7_context_experiment():
    start = time.perf_counter()
    spec = SyntheticSpec(num_images=EXPERIMENT_IMAGES, context_informative_fraction=0.6, seed=0)
    ds = generate_synthetic(spec)
    splits = make_splits(ds.records, ds.image_split)
    train_x, test_x = _samples(ds, splits["train_consistent"]), _samples(ds, splits["test"])
    est = DualGlanceClassifier(loss="adaptive_focal", random_state=0)
    est.fit_first_glance(train_x, annotation_counts=annotation_class_counts(splits["train_consistent"]))
    first = est.evaluate(test_x, stage="first").accuracy
    est.fit_second_glance(train_x)
    fused = est.evaluate(test_x).accuracy
    elapsed = time.perf_counter() - start
    n_train = 3 * len(train_x)
    ok = fused - first >= 0.10 and n_train <= 5000 and elapsed <= 600
    report(7, ok, "context branch beats the frozen pair branch",
           f"{len(spec.context_classes)}/5 classes context-dependent, {n_train} training samples, "
           f"first={first:.3f} fused={fused:.3f} gain={100 * (fused - first):.1f} pts, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_8_soft_label_experiment():
    start = time.perf_counter()
    spec = SyntheticSpec(num_images=EXPERIMENT_IMAGES, ambiguity=0.3, seed=0)
    ds = generate_synthetic(spec)
    ambiguous_share = np.mean([not r.is_consistent for r in ds.records])
    splits = make_splits(ds.records, ds.image_split)
    test_x = _samples(ds, splits["test"])
    scores = {}
    for name, loss, split in (("ce", "cross_entropy", "train_consistent"),
                              ("adafl", "adaptive_focal", "train_ambiguous")):
        train_x = _samples(ds, splits[split])
        est = DualGlanceClassifier(loss=loss, random_state=0)
        est.fit(train_x, annotation_counts=annotation_class_counts(splits[split]))
        scores[name] = est.evaluate(test_x).map
    elapsed = time.perf_counter() - start
    ok = scores["adafl"] >= scores["ce"] and elapsed <= 600
    report(8, ok, "adaptive focal on ambiguous split vs cross entropy on consistent split",
           f"{100 * ambiguous_share:.0f}% ambiguous records, test n={len(test_x)}, "
           f"AdaFL mAP={scores['adafl']:.4f} CE mAP={scores['ce']:.4f}, {elapsed:.0f}s")


# -- 9 ---------------------------------------------------------------------


def test_criterion_9_freezing_and_reproducibility(tmp_path):
    data = tmp_path / "data"
    write_synthetic(generate_synthetic(SyntheticSpec(num_images=40, ambiguity=0.2, seed=9)), data)
    outputs, freeze = [], []
    for run in ("a", "b"):
        cfg = RunConfig()
        cfg.data.annotations = str(data / "annotations.jsonl")
        cfg.data.manifest = str(data / "manifest.json")
        cfg.data.proposals = str(data / "proposals.jsonl")
        cfg.data.splits = str(data / "splits.json")
        cfg.data.train_split = "train_ambiguous"
        cfg.training.stage1_epochs = 3
        cfg.training.stage2_epochs = 3
        cfg.deterministic = True
        cfg.seed = 5
        cfg.out_dir = str(tmp_path / run)
        est, ckpt = train(cfg)
        evaluate_run(cfg, ckpt)
        outputs.append((tmp_path / run / "metrics.json").read_bytes())
        f = json.loads((tmp_path / run / "freeze_check.json").read_text())
        freeze.append(f["first_glance_sha256_before"] == f["first_glance_sha256_after"])
    identical = outputs[0] == outputs[1]
    ok = all(freeze) and identical
    report(9, ok, "stage-2 freezing and deterministic reruns",
           f"first-glance hash unchanged in both runs: {all(freeze)}; metrics.json identical: {identical}")
