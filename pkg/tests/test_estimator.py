import numpy as np
import pytest
import torch
from sklearn.base import clone

from conftest import TINY_MODEL, consistent
from dualglance.core import AnnotationRecord, RelationshipTaxonomy
from dualglance.data import PairSample
from dualglance.estimator import DualGlanceClassifier, converged, parameter_digest
from dualglance.exceptions import DataError, IncompatibleCheckpoint, LengthMismatch, MismatchedTarget


def make_est(**kw):
    params = dict(TINY_MODEL, stage1_epochs=2, stage2_epochs=2, augment=False)
    params.update(kw)
    return DualGlanceClassifier(**params)


def test_sklearn_params_and_clone():
    est = make_est(loss="focal", gamma=3.0)
    params = est.get_params()
    assert params["loss"] == "focal" and params["gamma"] == 3.0 and params["tau_u"] == 0.7
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(max_regions=5)
    assert est.max_regions == 5


def test_defaults():
    est = DualGlanceClassifier()
    assert (est.tau_u, est.max_regions, est.learning_rate, est.momentum, est.batch_size) == (0.7, 30, 0.01, 0.9, 32)
    assert est.loss == "adaptive_focal" and est.beta == 0.5 and est.aggregation == "attention"


def test_converged():
    assert not converged([1.0, 0.9], 1e-3, 3)
    assert converged([1.0, 1.0, 1.0, 1.0], 1e-3, 3)
    assert not converged([1.0, 0.99, 0.98, 0.97], 1e-3, 3)


def test_fit_predict_shapes(tiny_samples):
    X = consistent(tiny_samples)
    est = make_est().fit(X)
    proba = est.predict_proba(X)
    assert proba.shape == (len(X), 5)
    np.testing.assert_allclose(proba.sum(axis=1), 1, atol=1e-6)
    assert est.predict(X).shape == (len(X),)
    assert est.stage_ == 2
    assert 0 <= est.score(X, [s.record.majority_label for s in X]) <= 1


def test_hard_loss_rejects_ambiguous(tiny_samples):
    X = list(tiny_samples.values())
    assert any(not s.record.is_consistent for s in X)
    with pytest.raises(MismatchedTarget):
        make_est(loss="cross_entropy").fit_first_glance(X)


def test_soft_loss_rejects_hard_targets(tiny_samples):
    X = consistent(tiny_samples)
    with pytest.raises(MismatchedTarget):
        make_est(loss="kl_divergence").fit_first_glance(X, y=[0] * len(X))
    with pytest.raises(LengthMismatch):
        make_est(loss="focal").fit_first_glance(X, y=[0])


def test_bad_input():
    with pytest.raises(DataError):
        make_est().fit([])
    with pytest.raises(DataError):
        make_est().fit([1, 2, 3])


def test_stage2_freezes_first_glance(tiny_samples):
    X = consistent(tiny_samples)
    est = make_est().fit_first_glance(X)
    before = est.first_glance_digest()
    second_before = parameter_digest(est.network_.second)
    est.fit_second_glance(X)
    assert est.first_glance_digest() == before
    assert parameter_digest(est.network_.second) != second_before


def test_first_stage_matches_fused_without_regions(tiny_samples):
    X = consistent(tiny_samples)
    est = make_est().fit(X)
    stripped = [PairSample(s.record, s.image, []) for s in X]
    np.testing.assert_allclose(est.predict_proba(stripped), est.predict_proba(stripped, stage="first"))
    assert not any(e["used_context"] for e in est.explain(stripped))


def test_zero_epochs_keeps_initial_weights(tiny_samples):
    X = consistent(tiny_samples)
    est = make_est(stage1_epochs=0, stage2_epochs=0).fit(X)
    fresh = est._build_network()
    for (k, a), (_, b) in zip(est.network_.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_round_trip(tiny_samples):
    X = consistent(tiny_samples)
    est = make_est().fit(X)
    back = DualGlanceClassifier.from_checkpoint(est.to_checkpoint())
    np.testing.assert_array_equal(back.predict_proba(X), est.predict_proba(X))
    assert back.get_params() == est.get_params()


def test_checkpoint_schema():
    with pytest.raises(IncompatibleCheckpoint):
        DualGlanceClassifier.from_checkpoint({"schema": 99})


def test_other_taxonomy_rejected(tiny_samples):
    X = consistent(tiny_samples)
    est = make_est(stage2_epochs=0).fit_first_glance(X)
    tax = RelationshipTaxonomy(("a", "b"), {"a": "d", "b": "d"})
    s = X[0]
    rec = AnnotationRecord.create(s.record.image_id, s.record.box_1, s.record.box_2, {"a": 3}, taxonomy=tax)
    with pytest.raises(IncompatibleCheckpoint):
        est.fit_second_glance([PairSample(rec, s.image, s.proposals)])


def test_explain_regions_respect_bound(tiny_samples):
    from dualglance.geometry import iou
    X = consistent(tiny_samples)
    est = make_est(max_regions=3).fit(X)
    for s, ex in zip(X, est.explain(X)):
        assert len(ex["regions"]) <= 3
        assert len(ex["attention"]) == len(ex["regions"])
        assert all(0 <= a <= 1 for a in ex["attention"])
        for r in est.select_regions(s):
            assert max(iou(r.box, s.record.box_1), iou(r.box, s.record.box_2)) < 0.7
