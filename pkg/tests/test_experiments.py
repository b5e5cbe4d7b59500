"""Training-based checks on synthetic data (marked slow)."""

import pytest

from dualglance.data import PairSample, annotation_class_counts, make_splits
from dualglance.estimator import DualGlanceClassifier
from dualglance.synthetic import SyntheticSpec, generate_synthetic


def _split_samples(spec):
    ds = generate_synthetic(spec)
    splits = make_splits(ds.records, ds.image_split)

    def samples(name):
        return [PairSample(r, ds.images[r.image_id], ds.proposals[r.image_id]) for r in splits[name].records]
    return splits, samples("train_consistent"), samples("test")


@pytest.mark.slow
def test_pair_branch_separates_context_free_classes():
    splits, train_x, test_x = _split_samples(
        SyntheticSpec(num_images=300, context_informative_fraction=0.0, seed=1))
    est = DualGlanceClassifier(random_state=1)
    est.fit_first_glance(train_x, annotation_counts=annotation_class_counts(splits["train_consistent"]))
    assert est.evaluate(test_x, stage="first").accuracy > 0.9


@pytest.mark.slow
def test_attention_at_least_matches_average_pooling():
    splits, train_x, test_x = _split_samples(SyntheticSpec(num_images=400, seed=2))
    counts = annotation_class_counts(splits["train_consistent"])
    maps = {}
    for mode in ("attention", "avg"):
        est = DualGlanceClassifier(aggregation=mode, random_state=2).fit(train_x, annotation_counts=counts)
        maps[mode] = est.evaluate(test_x).map
    assert maps["attention"] >= maps["avg"], maps
