import json

import pytest

from dualglance.core import (
    AnnotationRecord,
    BoundingBox,
    RelationshipTaxonomy,
    SoftLabel,
    read_annotations,
    read_manifest,
    validate_record,
    write_annotations,
)
from dualglance.exceptions import DataError, DegenerateBox, EmptyVotes, UnknownClass


def make(votes, unsure=0, b1=(0, 0, 10, 10), b2=(20, 0, 30, 10)):
    return AnnotationRecord.create("im", b1, b2, votes, unsure)


class TestTaxonomy:
    def test_default(self):
        tax = RelationshipTaxonomy.default()
        assert tax.relationships == ("Friends", "Family", "Couple", "Professional", "Commercial")
        assert tax.domains == ("Intimate", "Non-Intimate")
        assert tax.num_classes == 5
        assert [tax.domain_index(i) for i in range(5)] == [0, 0, 0, 1, 1]

    def test_no_relation_is_sixth(self):
        tax = RelationshipTaxonomy.default(include_no_relation=True)
        assert tax.num_classes == 6
        assert tax.index("No-Relation") == 5

    def test_every_class_needs_a_domain(self):
        with pytest.raises(ValueError):
            RelationshipTaxonomy(("a", "b"), {"a": "x"})

    def test_round_trip(self):
        tax = RelationshipTaxonomy.default(True)
        assert RelationshipTaxonomy.from_dict(json.loads(json.dumps(tax.to_dict()))) == tax

    def test_domain_votes(self):
        tax = RelationshipTaxonomy.default()
        assert tax.to_domain_votes({"Friends": 2, "Couple": 1, "Commercial": 2}) == {
            "Intimate": 3, "Non-Intimate": 2}

    def test_unknown_class(self):
        with pytest.raises(UnknownClass):
            RelationshipTaxonomy.default().index("Enemies")


class TestBoundingBox:
    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateBox):
            BoundingBox(5, 0, 5, 10)
        with pytest.raises(DegenerateBox):
            BoundingBox(0, 10, 5, 2)

    def test_union(self):
        assert BoundingBox(0, 0, 10, 10).union(BoundingBox(90, 90, 100, 100)) == BoundingBox(0, 0, 100, 100)

    def test_flip(self):
        assert BoundingBox(10, 0, 20, 10).flip_horizontal(100) == BoundingBox(80, 0, 90, 10)

    def test_clamp_to_nothing(self):
        with pytest.raises(DegenerateBox):
            BoundingBox(110, 0, 120, 10).clamp(100, 100)


class TestSoftLabel:
    def test_must_sum_to_one(self):
        with pytest.raises(ValueError):
            SoftLabel((0.5, 0.4))

    def test_one_hot(self):
        assert SoftLabel.one_hot(2, 4).probs == (0.0, 0.0, 1.0, 0.0)


class TestValidateRecord:
    def test_valid_box_unchanged(self):
        rec = make({"Friends": 3})
        out = validate_record(rec, 100, 100)
        assert out.box_1 == BoundingBox(0, 0, 10, 10)

    def test_clamped(self):
        rec = make({"Friends": 3}, b1=(-5, 0, 10, 10))
        assert validate_record(rec, 100, 100).box_1 == BoundingBox(0, 0, 10, 10)

    def test_all_unsure(self):
        rec = make({}, unsure=5)
        assert not rec.trainable
        with pytest.raises(EmptyVotes):
            validate_record(rec, 100, 100)

    def test_box_outside_image(self):
        rec = make({"Friends": 3}, b2=(150, 0, 160, 10))
        with pytest.raises(DegenerateBox):
            validate_record(rec, 100, 100)

    def test_derived_fields(self):
        rec = validate_record(make({"Friends": 4, "Family": 1}, unsure=2), 100, 100)
        assert rec.soft_label.probs == (0.8, 0.2, 0.0, 0.0, 0.0)
        assert rec.is_consistent and rec.majority_label == 0

    def test_unsure_excluded_from_denominator(self):
        rec = make({"Couple": 3, "Family": 2}, unsure=5)
        assert rec.soft_label.probs == (0.0, 0.4, 0.6, 0.0, 0.0)
        assert rec.is_consistent

    def test_bad_votes(self):
        with pytest.raises(DataError):
            make({"Friends": -1})
        with pytest.raises(UnknownClass):
            make({"Enemies": 1})


def test_jsonl_round_trip(tmp_path):
    recs = [make({"Friends": 4, "Family": 1}), AnnotationRecord.create("im", (1, 1, 5, 5), (6, 6, 9, 9),
                                                                       {"Couple": 2}, 1, pair_index=1)]
    path = tmp_path / "ann.jsonl"
    write_annotations(path, recs)
    back = read_annotations(path)
    assert [r.record_id for r in back] == ["im:0", "im:1"]
    assert back == recs


def test_jsonl_without_pair_key_numbers_pairs(tmp_path):
    path = tmp_path / "ann.jsonl"
    lines = [{"image_id": "a", "box_1": [0, 0, 1, 1], "box_2": [1, 1, 2, 2], "votes": {"Friends": 1}}] * 2
    path.write_text("\n".join(json.dumps(x) for x in lines) + "\n")
    assert [r.record_id for r in read_annotations(path)] == ["a:0", "a:1"]


def test_manifest_paths_resolve(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"a": {"width": 64, "height": 32, "path": "images/a.png"}}))
    man = read_manifest(path)
    assert man["a"]["width"] == 64.0
    assert man["a"]["path"] == str(tmp_path / "images/a.png")
