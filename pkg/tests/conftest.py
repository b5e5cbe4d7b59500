import pytest

from dualglance.config import RunConfig
from dualglance.core import read_annotations, read_manifest
from dualglance.data import load_samples, make_splits
from dualglance.geometry import read_proposals
from dualglance.synthetic import SyntheticSpec, generate_synthetic, write_synthetic

TINY_MODEL = dict(k=8, backbone_widths=(4,), patch_size=8, context_size=32, geometry_dim=8)


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    ds = generate_synthetic(SyntheticSpec(num_images=20, image_size=48, num_context_regions=2,
                                          ambiguity=0.3, seed=11))
    write_synthetic(ds, out)
    return out


@pytest.fixture(scope="session")
def tiny_samples(tiny_dir):
    records = read_annotations(tiny_dir / "annotations.jsonl")
    samples = load_samples(records, read_manifest(tiny_dir / "manifest.json"),
                           read_proposals(tiny_dir / "proposals.jsonl"))
    return {s.record.record_id: s for s in samples}


@pytest.fixture()
def tiny_config(tiny_dir, tmp_path):
    cfg = RunConfig()
    cfg.data.annotations = str(tiny_dir / "annotations.jsonl")
    cfg.data.manifest = str(tiny_dir / "manifest.json")
    cfg.data.proposals = str(tiny_dir / "proposals.jsonl")
    cfg.data.splits = str(tiny_dir / "splits.json")
    cfg.model.k = 8
    cfg.model.backbone_widths = [4]
    cfg.model.patch_size = 8
    cfg.model.context_size = 32
    cfg.model.geometry_dim = 8
    cfg.training.stage1_epochs = 2
    cfg.training.stage2_epochs = 2
    cfg.training.augment = False
    cfg.out_dir = str(tmp_path / "run")
    return cfg


def consistent(samples):
    return [s for s in samples.values() if s.record.is_consistent]


def splits_of(records, image_split):
    return make_splits(records, image_split)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
