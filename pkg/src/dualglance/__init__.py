"""Pair relationship recognition with a pair branch, an attentive context branch
and losses for soft, ambiguous labels."""

__version__ = "0.1.0"

from .core import AnnotationRecord, BoundingBox, RelationshipTaxonomy, SoftLabel  # noqa: E402
from .data import PairSample  # noqa: E402
from .estimator import DualGlanceClassifier  # noqa: E402
from .geometry import GeometryScaler, RegionProposal  # noqa: E402
from .losses import LossConfig  # noqa: E402
from .metrics import EvalResult, evaluate  # noqa: E402

__all__ = [
    "AnnotationRecord",
    "BoundingBox",
    "DualGlanceClassifier",
    "EvalResult",
    "GeometryScaler",
    "LossConfig",
    "PairSample",
    "RegionProposal",
    "RelationshipTaxonomy",
    "SoftLabel",
    "evaluate",
]
