"""Classification losses for hard and soft relationship labels.

Every loss accepts an optional per-class ``alpha`` weight vector. The
numpy functions here work on single samples and come with exact
gradients (:func:`loss_gradient`); :func:`batch_loss` is the torch
version used for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .core import SoftLabel
from .exceptions import MismatchedTarget, ZeroCount

DEFAULT_EPSILON = 1e-12

HARD_LABEL_LOSSES = ("cross_entropy", "focal")
SOFT_LABEL_LOSSES = ("kl_divergence", "adaptive_focal")
LOSS_ALIASES = {
    "ce": "cross_entropy",
    "fl": "focal",
    "kl": "kl_divergence",
    "adafl": "adaptive_focal",
}
DEFAULT_GAMMA = {"cross_entropy": 0.0, "focal": 2.0, "kl_divergence": 0.0, "adaptive_focal": 1.0}


def canonical_loss_name(kind: str) -> str:
    kind = LOSS_ALIASES.get(kind, kind)
    if kind not in DEFAULT_GAMMA:
        raise ValueError(f"unknown loss kind {kind!r}")
    return kind


@dataclass(frozen=True)
class LossConfig:
    kind: str = "adaptive_focal"
    gamma: float | None = None
    alpha: tuple[float, ...] | None = None
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_loss_name(self.kind))
        if self.gamma is None:
            object.__setattr__(self, "gamma", DEFAULT_GAMMA[self.kind])
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.alpha is not None:
            alpha = tuple(float(a) for a in self.alpha)
            if any(not 0.0 <= a <= 1.0 for a in alpha):
                raise ValueError(f"alpha entries must lie in [0, 1]: {alpha}")
            object.__setattr__(self, "alpha", alpha)

    @property
    def uses_soft_labels(self) -> bool:
        return self.kind in SOFT_LABEL_LOSSES

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma,
                "alpha": None if self.alpha is None else list(self.alpha),
                "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossConfig":
        alpha = d.get("alpha")
        return cls(d["kind"], d.get("gamma"), None if alpha is None else tuple(alpha),
                   d.get("epsilon", DEFAULT_EPSILON))


@dataclass(frozen=True)
class ClassFrequency:
    counts: tuple[int, ...]
    beta: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


def class_alpha(freq: ClassFrequency | Sequence[int], beta: float | None = None) -> np.ndarray:
    """Inverse-frequency class weights ``(min_r L_r / L_r) ** beta``."""
    if not isinstance(freq, ClassFrequency):
        freq = ClassFrequency(tuple(freq), 0.5 if beta is None else beta)
    elif beta is not None:
        freq = ClassFrequency(freq.counts, beta)
    counts = np.asarray(freq.counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ZeroCount(f"every class needs at least one annotation, got {freq.counts}")
    return (counts.min() / counts) ** freq.beta


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _alpha(alpha, n: int) -> np.ndarray:
    if alpha is None:
        return np.ones(n)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (n,):
        raise ValueError(f"alpha must have length {n}")
    return alpha


def _soft(p_y) -> np.ndarray:
    return p_y.as_array() if isinstance(p_y, SoftLabel) else np.asarray(p_y, dtype=np.float64)


def _log(p, eps):
    return np.log(np.maximum(p, eps))


def cross_entropy(p, t: int, alpha=None, epsilon: float = DEFAULT_EPSILON) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(-_alpha(alpha, p.size)[t] * _log(p[t], epsilon))


def focal_loss(p, t: int, gamma: float = 2.0, alpha=None, epsilon: float = DEFAULT_EPSILON) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(-_alpha(alpha, p.size)[t] * (1.0 - p[t]) ** gamma * _log(p[t], epsilon))


def _positive_part_power(d: np.ndarray, gamma: float) -> np.ndarray:
    # max(d, 0) ** gamma, with classes at or above their share contributing 0 (also for gamma=0)
    out = np.zeros_like(d)
    pos = d > 0
    out[pos] = d[pos] ** gamma
    return out


def adaptive_focal_loss(p, p_y, gamma: float = 1.0, alpha=None, epsilon: float = DEFAULT_EPSILON) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = _soft(p_y)
    factor = _positive_part_power(q - p, gamma)
    return float(-np.sum(_alpha(alpha, p.size) * factor * _log(p, epsilon)))


def kl_divergence_loss(p, p_y, alpha=None, epsilon: float = DEFAULT_EPSILON) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = _soft(p_y)
    nz = q > 0
    terms = np.zeros_like(q)
    terms[nz] = q[nz] * (np.log(q[nz]) - _log(p[nz], epsilon))
    return float(np.sum(_alpha(alpha, p.size) * terms))


def entropy(q) -> float:
    q = _soft(q)
    nz = q > 0
    return float(-np.sum(q[nz] * np.log(q[nz])))


def soft_cross_entropy(p, p_y, epsilon: float = DEFAULT_EPSILON) -> float:
    """Cross entropy between a label distribution and a prediction."""
    return float(-np.sum(_soft(p_y) * _log(np.asarray(p, dtype=np.float64), epsilon)))


def _check_target(config: LossConfig, target):
    soft = isinstance(target, SoftLabel) or np.ndim(target) == 1
    if config.uses_soft_labels and not soft:
        raise MismatchedTarget(f"{config.kind} needs a soft label, got {target!r}")
    if not config.uses_soft_labels and soft:
        raise MismatchedTarget(f"{config.kind} needs a class index, got a distribution")
    return _soft(target) if soft else int(target)


def loss_value(config: LossConfig, scores, target) -> float:
    """Loss of the selected kind evaluated on raw scores."""
    target = _check_target(config, target)
    p = softmax(scores)
    if config.kind == "cross_entropy":
        return cross_entropy(p, target, config.alpha, config.epsilon)
    if config.kind == "focal":
        return focal_loss(p, target, config.gamma, config.alpha, config.epsilon)
    if config.kind == "adaptive_focal":
        return adaptive_focal_loss(p, target, config.gamma, config.alpha, config.epsilon)
    return kl_divergence_loss(p, target, config.alpha, config.epsilon)


def loss_gradient(config: LossConfig, scores, target) -> np.ndarray:
    """Exact gradient of the configured loss with respect to pre-softmax scores.

    Each loss is written as ``sum_r c_r * log p_r + sum_r d_r * p_r`` locally,
    so the gradient is assembled from the two softmax Jacobian products
    ``d log p_r / dz = e_r - p`` and ``d p_r / dz = p_r (e_r - p)``. A log
    clamped at epsilon has zero derivative.
    """
    target = _check_target(config, target)
    z = np.asarray(scores, dtype=np.float64)
    p = softmax(z)
    n = p.size
    alpha = _alpha(config.alpha, n)
    gamma = config.gamma
    active = p > config.epsilon
    lp = _log(p, config.epsilon)
    c = np.zeros(n)  # coefficient on d log p_r
    d = np.zeros(n)  # coefficient on d p_r

    if config.kind in HARD_LABEL_LOSSES:
        t = target
        g = gamma if config.kind == "focal" else 0.0
        one_minus = 1.0 - p[t]
        c[t] = -alpha[t] * one_minus ** g
        if g > 0:
            if one_minus > 0:
                dfactor = -g * one_minus ** (g - 1)
            else:
                dfactor = -1.0 if g == 1 else 0.0
            d[t] = -alpha[t] * dfactor * lp[t]
    elif config.kind == "adaptive_focal":
        diff = target - p
        pos = diff > 0
        c = -alpha * _positive_part_power(diff, gamma)
        if gamma > 0:
            dfactor = np.zeros(n)
            dfactor[pos] = -gamma * diff[pos] ** (gamma - 1)
            d = -alpha * dfactor * lp
    else:
        c = -alpha * target

    c = c * active
    dp = d * p
    return c - p * c.sum() + dp - p * dp.sum()


# -- torch training losses -------------------------------------------------


def batch_loss(config: LossConfig, scores: torch.Tensor, targets: torch.Tensor,
               alpha: torch.Tensor | None = None) -> torch.Tensor:
    """Mean loss over a batch of raw scores ``(B, R)``.

    ``targets`` holds class indices ``(B,)`` for the hard-label losses and
    soft labels ``(B, R)`` for the others. ``alpha`` overrides
    ``config.alpha`` when given.
    """
    if alpha is None and config.alpha is not None:
        alpha = torch.tensor(config.alpha, dtype=scores.dtype)
    log_eps = math.log(config.epsilon)
    logp = torch.log_softmax(scores, dim=-1)
    lp = torch.clamp(logp, min=log_eps)
    if config.uses_soft_labels:
        if targets.dim() != 2:
            raise MismatchedTarget(f"{config.kind} needs soft labels of shape (B, R)")
        q = targets.to(scores.dtype)
        if config.kind == "adaptive_focal":
            diff = q - logp.exp()
            tiny = torch.finfo(scores.dtype).tiny
            factor = torch.where(diff > 0, diff.clamp_min(tiny) ** config.gamma, torch.zeros_like(diff))
            per_class = -factor * lp
        else:
            qlogq = torch.where(q > 0, q * torch.log(q.clamp_min(1e-300)), torch.zeros_like(q))
            per_class = qlogq - q * lp
        if alpha is not None:
            per_class = per_class * alpha
        per_sample = per_class.sum(dim=-1)
    else:
        if targets.dim() != 1:
            raise MismatchedTarget(f"{config.kind} needs class indices of shape (B,)")
        idx = targets.long().unsqueeze(1)
        lp_t = lp.gather(1, idx).squeeze(1)
        per_sample = -lp_t
        if config.kind == "focal" and config.gamma > 0:
            p_t = logp.gather(1, idx).squeeze(1).exp()
            per_sample = per_sample * (1.0 - p_t) ** config.gamma
        if alpha is not None:
            per_sample = per_sample * alpha[targets.long()]
    return per_sample.mean()
