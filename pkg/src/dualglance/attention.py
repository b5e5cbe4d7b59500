"""Regional scoring and top-down gated attention over a bag of regions.

The numpy functions are the reference path (with an exact backward pass
for gradient checks); :class:`AttentiveAggregator` is the torch module
used inside the network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import DimensionMismatch, EmptyBag

AGGREGATION_MODES = ("attention", "avg", "max")


@dataclass
class AttentionParams:
    W_s: np.ndarray   # (R, k) regional score head
    b_s: np.ndarray   # (R,)
    w_top: np.ndarray  # (k,) top-down gate
    W_ha: np.ndarray  # (k,) attention head
    b_a: float

    @classmethod
    def random(cls, k: int, num_classes: int, rng=None, scale: float = 0.5) -> "AttentionParams":
        rng = np.random.default_rng(rng)
        return cls(rng.normal(0, scale, (num_classes, k)), rng.normal(0, scale, num_classes),
                   rng.normal(0, scale, k), rng.normal(0, scale, k), float(rng.normal(0, scale)))

    @property
    def k(self) -> int:
        return self.W_s.shape[1]


def _bag(bag) -> np.ndarray:
    bag = np.asarray(bag, dtype=np.float64)
    if bag.ndim != 2:
        raise DimensionMismatch(f"region bag must be (N, k), got shape {bag.shape}")
    if bag.shape[0] == 0:
        raise EmptyBag("region bag is empty")
    return bag


def regional_scores(bag, params: AttentionParams) -> np.ndarray:
    """Per-region class scores, one row per region."""
    bag = _bag(bag)
    if bag.shape[1] != params.k:
        raise DimensionMismatch(f"features have dim {bag.shape[1]}, head expects {params.k}")
    return bag @ params.W_s.T + params.b_s


def gated_features(bag, v_top, w_top) -> np.ndarray:
    """ReLU(v_i + w_top * v_top) for every region feature v_i."""
    bag = _bag(bag)
    v_top = np.asarray(v_top, dtype=np.float64)
    w_top = np.asarray(w_top, dtype=np.float64)
    if v_top.shape != (bag.shape[1],) or w_top.shape != v_top.shape:
        raise DimensionMismatch(
            f"bag dim {bag.shape[1]}, v_top {v_top.shape}, w_top {w_top.shape}")
    return np.maximum(bag + w_top * v_top, 0.0)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def attention_weights(gated, W_ha, b_a: float) -> np.ndarray:
    gated = _bag(gated)
    W_ha = np.asarray(W_ha, dtype=np.float64).reshape(-1)
    if W_ha.shape[0] != gated.shape[1]:
        raise DimensionMismatch("attention head does not match feature dim")
    return _sigmoid(gated @ W_ha + b_a)


def aggregate(scores, weights=None, mode: str = "attention") -> np.ndarray:
    """Pool per-region scores into one score vector.

    ``attention`` is the weighted sum divided by the number of regions
    (not by the weight total), ``avg`` the plain mean and ``max`` the
    per-class maximum. Weights are ignored outside attention mode.
    """
    scores = _bag(scores)
    if mode == "attention":
        if weights is None:
            raise ValueError("attention mode needs weights")
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (scores.shape[0],):
            raise DimensionMismatch("one weight per region expected")
        return (weights[:, None] * scores).sum(axis=0) / scores.shape[0]
    if mode == "avg":
        return scores.sum(axis=0) / scores.shape[0]
    if mode == "max":
        return scores.max(axis=0)
    raise ValueError(f"unknown aggregation mode {mode!r}")


def second_glance_scores(bag, v_top, params: AttentionParams, mode: str = "attention"):
    """Compose regional scoring, gating, attention and pooling.

    Returns ``(S2, attention)``; outside attention mode the attention
    vector is all ones.
    """
    s = regional_scores(bag, params)
    if mode == "attention":
        a = attention_weights(gated_features(bag, v_top, params.w_top), params.W_ha, params.b_a)
    else:
        a = np.ones(s.shape[0])
    return aggregate(s, a, mode), a


def second_glance_backward(bag, v_top, params: AttentionParams, grad_out, mode: str = "attention") -> dict:
    """Gradients of ``grad_out . S2`` with respect to inputs and parameters."""
    V = _bag(bag)
    v_top = np.asarray(v_top, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    n = V.shape[0]
    s = regional_scores(V, params)
    grads = {
        "v_top": np.zeros_like(v_top),
        "w_top": np.zeros(params.k),
        "W_ha": np.zeros(params.k),
        "b_a": 0.0,
    }
    if mode == "attention":
        u = V + params.w_top * v_top
        h = np.maximum(u, 0.0)
        a = _sigmoid(h @ params.W_ha + params.b_a)
        g_s = a[:, None] * g / n
        g_a = s @ g / n
        g_z = g_a * a * (1.0 - a)
        g_u = np.outer(g_z, params.W_ha) * (u > 0)
        grads["v_top"] = g_u.sum(axis=0) * params.w_top
        grads["w_top"] = g_u.sum(axis=0) * v_top
        grads["W_ha"] = g_z @ h
        grads["b_a"] = float(g_z.sum())
        extra_v = g_u
    elif mode == "avg":
        g_s = np.tile(g / n, (n, 1))
        extra_v = 0.0
    elif mode == "max":
        g_s = np.zeros_like(s)
        g_s[s.argmax(axis=0), np.arange(s.shape[1])] = g
        extra_v = 0.0
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    grads["bag"] = g_s @ params.W_s + extra_v
    grads["W_s"] = g_s.T @ V
    grads["b_s"] = g_s.sum(axis=0)
    return grads


class AttentiveAggregator(nn.Module):
    """Torch version of the region scoring and pooling head.

    Works on padded bags: ``bag`` is ``(B, M, k)`` with a boolean ``mask``
    ``(B, M)`` marking real regions. Rows with no region produce a zero
    score and ``has_regions`` false so the caller can fall back.
    """

    def __init__(self, k: int, num_classes: int, mode: str = "attention"):
        super().__init__()
        if mode not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation mode {mode!r}")
        self.mode = mode
        self.score = nn.Linear(k, num_classes)
        self.w_top = nn.Parameter(torch.ones(k))
        self.attend = nn.Linear(k, 1)

    def forward(self, bag, mask, v_top):
        s = self.score(bag)  # (B, M, R)
        count = mask.sum(dim=1)
        if self.mode == "attention":
            h = torch.relu(bag + (self.w_top * v_top).unsqueeze(1))
            a = torch.sigmoid(self.attend(h).squeeze(-1))
        else:
            a = torch.ones_like(mask, dtype=bag.dtype)
        a = a * mask
        if self.mode == "max":
            neg = torch.finfo(s.dtype).min
            pooled = s.masked_fill(~mask.unsqueeze(-1), neg).amax(dim=1)
            pooled = torch.where(count.unsqueeze(1) > 0, pooled, torch.zeros_like(pooled))
        else:
            pooled = (a.unsqueeze(-1) * s).sum(dim=1) / count.clamp_min(1).unsqueeze(1).to(s.dtype)
        return pooled, a, count > 0

    def to_params(self) -> AttentionParams:
        return AttentionParams(
            self.score.weight.detach().double().numpy().copy(),
            self.score.bias.detach().double().numpy().copy(),
            self.w_top.detach().double().numpy().copy(),
            self.attend.weight.detach().double().numpy().reshape(-1).copy(),
            float(self.attend.bias.detach().double().item()),
        )
