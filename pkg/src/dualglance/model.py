"""The two-branch network: pair branch, contextual-region branch and fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentiveAggregator
from .core import BoundingBox
from .exceptions import DimensionMismatch, RegionOutsideMap
from .losses import softmax


@dataclass(frozen=True)
class BackboneSpec:
    """Small trainable CNN: ``len(widths)`` blocks of conv + ReLU + 2x2 max-pool."""

    kind: str = "toy_cnn"
    widths: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    patch_size: int = 24
    in_channels: int = 3

    def __post_init__(self):
        if self.kind not in ("toy_cnn", "external"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def output_channels(self) -> int:
        return self.widths[-1]

    @property
    def feature_stride(self) -> int:
        return 2 ** len(self.widths)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "widths": list(self.widths), "kernel_size": self.kernel_size,
                "patch_size": self.patch_size, "in_channels": self.in_channels}


def conv_backbone(spec: BackboneSpec) -> nn.Sequential:
    if spec.kind != "toy_cnn":
        raise ValueError("only toy_cnn backbones can be built here; pass an nn.Module for 'external'")
    layers: list[nn.Module] = []
    c_in = spec.in_channels
    for width in spec.widths:
        layers += [nn.Conv2d(c_in, width, spec.kernel_size, padding=spec.kernel_size // 2),
                   nn.ReLU(), nn.MaxPool2d(2)]
        c_in = width
    return nn.Sequential(*layers)


# -- patches ---------------------------------------------------------------


def _pixel_bounds(box: BoundingBox, width: int, height: int) -> tuple[int, int, int, int]:
    x0 = min(max(int(math.floor(box.x_min)), 0), width - 1)
    y0 = min(max(int(math.floor(box.y_min)), 0), height - 1)
    x1 = max(min(int(math.ceil(box.x_max)), width), x0 + 1)
    y1 = max(min(int(math.ceil(box.y_max)), height), y0 + 1)
    return x0, y0, x1, y1


def crop_resize(image: np.ndarray, box: BoundingBox, size: int) -> np.ndarray:
    """Crop ``box`` out of an H x W x C image and resize it to ``size`` x ``size`` (bilinear)."""
    h, w = image.shape[:2]
    x0, y0, x1, y1 = _pixel_bounds(box, w, h)
    crop = torch.from_numpy(np.ascontiguousarray(image[y0:y1, x0:x1], dtype=np.float32))
    crop = crop.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(crop, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def crop_patches(image: np.ndarray, b1: BoundingBox, b2: BoundingBox, size: int = 224):
    """Return the two person patches and the patch of their tight union box."""
    return (crop_resize(image, b1, size), crop_resize(image, b2, size),
            crop_resize(image, b1.union(b2), size))


# -- ROI pooling -----------------------------------------------------------


def roi_bins(region: BoundingBox, map_height: int, map_width: int, grid: Sequence[int],
             stride: float) -> np.ndarray:
    """Integer ``[y0, y1, x0, x1)`` bounds of every pooling bin, row-major.

    The region is mapped to the feature map by ``stride`` with floor on
    the start and ceil on the end, then split with floor/ceil bin edges.
    A region that overlaps the map always yields nonempty bins.
    """
    gh, gw = grid
    x0 = max(int(math.floor(region.x_min / stride)), 0)
    y0 = max(int(math.floor(region.y_min / stride)), 0)
    x1 = min(int(math.ceil(region.x_max / stride)), map_width)
    y1 = min(int(math.ceil(region.y_max / stride)), map_height)
    if x1 <= x0 or y1 <= y0:
        raise RegionOutsideMap(f"{region} does not overlap a {map_height}x{map_width} map at stride {stride}")
    rh, rw = y1 - y0, x1 - x0
    bins = np.empty((gh * gw, 4), dtype=np.int64)
    for i in range(gh):
        for j in range(gw):
            bins[i * gw + j] = (
                y0 + (i * rh) // gh,
                y0 + -((-(i + 1) * rh) // gh),
                x0 + (j * rw) // gw,
                x0 + -((-(j + 1) * rw) // gw),
            )
    return bins


def roi_pool(feature_map: np.ndarray, region: BoundingBox, grid: Sequence[int] = (2, 2),
             stride: float = 1.0) -> np.ndarray:
    """Max-pool a region of a C x H x W map into a C x gh x gw grid."""
    fmap = np.asarray(feature_map)
    c, h, w = fmap.shape
    bins = roi_bins(region, h, w, grid, stride)
    out = np.empty((c, len(bins)), dtype=fmap.dtype)
    for b, (y0, y1, x0, x1) in enumerate(bins):
        out[:, b] = fmap[:, y0:y1, x0:x1].reshape(c, -1).max(axis=1)
    return out.reshape(c, grid[0], grid[1])


def roi_pool_batched(features: torch.Tensor, bins: torch.Tensor) -> torch.Tensor:
    """Max-pool padded regions: features ``(B, C, H, W)``, bins ``(B, M, G, 4)`` -> ``(B, M, G, C)``.

    Padding bins must still be nonempty (any valid window works); their
    output is masked downstream.
    """
    b, c, h, w = features.shape
    ys = torch.arange(h).view(1, 1, 1, h, 1)
    xs = torch.arange(w).view(1, 1, 1, 1, w)
    y0, y1, x0, x1 = (bins[..., i].unsqueeze(-1).unsqueeze(-1) for i in range(4))
    inside = ((ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)).flatten(-2)  # (B, M, G, HW)
    m, g = inside.shape[1], inside.shape[2]
    bias = torch.zeros(inside.shape, dtype=features.dtype).masked_fill_(~inside, float("-inf"))
    out = (features.reshape(b, 1, c, h * w) + bias.view(b, m * g, 1, h * w)).amax(dim=-1)
    return out.view(b, m, g, c)


# -- branches --------------------------------------------------------------


class FirstGlance(nn.Module):
    """Pair branch: shared person tower, union tower and a geometry projection."""

    def __init__(self, spec: BackboneSpec, k: int, num_classes: int, geometry_dim: int = 64):
        super().__init__()
        self.person_tower = conv_backbone(spec)
        self.union_tower = conv_backbone(spec)
        side = spec.patch_size // spec.feature_stride
        if side < 1:
            raise DimensionMismatch("patch too small for the backbone depth")
        tower_dim = spec.output_channels * side * side
        self.geometry = nn.Linear(10, geometry_dim)
        self.top = nn.Linear(3 * tower_dim + geometry_dim, k)
        self.out = nn.Linear(k, num_classes)

    def forward(self, p1, p2, pu, geom):
        f1 = self.person_tower(p1).flatten(1)
        f2 = self.person_tower(p2).flatten(1)
        fu = self.union_tower(pu).flatten(1)
        g = torch.relu(self.geometry(geom))
        v_top = torch.relu(self.top(torch.cat([f1, f2, fu, g], dim=1)))
        return self.out(v_top), v_top


class SecondGlance(nn.Module):
    """Contextual-region branch over a whole-image feature map."""

    def __init__(self, spec: BackboneSpec, k: int, num_classes: int, grid=(2, 2),
                 aggregation: str = "attention"):
        super().__init__()
        self.grid = tuple(grid)
        self.backbone = conv_backbone(spec)
        self.region_fc = nn.Linear(spec.output_channels * self.grid[0] * self.grid[1], k)
        self.head = AttentiveAggregator(k, num_classes, aggregation)

    def forward(self, image, bins, mask, v_top):
        fmap = self.backbone(image)
        pooled = roi_pool_batched(fmap, bins)  # (B, M, G, C)
        # flatten in (C, gh, gw) order to match the reference roi_pool layout
        pooled = pooled.permute(0, 1, 3, 2).flatten(2)
        v = torch.relu(self.region_fc(pooled))
        return self.head(v, mask, v_top)


class DualGlanceNet(nn.Module):
    def __init__(self, spec: BackboneSpec, k: int, num_classes: int, grid=(2, 2),
                 aggregation: str = "attention", geometry_dim: int = 64):
        super().__init__()
        self.first = FirstGlance(spec, k, num_classes, geometry_dim)
        self.second = SecondGlance(spec, k, num_classes, grid, aggregation)
        self.fusion_w = nn.Parameter(torch.ones(num_classes))

    def forward(self, batch: dict, use_second: bool = True, detach_top: bool = True):
        s1, v_top = self.first(batch["p1"], batch["p2"], batch["pu"], batch["geom"])
        if not use_second:
            return s1, s1, None, None
        top = v_top.detach() if detach_top else v_top
        s2, attn, has = self.second(batch["image"], batch["bins"], batch["mask"], top)
        s = fuse_scores(s1, s2, self.fusion_w, has)
        return s, s1, s2, attn


def fuse_scores(s1: torch.Tensor, s2: torch.Tensor, w: torch.Tensor, has_regions: torch.Tensor):
    """``S1 + w * S2`` where a sample has regions, plain ``S1`` otherwise."""
    return torch.where(has_regions.unsqueeze(1), s1 + w * s2, s1)


def fuse_and_predict(s1, s2, fusion_w):
    """Single-sample fusion; ``s2=None`` means the region bag was empty."""
    s1 = np.asarray(s1, dtype=np.float64)
    s = s1 if s2 is None else s1 + np.asarray(fusion_w, dtype=np.float64) * np.asarray(s2, dtype=np.float64)
    return s, softmax(s)
