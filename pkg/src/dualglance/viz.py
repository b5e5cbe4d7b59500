"""Rendered artifacts: confusion heatmaps and attention overlays."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

TOP_REGIONS = 2


def _metadata(config_hash: str | None, version: str | None) -> dict:
    return {"Description": f"config_hash={config_hash} version={version}"}


def plot_confusion(confusion, class_names: Sequence[str], path: str | Path,
                   config_hash: str | None = None, version: str | None = None) -> None:
    conf = np.asarray(confusion, dtype=np.float64)
    rows = conf.sum(axis=1, keepdims=True)
    norm = np.divide(conf, rows, out=np.zeros_like(conf), where=rows > 0)
    fig, ax = plt.subplots(figsize=(1.2 * len(class_names) + 2, 1.1 * len(class_names) + 1.5))
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(conf.shape[0]):
        for j in range(conf.shape[1]):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center",
                    color="white" if norm[i, j] > 0.5 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, metadata=_metadata(config_hash, version))
    plt.close(fig)


def top_regions(explanation: dict, n: int = TOP_REGIONS) -> list[int]:
    """Indices of the ``min(n, N)`` regions with the highest attention."""
    attn = explanation.get("attention") or []
    order = sorted(range(len(attn)), key=lambda i: -attn[i])
    return order[:n]


def plot_attention_overlay(image: np.ndarray, explanation: dict, path: str | Path,
                           class_names: Sequence[str] | None = None,
                           config_hash: str | None = None, version: str | None = None) -> list[int]:
    """Draw the target pair in green and the top attended regions in red."""
    fig, ax = plt.subplots(figsize=(4, 4))
    img = np.clip(image, 0, 1)
    ax.imshow(img if img.shape[2] == 3 else img[..., 0], cmap=None if img.shape[2] == 3 else "gray")
    for box in (explanation["box_1"], explanation["box_2"]):
        x0, y0, x1, y1 = box
        ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, color="lime", lw=2))
    chosen = top_regions(explanation)
    for rank, i in enumerate(chosen):
        x0, y0, x1, y1 = explanation["regions"][i]
        ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, color="red", lw=2))
        ax.text(x0, y0, f"{rank + 1}: {explanation['attention'][i]:.2f}", color="red", fontsize=7,
                va="bottom")
    probs = explanation["probs"]
    best = int(np.argmax(probs))
    label = class_names[best] if class_names else str(best)
    ax.set_title(f"{explanation['record_id']}  {label} ({probs[best]:.2f})", fontsize=8)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, metadata=_metadata(config_hash, version))
    plt.close(fig)
    return chosen
