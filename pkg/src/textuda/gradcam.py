"""Grad-CAM heatmaps for the main segmentation output."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .model import TextSegNet

LAYER_TAGS = ("stage1", "stage2", "stage3", "stage4", "neck", "dynamic_conv")


def gradcam(model: TextSegNet, image: torch.Tensor, E: torch.Tensor, target_class: int,
            layer_tag: str = "dynamic_conv") -> np.ndarray:
    """H x W map in [0, 1] for ``target_class`` at ``layer_tag``.

    The class score is the sum of the class logits over pixels predicted as that
    class (all pixels when none are).
    """
    if layer_tag not in LAYER_TAGS:
        raise ValueError(f"unknown layer tag {layer_tag!r}; options: {', '.join(LAYER_TAGS)}")
    if image.dim() == 2:
        image = image[None, None]
    elif image.dim() == 3:
        image = image[None]
    model.eval()
    with torch.enable_grad():
        out = model(image, E, keep_stages=True)
        act = out.stages[layer_tag]
        act.retain_grad()
        logits = out.logits[0, target_class]
        mask = out.logits[0].argmax(0) == target_class
        score = logits[mask].sum() if bool(mask.any()) else logits.sum()
        model.zero_grad(set_to_none=True)
        score.backward()
    grad = act.grad[0]
    weights = grad.mean(dim=(1, 2), keepdim=True)
    cam = F.relu((weights * act[0].detach()).mean(0))
    cam = F.interpolate(cam[None, None], size=image.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    lo, hi = cam.min(), cam.max()
    if float(hi - lo) <= 1e-12:
        return torch.zeros_like(cam).cpu().numpy()
    return ((cam - lo) / (hi - lo)).clamp(0, 1).cpu().numpy()


def mass_inside(heatmap: np.ndarray, region: np.ndarray) -> float:
    total = float(heatmap.sum())
    return float(heatmap[region].sum()) / total if total > 0 else 0.0


def save_overlay(image: np.ndarray, heatmap: np.ndarray, path, title: Optional[str] = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(3, 3), dpi=100)
    ax.imshow(image, cmap="gray")
    ax.imshow(heatmap, cmap="jet", alpha=0.45, vmin=0, vmax=1)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
