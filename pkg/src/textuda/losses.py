"""Supervised source-domain objective: cross-entropy plus soft Dice."""
from __future__ import annotations

import torch
import torch.nn.functional as F

LOG_CLAMP = 1e-12
DICE_EPS = 1e-5


def _check_labels(Y: torch.Tensor, C: int) -> None:
    if Y.numel() and (int(Y.min()) < 0 or int(Y.max()) >= C):
        raise ValueError(f"label values must lie in [0, {C - 1}], found [{int(Y.min())}, {int(Y.max())}]")


def ce_loss(P: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -log P[y]; P is B x C x H x W probabilities."""
    _check_labels(Y, P.shape[1])
    picked = P.gather(1, Y[:, None].long())
    return -torch.log(picked.clamp_min(LOG_CLAMP)).mean()


def dice_loss(P: torch.Tensor, Y: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    C = P.shape[1]
    _check_labels(Y, C)
    onehot = F.one_hot(Y.long(), C).permute(0, 3, 1, 2).to(P.dtype)
    dims = (0, 2, 3)
    inter = (P * onehot).sum(dims)
    denom = P.sum(dims) + onehot.sum(dims)
    return 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()


def seg_loss(P: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    return ce_loss(P, Y) + dice_loss(P, Y)
