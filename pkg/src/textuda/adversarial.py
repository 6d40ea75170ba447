"""Self-information maps, PatchGAN discriminators and the BCE adversarial pair."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

LOG_CLAMP = 1e-12
SOURCE_LABEL = 1.0
TARGET_LABEL = 0.0


def self_information_map(P: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Channel-wise -p log p, divided by log C when ``normalize`` is set."""
    E = -P * torch.log(P.clamp_min(LOG_CLAMP))
    if normalize:
        E = E / math.log(P.shape[1])
    return E


class PatchDiscriminator(nn.Module):
    """Four stride-2 conv layers plus a stride-2 classification layer (output stride 32)."""

    def __init__(self, num_classes: int, ndf: int = 64):
        super().__init__()
        widths = [num_classes, ndf, ndf * 2, ndf * 4, ndf * 8]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        layers.append(nn.Conv2d(widths[-1], 1, 4, stride=2, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, E):
        return self.model(E)


def _bce(logits: torch.Tensor, label: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, label))


def d_loss(d_src_out: torch.Tensor, d_tgt_out: torch.Tensor) -> torch.Tensor:
    """Discriminator objective for one branch: source maps labelled 1, target maps 0."""
    return _bce(d_src_out, SOURCE_LABEL) + _bce(d_tgt_out, TARGET_LABEL)


def g_adv_loss(d_tgt_out_main: torch.Tensor, d_tgt_out_aux: torch.Tensor | None = None,
               aux_weight: float = 0.5) -> torch.Tensor:
    """Generator objective: target maps should be classified as source."""
    loss = _bce(d_tgt_out_main, SOURCE_LABEL)
    if d_tgt_out_aux is not None:
        loss = loss + aux_weight * _bce(d_tgt_out_aux, SOURCE_LABEL)
    return loss
