"""Text-vision fusion, dynamic-parameter controller and the main segmentation head."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .network import HIGH_DIM, SEM_DIM, PointwiseConv, upsample_to

FUSION_DIM = 256
DYN_OUT = 128
DYN_PARAMS = SEM_DIM * DYN_OUT + DYN_OUT  # 32,896


class GlobalVisualVector(nn.Module):
    """GAP -> GroupNorm -> 1x1 conv, flattened to B x 1 x 256."""

    def __init__(self, in_dim: int = HIGH_DIM, out_dim: int = FUSION_DIM, groups: int = 32):
        super().__init__()
        self.norm = nn.GroupNorm(groups, in_dim)
        self.conv = PointwiseConv(in_dim, out_dim)

    def forward(self, F_high):
        pooled = F_high.mean(dim=(2, 3), keepdim=True)
        F_gap = self.conv(self.norm(pooled))
        return F_gap.flatten(1)[:, None, :]


class QueryFuser(nn.Module):
    def __init__(self, dim: int = FUSION_DIM):
        super().__init__()
        self.dim = dim
        self.linear = nn.Linear(2 * dim, dim)

    def forward(self, f_g, t_class):
        if t_class.shape[-1] != self.dim or f_g.shape[-1] != self.dim:
            raise ValueError(
                f"fusion width mismatch: f_g {tuple(f_g.shape)}, t_class {tuple(t_class.shape)}, expected {self.dim}")
        B, C = f_g.shape[0], t_class.shape[-2]
        f_rep = f_g.expand(B, C, self.dim)
        # t_class is C x 256 (shared) or B x C x 256 (per-sample modality)
        t = t_class.expand(B, C, self.dim)
        return F.relu(self.linear(torch.cat([f_rep, t], dim=-1)))


class FusionAttention(nn.Module):
    """MHA with the fused class queries attending to the global visual vector, then an MLP.

    With ``residual=True`` the queries are added back before the MLP. Without it
    the singleton key makes the output independent of the queries.
    """

    def __init__(self, dim: int = FUSION_DIM, heads: int = 4, residual: bool = True):
        super().__init__()
        self.mha = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(inplace=True), nn.Linear(dim, dim))
        self.residual = residual

    def forward(self, Q_fused, f_g, return_weights: bool = False):
        attn, weights = self.mha(Q_fused, f_g, f_g, need_weights=return_weights, average_attn_weights=False)
        if self.residual:
            attn = attn + Q_fused
        out = self.mlp(attn)
        return (out, weights) if return_weights else out


class Controller(nn.Module):
    def __init__(self, dim: int = FUSION_DIM, hidden: int = FUSION_DIM,
                 in_ch: int = SEM_DIM, out_ch: int = DYN_OUT):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, in_ch * out_ch + out_ch))

    def forward(self, F_fused):
        return self.mlp(F_fused.mean(dim=1))

    def split(self, theta):
        B = theta.shape[0]
        n_w = self.in_ch * self.out_ch
        W = theta[:, :n_w].reshape(B, self.out_ch, self.in_ch, 1, 1)
        b = theta[:, n_w:]
        return W, b


def dynamic_conv(F_sem: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample 1x1 convolution: sample i uses W[i], b[i]."""
    out = torch.einsum("bchw,boc->bohw", F_sem, W[:, :, :, 0, 0])
    return out + b[:, :, None, None]


class SegHead(nn.Module):
    def __init__(self, num_classes: int, in_dim: int = DYN_OUT):
        super().__init__()
        self.conv = PointwiseConv(in_dim, num_classes)

    def forward(self, f_conv, size=None):
        logits = self.conv(F.relu(f_conv))
        return logits if size is None else upsample_to(logits, size)
