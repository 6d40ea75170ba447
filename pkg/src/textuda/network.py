"""Encoder, semantic neck and atrous auxiliary classifier."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F
from torch import nn

HIGH_DIM = 2048
SEM_DIM = 256
NECK_WIDTHS = (1024, 512, 256)
ASPP_DILATIONS = (6, 12, 18, 24)


@dataclass
class SegForward:
    F_high: torch.Tensor
    F_sem: torch.Tensor
    F_aux: torch.Tensor
    f_g: Optional[torch.Tensor] = None
    t_class: Optional[torch.Tensor] = None
    Q_fused: Optional[torch.Tensor] = None
    F_fused: Optional[torch.Tensor] = None
    theta: Optional[torch.Tensor] = None
    f_conv: Optional[torch.Tensor] = None
    logits: Optional[torch.Tensor] = None
    aux_logits: Optional[torch.Tensor] = None
    stages: Dict[str, torch.Tensor] = field(default_factory=dict)

    def split(self, n: int):
        """Split a jointly computed batch into its first ``n`` samples and the rest."""
        head, tail = {}, {}
        for name in ("F_high", "F_sem", "F_aux", "f_g", "t_class", "Q_fused", "F_fused", "theta",
                     "f_conv", "logits", "aux_logits"):
            v = getattr(self, name)
            if v is None or (name == "t_class" and v.dim() == 2):
                head[name] = tail[name] = v
            else:
                head[name], tail[name] = v[:n], v[n:]
        return SegForward(**head), SegForward(**tail)

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)

    @property
    def aux_probs(self) -> torch.Tensor:
        return torch.softmax(self.aux_logits, dim=1)


class PointwiseConv(nn.Conv2d):
    """1x1 convolution evaluated as a channel matmul (much faster backward on CPU)."""

    def __init__(self, cin: int, cout: int, bias: bool = True):
        super().__init__(cin, cout, 1, bias=bias)

    def forward(self, x):
        y = F.linear(x.permute(0, 2, 3, 1), self.weight[:, :, 0, 0], self.bias)
        return y.permute(0, 3, 1, 2)


def _conv_block(cin, cout, stride=1, dilation=1, groups=8):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.GroupNorm(min(groups, cout), cout),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Four small stages at output stride 8, channel-lifted to 2048."""

    stage_names = ("stage1", "stage2", "stage3", "stage4")

    def __init__(self, widths=(16, 32, 64, 128), out_dim: int = HIGH_DIM):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.stage1 = nn.Sequential(_conv_block(1, w1, stride=2), _conv_block(w1, w1))
        self.stage2 = nn.Sequential(_conv_block(w1, w2, stride=2), _conv_block(w2, w2))
        self.stage3 = nn.Sequential(_conv_block(w2, w3, stride=2), _conv_block(w3, w3))
        self.stage4 = nn.Sequential(_conv_block(w3, w4, dilation=2), _conv_block(w4, w4, dilation=2))
        # fixed-scale (non-affine) normalization keeps F_high from shrinking under feature-distance losses
        self.lift = nn.Sequential(PointwiseConv(w4, out_dim), nn.GroupNorm(32, out_dim, affine=False),
                                  nn.ReLU(inplace=True))
        self.output_stride = 8

    def forward(self, x, stages: Optional[dict] = None):
        for name in self.stage_names:
            x = getattr(self, name)(x)
            if stages is not None:
                stages[name] = x
        return self.lift(x)


class ResNetBackbone(nn.Module):
    """Dilated ResNet-101 (DeepLabV2-style) at output stride 8."""

    stage_names = ("stage1", "stage2", "stage3", "stage4")

    def __init__(self, depth: int = 101, weights_path: Optional[str] = None):
        super().__init__()
        from torchvision.models import resnet50, resnet101

        ctor = {50: resnet50, 101: resnet101}[depth]
        net = ctor(weights=None, replace_stride_with_dilation=[False, True, True])
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state, strict=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stage1, self.stage2, self.stage3, self.stage4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.output_stride = 8

    def forward(self, x, stages: Optional[dict] = None):
        x = self.stem(x.expand(-1, 3, -1, -1))
        for name in self.stage_names:
            x = getattr(self, name)(x)
            if stages is not None:
                stages[name] = x
        return x


def build_backbone(name: str, weights_path: Optional[str] = None) -> nn.Module:
    if name == "tiny":
        return TinyBackbone()
    if name in ("resnet101", "resnet101-imagenet"):
        return ResNetBackbone(101, weights_path)
    if name in ("resnet50", "resnet50-imagenet"):
        return ResNetBackbone(50, weights_path)
    raise ValueError(f"unknown backbone {name!r}; expected tiny, resnet101-imagenet or resnet50-imagenet")


class SemanticNeck(nn.Module):
    """2048 -> 1024 -> 512 -> 256 refinement producing F_sem."""

    def __init__(self, in_dim: int = HIGH_DIM, widths=NECK_WIDTHS, kernel_size: int = 1):
        super().__init__()
        layers: List[nn.Module] = []
        cin = in_dim
        for cout in widths:
            conv = PointwiseConv(cin, cout) if kernel_size == 1 else nn.Conv2d(cin, cout, kernel_size,
                                                                                 padding=kernel_size // 2)
            layers += [conv, nn.ReLU(inplace=True)]
            cin = cout
        self.body = nn.Sequential(*layers)

    def forward(self, F_high):
        return self.body(F_high)


class AtrousClassifier(nn.Module):
    """Parallel dilated 3x3 branches summed into auxiliary logits."""

    def __init__(self, in_dim: int, num_classes: int, dilations=ASPP_DILATIONS):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(in_dim, num_classes, 3, padding=d, dilation=d) for d in dilations
        )
        for conv in self.branches:
            nn.init.normal_(conv.weight, 0.0, 0.01)

    def forward(self, F_sem):
        h, w = F_sem.shape[-2:]
        out = None
        for conv in self.branches:
            d = conv.dilation[0]
            if d >= h and d >= w:
                # every off-centre tap reads zero padding: only the centre weight contributes
                y = F.conv2d(F_sem, conv.weight[:, :, 1:2, 1:2], conv.bias)
            else:
                y = conv(F_sem)
            out = y if out is None else out + y
        return out


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def downsample_labels(labels: torch.Tensor, size) -> torch.Tensor:
    """Nearest-neighbour resize of B x H x W integer maps."""
    if tuple(labels.shape[-2:]) == tuple(size):
        return labels
    x = labels[:, None].float()
    return F.interpolate(x, size=size, mode="nearest")[:, 0].long()
