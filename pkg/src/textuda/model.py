"""The full text-conditioned segmentation generator."""
from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from .fusion import Controller, FusionAttention, GlobalVisualVector, QueryFuser, SegHead, dynamic_conv
from .network import AtrousClassifier, SegForward, SemanticNeck, build_backbone, upsample_to
from .text import TextProjection

# parameters trained with Adam (text/fusion path); everything else goes to SGD
FUSION_PREFIXES = ("projection.", "global_vector.", "query_fuser.", "attention.", "controller.")


class TextSegNet(nn.Module):
    def __init__(self, num_classes: int, text_dim: int = 512, backbone: str = "tiny",
                 backbone_weights: Optional[str] = None, neck_kernel: Optional[int] = None,
                 fusion_residual: bool = True, heads: int = 4):
        super().__init__()
        self.num_classes = num_classes
        self.backbone = build_backbone(backbone, backbone_weights)
        if neck_kernel is None:
            neck_kernel = 1 if backbone == "tiny" else 3
        self.neck = SemanticNeck(kernel_size=neck_kernel)
        self.aux_classifier = AtrousClassifier(256, num_classes)
        self.projection = TextProjection(text_dim)
        self.global_vector = GlobalVisualVector()
        self.query_fuser = QueryFuser()
        self.attention = FusionAttention(heads=heads, residual=fusion_residual)
        self.controller = Controller()
        self.seg_head = SegHead(num_classes)

    @property
    def output_stride(self) -> int:
        return self.backbone.output_stride

    def fusion_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith(FUSION_PREFIXES)]

    def segmentation_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith(FUSION_PREFIXES)]

    def encode(self, images, stages=None):
        return self.backbone(images, stages)

    def forward(self, images: torch.Tensor, text_embeddings: torch.Tensor, upsample: bool = True,
                keep_stages: bool = False) -> SegForward:
        stages = {} if keep_stages else None
        F_high = self.encode(images, stages)
        F_sem = self.neck(F_high)
        F_aux = self.aux_classifier(F_sem)

        t_class = self.projection(text_embeddings)
        f_g = self.global_vector(F_high)
        Q_fused = self.query_fuser(f_g, t_class)
        F_fused = self.attention(Q_fused, f_g)
        theta = self.controller(F_fused)
        W, b = self.controller.split(theta)
        f_conv = dynamic_conv(F_sem, W, b)

        size = images.shape[-2:] if upsample else None
        logits = self.seg_head(f_conv, size)
        aux_logits = upsample_to(F_aux, size) if upsample else F_aux
        if keep_stages:
            stages["neck"] = F_sem
            stages["dynamic_conv"] = f_conv
        return SegForward(F_high=F_high, F_sem=F_sem, F_aux=F_aux, f_g=f_g, t_class=t_class,
                          Q_fused=Q_fused, F_fused=F_fused, theta=theta, f_conv=f_conv,
                          logits=logits, aux_logits=aux_logits, stages=stages or {})
