"""Vision-language covariance cosine loss with a per-class feature memory."""
from __future__ import annotations

from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import torch

FEATURE_MODES = ("area", "masked")


def class_pixel_features(F_sem: torch.Tensor, labels_down: torch.Tensor, num_classes: int,
                         mode: str = "masked") -> Tuple[Dict[int, torch.Tensor], List[int]]:
    """Per-class pooled pixel features from F_sem (B x D x h x w) and B x h x w labels.

    ``masked`` averages over the class pixels; ``area`` divides the masked sum
    by the number of pixels in the batch (spatial average of b^c * F_sem).
    Classes with no pixels are left out.
    """
    if mode not in FEATURE_MODES:
        raise ValueError(f"mode must be one of {FEATURE_MODES}")
    B, D, h, w = F_sem.shape
    if labels_down.shape != (B, h, w):
        raise ValueError(f"labels {tuple(labels_down.shape)} do not match features {(B, h, w)}")
    flat = F_sem.permute(0, 2, 3, 1).reshape(-1, D)
    lab = labels_down.reshape(-1)
    feats: Dict[int, torch.Tensor] = {}
    for c in range(num_classes):
        mask = lab == c
        n = int(mask.sum())
        if n == 0:
            continue
        total = flat[mask].sum(0)
        feats[c] = total / (lab.numel() if mode == "area" else n)
    return feats, sorted(feats)


class ClassFeatureMemory:
    """Running per-class feature averages (the memory bank feeding the pixel covariance)."""

    def __init__(self, num_classes: int, dim: int = 256, decay: float = 0.9, dtype=torch.float32):
        check_decay(decay)
        self.decay = decay
        self.features = torch.zeros(num_classes, dim, dtype=dtype)
        self.flags = torch.zeros(num_classes, dtype=torch.bool)

    def blend(self, feats: Mapping[int, torch.Tensor], decay: Optional[float] = None) -> Dict[int, torch.Tensor]:
        """New rows for the observed classes; history enters detached, the batch term keeps its graph."""
        lam = self.decay if decay is None else decay
        check_decay(lam)
        out = {}
        for c, f in feats.items():
            if self.flags[c]:
                out[c] = lam * self.features[c].to(f) + (1.0 - lam) * f
            else:
                out[c] = f
        return out

    def commit(self, rows: Mapping[int, torch.Tensor]) -> None:
        for c, r in rows.items():
            self.features[c] = r.detach().to(self.features)
            self.flags[c] = True

    def state_dict(self):
        return {"features": self.features.clone(), "flags": self.flags.clone(), "decay": self.decay}

    def load_state_dict(self, state):
        self.features = state["features"].clone()
        self.flags = state["flags"].clone()
        self.decay = float(state["decay"])


def check_decay(value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {value}")


def memory_update(mem: ClassFeatureMemory, feats: Mapping[int, torch.Tensor],
                  decay: Optional[float] = None) -> ClassFeatureMemory:
    mem.commit(mem.blend(feats, decay))
    return mem


def covariance_matrix(rows: torch.Tensor) -> Optional[torch.Tensor]:
    """K x K sample covariance between the K row vectors, taken over the feature axis.

    Returns None when K < 2.
    """
    K, D = rows.shape
    if K < 2:
        return None
    centered = rows - rows.mean(dim=1, keepdim=True)
    return centered @ centered.T / (D - 1)


def covariance_cosine(sigma_p: torch.Tensor, sigma_t: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    norm_p = torch.linalg.matrix_norm(sigma_p)
    norm_t = torch.linalg.matrix_norm(sigma_t)
    if norm_p.item() == 0.0 or norm_t.item() == 0.0:
        return sigma_p.new_zeros(()), False
    return 1.0 - (sigma_p * sigma_t).sum() / (norm_p * norm_t), True


def vlcol_loss(class_rows: Union[ClassFeatureMemory, Mapping[int, torch.Tensor]], t_class: torch.Tensor,
               present: Iterable[int]) -> Tuple[torch.Tensor, bool]:
    """1 - cos(Sigma_p, Sigma_t) over the present classes. Returns (loss, used)."""
    if isinstance(class_rows, ClassFeatureMemory):
        mem = class_rows
        present = [c for c in present if bool(mem.flags[c])]
        class_rows = {c: mem.features[c] for c in present}
    else:
        present = [c for c in present if c in class_rows]
    present = sorted(present)
    if len(present) < 2:
        return t_class.new_zeros(()), False
    rows_p = torch.stack([class_rows[c] for c in present]).to(t_class.dtype)
    rows_t = t_class[present]
    return covariance_cosine(covariance_matrix(rows_p), covariance_matrix(rows_t))
