"""Class prototypes on F_high, EMA tracking per domain, pseudo-labels and the alignment loss."""
from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Tuple

import torch

IGNORE_INDEX = -1
DOMAINS = ("source", "target")


def pseudo_labels(P_tgt: torch.Tensor, threshold: Optional[float] = None) -> torch.Tensor:
    """Per-pixel argmax (lowest index wins ties); optional confidence cut to IGNORE_INDEX."""
    # torch.argmax returns the first maximal index
    labels = P_tgt.argmax(dim=1)
    if threshold is not None:
        conf = P_tgt.max(dim=1).values
        labels = torch.where(conf >= threshold, labels, torch.full_like(labels, IGNORE_INDEX))
    return labels


def batch_prototypes(F_high: torch.Tensor, labels_down: torch.Tensor,
                     num_classes: int) -> Tuple[Dict[int, torch.Tensor], List[int]]:
    """Mean pixel embedding per class present in ``labels_down``."""
    B, D, h, w = F_high.shape
    flat = F_high.permute(0, 2, 3, 1).reshape(-1, D)
    lab = labels_down.reshape(-1)
    protos: Dict[int, torch.Tensor] = {}
    for c in range(num_classes):
        mask = lab == c
        if bool(mask.any()):
            protos[c] = flat[mask].mean(0)
    return protos, sorted(protos)


def check_momentum(beta: float) -> None:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"prototype momentum must lie in [0, 1], got {beta}")


class PrototypeState:
    """Global EMA prototypes z_c for the source and target domains."""

    def __init__(self, num_classes: int, dim: int = 2048, beta: float = 0.01,
                 swap_momentum: bool = False, dtype=torch.float32):
        check_momentum(beta)
        self.beta = beta
        self.swap_momentum = swap_momentum
        self.z = {d: torch.zeros(num_classes, dim, dtype=dtype) for d in DOMAINS}
        self.flags = {d: torch.zeros(num_classes, dtype=torch.bool) for d in DOMAINS}

    @property
    def keep(self) -> float:
        """Weight on the stored prototype."""
        return 1.0 - self.beta if self.swap_momentum else self.beta

    def blend(self, domain: str, protos: Mapping[int, torch.Tensor],
              beta: Optional[float] = None) -> Dict[int, torch.Tensor]:
        if beta is not None:
            check_momentum(beta)
            keep = 1.0 - beta if self.swap_momentum else beta
        else:
            keep = self.keep
        z, flags = self.z[domain], self.flags[domain]
        return {c: keep * z[c].to(p) + (1.0 - keep) * p if flags[c] else p for c, p in protos.items()}

    def commit(self, domain: str, rows: Mapping[int, torch.Tensor]) -> None:
        for c, r in rows.items():
            self.z[domain][c] = r.detach().to(self.z[domain])
            self.flags[domain][c] = True

    def current(self, domain: str, fresh: Optional[Mapping[int, torch.Tensor]] = None) -> Dict[int, torch.Tensor]:
        """Stored rows for initialized classes, overridden by ``fresh`` (graph-carrying) rows."""
        rows = {c: self.z[domain][c] for c in range(len(self.flags[domain])) if self.flags[domain][c]}
        rows.update(fresh or {})
        return rows

    def state_dict(self):
        return {"z": {d: t.clone() for d, t in self.z.items()},
                "flags": {d: t.clone() for d, t in self.flags.items()},
                "beta": self.beta, "swap_momentum": self.swap_momentum}

    def load_state_dict(self, state):
        self.z = {d: t.clone() for d, t in state["z"].items()}
        self.flags = {d: t.clone() for d, t in state["flags"].items()}
        self.beta = float(state["beta"])
        self.swap_momentum = bool(state["swap_momentum"])


def ema_update(state: PrototypeState, domain: str, protos: Mapping[int, torch.Tensor],
               beta: Optional[float] = None) -> PrototypeState:
    state.commit(domain, state.blend(domain, protos, beta))
    return state


def proto_loss(source: Mapping[int, torch.Tensor] | PrototypeState,
               target: Optional[Mapping[int, torch.Tensor]] = None) -> Tuple[torch.Tensor, bool]:
    """Sum over classes known in both domains of ||z_s - z_t||^2. Returns (loss, used)."""
    if isinstance(source, PrototypeState):
        source, target = source.current("source"), source.current("target")
    common = sorted(set(source) & set(target))
    if not common:
        ref = next(iter(source.values()), None)
        return (ref.new_zeros(()) if ref is not None else torch.zeros(())), False
    total = None
    for c in common:
        d = ((source[c] - target[c].to(source[c])) ** 2).sum()
        total = d if total is None else total + d
    return total, True
