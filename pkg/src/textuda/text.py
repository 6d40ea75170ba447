"""Class prompts, text-embedding banks and their projection to the fusion width."""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
from torch import nn

MODALITIES = ("CT", "MRI", "FLAIR", "T2")
PROMPT_TEMPLATE = "A {dataset} {modality} imaging of a {term}"
FUSION_DIM = 256


class InvalidPromptSpec(ValueError):
    pass


class EmbeddingIngestError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    dataset_name: str
    modality: str
    class_terms: Sequence[str]


@dataclass
class TextEmbeddingBank:
    modality: str
    classes: List[str]
    embeddings: np.ndarray  # C x d, float32

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def as_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.as_tensor(self.embeddings, dtype=dtype, device=device)


def build_prompts(spec: PromptSpec) -> List[str]:
    if not spec.class_terms:
        raise InvalidPromptSpec("class_terms must be non-empty")
    if spec.modality not in MODALITIES:
        raise InvalidPromptSpec(f"unknown modality {spec.modality!r}; expected one of {MODALITIES}")
    return [
        PROMPT_TEMPLATE.format(dataset=spec.dataset_name, modality=spec.modality, term=term)
        for term in spec.class_terms
    ]


def _seeded_unit(key: str, seed: int, d: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{key}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def stub_embeddings(prompts: Sequence[str], d: int = 512, seed: int = 0,
                    modality: str = "CT", classes: Sequence[str] | None = None) -> TextEmbeddingBank:
    """Deterministic stand-in for a pretrained text encoder.

    Each prompt embeds as the normalized sum of seeded per-token vectors plus a
    seeded whole-prompt vector, so prompts sharing words (same class, other
    modality) land close together while distinct prompts stay distinct.
    """
    if d < 8:
        raise ValueError("stub embedding width must be >= 8")
    rows = []
    for prompt in prompts:
        tokens = re.findall(r"\w+", prompt.lower())
        v = _seeded_unit("prompt:" + prompt, seed, d)
        for tok in tokens:
            v = v + _seeded_unit("token:" + tok, seed, d)
        rows.append(v / np.linalg.norm(v))
    emb = np.asarray(rows, dtype=np.float64)
    # renormalize after the float32 cast so rows are unit-norm at storage precision
    emb32 = emb.astype(np.float32)
    emb32 /= np.linalg.norm(emb32.astype(np.float64), axis=1, keepdims=True).astype(np.float32)
    return TextEmbeddingBank(modality=modality, classes=list(classes or prompts), embeddings=emb32)


def save_embedding_bank(bank: TextEmbeddingBank, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"modality": bank.modality, "classes": list(bank.classes), "dim": int(bank.dim)}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    np.ascontiguousarray(bank.embeddings, dtype="<f4").tofile(path / "embeddings.bin")
    return path


def load_embedding_bank(path, expected_C: int | None = None) -> TextEmbeddingBank:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise EmbeddingIngestError(f"missing embedding manifest: {path / 'manifest.json'}") from exc
    classes = list(manifest["classes"])
    d = int(manifest["dim"])
    raw = np.fromfile(path / "embeddings.bin", dtype="<f4")
    found_C = len(classes)
    if expected_C is not None and found_C != expected_C:
        raise EmbeddingIngestError(f"{path}: expected C={expected_C} classes, found C={found_C}")
    if raw.size != found_C * d:
        raise EmbeddingIngestError(
            f"{path}: embeddings.bin holds {raw.size} floats, manifest implies {found_C}x{d}={found_C * d}")
    emb = raw.reshape(found_C, d).astype(np.float32)
    if not np.all(np.isfinite(emb)):
        raise EmbeddingIngestError(f"{path}: non-finite embedding values")
    return TextEmbeddingBank(modality=manifest["modality"], classes=classes, embeddings=emb)


class TextProjection(nn.Module):
    """Learnable affine map d -> 256 producing t_class."""

    def __init__(self, in_dim: int, out_dim: int = FUSION_DIM, identity_init: bool = False):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        if identity_init:
            if in_dim != out_dim:
                raise ValueError("identity init needs a square projection")
            with torch.no_grad():
                self.linear.weight.copy_(torch.eye(in_dim))
                self.linear.bias.zero_()

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.linear(embeddings)


def project(bank: TextEmbeddingBank | torch.Tensor, projection: TextProjection) -> torch.Tensor:
    w = projection.linear.weight
    e = bank if isinstance(bank, torch.Tensor) else bank.as_tensor(dtype=w.dtype, device=w.device)
    return projection(e)
