"""Training configuration: defaults, file loading and environment overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

from .data import DEFAULT_CLASS_TERMS

ENV_OVERRIDES = {
    "TEXTUDA_SOURCE_MANIFEST": "source_manifest",
    "TEXTUDA_TARGET_MANIFEST": "target_manifest",
    "TEXTUDA_SOURCE_EMBEDDINGS": "source_embeddings",
    "TEXTUDA_TARGET_EMBEDDINGS": "target_embeddings",
    "TEXTUDA_OUT_DIR": "out_dir",
    "TEXTUDA_BACKBONE_WEIGHTS": "backbone_weights",
}

# fields that change the network's shape; hashed into checkpoint headers
ARCH_FIELDS = ("backbone", "num_classes", "text_dim", "neck_kernel", "fusion_residual", "attention_heads",
               "disc_width")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # objective weights
    lambda_adv: float = 0.003
    lambda_vlcol: float = 1.0
    lambda_proto: float = 0.1
    aux_adv_weight: float = 0.5
    # F_aux feeds only the aux self-information branch unless this is raised
    aux_seg_weight: float = 0.0
    memory_decay: float = 0.9
    proto_beta: float = 0.01
    swap_momentum: bool = False
    feature_mode: str = "masked"
    selfinfo_normalize: bool = True
    pseudo_label_threshold: Optional[float] = None
    vlcol_text_grad: bool = False
    # source-only steps before the target-dependent terms (adv, proto) join the objective,
    # then a linear ramp of their weights over ramp_iters steps
    warmup_iters: int = 0
    ramp_iters: int = 0
    # accepted for completeness; no term of the objective uses them
    tau: float = 0.05
    alpha: float = 0.2

    # optimization
    batch_size: int = 4
    iterations: int = 20000
    lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    lr_fusion: float = 1e-4
    lr_disc: float = 1e-4
    disc_betas: Tuple[float, float] = (0.9, 0.99)
    seed: int = 0
    dtype: str = "float32"
    augment: bool = True

    # architecture
    backbone: str = "tiny"
    backbone_weights: Optional[str] = None
    neck_kernel: Optional[int] = None
    fusion_residual: bool = True
    attention_heads: int = 4
    disc_width: int = 64
    num_classes: int = 5

    # text
    dataset_name: str = "phantom"
    class_terms: List[str] = field(default_factory=lambda: list(DEFAULT_CLASS_TERMS))
    source_modality: str = "CT"
    target_modality: str = "MRI"
    text_dim: int = 512
    text_seed: int = 0
    source_embeddings: Optional[str] = None
    target_embeddings: Optional[str] = None

    # data and outputs
    source_manifest: Optional[str] = None
    target_manifest: Optional[str] = None
    phantom: dict = field(default_factory=dict)
    eval_every: int = 1000
    checkpoint_every: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.disc_betas = tuple(self.disc_betas)
        self.validate()

    def validate(self) -> None:
        for name in ("lambda_adv", "lambda_vlcol", "lambda_proto", "aux_adv_weight", "aux_seg_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("memory_decay", "proto_beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.feature_mode not in ("area", "masked"):
            raise ConfigError("feature_mode must be 'area' or 'masked'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if len(self.class_terms) != self.num_classes:
            raise ConfigError(f"class_terms has {len(self.class_terms)} entries but num_classes={self.num_classes}")
        if self.warmup_iters < 0 or self.ramp_iters < 0:
            raise ConfigError("warmup_iters and ramp_iters must be >= 0")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["disc_betas"] = list(self.disc_betas)
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def arch_hash(self) -> str:
        blob = json.dumps({k: getattr(self, k) for k in ARCH_FIELDS}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**d)


def load_config(path, env: Optional[dict] = None, **overrides) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    env = os.environ if env is None else env
    for var, name in ENV_OVERRIDES.items():
        if env.get(var):
            data[name] = env[var]
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))
