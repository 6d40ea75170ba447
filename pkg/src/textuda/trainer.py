"""Joint training of the generator and the two entropy-map discriminators."""
from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from . import adversarial as adv
from .config import ConfigError, TrainConfig
from .data import PhantomConfig, SliceDataset, SliceSampler, generate_phantoms, load_manifest
from .losses import ce_loss, dice_loss, seg_loss
from .metrics import EvalReport, evaluate_volume
from .model import TextSegNet
from .network import downsample_labels
from .prototypes import PrototypeState, batch_prototypes, proto_loss, pseudo_labels
from .text import (PromptSpec, TextEmbeddingBank, build_prompts, load_embedding_bank, stub_embeddings)
from .vlcol import ClassFeatureMemory, class_pixel_features, vlcol_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "textuda-checkpoint/1"
ARCH_NAME = "text-seg-net"


class CheckpointMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


def _dtype(cfg: TrainConfig):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def text_banks(cfg: TrainConfig) -> Tuple[TextEmbeddingBank, TextEmbeddingBank]:
    """Source and target modality banks, from files when configured, otherwise stubbed."""
    banks = []
    for modality, path in ((cfg.source_modality, cfg.source_embeddings),
                           (cfg.target_modality, cfg.target_embeddings)):
        if path:
            bank = load_embedding_bank(path, expected_C=cfg.num_classes)
            if bank.dim != cfg.text_dim:
                raise ConfigError(f"{path}: embedding width {bank.dim} != text_dim {cfg.text_dim}")
        else:
            prompts = build_prompts(PromptSpec(cfg.dataset_name, modality, cfg.class_terms))
            bank = stub_embeddings(prompts, cfg.text_dim, cfg.text_seed, modality=modality,
                                   classes=cfg.class_terms)
        banks.append(bank)
    return banks[0], banks[1]


def build_model(cfg: TrainConfig) -> TextSegNet:
    return TextSegNet(cfg.num_classes, text_dim=cfg.text_dim, backbone=cfg.backbone,
                      backbone_weights=cfg.backbone_weights, neck_kernel=cfg.neck_kernel,
                      fusion_residual=cfg.fusion_residual, heads=cfg.attention_heads)


def load_datasets(cfg: TrainConfig) -> Tuple[SliceDataset, SliceDataset]:
    if cfg.source_manifest and cfg.target_manifest:
        src = load_manifest(cfg.source_manifest, cfg.num_classes)
        tgt = load_manifest(cfg.target_manifest, cfg.num_classes)
    elif cfg.source_manifest or cfg.target_manifest:
        raise ConfigError("source_manifest and target_manifest must be given together")
    else:
        src, tgt = generate_phantoms(PhantomConfig(**cfg.phantom))
    if not src.labeled:
        raise ConfigError("source dataset must be labeled")
    return src, tgt


def poly_lr(base: float, it: int, max_it: int, power: float) -> float:
    if max_it <= 0:
        return base
    return base * (1.0 - min(it, max_it) / max_it) ** power


def params_hash(module: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _adam(params, **kw):
    try:
        return torch.optim.Adam(params, fused=True, **kw)
    except (RuntimeError, TypeError):
        return torch.optim.Adam(params, **kw)


class Trainer:
    def __init__(self, cfg: TrainConfig, source: SliceDataset, target: SliceDataset,
                 banks: Optional[Tuple[TextEmbeddingBank, TextEmbeddingBank]] = None):
        self.cfg = cfg
        self.dtype = _dtype(cfg)
        torch.manual_seed(cfg.seed)
        self.model = build_model(cfg).to(self.dtype)
        C = cfg.num_classes
        self.d_main = adv.PatchDiscriminator(C, cfg.disc_width).to(self.dtype)
        self.d_aux = adv.PatchDiscriminator(C, cfg.disc_width).to(self.dtype)

        self.opt_seg = torch.optim.SGD(self.model.segmentation_parameters(), lr=cfg.lr,
                                       momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        self.opt_fusion = _adam(self.model.fusion_parameters(), lr=cfg.lr_fusion)
        self.opt_disc = _adam(list(self.d_main.parameters()) + list(self.d_aux.parameters()),
                              lr=cfg.lr_disc, betas=cfg.disc_betas)

        self.banks = banks or text_banks(cfg)
        self.E_src = self.banks[0].as_tensor(self.dtype)
        self.E_tgt = self.banks[1].as_tensor(self.dtype)

        self.memory = ClassFeatureMemory(C, 256, cfg.memory_decay, dtype=self.dtype)
        self.prototypes = PrototypeState(C, 2048, cfg.proto_beta, cfg.swap_momentum, dtype=self.dtype)
        self.source, self.target = source, target
        self.src_sampler = SliceSampler(source.subset("train"), seed=cfg.seed * 2 + 1, augment=cfg.augment)
        self.tgt_sampler = SliceSampler(target.subset("train"), seed=cfg.seed * 2 + 2, augment=cfg.augment)
        self.iteration = 0
        self.history = []

    # ----------------------------------------------------------------- steps

    def _tensor(self, arr):
        return torch.as_tensor(arr, dtype=self.dtype)

    def set_lr(self) -> float:
        lr = poly_lr(self.cfg.lr, self.iteration, self.cfg.iterations, self.cfg.poly_power)
        for g in self.opt_seg.param_groups:
            g["lr"] = lr
        return lr

    def train_step(self, src_images, src_labels, tgt_images) -> Dict[str, float]:
        cfg, C = self.cfg, self.cfg.num_classes
        xs, xt = self._tensor(src_images), self._tensor(tgt_images)
        ys = torch.as_tensor(src_labels, dtype=torch.long)
        self.model.train()
        lr = self.set_lr()

        need_tgt_graph = cfg.lambda_adv > 0 or cfg.lambda_proto > 0
        if need_tgt_graph:
            E = torch.cat([self.E_src.expand(len(xs), -1, -1), self.E_tgt.expand(len(xt), -1, -1)])
            src, tgt = self.model(torch.cat([xs, xt]), E).split(len(xs))
            src.t_class = src.t_class[0]
        else:
            src = self.model(xs, self.E_src)
            with torch.no_grad():
                tgt = self.model(xt, self.E_tgt)
        P_s, P_t = src.probs, tgt.probs

        terms: Dict[str, torch.Tensor] = {}
        terms["ce"] = ce_loss(P_s, ys)
        terms["dice"] = dice_loss(P_s, ys)
        terms["seg"] = terms["ce"] + terms["dice"]
        terms["seg_aux"] = seg_loss(src.aux_probs, ys) if cfg.aux_seg_weight > 0 else P_s.new_zeros(())

        # generator adversarial term with the discriminators frozen
        for d in (self.d_main, self.d_aux):
            d.requires_grad_(False)
        E_t_main = adv.self_information_map(P_t, cfg.selfinfo_normalize)
        E_t_aux = adv.self_information_map(tgt.aux_probs, cfg.selfinfo_normalize)
        with torch.set_grad_enabled(cfg.lambda_adv > 0):
            terms["adv"] = adv.g_adv_loss(self.d_main(E_t_main), self.d_aux(E_t_aux), cfg.aux_adv_weight)

        size = src.F_sem.shape[-2:]
        ys_down = downsample_labels(ys, size)
        feats, present = class_pixel_features(src.F_sem, ys_down, C, cfg.feature_mode)
        mem_rows = self.memory.blend(feats)
        t_class = src.t_class if cfg.vlcol_text_grad else src.t_class.detach()
        terms["vlcol"], vlcol_used = vlcol_loss(mem_rows, t_class, present)

        protos_s, _ = batch_prototypes(src.F_high, ys_down, C)
        yt_down = downsample_labels(pseudo_labels(P_t.detach(), cfg.pseudo_label_threshold), size)
        protos_t, _ = batch_prototypes(tgt.F_high, yt_down, C)
        rows_s = self.prototypes.blend("source", protos_s)
        rows_t = self.prototypes.blend("target", protos_t)
        terms["proto"], proto_used = proto_loss(self.prototypes.current("source", rows_s),
                                                self.prototypes.current("target", rows_t))

        total = terms["seg"]
        if cfg.aux_seg_weight > 0:
            total = total + cfg.aux_seg_weight * terms["seg_aux"]
        ramp = self.adaptation_ramp()
        adapting = ramp > 0
        if cfg.lambda_adv > 0 and adapting:
            total = total + ramp * cfg.lambda_adv * terms["adv"]
        if cfg.lambda_vlcol > 0 and vlcol_used:
            total = total + cfg.lambda_vlcol * terms["vlcol"]
        if cfg.lambda_proto > 0 and proto_used and adapting:
            total = total + ramp * cfg.lambda_proto * terms["proto"]
        terms["total"] = total
        self._check_finite(terms)

        self.opt_seg.zero_grad(set_to_none=True)
        self.opt_fusion.zero_grad(set_to_none=True)
        total.backward()
        self.opt_seg.step()
        self.opt_fusion.step()
        for d in (self.d_main, self.d_aux):
            d.requires_grad_(True)

        self.memory.commit(mem_rows)
        self.prototypes.commit("source", rows_s)
        self.prototypes.commit("target", rows_t)

        if cfg.lambda_adv > 0:
            d_terms = self.discriminator_step(P_s.detach(), src.aux_probs.detach(),
                                              E_t_main.detach(), E_t_aux.detach())
            terms.update(d_terms)

        self.iteration += 1
        record = {k: float(v.detach()) for k, v in terms.items()}
        record.update(iteration=self.iteration, lr=lr, ramp=ramp, adapting=adapting, vlcol_used=vlcol_used,
                      proto_used=proto_used)
        self.history.append(record)
        return record

    def adaptation_ramp(self) -> float:
        """Weight multiplier for the target-dependent terms at the current iteration."""
        k = self.iteration - self.cfg.warmup_iters
        if k < 0:
            return 0.0
        return 1.0 if self.cfg.ramp_iters == 0 else min(1.0, (k + 1) / self.cfg.ramp_iters)

    def discriminator_step(self, P_s, P_s_aux, E_t_main, E_t_aux) -> Dict[str, torch.Tensor]:
        norm = self.cfg.selfinfo_normalize
        E_s_main = adv.self_information_map(P_s, norm)
        E_s_aux = adv.self_information_map(P_s_aux, norm)
        terms = {"d_main": adv.d_loss(self.d_main(E_s_main), self.d_main(E_t_main)),
                 "d_aux": adv.d_loss(self.d_aux(E_s_aux), self.d_aux(E_t_aux))}
        self._check_finite(terms)
        self.opt_disc.zero_grad(set_to_none=True)
        (terms["d_main"] + terms["d_aux"]).backward()
        self.opt_disc.step()
        return terms

    def _check_finite(self, terms) -> None:
        values = {k: float(v.detach()) for k, v in terms.items()}
        if not all(math.isfinite(v) for v in values.values()):
            raise NonFiniteLoss(f"non-finite loss at iteration {self.iteration}: {json.dumps(values)}")

    def step(self) -> Dict[str, float]:
        xs, ys = self.src_sampler.sample(self.cfg.batch_size)
        xt, _ = self.tgt_sampler.sample(self.cfg.batch_size)
        return self.train_step(xs, ys, xt)

    # ------------------------------------------------------------ evaluation

    def bank_for(self, modality: str) -> torch.Tensor:
        return bank_for(self.banks, modality, self.dtype)

    def evaluate(self, dataset: SliceDataset) -> EvalReport:
        return evaluate_model(self.model, self.bank_for(dataset.modality), dataset, self.dtype)

    # ----------------------------------------------------------- checkpoints

    def header(self) -> dict:
        cfg = self.cfg
        return {"format": CHECKPOINT_FORMAT, "architecture": ARCH_NAME, "backbone": cfg.backbone,
                "num_classes": cfg.num_classes, "output_stride": self.model.output_stride,
                "config_hash": cfg.arch_hash(), "config": cfg.to_dict(), "iteration": self.iteration}

    def state_dict(self) -> dict:
        return {
            "header": json.dumps(self.header(), sort_keys=True),
            "model": self.model.state_dict(),
            "d_main": self.d_main.state_dict(),
            "d_aux": self.d_aux.state_dict(),
            "opt_seg": self.opt_seg.state_dict(),
            "opt_fusion": self.opt_fusion.state_dict(),
            "opt_disc": self.opt_disc.state_dict(),
            "memory": self.memory.state_dict(),
            "prototypes": self.prototypes.state_dict(),
            "samplers": {"source": self.src_sampler.state_dict(), "target": self.tgt_sampler.state_dict()},
            "torch_rng": torch.get_rng_state(),
            "banks": [_bank_state(b) for b in self.banks],
            "iteration": self.iteration,
            "history": self.history,
        }

    def load_state_dict(self, state: dict) -> None:
        header = state["header"]
        header = json.loads(header) if isinstance(header, str) else header
        if header["config_hash"] != self.cfg.arch_hash():
            raise CheckpointMismatch(
                f"checkpoint architecture hash {header['config_hash']} != config {self.cfg.arch_hash()}")
        self.model.load_state_dict(state["model"])
        self.d_main.load_state_dict(state["d_main"])
        self.d_aux.load_state_dict(state["d_aux"])
        self.opt_seg.load_state_dict(state["opt_seg"])
        self.opt_fusion.load_state_dict(state["opt_fusion"])
        self.opt_disc.load_state_dict(state["opt_disc"])
        self.memory.load_state_dict(state["memory"])
        self.prototypes.load_state_dict(state["prototypes"])
        self.src_sampler.load_state_dict(state["samplers"]["source"])
        self.tgt_sampler.load_state_dict(state["samplers"]["target"])
        torch.set_rng_state(state["torch_rng"])
        self.banks = tuple(_bank_from_state(b) for b in state["banks"])
        self.E_src = self.banks[0].as_tensor(self.dtype)
        self.E_tgt = self.banks[1].as_tensor(self.dtype)
        self.iteration = int(state["iteration"])
        self.history = list(state["history"])

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        return path


def _bank_state(bank: TextEmbeddingBank) -> dict:
    return {"modality": bank.modality, "classes": list(bank.classes), "embeddings": torch.from_numpy(bank.embeddings)}


def _bank_from_state(state: dict) -> TextEmbeddingBank:
    return TextEmbeddingBank(state["modality"], list(state["classes"]), state["embeddings"].numpy().copy())


def bank_for(banks, modality: str, dtype=torch.float32) -> torch.Tensor:
    src, tgt = banks
    if modality == tgt.modality:
        return tgt.as_tensor(dtype)
    if modality == src.modality:
        return src.as_tensor(dtype)
    raise CheckpointMismatch(
        f"dataset modality {modality!r} matches neither {src.modality!r} nor {tgt.modality!r}")


def load_checkpoint(path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    header = json.loads(state["header"])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    state["header"] = header
    return state


def model_from_checkpoint(path) -> Tuple[TextSegNet, TrainConfig, Tuple[TextEmbeddingBank, TextEmbeddingBank]]:
    state = load_checkpoint(path)
    cfg = TrainConfig.from_dict(state["header"]["config"])
    model = build_model(cfg).to(_dtype(cfg))
    model.load_state_dict(state["model"])
    model.eval()
    banks = tuple(_bank_from_state(b) for b in state["banks"])
    return model, cfg, banks


@torch.no_grad()
def predict(model: TextSegNet, images: np.ndarray, E: torch.Tensor, dtype=torch.float32,
            batch_size: int = 16) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(images[i:i + batch_size, None], dtype=dtype)
        out.append(model(x, E).logits.argmax(1).cpu().numpy().astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:], np.uint8)


def evaluate_model(model: TextSegNet, E: torch.Tensor, dataset: SliceDataset, dtype=torch.float32) -> EvalReport:
    if not dataset.labeled:
        raise ValueError("evaluation needs a labeled dataset")
    preds = [predict(model, s.images, E, dtype) for s in dataset.subjects]
    return evaluate_volume(preds, [s.labels for s in dataset.subjects], dataset.spacing, dataset.num_classes,
                           [s.id for s in dataset.subjects], dataset.class_terms)


def evaluate(checkpoint, dataset: SliceDataset) -> EvalReport:
    model, cfg, banks = model_from_checkpoint(checkpoint)
    if dataset.num_classes != cfg.num_classes:
        raise CheckpointMismatch(f"checkpoint has C={cfg.num_classes}, dataset has C={dataset.num_classes}")
    return evaluate_model(model, bank_for(banks, dataset.modality, _dtype(cfg)), dataset, _dtype(cfg))


def train(cfg: TrainConfig, resume: Optional[str] = None, datasets=None, progress: bool = False) -> dict:
    """Run ``cfg.iterations`` steps, logging every step and keeping the best target-test checkpoint."""
    source, target = datasets or load_datasets(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, source, target)
    if resume:
        trainer.load_state_dict(load_checkpoint(resume))
    target_test = target.subset("test") if target.labeled else None
    log_path, eval_path = out / "log.jsonl", out / "eval.jsonl"
    mode = "a" if resume else "w"
    best = -1.0
    t0 = time.time()
    with open(log_path, mode) as logf, open(eval_path, mode) as evalf:
        while trainer.iteration < cfg.iterations:
            rec = trainer.step()
            logf.write(json.dumps(rec) + "\n")
            it = trainer.iteration
            if progress and it % 50 == 0:
                log.info("iter %d  seg %.4f  adv %.4f  vlcol %.4f  proto %.4f  (%.1fs)", it, rec["seg"],
                         rec["adv"], rec["vlcol"], rec["proto"], time.time() - t0)
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                trainer.save_checkpoint(out / f"iter_{it:06d}.pt")
            if target_test is not None and cfg.eval_every and (it % cfg.eval_every == 0 or it == cfg.iterations):
                report = trainer.evaluate(target_test)
                evalf.write(json.dumps({"iteration": it, "mean_dice": report.mean_dice,
                                        "mean_asd": report.mean_asd}) + "\n")
                evalf.flush()
                if report.mean_dice > best:
                    best = report.mean_dice
                    trainer.save_checkpoint(out / "best.pt")
    final = trainer.save_checkpoint(out / "last.pt")
    return {"trainer": trainer, "checkpoint": final, "best_dice": best, "seconds": time.time() - t0,
            "log": log_path}
