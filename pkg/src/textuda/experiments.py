"""Ablation and seed-sweep drivers built on :func:`textuda.trainer.train`."""
from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import TrainConfig
from .trainer import evaluate, load_datasets, train

log = logging.getLogger(__name__)

# desk-scale settings: 64x64 phantoms, tiny backbone, a few hundred steps
BUDGETS: Dict[str, dict] = {
    "tiny": dict(iterations=400, warmup_iters=150, lr=1e-2, lr_fusion=1e-3, disc_width=16, eval_every=0,
                 backbone="tiny", phantom=dict(image_size=64, n_subjects=10, slices_per_subject=8)),
    "smoke": dict(iterations=10, lr=1e-2, lr_fusion=1e-3, disc_width=16, eval_every=0,
                  backbone="tiny", phantom=dict(image_size=64, n_subjects=5, slices_per_subject=4)),
    "paper": dict(),
}

SOURCE_ONLY = "source-only"
ABLATIONS: Dict[str, dict] = {
    "seg+adv": dict(lambda_vlcol=0.0, lambda_proto=0.0),
    "seg+adv+proto": dict(lambda_vlcol=0.0),
    "seg+adv+vlcol": dict(lambda_proto=0.0),
    "all": dict(),
}
SOURCE_ONLY_OVERRIDES = dict(lambda_adv=0.0, lambda_vlcol=0.0, lambda_proto=0.0)


@dataclass
class RunResult:
    name: str
    seed: int
    target_dice: float
    source_dice: float
    target_asd: Optional[float]
    checkpoint: str
    seconds: float


@dataclass
class ExperimentTable:
    runs: List[RunResult] = field(default_factory=list)

    def names(self) -> List[str]:
        seen = []
        for r in self.runs:
            if r.name not in seen:
                seen.append(r.name)
        return seen

    def values(self, name: str, key: str = "target_dice") -> List[float]:
        return [getattr(r, key) for r in self.runs if r.name == name]

    def mean(self, name: str, key: str = "target_dice") -> float:
        return statistics.fmean(self.values(name, key))

    def std(self, name: str, key: str = "target_dice") -> float:
        v = self.values(name, key)
        return statistics.stdev(v) if len(v) > 1 else 0.0

    def format(self) -> str:
        lines = [f"{'configuration':<16}{'target Dice':>18}{'source Dice':>18}{'runs':>6}"]
        for name in self.names():
            t = f"{self.mean(name):.2f} ± {self.std(name):.2f}"
            s = f"{self.mean(name, 'source_dice'):.2f} ± {self.std(name, 'source_dice'):.2f}"
            lines.append(f"{name:<16}{t:>18}{s:>18}{len(self.values(name)):>6}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"runs": [r.__dict__ for r in self.runs],
                "summary": {n: {"target_mean": self.mean(n), "target_std": self.std(n),
                                "source_mean": self.mean(n, "source_dice")} for n in self.names()}}


def budget_config(budget: str = "tiny", base: Optional[TrainConfig] = None, **overrides) -> TrainConfig:
    if budget not in BUDGETS:
        raise ValueError(f"unknown budget {budget!r}; options: {', '.join(BUDGETS)}")
    base = base or TrainConfig()
    settings = dict(BUDGETS[budget])
    if "phantom" in settings:
        settings["phantom"] = {**base.phantom, **settings["phantom"]}
    settings.update(overrides)
    return base.replace(**settings)


def run_one(name: str, cfg: TrainConfig, datasets) -> RunResult:
    out = train(cfg, datasets=datasets)
    source, target = datasets
    tgt = evaluate(out["checkpoint"], target.subset("test"))
    src = evaluate(out["checkpoint"], source.subset("test"))
    res = RunResult(name, cfg.seed, tgt.mean_dice, src.mean_dice, tgt.mean_asd, str(out["checkpoint"]),
                    out["seconds"])
    log.info("%s seed=%d target=%.2f source=%.2f (%.0fs)", name, cfg.seed, res.target_dice,
             res.source_dice, res.seconds)
    return res


def run_ablation(base: TrainConfig, seeds: Sequence[int], out_dir, include_source_only: bool = False,
                 configs: Optional[Sequence[str]] = None) -> ExperimentTable:
    """Train every ablation configuration for every seed on shared data; evaluate final checkpoints."""
    datasets = load_datasets(base)
    plan = [(SOURCE_ONLY, SOURCE_ONLY_OVERRIDES)] if include_source_only else []
    plan += [(n, ABLATIONS[n]) for n in (configs or ABLATIONS)]
    table = ExperimentTable()
    out_dir = Path(out_dir)
    for name, overrides in plan:
        for seed in seeds:
            cfg = base.replace(seed=seed, out_dir=str(out_dir / name / f"seed{seed}"), **overrides)
            table.runs.append(run_one(name, cfg, datasets))
    (out_dir / "ablation.json").write_text(json.dumps(table.to_dict(), indent=2))
    return table


def seed_sweep(base: TrainConfig, seeds: Sequence[int], out_dir) -> ExperimentTable:
    datasets = load_datasets(base)
    table = ExperimentTable()
    out_dir = Path(out_dir)
    for seed in seeds:
        cfg = base.replace(seed=seed, out_dir=str(out_dir / f"seed{seed}"))
        table.runs.append(run_one("sweep", cfg, datasets))
    (out_dir / "sweep.json").write_text(json.dumps(table.to_dict(), indent=2))
    return table


def ordering_holds(means: Sequence[float], tol: float = 1.0) -> bool:
    """Non-decreasing sequence, where a drop of at most ``tol`` counts as a tie."""
    return all(b >= a - tol for a, b in zip(means, means[1:]))
