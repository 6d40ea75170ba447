"""Dice (%) and average symmetric surface distance (mm), aggregated per subject."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

_CROSS = ndimage.generate_binary_structure(2, 1)


def dice_score(pred: np.ndarray, gt: np.ndarray, c: Optional[int] = None) -> float:
    """100 * 2|A n B| / (|A| + |B|); 100 when both masks are empty."""
    a = np.asarray(pred) == c if c is not None else np.asarray(pred, bool)
    b = np.asarray(gt) == c if c is not None else np.asarray(gt, bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(a, b).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (image border counts as outside)."""
    mask = np.asarray(mask, bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def _spacing2(spacing) -> tuple:
    if np.isscalar(spacing):
        return (float(spacing), float(spacing))
    sy, sx = spacing
    return (float(sy), float(sx))


def _directed_mean(src_surface, dst_surface, spacing) -> float:
    dist = ndimage.distance_transform_edt(~dst_surface, sampling=spacing)
    return float(dist[src_surface].mean())


def asd(pred_mask: np.ndarray, gt_mask: np.ndarray, spacing=1.0) -> Optional[float]:
    """Mean of the two directed mean surface distances in mm; None if either mask is empty."""
    a, b = np.asarray(pred_mask, bool), np.asarray(gt_mask, bool)
    if not a.any() or not b.any():
        return None
    sp = _spacing2(spacing)
    sa, sb = surface(a), surface(b)
    return 0.5 * (_directed_mean(sa, sb, sp) + _directed_mean(sb, sa, sp))


@dataclass
class SubjectMetrics:
    subject: str
    dice: Dict[int, float]
    asd: Dict[int, Optional[float]]


@dataclass
class EvalReport:
    classes: List[int]
    class_names: List[str]
    dice: Dict[int, float]
    asd: Dict[int, Optional[float]]
    mean_dice: float
    mean_asd: Optional[float]
    spacing: tuple
    subjects: List[SubjectMetrics] = field(default_factory=list)
    asd_undefined: Dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("dice", "asd", "asd_undefined"):
            d[key] = {str(k): v for k, v in d[key].items()}
        for s in d["subjects"]:
            s["dice"] = {str(k): v for k, v in s["dice"].items()}
            s["asd"] = {str(k): v for k, v in s["asd"].items()}
        d["spacing"] = list(self.spacing)
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def table(self) -> str:
        lines = [f"{'class':<24}{'Dice (%)':>10}{'ASD (mm)':>10}"]
        for c, name in zip(self.classes, self.class_names):
            a = self.asd[c]
            lines.append(f"{name:<24}{self.dice[c]:>10.2f}{'n/a' if a is None else f'{a:.2f}':>10}")
        ma = "n/a" if self.mean_asd is None else f"{self.mean_asd:.2f}"
        lines.append(f"{'mean':<24}{self.mean_dice:>10.2f}{ma:>10}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["subject", "class", "dice", "asd"])
        for s in self.subjects:
            for c in self.classes:
                w.writerow([s.subject, c, s.dice[c], "" if s.asd[c] is None else s.asd[c]])
        return buf.getvalue()


def _nanmean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_subject(preds: np.ndarray, gts: np.ndarray, classes: Sequence[int], spacing=1.0,
                     subject: str = "subject") -> SubjectMetrics:
    preds, gts = np.asarray(preds), np.asarray(gts)
    if preds.ndim == 2:
        preds, gts = preds[None], gts[None]
    if preds.shape != gts.shape:
        raise ValueError(f"{subject}: prediction stack {preds.shape} != ground truth {gts.shape}")
    dice, dist = {}, {}
    for c in classes:
        dice[c] = dice_score(preds, gts, c)
        per_slice = [asd(p == c, g == c, spacing) for p, g in zip(preds, gts)]
        dist[c] = _nanmean(per_slice)
    return SubjectMetrics(subject=subject, dice=dice, asd=dist)


def evaluate_volume(slice_preds: Sequence[np.ndarray], slice_gts: Sequence[np.ndarray], spacing=1.0,
                    num_classes: int = 5, subject_ids: Optional[Sequence[str]] = None,
                    class_names: Optional[Sequence[str]] = None, include_background: bool = False) -> EvalReport:
    """Per-subject metrics over stacked 2D slices, then averaged over subjects.

    ``slice_preds``/``slice_gts`` hold one N_i x H x W stack per subject.
    """
    if len(slice_preds) != len(slice_gts):
        raise ValueError(f"{len(slice_preds)} prediction subjects vs {len(slice_gts)} ground-truth subjects")
    classes = list(range(0 if include_background else 1, num_classes))
    ids = list(subject_ids) if subject_ids is not None else [f"s{i}" for i in range(len(slice_preds))]
    names = list(class_names)[classes[0]:] if class_names is not None else [f"class_{c}" for c in classes]
    subjects = [evaluate_subject(p, g, classes, spacing, sid) for p, g, sid in zip(slice_preds, slice_gts, ids)]
    dice = {c: float(np.mean([s.dice[c] for s in subjects])) for c in classes}
    dist = {c: _nanmean(s.asd[c] for s in subjects) for c in classes}
    undefined = {c: sum(s.asd[c] is None for s in subjects) for c in classes}
    return EvalReport(classes=classes, class_names=names, dice=dice, asd=dist,
                      mean_dice=float(np.mean(list(dice.values()))),
                      mean_asd=_nanmean(dist.values()), spacing=_spacing2(spacing),
                      subjects=subjects, asd_undefined=undefined)


def validate_report(d: dict) -> None:
    """Schema check for a serialized report."""
    import jsonschema

    jsonschema.validate(d, REPORT_SCHEMA)


_num_or_null = {"type": ["number", "null"], "minimum": 0}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["classes", "class_names", "dice", "asd", "mean_dice", "mean_asd", "spacing", "subjects"],
    "properties": {
        "classes": {"type": "array", "items": {"type": "integer"}},
        "class_names": {"type": "array", "items": {"type": "string"}},
        "dice": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 100}},
        "asd": {"type": "object", "additionalProperties": _num_or_null},
        "mean_dice": {"type": "number", "minimum": 0, "maximum": 100},
        "mean_asd": _num_or_null,
        "spacing": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "subjects": {"type": "array", "items": {
            "type": "object", "required": ["subject", "dice", "asd"]}},
        "asd_undefined": {"type": "object", "additionalProperties": {"type": "integer"}},
    },
}
