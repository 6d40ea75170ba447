"""Slice datasets: manifest ingestion, augmentation and a synthetic two-modality phantom generator."""
from __future__ import annotations

import gzip
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

SPLIT_SEED = 42
DEFAULT_CLASS_TERMS = ("background tissue", "organ body", "inner chamber", "adjacent vessel", "small nodule")


class DataError(ValueError):
    pass


@dataclass
class Subject:
    id: str
    images: np.ndarray  # N x H x W float32 in [-1, 1]
    labels: Optional[np.ndarray] = None  # N x H x W uint8


@dataclass
class SliceDataset:
    modality: str
    spacing: Tuple[float, float]
    subjects: List[Subject]
    num_classes: int
    class_terms: List[str] = field(default_factory=lambda: list(DEFAULT_CLASS_TERMS))
    split: Optional[Dict[str, List[str]]] = None

    @property
    def labeled(self) -> bool:
        return all(s.labels is not None for s in self.subjects)

    @property
    def num_slices(self) -> int:
        return sum(len(s.images) for s in self.subjects)

    def ensure_split(self, test_fraction: float = 0.2, seed: int = SPLIT_SEED) -> Dict[str, List[str]]:
        if self.split is None:
            train, test = split_subjects([s.id for s in self.subjects], test_fraction, seed)
            self.split = {"train": train, "test": test}
        return self.split

    def subset(self, part: str) -> "SliceDataset":
        ids = set(self.ensure_split()[part])
        subs = [s for s in self.subjects if s.id in ids]
        return SliceDataset(self.modality, self.spacing, subs, self.num_classes, list(self.class_terms),
                            {part: [s.id for s in subs]})

    def slices(self):
        for s in self.subjects:
            for i in range(len(s.images)):
                yield s.images[i], (s.labels[i] if s.labels is not None else None)


def split_subjects(ids: Sequence[str], test_fraction: float = 0.2, seed: int = SPLIT_SEED):
    """Subject-level train/test partition, reproducible for a fixed seed."""
    ids = sorted(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_test = int(round(len(ids) * test_fraction))
    if len(ids) > 1:
        n_test = min(max(n_test, 1), len(ids) - 1)
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return train, test


def normalize_slice(img: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    lo, hi = np.percentile(img, [lo_pct, hi_pct])
    if hi <= lo:
        return np.zeros_like(img, dtype=np.float32)
    out = (np.clip(img, lo, hi) - lo) / (hi - lo)
    return (out * 2.0 - 1.0).astype(np.float32)


# ---------------------------------------------------------------- phantoms

@dataclass
class PhantomConfig:
    seed: int = 0
    n_subjects: int = 10
    slices_per_subject: int = 8
    image_size: int = 64
    num_classes: int = 5
    size_jitter: float = 0.15
    position_jitter: float = 0.06
    # latent tissue value per class (background body tissue first), air is 0
    tissue: Tuple[float, ...] = (0.35, 0.60, 0.90, 0.45, 0.75)
    texture: float = 0.04
    source_noise: float = 0.03
    target_noise: float = 0.05
    bias_field: float = 0.3
    source_modality: str = "CT"
    target_modality: str = "MRI"
    spacing: float = 1.0


def source_intensity(t: np.ndarray) -> np.ndarray:
    """Monotone lookup used for the source rendering."""
    return t


def target_intensity(t: np.ndarray) -> np.ndarray:
    """Contrast-inverting lookup for tissue (air stays dark)."""
    return np.where(t > 0.05, 1.05 - t, t)


def _ellipse(shape, cy, cx, ry, rx, angle=0.0):
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    y, x = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u, v = ca * x + sa * y, -sa * x + ca * y
    return (u / max(rx, 1e-6)) ** 2 + (v / max(ry, 1e-6)) ** 2 <= 1.0


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return f / (np.abs(f).max() + 1e-12)


def _sample_anatomy(rng, cfg: PhantomConfig) -> dict:
    j = lambda s: 1.0 + rng.uniform(-s, s)
    pj = lambda: rng.uniform(-cfg.position_jitter, cfg.position_jitter)
    return {
        "body": (0.5 + pj() / 2, 0.5 + pj() / 2, 0.42 * j(cfg.size_jitter / 2), 0.46 * j(cfg.size_jitter / 2)),
        "organ": (0.48 + pj(), 0.44 + pj(), 0.22 * j(cfg.size_jitter), 0.20 * j(cfg.size_jitter), rng.uniform(-0.5, 0.5)),
        "inner": (rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25), 0.45 * j(cfg.size_jitter)),
        "adjacent": (rng.uniform(0.6, 1.1), 0.13 * j(cfg.size_jitter), 0.10 * j(cfg.size_jitter)),
        "nodule": (rng.uniform(-2.4, -1.6), 0.065 * j(cfg.size_jitter)),
    }


def _render_labels(anat: dict, z: float, cfg: PhantomConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Label map and body mask for a slice at relative height z in [-1, 1]."""
    n = cfg.image_size
    shape = (n, n)
    scale = math.sqrt(max(1.0 - 0.6 * z * z, 0.05))
    by, bx, bry, brx = anat["body"]
    body = _ellipse(shape, by * n, bx * n, bry * n, brx * n)
    labels = np.zeros(shape, np.uint8)

    oy, ox, ory, orx, oang = anat["organ"]
    cy, cx = oy * n, ox * n
    ry, rx = ory * n * scale, orx * n * scale
    organ = _ellipse(shape, cy, cx, ry, rx, oang)
    labels[organ] = 1

    iy, ix, ir = anat["inner"]
    labels[_ellipse(shape, cy + iy * ry, cx + ix * rx, ir * ry, ir * rx * 0.9, oang) & organ] = 2

    # adjacent structure sits to the right of the organ and fades out toward the top
    if z < 0.75:
        ang, ary, arx = anat["adjacent"]
        d = max(ry, rx) * 1.05
        ay, ax = cy + d * math.sin(ang - 0.9), cx + d * math.cos(ang - 0.9)
        labels[_ellipse(shape, ay, ax, ary * n, arx * n, ang) & body] = 3

    # nodule on the opposite flank, absent from the lowest slices
    if z > -0.6:
        nang, nr = anat["nodule"]
        d = max(ry, rx) + nr * n * 1.3
        ny, nx = cy + d * math.sin(nang), cx + d * math.cos(nang)
        labels[_ellipse(shape, ny, nx, nr * n, nr * n) & body & (labels == 0)] = 4
    labels[~body] = 0
    return labels, body


def _render_image(labels, body, rng, cfg: PhantomConfig, target: bool) -> np.ndarray:
    n = cfg.image_size
    tissue = np.asarray(cfg.tissue, np.float64)
    t = np.where(body, tissue[labels], 0.0)
    t = t + cfg.texture * _smooth_field(rng, (n, n), 1.5) * body
    if target:
        img = target_intensity(t)
        yy, xx = np.mgrid[0:n, 0:n] / n
        gy, gx = rng.uniform(-1, 1, 2)
        bias = 1.0 + cfg.bias_field * (gy * (yy - 0.5) + gx * (xx - 0.5) + 0.5 * _smooth_field(rng, (n, n), n / 4))
        img = img * bias + cfg.target_noise * rng.standard_normal((n, n))
    else:
        img = source_intensity(t) + cfg.source_noise * rng.standard_normal((n, n))
    return normalize_slice(img)


def _render_subject(sid: str, seed: int, cfg: PhantomConfig, target: bool) -> Subject:
    rng = np.random.default_rng(seed)
    anat = _sample_anatomy(rng, cfg)
    zs = np.linspace(-0.9, 0.9, cfg.slices_per_subject)
    images, labels = [], []
    for z in zs:
        lab, body = _render_labels(anat, float(z), cfg)
        images.append(_render_image(lab, body, rng, cfg, target))
        labels.append(lab)
    return Subject(sid, np.stack(images).astype(np.float32), np.stack(labels).astype(np.uint8))


def generate_phantoms(cfg: PhantomConfig) -> Tuple[SliceDataset, SliceDataset]:
    """Unpaired source/target cohorts from one anatomy sampler with disjoint subject seeds."""
    if cfg.num_classes != 5:
        raise ValueError("the phantom anatomy model renders exactly 5 classes")
    seeds = np.random.SeedSequence(cfg.seed).generate_state(2 * cfg.n_subjects)
    spacing = (cfg.spacing, cfg.spacing)
    src = [_render_subject(f"src{i:03d}", int(seeds[i]), cfg, False) for i in range(cfg.n_subjects)]
    tgt = [_render_subject(f"tgt{i:03d}", int(seeds[cfg.n_subjects + i]), cfg, True) for i in range(cfg.n_subjects)]
    source = SliceDataset(cfg.source_modality, spacing, src, cfg.num_classes)
    target = SliceDataset(cfg.target_modality, spacing, tgt, cfg.num_classes)
    source.ensure_split()
    target.ensure_split()
    return source, target


# ------------------------------------------------------------ augmentation

@dataclass
class AugmentParams:
    scale: float = 1.0
    angle_deg: float = 0.0
    gain: float = 1.0
    shift: float = 0.0

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(scale=rng.uniform(0.8, 1.2), angle_deg=rng.uniform(-15, 15),
                   gain=rng.uniform(0.9, 1.1), shift=rng.uniform(-0.1, 0.1))


def _geometric(arr: np.ndarray, p: AugmentParams, order: int, cval: float) -> np.ndarray:
    H, W = arr.shape
    a = math.radians(p.angle_deg)
    # output coordinate -> input coordinate: rotate by -a and shrink by the scale factor
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]) / p.scale
    center = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    offset = center - rot @ center
    return ndimage.affine_transform(arr, rot, offset=offset, order=order, mode="constant", cval=cval)


def augment(image: np.ndarray, label: Optional[np.ndarray], seed=None,
            params: Optional[AugmentParams] = None):
    """Shared random scale/rotation on image (bilinear) and label (nearest); intensity jitter on image."""
    if params is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params = AugmentParams.sample(rng)
    identity = params.scale == 1.0 and params.angle_deg == 0.0
    img = image if identity else _geometric(image.astype(np.float64), params, 1, float(image.min()))
    img = (img * params.gain + params.shift).astype(np.float32)
    lab = None
    if label is not None:
        lab = label if identity else _geometric(label, params, 0, 0).astype(label.dtype)
    return img, lab


# --------------------------------------------------------------- sampling

class SliceSampler:
    """Draws random 2D slices (with optional augmentation) from a dataset's subjects."""

    def __init__(self, dataset: SliceDataset, seed: int = 0, augment: bool = True):
        self.images = np.concatenate([s.images for s in dataset.subjects])
        self.labels = (np.concatenate([s.labels for s in dataset.subjects]) if dataset.labeled else None)
        self.rng = np.random.default_rng(seed)
        self.augment = augment

    def __len__(self):
        return len(self.images)

    def sample(self, batch_size: int):
        idx = self.rng.integers(0, len(self.images), batch_size)
        imgs, labs = [], []
        for i in idx:
            img, lab = self.images[i], (self.labels[i] if self.labels is not None else None)
            if self.augment:
                img, lab = augment(img, lab, self.rng)
            imgs.append(img)
            labs.append(lab)
        images = np.stack(imgs)[:, None].astype(np.float32)
        labels = np.stack(labs).astype(np.int64) if self.labels is not None else None
        return images, labels

    def state_dict(self):
        return {"rng": self.rng.bit_generator.state}

    def load_state_dict(self, state):
        self.rng.bit_generator.state = state["rng"]


# -------------------------------------------------------------- manifests

def _write_payload(path: Path, arr: np.ndarray, dtype: str) -> None:
    data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    # mtime=0 keeps compressed payloads byte-identical across runs
    path.write_bytes(gzip.compress(data, compresslevel=6, mtime=0) if path.suffix == ".gz" else data)


def _read_payload(path: Path, dtype: str, shape) -> np.ndarray:
    try:
        raw = gzip.decompress(path.read_bytes()) if path.suffix == ".gz" else path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"missing slice file: {path}") from exc
    except (OSError, EOFError) as exc:
        raise DataError(f"corrupt slice file {path}: {exc}") from exc
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise DataError(f"corrupt slice file {path}: {len(raw)} bytes, expected {expected} for {tuple(shape)}")
    arr = np.frombuffer(raw, dtype=dtype)
    return arr.reshape(shape).copy()


def save_manifest(dataset: SliceDataset, out_dir, compress: bool = False) -> Path:
    out = Path(out_dir)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    ext = ".bin.gz" if compress else ".bin"
    shape = list(dataset.subjects[0].images.shape[1:])
    subjects = []
    for s in dataset.subjects:
        entries = []
        for i in range(len(s.images)):
            img_rel = f"slices/{s.id}_{i:03d}_img{ext}"
            _write_payload(out / img_rel, s.images[i], "<f4")
            lab_rel = None
            if s.labels is not None:
                lab_rel = f"slices/{s.id}_{i:03d}_lab{ext}"
                _write_payload(out / lab_rel, s.labels[i], "u1")
            entries.append({"image": img_rel, "label": lab_rel})
        subjects.append({"id": s.id, "slices": entries})
    manifest = {"modality": dataset.modality, "spacing": list(dataset.spacing), "shape": shape,
                "num_classes": dataset.num_classes, "class_terms": list(dataset.class_terms),
                "normalized": True, "subjects": subjects}
    if dataset.split is not None:
        manifest["split"] = dataset.split
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out / "manifest.json"


def load_manifest(path, num_classes: Optional[int] = None) -> SliceDataset:
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    root = mpath.parent
    try:
        m = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {mpath} is not valid JSON: {exc}") from exc
    C = int(num_classes or m.get("num_classes") or len(m.get("class_terms", DEFAULT_CLASS_TERMS)))
    spacing = m.get("spacing", 1.0)
    spacing = (float(spacing), float(spacing)) if np.isscalar(spacing) else tuple(float(s) for s in spacing)
    normalized = bool(m.get("normalized", False))
    subjects = []
    for sub in m["subjects"]:
        imgs, labs = [], []
        for entry in sub["slices"]:
            shape = entry.get("shape", m.get("shape"))
            if shape is None:
                raise DataError(f"{mpath}: no slice shape for subject {sub['id']}")
            img = _read_payload(root / entry["image"], "<f4", shape)
            imgs.append(img if normalized else normalize_slice(img))
            if entry.get("label") is not None:
                lab = _read_payload(root / entry["label"], "u1", shape)
                if lab.size and int(lab.max()) >= C:
                    raise DataError(f"{root / entry['label']}: class index {int(lab.max())} >= C={C}")
                labs.append(lab)
        if labs and len(labs) != len(imgs):
            raise DataError(f"subject {sub['id']}: labels missing for some slices")
        subjects.append(Subject(str(sub["id"]), np.stack(imgs), np.stack(labs) if labs else None))
    ds = SliceDataset(m.get("modality", "CT"), spacing, subjects, C,
                      list(m.get("class_terms", DEFAULT_CLASS_TERMS)), m.get("split"))
    ds.ensure_split()
    return ds


def phantom_config_dict(cfg: PhantomConfig) -> dict:
    return asdict(cfg)
