"""Datasets, loaders, synthetic pairs, PK sampling and train-time augmentation."""
from __future__ import annotations

import csv
import enum
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

# ImageNet statistics; logged into every run manifest.
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)

SYSU_RGB_CAMERAS = (1, 2, 4, 5)
SYSU_IR_CAMERAS = (3, 6)
SYSU_INDOOR_RGB_CAMERAS = (1, 2)
REGDB_TRIALS = range(1, 11)

# Integer chroma directions with zero luma under (77, 150, 29) / 256 weights,
# so recoloring never changes the luminance plane.
CHROMA_BASIS = np.array([[12, -5, -6], [1, 2, -13]], dtype=np.int64)
_CHROMA_MAX = 3


class DatasetError(ValueError):
    pass


class Modality(str, enum.Enum):
    RGB = "rgb"
    IR = "ir"


class Split(str, enum.Enum):
    TRAIN = "train"
    QUERY = "query"
    GALLERY = "gallery"


def modality_of_sysu_camera(camera: int) -> Modality:
    if camera in SYSU_RGB_CAMERAS:
        return Modality.RGB
    if camera in SYSU_IR_CAMERAS:
        return Modality.IR
    raise DatasetError(f"camera {camera} is not a SYSU-MM01 camera")


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One image with its labels.

    ``image`` holds an HxWx3 uint8 array for in-memory data; file-backed
    records keep ``image=None`` and decode ``path`` on demand.
    """

    image: np.ndarray | None
    identity: int
    modality: Modality
    camera: int
    split: Split
    path: Path | None = None

    def pixels(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.path is None:
            raise DatasetError("record has neither pixels nor a path")
        return read_image(self.path, self.modality)


def read_image(path: Path, modality: Modality) -> np.ndarray:
    with Image.open(path) as im:
        if modality is Modality.IR:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
            return np.repeat(gray[:, :, None], 3, axis=2)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _check_readable(path: Path, strict: bool) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:  # PIL raises a zoo of exception types
        if strict:
            raise DatasetError(f"unreadable image: {path}") from exc
        logger.warning("skipping unreadable image %s (%s)", path, exc)
        return False
    return True


# --------------------------------------------------------------------------
# SYSU-MM01
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SysuSplitConfig:
    train_files: tuple[str, ...] = ("train_id.txt", "val_id.txt")
    test_files: tuple[str, ...] = ("test_id.txt",)
    strict: bool = True


def _read_id_list(path: Path) -> list[int]:
    text = path.read_text().replace("\n", ",")
    return [int(tok) for tok in text.split(",") if tok.strip()]


def load_sysu_layout(root: str | Path, split_config: SysuSplitConfig | None = None) -> list[ImageRecord]:
    """Index a SYSU-MM01 tree (``cam1..cam6/<pid:04d>/*``, ``exp/*_id.txt``).

    Train identities are remapped to 0..N-1. Test IR images become queries and
    test RGB images gallery candidates (the per-trial gallery is drawn later).
    """
    cfg = split_config or SysuSplitConfig()
    root = Path(root)
    exp = root / "exp"
    if not exp.is_dir():
        raise DatasetError(f"missing split definition: {exp} not found")
    train_ids: list[int] = []
    for name in cfg.train_files:
        if not (exp / name).is_file():
            raise DatasetError(f"missing split definition: {exp / name}")
        train_ids += _read_id_list(exp / name)
    test_ids: list[int] = []
    for name in cfg.test_files:
        if not (exp / name).is_file():
            raise DatasetError(f"missing split definition: {exp / name}")
        test_ids += _read_id_list(exp / name)
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise DatasetError(f"identities in both train and test lists: {sorted(overlap)[:5]}")

    relabel = {pid: i for i, pid in enumerate(sorted(set(train_ids)))}
    test_set = set(test_ids)
    records = []
    for cam in SYSU_RGB_CAMERAS + SYSU_IR_CAMERAS:
        modality = modality_of_sysu_camera(cam)
        cam_dir = root / f"cam{cam}"
        if not cam_dir.is_dir():
            continue
        for pid in sorted(set(train_ids) | test_set):
            id_dir = cam_dir / f"{pid:04d}"
            if not id_dir.is_dir():
                continue
            for path in sorted(p for p in id_dir.iterdir() if p.is_file()):
                if not _check_readable(path, cfg.strict):
                    continue
                if pid in relabel:
                    split, label = Split.TRAIN, relabel[pid]
                else:
                    split = Split.QUERY if modality is Modality.IR else Split.GALLERY
                    label = pid
                records.append(ImageRecord(None, label, modality, cam, split, path))
    return records


# --------------------------------------------------------------------------
# RegDB
# --------------------------------------------------------------------------


def load_regdb_layout(root: str | Path, trial_index: int, strict: bool = True) -> list[ImageRecord]:
    """Index a RegDB tree through ``idx/{train,test}_{visible,thermal}_<trial>.txt``.

    Each index line is ``<relative path> <label>``. Visible images get camera 1,
    thermal camera 2. Test thermal images are tagged as queries and test visible
    images as gallery; evaluation swaps roles for visible-to-thermal.
    """
    if trial_index not in REGDB_TRIALS:
        raise DatasetError(f"RegDB trial_index must be in 1..10, got {trial_index}")
    root = Path(root)
    raw = []
    for part in ("train", "test"):
        for modality, cam, name in ((Modality.RGB, 1, "visible"), (Modality.IR, 2, "thermal")):
            index = root / "idx" / f"{part}_{name}_{trial_index}.txt"
            if not index.is_file():
                raise DatasetError(f"missing split definition: {index}")
            for line in index.read_text().splitlines():
                if not line.strip():
                    continue
                rel, label = line.rsplit(maxsplit=1)
                path = root / rel
                if not _check_readable(path, strict):
                    continue
                if part == "train":
                    split = Split.TRAIN
                else:
                    split = Split.QUERY if modality is Modality.IR else Split.GALLERY
                raw.append((int(label), modality, cam, split, path))
    relabel = {pid: i for i, pid in enumerate(sorted({r[0] for r in raw if r[3] is Split.TRAIN}))}
    return [ImageRecord(None, relabel[pid] if split is Split.TRAIN else pid, modality, cam, split, path)
            for pid, modality, cam, split, path in raw]


# --------------------------------------------------------------------------
# Synthetic paired-modality data
# --------------------------------------------------------------------------

SHAPES = ("rect", "ellipse", "triangle")


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    """Identity decides the luminance layout; modality only recolors it.

    RGB images are the luminance plane plus zero-luma chroma (a per-identity
    palette and per-image chroma clutter). IR images are the luminance plane
    replicated to three channels. ``noise_level`` is the per-pixel luminance
    noise std in [0, 1] units, drawn independently per image. ``jitter`` is a
    per-(identity, index) translation shared by the paired RGB/IR images.
    """

    num_identities: int = 32
    images_per_id_per_modality: int = 8
    image_size: tuple[int, int] = (64, 32)
    shape_vocabulary: tuple[str, ...] = SHAPES
    shapes_per_identity: int = 3
    modality_transform: str = "zero-luma-chroma"
    noise_level: float = 0.04
    jitter: int = 3
    clutter: float = 0.5
    num_test_identities: int | None = None
    seed: int = 0

    @property
    def test_identities(self) -> int:
        if self.num_test_identities is not None:
            return self.num_test_identities
        return self.num_identities // 2


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = (yy - cy) / max(ry, 1e-6), (xx - cx) / max(rx, 1e-6)
    if kind == "rect":
        return (np.abs(dy) <= 1) & (np.abs(dx) <= 1)
    if kind == "ellipse":
        return dy**2 + dx**2 <= 1
    if kind == "triangle":
        return (dy >= -1) & (dy <= 1) & (np.abs(dx) <= (dy + 1) / 2)
    raise ValueError(f"unknown shape {kind!r}")


@dataclass
class _Identity:
    luma: np.ndarray  # int64 HxW, identity-specific layout
    parts: list[np.ndarray]  # boolean masks used for palette coloring
    palette: np.ndarray  # (len(parts)+1, 2) chroma coefficients


def _make_identity(cfg: SyntheticDatasetConfig, rng: np.random.Generator) -> _Identity:
    h, w = cfg.image_size
    luma = np.full((h, w), rng.integers(60, 110), dtype=np.int64)
    parts = []
    # coarse person layout: head, torso, legs, then identity-specific primitives
    layout = [
        ("ellipse", 0.12 * h, 0.5 * w, 0.08 * h, 0.16 * w),
        (cfg.shape_vocabulary[rng.integers(len(cfg.shape_vocabulary))], 0.38 * h, 0.5 * w, 0.17 * h, 0.3 * w),
        ("rect", 0.74 * h, 0.5 * w, 0.2 * h, 0.2 * w),
    ]
    for _ in range(cfg.shapes_per_identity):
        kind = cfg.shape_vocabulary[rng.integers(len(cfg.shape_vocabulary))]
        layout.append((kind, rng.uniform(0.15, 0.85) * h, rng.uniform(0.2, 0.8) * w,
                       rng.uniform(0.05, 0.15) * h, rng.uniform(0.1, 0.3) * w))
    for kind, cy, cx, ry, rx in layout:
        cy += rng.uniform(-0.04, 0.04) * h
        cx += rng.uniform(-0.08, 0.08) * w
        ry *= rng.uniform(0.8, 1.25)
        rx *= rng.uniform(0.8, 1.25)
        mask = _shape_mask(kind, h, w, cy, cx, ry, rx)
        luma[mask] = rng.integers(110, 196)
        parts.append(mask)
    palette = rng.integers(-_CHROMA_MAX + 1, _CHROMA_MAX, size=(len(parts) + 1, 2), endpoint=False)
    return _Identity(luma, parts, palette)


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.roll(a, (dy, dx), axis=(0, 1))
    return out


def _chroma_from_coeffs(coeffs: np.ndarray) -> np.ndarray:
    """(..., 2) integer coefficients -> (..., 3) integer zero-luma offsets."""
    return coeffs @ CHROMA_BASIS


def generate_synthetic(config: SyntheticDatasetConfig) -> list[ImageRecord]:
    """Pure function of ``config``; returns records ordered identity-major.

    The last ``config.test_identities`` identities form the test set (IR images
    are queries, RGB images gallery candidates); the rest are train identities.
    Cameras mimic SYSU: RGB images cycle over cams 1,2,4,5 and IR over 3,6.
    """
    if config.num_identities < 2:
        raise DatasetError("num_identities must be >= 2 (metric losses and retrieval need two classes)")
    n_test = config.test_identities
    if not 0 <= n_test <= config.num_identities:
        raise DatasetError("num_test_identities out of range")
    h, w = config.image_size
    if h < 8 or w < 8:
        raise DatasetError("synthetic images must be at least 8x8")
    margin = int(np.abs(_chroma_from_coeffs(np.full(2, _CHROMA_MAX))).max()) + 20
    root = np.random.default_rng(config.seed)
    id_seeds = root.integers(0, 2**63 - 1, size=config.num_identities)
    n_train = config.num_identities - n_test
    records = []
    for k in range(config.num_identities):
        rng = np.random.default_rng(id_seeds[k])
        ident = _make_identity(config, rng)
        base_chroma = np.zeros((h, w, 2), dtype=np.int64)
        base_chroma[...] = ident.palette[-1]
        for mask, coeff in zip(ident.parts, ident.palette[:-1]):
            base_chroma[mask] = coeff
        is_train = k < n_train
        label = k if is_train else k - n_train
        for j in range(config.images_per_id_per_modality):
            dy = int(rng.integers(-config.jitter, config.jitter + 1)) if config.jitter else 0
            dx = int(rng.integers(-config.jitter, config.jitter + 1)) if config.jitter else 0
            luma = _shift(ident.luma, dy, dx)
            chroma = _shift(base_chroma, dy, dx)
            for modality in (Modality.RGB, Modality.IR):
                noise = np.rint(rng.normal(0.0, config.noise_level * 255.0, size=(h, w))).astype(np.int64)
                plane = np.clip(luma + noise, margin, 255 - margin)
                if modality is Modality.RGB:
                    coeffs = chroma
                    if config.clutter:
                        clutter = rng.integers(-_CHROMA_MAX, _CHROMA_MAX + 1, size=(h // 4 + 1, w // 4 + 1, 2))
                        clutter = np.repeat(np.repeat(clutter, 4, axis=0), 4, axis=1)[:h, :w]
                        use = rng.random((h, w)) < config.clutter
                        coeffs = np.where(use[..., None] & ~_any_part(ident.parts, dy, dx)[..., None], clutter, chroma)
                    img = plane[..., None] + _chroma_from_coeffs(coeffs)
                    camera = SYSU_RGB_CAMERAS[j % len(SYSU_RGB_CAMERAS)]
                else:
                    img = np.repeat(plane[..., None], 3, axis=2)
                    camera = SYSU_IR_CAMERAS[j % len(SYSU_IR_CAMERAS)]
                img = img.astype(np.uint8)
                if is_train:
                    split = Split.TRAIN
                else:
                    split = Split.QUERY if modality is Modality.IR else Split.GALLERY
                records.append(ImageRecord(img, label, modality, camera, split))
    return records


def _any_part(parts: list[np.ndarray], dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(parts[0])
    for m in parts:
        out |= m
    return _shift(out, dy, dx)


MANIFEST_NAME = "manifest.tsv"
MANIFEST_FIELDS = ("identity", "modality", "camera", "split", "path")


def export_dataset(records: Sequence[ImageRecord], out_dir: str | Path) -> Path:
    """Write PNG files plus a tab-separated manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / MANIFEST_NAME
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for i, rec in enumerate(records):
            rel = Path("images") / f"{i:06d}_{rec.split.value}_{rec.identity:04d}_{rec.modality.value}_c{rec.camera}.png"
            Image.fromarray(rec.pixels()).save(out_dir / rel, optimize=False)
            writer.writerow([rec.identity, rec.modality.value, rec.camera, rec.split.value, rel.as_posix()])
    return manifest


def load_manifest(root: str | Path, preload: bool = True) -> list[ImageRecord]:
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"missing split definition: {manifest}")
    records = []
    with manifest.open(newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            modality = Modality(row["modality"])
            path = root / row["path"]
            image = read_image(path, modality) if preload else None
            records.append(ImageRecord(image, int(row["identity"]), modality, int(row["camera"]),
                                       Split(row["split"]), path))
    return records


# --------------------------------------------------------------------------
# PK sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchSpec:
    num_identities_P: int = 8
    images_per_modality_K: int = 4

    def __post_init__(self):
        if self.num_identities_P < 1 or self.images_per_modality_K < 1:
            raise ValueError("P and K must be positive")

    @property
    def batch_size(self) -> int:
        return self.num_identities_P * 2 * self.images_per_modality_K


@dataclass
class ImageBatch:
    """Sampled records, RGB block first then IR block, identity-major inside each."""

    records: list[ImageRecord]
    identities: np.ndarray
    modalities: np.ndarray  # 0 = RGB, 1 = IR
    cameras: np.ndarray

    def __len__(self):
        return len(self.records)

    @property
    def rgb_mask(self) -> np.ndarray:
        return self.modalities == 0


class PKSampler:
    """Identity-balanced cross-modality sampler.

    Every batch holds P distinct identities with exactly K RGB and K IR images
    each; identities short of K images in a modality are drawn with replacement.
    """

    def __init__(self, records: Sequence[ImageRecord], spec: BatchSpec, replace_if_short: bool = True):
        self.records = list(records)
        self.spec = spec
        self.replace_if_short = replace_if_short
        index: dict[int, dict[Modality, list[int]]] = defaultdict(lambda: {Modality.RGB: [], Modality.IR: []})
        for i, rec in enumerate(self.records):
            index[rec.identity][rec.modality].append(i)
        self.index = {pid: v for pid, v in index.items() if v[Modality.RGB] and v[Modality.IR]}
        self.identities = np.array(sorted(self.index), dtype=np.int64)
        if len(self.identities) < spec.num_identities_P:
            raise DatasetError(
                f"need {spec.num_identities_P} identities with both modalities, found {len(self.identities)}")
        if not replace_if_short:
            k = spec.images_per_modality_K
            short = [pid for pid, v in self.index.items() if min(len(v[Modality.RGB]), len(v[Modality.IR])) < k]
            if short:
                raise DatasetError(f"identities with fewer than K={k} images per modality: {short[:5]}")

    def _pick(self, pool: list[int], rng: np.random.Generator) -> np.ndarray:
        k = self.spec.images_per_modality_K
        return rng.choice(pool, size=k, replace=len(pool) < k)

    def sample(self, rng: np.random.Generator) -> ImageBatch:
        pids = rng.choice(self.identities, size=self.spec.num_identities_P, replace=False)
        rgb, ir = [], []
        for pid in pids:
            rgb.extend(self._pick(self.index[pid][Modality.RGB], rng))
            ir.extend(self._pick(self.index[pid][Modality.IR], rng))
        recs = [self.records[i] for i in rgb + ir]
        return ImageBatch(
            records=recs,
            identities=np.array([r.identity for r in recs], dtype=np.int64),
            modalities=np.array([0 if r.modality is Modality.RGB else 1 for r in recs], dtype=np.int64),
            cameras=np.array([r.camera for r in recs], dtype=np.int64),
        )


def sample_batch(records: Sequence[ImageRecord], spec: BatchSpec, rng: np.random.Generator) -> ImageBatch:
    return PKSampler(records, spec).sample(rng)


# --------------------------------------------------------------------------
# Augmentation and tensor conversion
# --------------------------------------------------------------------------


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if image.shape[:2] == (h, w):
        return image.copy()
    return np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


@dataclass(frozen=True)
class AugmentConfig:
    size: tuple[int, int] = (288, 144)
    pad: int = 10
    flip_prob: float = 0.5
    enabled: bool = True


def augment(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Resize, then (if enabled) horizontal flip and zero-pad + random crop."""
    out = resize(image, config.size)
    if not config.enabled:
        return out
    if rng.random() < config.flip_prob:
        out = hflip(out)
    if config.pad > 0:
        h, w = config.size
        p = config.pad
        padded = np.zeros((h + 2 * p, w + 2 * p, out.shape[2]), dtype=out.dtype)
        padded[p:p + h, p:p + w] = out
        y, x = rng.integers(0, 2 * p + 1, size=2)
        out = padded[y:y + h, x:x + w].copy()
    return out


def to_tensor(images: Iterable[np.ndarray], mean: Sequence[float] = DEFAULT_MEAN,
              std: Sequence[float] = DEFAULT_STD) -> torch.Tensor:
    """Stack HxWx3 uint8 arrays into a normalized float32 NCHW tensor."""
    arr = np.stack(list(images)).astype(np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def batch_tensors(batch: ImageBatch, rng: np.random.Generator, config: AugmentConfig,
                  mean: Sequence[float] = DEFAULT_MEAN, std: Sequence[float] = DEFAULT_STD
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    """Augment a batch and split it into (rgb, ir) normalized tensors."""
    imgs = [augment(r.pixels(), rng, config) for r in batch.records]
    x = to_tensor(imgs, mean, std)
    rgb = torch.from_numpy(batch.rgb_mask)
    return x[rgb], x[~rgb]


def filter_records(records: Iterable[ImageRecord], *, split: Split | None = None,
                   modality: Modality | None = None) -> list[ImageRecord]:
    return [r for r in records
            if (split is None or r.split is split) and (modality is None or r.modality is modality)]
