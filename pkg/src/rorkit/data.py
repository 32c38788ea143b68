"""Datasets, manifests, preprocessing, augmentation and fold assignment.

Labels are 1-based; ``0`` in the label arrays means "absent".
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ("image_path", "age_group", "gender", "subject_id")
STD_EPS = 1e-6


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # C x H x W
    age_group: int | None
    gender: int | None
    subject_id: str


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, float32
    age: np.ndarray  # N, int, 0 = absent
    gender: np.ndarray  # N, int, 0 = absent
    subjects: list[str]
    latents: np.ndarray | None = None  # synthetic only: the age latent per sample
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        self.age = np.asarray(self.age, dtype=np.int64)
        self.gender = np.asarray(self.gender, dtype=np.int64)
        if self.age.shape != (n,) or self.gender.shape != (n,) or len(self.subjects) != n:
            raise ValueError("label arrays and subject list must match the image count")
        if n and np.any((self.age == 0) & (self.gender == 0)):
            raise ValueError("every sample needs at least one label")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("non-finite pixel values")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.age[i]) or None, int(self.gender[i]) or None,
                      self.subjects[i])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def labels(self, task: str) -> np.ndarray:
        if task == "age":
            return self.age
        if task == "gender":
            return self.gender
        raise ValueError(f"unknown task {task!r}")

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.age[idx], self.gender[idx],
                       [self.subjects[i] for i in idx],
                       None if self.latents is None else self.latents[idx],
                       [self.paths[i] for i in idx] if self.paths else [])

    def with_label(self, task: str) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels(task) > 0))

    def num_classes(self, task: str) -> int:
        lab = self.labels(task)
        return int(lab.max()) if lab.size else 0


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------

def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _parse_label(text: str, name: str, lineno: int) -> int:
    text = text.strip()
    if not text:
        return 0
    try:
        v = int(text)
    except ValueError:
        raise ManifestError(f"line {lineno}: {name} {text!r} is not an integer") from None
    if v < 1:
        raise ManifestError(f"line {lineno}: {name} must be >= 1, got {v}")
    return v


def load_manifest(path) -> Dataset:
    """Read ``image_path,age_group,gender,subject_id`` rows and decode images.

    Image paths are resolved relative to the manifest's directory. Rows whose
    image cannot be read are skipped with a warning; malformed rows raise
    :class:`ManifestError` naming the line.
    """
    path = Path(path)
    root = path.parent
    images, ages, genders, subjects, paths = [], [], [], [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise ManifestError(f"line 1: expected header {','.join(MANIFEST_FIELDS)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise ManifestError(f"line {lineno}: expected 4 fields, got {len(row)}")
            img_path, age_s, gender_s, subject = (c.strip() for c in row)
            if not img_path or not subject:
                raise ManifestError(f"line {lineno}: image_path and subject_id are required")
            age, gender = _parse_label(age_s, "age_group", lineno), _parse_label(gender_s, "gender", lineno)
            if age == 0 and gender == 0:
                raise ManifestError(f"line {lineno}: neither age_group nor gender present")
            try:
                img = _read_png(root / img_path)
            except (OSError, ValueError) as exc:
                logger.warning("line %d: skipping unreadable image %s (%s)", lineno, img_path, exc)
                continue
            if images and img.shape != images[0].shape:
                raise ManifestError(f"line {lineno}: image shape {img.shape} differs from {images[0].shape}")
            images.append(img)
            ages.append(age)
            genders.append(gender)
            subjects.append(subject)
            paths.append(img_path)
    arr = np.stack(images) if images else np.zeros((0, 3, 1, 1), dtype=np.float32)
    return Dataset(arr, np.array(ages, dtype=np.int64), np.array(genders, dtype=np.int64),
                   subjects, paths=paths)


def write_manifest(dataset: Dataset, directory) -> Path:
    """Write an 8-bit RGB PNG per sample plus ``manifest.csv``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for i in range(len(dataset)):
            rel = f"images/{i:06d}.png"
            img = dataset.images[i]
            if img.shape[0] == 1:
                img = np.repeat(img, 3, axis=0)
            pix = np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pix, mode="RGB").save(directory / rel, optimize=False)
            w.writerow([rel, dataset.age[i] or "", dataset.gender[i] or "", dataset.subjects[i]])
    return manifest


# ---------------------------------------------------------------------------
# preprocessing and augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def of(cls, images: np.ndarray) -> "ChannelStats":
        imgs = np.asarray(images, dtype=np.float64)
        return cls(tuple(imgs.mean(axis=(0, 2, 3))), tuple(imgs.std(axis=(0, 2, 3))))

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(tuple(d["mean"]), tuple(d["std"]))


def preprocess(images: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Per-channel standardization; works on one image (C,H,W) or a batch."""
    x = np.asarray(images)
    shape = (-1, 1, 1) if x.ndim == 3 else (1, -1, 1, 1)
    mean = np.asarray(stats.mean).reshape(shape)
    std = np.maximum(np.asarray(stats.std), STD_EPS).reshape(shape)
    return ((x - mean) / std).astype(np.float32)


def sample_rng(seed: int, index: int, epoch: int) -> np.random.Generator:
    """Independent stream per (seed, sample, epoch); worker count never matters."""
    return np.random.default_rng([seed, index, epoch])


def sample_crop(rng: np.random.Generator, height: int, width: int,
                area_range=(0.08, 1.0), ratio_range=(3 / 4, 4 / 3),
                attempts: int = 10) -> tuple[int, int, int, int]:
    """Random (top, left, h, w) with area fraction and w/h ratio in range.

    After rounding to whole pixels, proposals whose ratio falls outside the
    range are rejected too; after ``attempts`` failures a centered square
    crop of the short side is returned.
    """
    area = height * width
    log_lo, log_hi = math.log(ratio_range[0]), math.log(ratio_range[1])
    for _ in range(attempts):
        target = area * rng.uniform(*area_range)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height and ratio_range[0] <= w / h <= ratio_range[1]:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side, side


def resize(image: np.ndarray, box: tuple[int, int, int, int], out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the ``(top, left, h, w)`` region of a C,H,W image."""
    top, left, h, w = box
    out = np.empty((image.shape[0], out_hw[0], out_hw[1]), dtype=np.float32)
    for c in range(image.shape[0]):
        ch = Image.fromarray(np.ascontiguousarray(image[c], dtype=np.float32), mode="F")
        ch = ch.resize((out_hw[1], out_hw[0]), Image.BILINEAR, box=(left, top, left + w, top + h))
        out[c] = np.asarray(ch, dtype=np.float32)
    return out


def augment_image(image: np.ndarray, rng: np.random.Generator, out_hw: tuple[int, int],
                  policy: str = "scale_aspect") -> np.ndarray:
    if policy == "none":
        if tuple(image.shape[1:]) == tuple(out_hw):
            return image
        return resize(image, (0, 0, image.shape[1], image.shape[2]), out_hw)
    if policy != "scale_aspect":
        raise ValueError(f"unknown augmentation policy {policy!r}")
    _, height, width = image.shape
    if height < out_hw[0] or width < out_hw[1]:
        raise ValueError(f"image {image.shape[1:]} smaller than crop target {out_hw}")
    out = resize(image, sample_crop(rng, height, width), out_hw)
    if rng.random() < 0.5:
        out = out[:, :, ::-1].copy()
    return out


def augment(sample: Sample, rng: np.random.Generator, out_hw: tuple[int, int],
            policy: str = "scale_aspect") -> Sample:
    """Scale/aspect crop plus horizontal flip; labels are carried over untouched."""
    return Sample(augment_image(sample.image, rng, out_hw, policy),
                  sample.age_group, sample.gender, sample.subject_id)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    fold_of: dict[str, int]
    n_folds: int

    def fold_indices(self, dataset: Dataset, fold: int) -> np.ndarray:
        return np.array([i for i, s in enumerate(dataset.subjects) if self.fold_of[s] == fold],
                        dtype=np.int64)

    def split(self, dataset: Dataset, val_fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train indices, validation indices) holding out ``val_fold``."""
        val = np.array([self.fold_of[s] == val_fold for s in dataset.subjects])
        return np.flatnonzero(~val), np.flatnonzero(val)

    def subjects_in(self, fold: int) -> set[str]:
        return {s for s, f in self.fold_of.items() if f == fold}


def assign_folds(subjects: Dataset | Sequence[str], n_folds: int = 5, seed: int = 0) -> FoldAssignment:
    """Shuffle the distinct subjects by ``seed`` and deal them round-robin."""
    ids = subjects.subjects if isinstance(subjects, Dataset) else list(subjects)
    unique = sorted(set(ids))
    if len(unique) < n_folds:
        raise ValueError(f"{len(unique)} subjects cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(unique))
    return FoldAssignment({unique[j]: pos % n_folds for pos, j in enumerate(order)}, n_folds)


def concat(datasets: Sequence[Dataset]) -> Dataset:
    if not datasets:
        raise ValueError("nothing to concatenate")
    shapes = {d.image_shape for d in datasets if len(d)}
    if len(shapes) > 1:
        raise ValueError(f"image shapes differ: {sorted(shapes)}")
    lat = None
    if all(d.latents is not None for d in datasets):
        lat = np.concatenate([d.latents for d in datasets])
    paths = [p for d in datasets for p in d.paths] if all(d.paths for d in datasets) else []
    return Dataset(np.concatenate([d.images for d in datasets]),
                   np.concatenate([d.age for d in datasets]),
                   np.concatenate([d.gender for d in datasets]),
                   [s for d in datasets for s in d.subjects], lat, paths)


def holdout_folds(train: Dataset, val: Dataset) -> tuple[Dataset, FoldAssignment]:
    """Join a training and a validation set; fold 1 is the validation set.

    The two sets must not share subjects.
    """
    shared = set(train.subjects) & set(val.subjects)
    if shared:
        raise ValueError(f"{len(shared)} subjects appear in both sets, e.g. {sorted(shared)[0]}")
    fold_of = {s: 0 for s in train.subjects} | {s: 1 for s in val.subjects}
    return concat([train, val]), FoldAssignment(fold_of, 2)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def parse_overlap(text: str) -> dict[int, float]:
    """``"4:0.8,5:0.8"`` -> {4: 0.8, 5: 0.8}; empty text -> {}."""
    out: dict[int, float] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        k, _, w = part.partition(":")
        out[int(k)] = float(w) if w else 0.8
    return out


def _subject_sizes(n: int, rng: np.random.Generator) -> list[int]:
    sizes = []
    while n > 0:
        if n <= 5:
            sizes.append(n)
            break
        s = int(rng.integers(2, 6))
        if n - s == 1:
            s -= 1
        sizes.append(s)
        n -= s
    return sizes


def _render(latent: float, k: int, gender_latent: float, subject_offset: np.ndarray,
            size: int, channels: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    u = latent / k
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = size / 2 + subject_offset[0], size / 2 + subject_offset[1]
    radius = size * (0.12 + 0.30 * u)
    disc = ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2
    img = np.empty((channels, size, size))
    img[0] = 0.1 + disc * (0.2 + 0.6 * u)
    if channels > 1:
        img[1] = 0.1 + 0.8 * u
    if channels > 2:
        gender = 1 if gender_latent < 0.5 else 2
        coord = yy if gender == 1 else xx
        amp = 0.15 + 0.3 * abs(gender_latent - 0.5)
        img[2] = 0.5 + amp * np.sign(np.sin(2 * np.pi * coord / 4.0))
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(k: int, per_class: int, image_size: int = 32, overlap: dict[int, float] | None = None,
                  seed: int = 0, channels: int = 3, noise: float = 0.05, margin: float = 0.05,
                  subject_prefix: str = "s") -> Dataset:
    """Images whose age class is rendered from a latent scalar.

    Class ``c`` draws its latent from ``[c-1+margin, c-margin]``. An entry
    ``t: w`` in ``overlap`` stretches class ``t`` up to ``t+w`` and class
    ``t+1`` down to ``t-w``, so only the threshold between those two classes
    becomes ambiguous. Every class has the same latent density: a class
    whose range is stretched gets proportionally more than ``per_class``
    samples. Inside an overlap band the two classes are then equally likely,
    so any decision boundary within the band has the same error. Latents
    are stratified (one jittered draw per equal-width cell) to keep band
    counts stable.

    The rendering is a centered disc whose radius and brightness grow with
    the latent plus a brightness channel; gender comes from an independent
    per-subject latent drawn as horizontal or vertical stripes. Each subject
    contributes 2-5 samples of a single class.
    """
    if k < 2:
        raise ValueError("need at least two classes")
    if per_class < 2:
        raise ValueError("need at least two samples per class")
    overlap = dict(overlap or {})
    for t, w in overlap.items():
        if not 1 <= t < k or not 0 <= w <= 1 - margin:
            raise ValueError(f"bad overlap entry {t}: {w}")
    rng = np.random.default_rng(seed)
    images, ages, genders, subjects, latents = [], [], [], [], []
    sid = 0
    core = 1 - 2 * margin
    for c in range(1, k + 1):
        lo = c - 1 + margin - overlap.get(c - 1, 0.0)
        hi = c - margin + overlap.get(c, 0.0)
        n = int(round(per_class * (hi - lo) / core))
        cells = lo + (np.arange(n) + rng.uniform(size=n)) * (hi - lo) / n
        rng.shuffle(cells)
        pos = 0
        for size in _subject_sizes(n, rng):
            g_latent = rng.uniform()
            offset = rng.uniform(-image_size / 10, image_size / 10, size=2)
            for t in cells[pos:pos + size]:
                images.append(_render(t, k, g_latent, offset, image_size, channels, rng, noise))
                ages.append(c)
                genders.append(1 if g_latent < 0.5 else 2)
                subjects.append(f"{subject_prefix}{sid:05d}")
                latents.append(t)
            pos += size
            sid += 1
    return Dataset(np.stack(images).astype(np.float32), np.array(ages), np.array(genders),
                   subjects, np.array(latents))


def latent_threshold_accuracy(dataset: Dataset, k: int) -> float:
    """Accuracy of "older than k" decided by ``latent > k`` (synthetic data)."""
    if dataset.latents is None:
        raise ValueError("dataset carries no latents")
    return float(np.mean((dataset.latents > k) == (dataset.age > k)))


def latent_class_accuracy(dataset: Dataset) -> float:
    """Accuracy of predicting class ``floor(latent) + 1``."""
    if dataset.latents is None:
        raise ValueError("dataset carries no latents")
    k = dataset.num_classes("age")
    pred = np.clip(np.floor(dataset.latents).astype(int) + 1, 1, k)
    return float(np.mean(pred == dataset.age))
