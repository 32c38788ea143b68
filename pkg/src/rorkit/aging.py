"""Ordinal "older than group k?" decomposition and the aging curve.

For each threshold k in 1..K-1 a fresh two-class model is trained to tell
samples with label > k from those with label <= k. The validation
accuracies, ordered by k, form the aging curve; low points mark adjacent
groups that are hard to separate, and :func:`suggest_weights` turns those
into per-class loss weights.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .arch import ArchSpec
from .data import Dataset, FoldAssignment, assign_folds
from .objective import LossWeights
from .trainer import OptimConfig, PipelineStage, evaluate, run_stage

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = (1.0, 1.3, 1.5)


@dataclass
class BinarySplit:
    k: int
    positives: np.ndarray  # indices with label > k
    negatives: np.ndarray  # indices with label <= k
    dataset: Dataset

    def labels(self) -> np.ndarray:
        """Two-class labels: 2 for "older than k", 1 otherwise."""
        out = np.ones(len(self.dataset), dtype=np.int64)
        out[self.positives] = 2
        return out

    def as_dataset(self) -> Dataset:
        d = self.dataset
        return Dataset(d.images, self.labels(), d.gender, d.subjects, d.latents, d.paths)


def binarize(dataset: Dataset, k: int, num_classes: int | None = None) -> BinarySplit:
    labelled = dataset.with_label("age")
    K = num_classes or labelled.num_classes("age")
    if not 1 <= k <= K - 1:
        raise ValueError(f"threshold k={k} outside 1..{K - 1}")
    y = labelled.age
    return BinarySplit(k, np.flatnonzero(y > k), np.flatnonzero(y <= k), labelled)


@dataclass
class AgingCurve:
    points: list[tuple[int, float]]
    num_classes: int
    failed: list[int] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failed) or len(self.points) != self.num_classes - 1

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([a for _, a in self.points])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["k", "accuracy"])
            for k, a in self.points:
                w.writerow([k, repr(float(a))])

    @classmethod
    def read_csv(cls, path, num_classes: int | None = None) -> "AgingCurve":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        pts = [(int(r["k"]), float(r["accuracy"])) for r in rows]
        return cls(pts, num_classes or len(pts) + 1)


def compute_curve(dataset: Dataset, arch: ArchSpec, optim: OptimConfig,
                  folds: FoldAssignment | None = None, val_fold: int = 0, seed: int = 0,
                  drop_pL: float | None = None, augment: str = "none", workers: int = 1) -> AgingCurve:
    """Train one binary classifier per threshold and collect validation accuracy.

    Train/validation come from a subject-exclusive fold split (``val_fold``
    held out). All K-1 runs share the seed and schedule. Runs that diverge
    are left out and listed in ``AgingCurve.failed``.
    """
    data = dataset.with_label("age")
    K = data.num_classes("age")
    if K < 3:
        raise ValueError(f"aging curve needs at least 3 ordered classes, got {K}")
    folds = folds or assign_folds(data, 5, seed)
    train_idx, val_idx = folds.split(data, val_fold)

    def one(k: int):
        split = binarize(data, k, K).as_dataset()
        stage = PipelineStage(f"older-than-{k}", split.subset(train_idx), 2, optim,
                              val=split.subset(val_idx), arch=arch, drop_pL=drop_pL,
                              augment=augment, seed=seed)
        res = run_stage(stage)
        if res.status != "ok":
            return k, None
        acc = evaluate(res.model, stage.val)["exact"]
        logger.info("threshold %d: validation accuracy %.4f", k, acc)
        return k, acc

    ks = range(1, K)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, ks))
    else:
        results = [one(k) for k in ks]
    results.sort()
    return AgingCurve([(k, a) for k, a in results if a is not None], K,
                      [k for k, a in results if a is None])


def hard_thresholds(curve: AgingCurve, frac: float = 0.25, flat_tol: float = 1e-3) -> list[int]:
    """Thresholds whose accuracy is below ``min + frac * range``.

    A curve whose range is at most ``flat_tol`` has no hard thresholds.
    """
    acc = curve.accuracies
    if acc.size == 0:
        return []
    lo, span = float(acc.min()), float(acc.max() - acc.min())
    if span <= flat_tol:
        return []
    return [k for k, a in curve.points if a < lo + frac * span]


def suggest_weights(curve: AgingCurve, levels: Sequence[float] = DEFAULT_LEVELS,
                    frac: float = 0.25, flat_tol: float = 1e-3) -> LossWeights:
    """Per-group loss weights from the curve's dips.

    Group g touches thresholds g-1 (below it) and g (above it). Its tier is
    the number of those that are hard (0, 1 or 2) and its weight is
    ``levels[min(tier, len(levels) - 1)]``. A dip over thresholds 4-6 with
    eight groups therefore gives tiers (0,0,0,1,2,2,1,0).
    """
    levels = [float(v) for v in levels]
    if not levels or levels != sorted(levels):
        raise ValueError(f"levels must be a nonempty ascending list, got {levels}")
    hard = set(hard_thresholds(curve, frac, flat_tol))
    K = curve.num_classes
    tiers = [(g - 1 in hard) + (g in hard) for g in range(1, K + 1)]
    return LossWeights(tuple(levels[min(t, len(levels) - 1)] for t in tiers))
