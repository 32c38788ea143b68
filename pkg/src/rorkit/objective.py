"""Class-weighted softmax cross-entropy and ordinal classification metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, apply_op

AGE_GROUPS = ("0-2", "4-6", "8-13", "15-20", "25-32", "38-43", "48-53", "60-")

# per-class multipliers for the eight age groups
LOSS_WEIGHT_PRESETS = {
    "LW0": (1, 1, 1, 1, 1, 1, 1, 1),
    "LW1": (1, 1, 1, 0.9, 0.8, 0.8, 0.9, 1),
    "LW2": (1, 1, 1, 1.1, 1.2, 1.2, 1.1, 1),
    "LW3": (1, 1, 1, 1.3, 1.5, 1.5, 1.3, 1),
}


@dataclass(frozen=True)
class LossWeights:
    weights: tuple[float, ...]
    name: str | None = None

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if not w or any(not np.isfinite(v) or v <= 0 for v in w):
            raise ValueError(f"loss weights must be positive and finite, got {w}")
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, k: int, value: float = 1.0) -> "LossWeights":
        return cls((value,) * k)

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        return cls(LOSS_WEIGHT_PRESETS[name], name)

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        """Accept a preset name (``LW3``) or comma-separated numbers."""
        text = text.strip()
        if text.upper() in LOSS_WEIGHT_PRESETS:
            return cls.preset(text.upper())
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise ValueError(f"cannot parse loss weights {text!r}") from None
        return cls(vals)

    def format(self) -> str:
        return ",".join(f"{v:g}" for v in self.weights)


@dataclass(frozen=True)
class LabelSpace:
    """Labels 1..K; ``ordered`` enables the 1-off metric."""

    num_classes: int
    ordered: bool = True
    descriptions: tuple[str, ...] = field(default=())

    @classmethod
    def age_groups(cls) -> "LabelSpace":
        return cls(len(AGE_GROUPS), True, AGE_GROUPS)


def _check_labels(labels: np.ndarray, k: int) -> None:
    if labels.size and (labels.min() < 1 or labels.max() > k):
        bad = labels[(labels < 1) | (labels > k)][0]
        raise ValueError(f"label {bad} outside 1..{k}")


def per_sample_cross_entropy(logits: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Unweighted -log softmax(z)[y] for each row, in float64."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64) - 1
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(y)), y]


def weighted_cross_entropy(logits: Tensor, labels: Sequence[int], weights: LossWeights | None = None,
                           reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy with each sample's loss multiplied by ``w[y]``.

    ``reduction="mean"`` returns the plain batch mean of the weighted terms;
    ``"none"`` returns them per sample. Labels are 1-based.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be batch x K, got {logits.shape}")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeError(f"{y.shape[0] if y.ndim else 0} labels for {n} logit rows")
    _check_labels(y, k)
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("non-finite logits")
    w = np.ones(k) if weights is None else np.asarray(weights.weights, dtype=np.float64)
    if w.shape != (k,):
        raise ShapeError(f"{w.size} loss weights for {k} classes")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    terms = w[y - 1] * (np.log(ez.sum(axis=1)) - z[rows, y - 1])
    dt = logits.data.dtype

    def dlogits(per_row: np.ndarray) -> np.ndarray:
        g = probs.copy()
        g[rows, y - 1] -= 1.0
        return (g * (w[y - 1] * per_row)[:, None]).astype(dt)

    if reduction == "mean":
        return apply_op("weighted_cross_entropy", (logits,), np.asarray(terms.mean(), dtype=dt),
                        lambda g: (dlogits(np.full(n, float(np.sum(g)) / n)),))
    if reduction == "none":
        return apply_op("weighted_cross_entropy", (logits,), terms.astype(dt),
                        lambda g: (dlogits(np.asarray(g, dtype=np.float64)),))
    raise ValueError(f"unknown reduction {reduction!r}")


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    t = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions for {t.size} labels")
    if p.size == 0:
        raise ValueError("empty prediction list")
    return p, t


def exact_accuracy(preds, labels) -> float:
    p, t = _pair(preds, labels)
    return float(np.count_nonzero(p == t)) / p.size


def one_off_accuracy(preds, labels, space: LabelSpace | None = None) -> float:
    """Fraction of predictions within one ordinal group of the label."""
    if space is not None and not space.ordered:
        raise ValueError("1-off accuracy needs an ordered label space")
    p, t = _pair(preds, labels)
    return float(np.count_nonzero(np.abs(p - t) <= 1)) / p.size


def confusion_matrix(preds, labels, k: int) -> np.ndarray:
    """Counts with rows indexed by true label and columns by prediction."""
    p, t = _pair(preds, labels)
    _check_labels(t, k)
    _check_labels(p, k)
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (t - 1, p - 1), 1)
    return m


def metric_record(preds, labels, k: int, ordered: bool = True) -> dict:
    """JSON-ready ``{exact, one_off, confusion}``."""
    rec = {"exact": exact_accuracy(preds, labels)}
    rec["one_off"] = one_off_accuracy(preds, labels) if ordered else None
    rec["confusion"] = confusion_matrix(preds, labels, k).tolist()
    return rec


def fold_summary(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1 denominator)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no fold values")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std


def format_mean_std(values: Sequence[float], percent: bool = True) -> str:
    mean, std = fold_summary(values)
    scale = 100.0 if percent else 1.0
    return f"{mean * scale:.2f}±{std * scale:.2f}"
