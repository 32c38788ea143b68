"""Static SVG figures: per-epoch error curves and the aging curve.

Rendering goes through :class:`matplotlib.figure.Figure` directly (no
pyplot state). The SVG hash salt is fixed and the date stamp dropped so
identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib
from matplotlib.figure import Figure

from .aging import AgingCurve

STYLE = {
    "svg.hashsalt": "rorkit",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


class LogFormatError(ValueError):
    pass


def read_log(path) -> dict[int, float]:
    """Epoch -> validation error in percent (NaN when the epoch has no validation)."""
    path = Path(path)
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise LogFormatError(f"{path}: {e.strerror}") from None
    out: dict[int, float] = {}
    for i, row in enumerate(rows, start=2):
        try:
            epoch = int(row["epoch"])
            val = row.get("val_exact") or ""
            out[epoch] = 100.0 * (1.0 - float(val)) if val.strip() else math.nan
        except (KeyError, TypeError, ValueError):
            raise LogFormatError(f"{path}:{i}: expected epoch and val_exact columns") from None
    return out


def _save(fig: Figure, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    return out


def plot_training_curves(runs: Mapping[str, Mapping[int, float]], out,
                         title: str = "validation error") -> Path:
    """One line per run on shared axes over the union of all epochs.

    Epochs a run does not cover are NaN, which breaks the line instead of
    interpolating across the gap.
    """
    epochs = sorted(set().union(*(r.keys() for r in runs.values()))) if runs else []
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(5.0, 3.2))
        ax = fig.add_subplot()
        for label, series in runs.items():
            ax.plot(epochs, [series.get(e, math.nan) for e in epochs], label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("error (%)")
        ax.set_title(title)
        if runs:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, out)


def plot_logs(paths: Sequence, out, labels: Sequence[str] | None = None) -> Path:
    labels = list(labels) if labels else [Path(p).stem for p in paths]
    if len(labels) != len(paths):
        raise ValueError(f"{len(labels)} labels for {len(paths)} logs")
    # repeated stems (e.g. two runs' age.csv) get their parent directory prepended
    if len(set(labels)) != len(labels):
        labels = [f"{Path(p).parent.name}/{Path(p).stem}" for p in paths]
    return plot_training_curves({lab: read_log(p) for lab, p in zip(labels, paths)}, out)


def plot_aging_curve(curve: AgingCurve, out, title: str = "aging curve") -> Path:
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(4.5, 3.0))
        ax = fig.add_subplot()
        ks = [k for k, _ in curve.points]
        ax.plot(ks, [100.0 * a for _, a in curve.points], marker="o")
        ax.set_xticks(range(1, curve.num_classes))
        ax.set_xlabel("k (older than group k?)")
        ax.set_ylabel("binary accuracy (%)")
        ax.set_title(title + (" (partial)" if curve.partial else ""))
        fig.tight_layout()
        return _save(fig, out)
