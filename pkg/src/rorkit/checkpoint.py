"""Checkpoint directories: ``manifest.json`` plus ``tensors.bin``.

``tensors.bin`` is the concatenation of serialized tensors (see
:func:`rorkit.tensor.write_tensor`) in the order listed under
``"tensors"`` in the manifest.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .arch import ArchSpec, DropSchedule
from .data import ChannelStats
from .network import RoRNet
from .tensor import read_tensor, write_tensor

FORMAT_VERSION = 1


def save_checkpoint(path, model: RoRNet, stage: str = "", epoch: int = 0,
                    metrics: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = model.state_arrays()
    with open(path / "tensors.bin", "wb") as f:
        for arr in arrays.values():
            write_tensor(f, arr)
    sched = model.drop_schedule
    stats = model.preprocess_stats
    manifest = {
        "format": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "stage": stage,
        "epoch": epoch,
        "metrics": metrics or {},
        "drop_schedule": None if sched is None else
        {"num_blocks": sched.num_blocks, "p0": sched.p0, "pL": sched.pL},
        "preprocess": None if stats is None else stats.to_dict(),
        "tensors": list(arrays),
        "tensors_sha256": hashlib.sha256((path / "tensors.bin").read_bytes()).hexdigest(),
    }
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[RoRNet, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    spec = ArchSpec.from_dict(manifest["spec"])
    sched = manifest.get("drop_schedule")
    model = RoRNet(spec, seed=0, drop_schedule=DropSchedule(**sched) if sched else None)
    arrays = {}
    with open(path / "tensors.bin", "rb") as f:
        for name in manifest["tensors"]:
            arrays[name] = read_tensor(f)
    model.load_state_arrays(arrays)
    if manifest.get("preprocess"):
        model.preprocess_stats = ChannelStats.from_dict(manifest["preprocess"])
    return model, manifest
