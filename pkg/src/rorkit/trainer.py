"""SGD with Nesterov momentum, step schedules, stage runs and pipelines."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .arch import ArchSpec, DropSchedule, sample_drop_mask
from .checkpoint import save_checkpoint
from .data import ChannelStats, Dataset, augment_image, preprocess, sample_rng
from .network import RoRNet
from .objective import LossWeights, metric_record, weighted_cross_entropy
from .tensor import Tape, Tensor, backward, get_default_dtype

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "train_loss", "val_exact", "val_one_off")


class LabelSpaceError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr0: float = 0.1
    decay_epochs: tuple[int, ...] = (80, 122)
    decay_factor: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    nesterov: bool = True
    dampening: float = 0.0
    batch_size: int = 64
    max_epochs: int = 164

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and self.decay_epochs[-1] >= self.max_epochs:
            raise ValueError(f"decay epoch {self.decay_epochs[-1]} not below max_epochs {self.max_epochs}")
        if self.decay_factor <= 0:
            raise ValueError("decay_factor must be positive")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be positive and max_epochs non-negative")
        if self.nesterov and self.dampening != 0:
            raise ValueError("Nesterov momentum needs zero dampening")

    @classmethod
    def fine_tune(cls, lr: float = 1e-4, max_epochs: int = 60, **kw) -> "OptimConfig":
        return cls(lr0=lr, decay_epochs=(), max_epochs=max_epochs, **kw)

    def scaled(self, max_epochs: int) -> "OptimConfig":
        """Shrink the schedule to ``max_epochs``, moving decay points proportionally."""
        ratio = max_epochs / self.max_epochs
        decays = sorted({max(1, min(max_epochs - 1, round(e * ratio))) for e in self.decay_epochs})
        return replace(self, max_epochs=max_epochs, decay_epochs=tuple(decays))


def lr_at(epoch: int, cfg: OptimConfig) -> float:
    """``lr0 * decay_factor ** (#decay epochs strictly below epoch)``; epochs are 1-based."""
    if not 1 <= epoch <= max(cfg.max_epochs, 1):
        raise ValueError(f"epoch {epoch} outside 1..{cfg.max_epochs}")
    n = sum(1 for e in cfg.decay_epochs if e < epoch)
    return cfg.lr0 * cfg.decay_factor ** n


def decays(name: str) -> bool:
    """Weight decay skips batch-norm affine parameters and biases."""
    return not name.endswith((".gamma", ".beta", ".bias"))


@dataclass
class SGDState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    aborted_steps: int = 0


def sgd_step(params: dict[str, Tensor], state: SGDState, cfg: OptimConfig, lr: float,
             frozen: Sequence[str] = ()) -> bool:
    """One in-place SGD update from each parameter's ``.grad``.

    ``v <- mu v + (1 - dampening) d`` with ``d = g + wd * theta``; the step
    is ``d + mu v`` under Nesterov and ``v`` otherwise. If any gradient is
    non-finite nothing is updated and False is returned.
    """
    active = [(n, t) for n, t in params.items()
              if t.grad is not None and not any(n.startswith(p) for p in frozen)]
    if any(not np.all(np.isfinite(t.grad)) for _, t in active):
        state.aborted_steps += 1
        logger.warning("non-finite gradient; step aborted")
        return False
    mu = cfg.momentum
    for name, t in active:
        d = t.grad.astype(t.data.dtype, copy=True)
        if cfg.weight_decay and decays(name):
            d += cfg.weight_decay * t.data
        if mu:
            v = state.velocity.get(name, 0.0)
            v = mu * v + (1 - cfg.dampening) * d
            state.velocity[name] = v
            d = d + mu * v if cfg.nesterov else v
        t.data = (t.data - lr * d).astype(t.data.dtype)
    return True


# ---------------------------------------------------------------------------
# data batching
# ---------------------------------------------------------------------------

def _batch(dataset: Dataset, idx: np.ndarray, model: RoRNet, stats: ChannelStats,
           policy: str, seed: int, epoch: int) -> Tensor:
    out_hw = model.spec.input_shape[1:]
    imgs = []
    for i in idx:
        img = dataset.images[i]
        if policy != "none" or tuple(img.shape[1:]) != tuple(out_hw):
            img = augment_image(img, sample_rng(seed, int(i), epoch), out_hw, policy)
        imgs.append(img)
    return Tensor(preprocess(np.stack(imgs), stats), dtype=get_default_dtype())


def predict(model: RoRNet, dataset: Dataset, batch_size: int = 128) -> np.ndarray:
    """Eval-mode argmax predictions (1-based)."""
    stats = model.preprocess_stats
    if stats is None:
        stats = ChannelStats.of(dataset.images)
    preds = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        x = _batch(dataset, idx, model, stats, "none", 0, 0)
        logits = model.forward(x, mode="eval")
        preds.append(np.argmax(logits.data, axis=1) + 1)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: RoRNet, dataset: Dataset, task: str = "age", batch_size: int = 128) -> dict:
    """Exact / 1-off accuracy and confusion matrix, eval mode, no augmentation."""
    data = dataset.with_label(task)
    k = model.spec.num_classes
    labels = data.labels(task)
    if len(data) == 0:
        raise LabelSpaceError(f"dataset has no {task} labels")
    if labels.max() > k:
        raise LabelSpaceError(f"{task} label {labels.max()} exceeds model head size {k}")
    preds = predict(model, data, batch_size)
    rec = metric_record(preds, labels, k, ordered=task == "age")
    rec["n"] = int(len(data))
    return rec


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

@dataclass
class PipelineStage:
    name: str
    train: Dataset
    head_classes: int
    optim: OptimConfig
    val: Dataset | None = None
    task: str = "age"
    init: str = "scratch"  # scratch | from
    arch: ArchSpec | None = None
    drop_pL: float | None = None  # stochastic depth off when None
    loss_weights: LossWeights | None = None
    augment: str = "none"
    seed: int = 0
    freeze: tuple[str, ...] = ()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_exact: float | None
    val_one_off: float | None

    def row(self) -> list:
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return [self.epoch, repr(self.lr), repr(self.train_loss), fmt(self.val_exact), fmt(self.val_one_off)]


@dataclass
class StageResult:
    model: RoRNet
    log: list[EpochRecord]
    status: str = "ok"  # ok | diverged
    best_epoch: int | None = None
    best_val_exact: float | None = None


def write_log(log: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for rec in log:
            w.writerow(rec.row())


def _snapshot(model: RoRNet) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_arrays().items()}


def run_stage(stage: PipelineStage, model: RoRNet | None = None, checkpoint_dir=None,
              log_path=None) -> StageResult:
    """Train for ``stage.optim.max_epochs`` epochs.

    ``init="scratch"`` builds a fresh model from ``stage.arch``;
    ``init="from"`` continues training ``model`` whose head must already
    have ``stage.head_classes`` outputs. The returned model is the one at
    the end of the last completed epoch; when a loss turns non-finite the
    stage stops and the model is restored to the last good epoch.
    """
    cfg = stage.optim
    train = stage.train.with_label(stage.task)
    if stage.init == "scratch":
        if stage.arch is None:
            raise ValueError(f"stage {stage.name!r}: scratch init needs an arch spec")
        model = RoRNet(stage.arch.with_classes(stage.head_classes), seed=stage.seed)
    elif stage.init == "from":
        if model is None:
            raise ValueError(f"stage {stage.name!r}: init=from needs a model")
        if model.spec.num_classes != stage.head_classes:
            raise LabelSpaceError(
                f"stage {stage.name!r}: model head has {model.spec.num_classes} outputs, "
                f"stage expects {stage.head_classes}; call replace_head first")
    else:
        raise ValueError(f"unknown init {stage.init!r}")
    labels = train.labels(stage.task)
    if len(train) and labels.max() > stage.head_classes:
        raise LabelSpaceError(f"{stage.task} label {labels.max()} exceeds head size {stage.head_classes}")
    if stage.loss_weights is not None and len(stage.loss_weights) != stage.head_classes:
        raise ValueError(f"{len(stage.loss_weights)} loss weights for {stage.head_classes} classes")

    model.drop_schedule = (DropSchedule(model.spec.num_blocks, 1.0, stage.drop_pL)
                           if stage.drop_pL is not None else None)
    if cfg.max_epochs == 0:
        return StageResult(model, [])
    stats = ChannelStats.of(train.images)
    model.preprocess_stats = stats

    state = SGDState()
    log: list[EpochRecord] = []
    status = "ok"
    best_epoch, best_val = None, None
    good = _snapshot(model)
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([stage.seed, epoch, 0]).permutation(n)
        drop_rng = np.random.default_rng([stage.seed, epoch, 1])
        losses = []
        diverged = False
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = _batch(train, idx, model, stats, stage.augment, stage.seed, epoch)
            mask = sample_drop_mask(model.drop_schedule, drop_rng) if model.drop_schedule else None
            model.zero_grad()
            with Tape():
                logits = model.forward(x, mode="train", drop_mask=mask)
                if not np.all(np.isfinite(logits.data)):
                    diverged = True
                    break
                loss = weighted_cross_entropy(logits, labels[idx], stage.loss_weights)
            if not np.isfinite(loss.item()):
                diverged = True
                break
            backward(loss)
            sgd_step(model.params, state, cfg, lr, stage.freeze)
            losses.append(loss.item() * len(idx))
        if diverged:
            logger.error("stage %s diverged in epoch %d; restoring epoch %d", stage.name, epoch, epoch - 1)
            model.load_state_arrays(good)
            status = "diverged"
            break
        train_loss = float(np.sum(losses) / n)
        val_exact = val_one_off = None
        if stage.val is not None and len(stage.val.with_label(stage.task)):
            rec = evaluate(model, stage.val, stage.task)
            val_exact, val_one_off = rec["exact"], rec["one_off"]
        log.append(EpochRecord(epoch, lr, train_loss, val_exact, val_one_off))
        logger.info("%s epoch %d lr %.4g loss %.4f val %s", stage.name, epoch, lr, train_loss, val_exact)
        good = _snapshot(model)
        score = val_exact if val_exact is not None else -train_loss
        if best_val is None or score > best_val:
            best_epoch, best_val = epoch, score
            if ckpt is not None:
                save_checkpoint(ckpt / "best", model, stage.name, epoch,
                                {"val_exact": val_exact, "val_one_off": val_one_off,
                                 "train_loss": train_loss})
        if log_path is not None:
            write_log(log, log_path)
    if ckpt is not None:
        last = log[-1] if log else None
        save_checkpoint(ckpt / "last", model, stage.name, last.epoch if last else 0,
                        {"train_loss": last.train_loss if last else None,
                         "val_exact": last.val_exact if last else None,
                         "status": status})
    if log_path is not None:
        write_log(log, log_path)
    return StageResult(model, log, status, best_epoch,
                       best_val if stage.val is not None and best_val is not None else None)


def replace_head(model: RoRNet, new_classes: int, rng: np.random.Generator) -> RoRNet:
    """Fresh linear head with ``new_classes`` outputs; body left bit-identical."""
    return model.replace_head(new_classes, rng)


def run_pipeline(stages: Sequence[PipelineStage], checkpoint_root=None, log_root=None,
                 on_handoff=None) -> list[StageResult]:
    """Run stages in order; every ``init="from"`` stage receives the previous
    stage's model with its head replaced. ``on_handoff(stage, model, before)``
    is called right after each head swap with the body checksum taken just
    before it, so callers can confirm the body survived the swap."""
    results: list[StageResult] = []
    model = None
    for i, stage in enumerate(stages):
        if stage.init == "from":
            if model is None:
                raise ValueError(f"stage {stage.name!r} has no predecessor to start from")
            model = copy.deepcopy(model)  # earlier results keep their own model
            before = model.body_checksum() if on_handoff is not None else None
            replace_head(model, stage.head_classes, np.random.default_rng([stage.seed, 7919]))
            if on_handoff is not None:
                on_handoff(stage, model, before)
        ckpt = Path(checkpoint_root) / stage.name if checkpoint_root else None
        log_path = None
        if log_root:
            Path(log_root).mkdir(parents=True, exist_ok=True)
            log_path = Path(log_root) / f"{stage.name}.csv"
        res = run_stage(stage, model, ckpt, log_path)
        results.append(res)
        if res.status != "ok":
            break
        model = res.model
    return results
