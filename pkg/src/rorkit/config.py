"""Flat ``key = value`` config files with section headers.

An architecture file holds the keys of one ``[arch]`` section (the header
may be omitted)::

    block_type = basic
    groups = 3,4,6,3
    m = 3
    policy = A+B
    widths = 16,32,64,128

A run config adds ``[run]``, one ``[stage:NAME]`` section per pipeline stage
(in file order) and optionally ``[curve]``. Relative paths are resolved
against the config file's directory.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .arch import STANDARD_CONFIGS, ArchSpec, ArchSpecError
from .objective import LossWeights
from .trainer import OptimConfig, PipelineStage

ARCH_KEYS = {
    "preset": None,
    "block_type": "block_type",
    "groups": "group_blocks",
    "m": "levels",
    "k": "width_factor",
    "widths": "base_widths",
    "policy": "shortcut_policy",
    "order": "activation_order",
    "classes": "num_classes",
    "input": "input_shape",
    "depth": "depth_label",
}
OPTIM_KEYS = {"lr", "decay_epochs", "decay_factor", "weight_decay", "momentum", "nesterov",
              "dampening", "batch_size", "max_epochs"}
STAGE_KEYS = OPTIM_KEYS | {"task", "head", "init", "drop_pL", "loss_weights", "augment", "freeze",
                           "manifest", "val_manifest", "folds", "val_fold", "seed"}
CURVE_KEYS = OPTIM_KEYS | {"manifest", "val_manifest", "folds", "val_fold", "levels", "workers",
                          "drop_pL", "augment"}
RUN_KEYS = {"arch", "seed", "metrics"}
METRICS = ("exact", "one_off", "confusion")


class ConfigError(ValueError):
    """Bad config value; ``field`` is ``section.key``."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _read(path: Path, default_section: str | None = None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str  # keys are case sensitive (drop_pL)
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError("file", f"cannot read {path}: {e.strerror}") from None
    if default_section and not text.lstrip().startswith("["):
        text = f"[{default_section}]\n" + text
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError("file", str(e).splitlines()[0]) from None
    return cp


def _check_keys(section: configparser.SectionProxy, allowed, prefix: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{prefix}.{key}", "unknown key")


def _convert(prefix: str, key: str, raw: str, fn):
    try:
        return fn(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix}.{key}", f"bad value {raw!r} ({e})") from None


def arch_from_section(section: configparser.SectionProxy | dict, prefix: str = "arch") -> ArchSpec:
    _check_keys(section, ARCH_KEYS, prefix)
    kw: dict = {}
    if "preset" in section:
        name = section["preset"]
        if name not in STANDARD_CONFIGS:
            raise ConfigError(f"{prefix}.preset", f"unknown preset {name!r}; known: {sorted(STANDARD_CONFIGS)}")
        block, groups, depth = STANDARD_CONFIGS[name]
        kw.update(block_type=block, group_blocks=groups, depth_label=depth)
    conv = {"groups": _ints, "widths": _ints, "input": _ints, "m": int, "k": int,
            "classes": int, "depth": int}
    for key, attr in ARCH_KEYS.items():
        if attr is None or key not in section:
            continue
        kw[attr] = _convert(prefix, key, section[key], conv.get(key, str.strip))
    try:
        return ArchSpec(**kw).validate()
    except ArchSpecError as e:
        raise ConfigError(f"{prefix}.{e.field}", str(e).split(": ", 1)[1]) from None


def load_arch(path) -> ArchSpec:
    cp = _read(Path(path), "arch")
    if "arch" not in cp:
        raise ConfigError("arch", f"no [arch] section in {path}")
    return arch_from_section(cp["arch"])


def _optim(section, prefix: str, base: OptimConfig | None = None) -> OptimConfig:
    base = base or OptimConfig()
    kw = dict(lr0=base.lr0, decay_epochs=base.decay_epochs, decay_factor=base.decay_factor,
              weight_decay=base.weight_decay, momentum=base.momentum, nesterov=base.nesterov,
              dampening=base.dampening, batch_size=base.batch_size, max_epochs=base.max_epochs)
    conv = {"lr": ("lr0", float), "decay_epochs": ("decay_epochs", _ints),
            "decay_factor": ("decay_factor", float), "weight_decay": ("weight_decay", float),
            "momentum": ("momentum", float), "nesterov": ("nesterov", _bool),
            "dampening": ("dampening", float), "batch_size": ("batch_size", int),
            "max_epochs": ("max_epochs", int)}
    for key, (attr, fn) in conv.items():
        if key in section:
            kw[attr] = _convert(prefix, key, section[key], fn)
    try:
        return OptimConfig(**kw)
    except ValueError as e:
        raise ConfigError(f"{prefix}.optim", str(e)) from None


def _path(base: Path, prefix: str, key: str, raw: str) -> Path:
    p = (base / raw.strip()).resolve()
    if not p.exists():
        raise ConfigError(f"{prefix}.{key}", f"file not found: {p}")
    return p


@dataclass
class DataRef:
    """Where a stage's data comes from.

    Either ``val_manifest`` names a separate validation set, or ``folds``
    splits ``manifest`` subject-exclusively and holds out ``val_fold``.
    With neither there is no validation set.
    """

    manifest: Path
    val_manifest: Path | None = None
    folds: int | None = None
    val_fold: int = 0


@dataclass
class StageConfig:
    name: str
    data: DataRef
    head: int
    optim: OptimConfig
    task: str = "age"
    init: str = "scratch"
    drop_pL: float | None = None
    loss_weights: LossWeights | None = None
    augment: str = "none"
    freeze: tuple[str, ...] = ()
    seed: int = 0

    def to_stage(self, arch: ArchSpec, train, val) -> PipelineStage:
        return PipelineStage(self.name, train, self.head, self.optim, val=val, task=self.task,
                             init=self.init, arch=arch, drop_pL=self.drop_pL,
                             loss_weights=self.loss_weights, augment=self.augment,
                             seed=self.seed, freeze=self.freeze)


@dataclass
class CurveConfig:
    data: DataRef
    optim: OptimConfig
    levels: tuple[float, ...] = (1.0, 1.3, 1.5)
    workers: int = 1
    drop_pL: float | None = None
    augment: str = "none"


@dataclass
class RunConfig:
    path: Path
    arch: ArchSpec
    seed: int = 0
    metrics: tuple[str, ...] = ("exact", "one_off", "confusion")
    stages: list[StageConfig] = field(default_factory=list)
    curve: CurveConfig | None = None

    def inputs(self) -> list[Path]:
        """Every file the run reads, for the run manifest."""
        out = [self.path]
        refs = [s.data for s in self.stages] + ([self.curve.data] if self.curve else [])
        for ref in refs:
            out += [p for p in (ref.manifest, ref.val_manifest) if p is not None]
        return list(dict.fromkeys(out))


def _data_ref(section, prefix: str, base: Path) -> DataRef:
    if "manifest" not in section:
        raise ConfigError(f"{prefix}.manifest", "missing")
    ref = DataRef(_path(base, prefix, "manifest", section["manifest"]))
    if "val_manifest" in section:
        ref.val_manifest = _path(base, prefix, "val_manifest", section["val_manifest"])
    if "folds" in section:
        ref.folds = _convert(prefix, "folds", section["folds"], int)
        if ref.folds < 2:
            raise ConfigError(f"{prefix}.folds", f"need at least 2 folds, got {ref.folds}")
        if ref.val_manifest is not None:
            raise ConfigError(f"{prefix}.folds", "give either folds or val_manifest, not both")
    if "val_fold" in section:
        ref.val_fold = _convert(prefix, "val_fold", section["val_fold"], int)
        if ref.folds is None or not 0 <= ref.val_fold < ref.folds:
            raise ConfigError(f"{prefix}.val_fold", f"{ref.val_fold} is not a fold index")
    return ref


def _stage(name: str, section, base: Path, seed: int) -> StageConfig:
    prefix = f"stage:{name}"
    _check_keys(section, STAGE_KEYS, prefix)
    if "head" not in section:
        raise ConfigError(f"{prefix}.head", "missing")
    st = StageConfig(name, _data_ref(section, prefix, base),
                     _convert(prefix, "head", section["head"], int),
                     _optim(section, prefix), seed=seed)
    if st.head < 1:
        raise ConfigError(f"{prefix}.head", f"need at least one class, got {st.head}")
    st.task = section.get("task", "age")
    if st.task not in ("age", "gender"):
        raise ConfigError(f"{prefix}.task", f"expected age or gender, got {st.task!r}")
    st.init = section.get("init", "scratch")
    if st.init not in ("scratch", "from"):
        raise ConfigError(f"{prefix}.init", f"expected scratch or from, got {st.init!r}")
    if "drop_pL" in section and section["drop_pL"].strip().lower() not in ("", "none", "off"):
        st.drop_pL = _convert(prefix, "drop_pL", section["drop_pL"], float)
    if section.get("loss_weights", "").strip():
        st.loss_weights = _convert(prefix, "loss_weights", section["loss_weights"], LossWeights.parse)
        if len(st.loss_weights) != st.head:
            raise ConfigError(f"{prefix}.loss_weights",
                              f"{len(st.loss_weights)} weights for {st.head} classes")
    st.augment = section.get("augment", "none")
    if st.augment not in ("none", "scale_aspect"):
        raise ConfigError(f"{prefix}.augment", f"expected none or scale_aspect, got {st.augment!r}")
    st.freeze = tuple(v.strip() for v in section.get("freeze", "").split(",") if v.strip())
    if "seed" in section:
        st.seed = _convert(prefix, "seed", section["seed"], int)
    return st


def _curve(section, base: Path) -> CurveConfig:
    _check_keys(section, CURVE_KEYS, "curve")
    cc = CurveConfig(_data_ref(section, "curve", base), _optim(section, "curve"))
    if cc.data.folds is None and cc.data.val_manifest is None:
        cc.data.folds = 5
    if "levels" in section:
        cc.levels = _convert("curve", "levels", section["levels"], _floats)
        if not cc.levels or list(cc.levels) != sorted(cc.levels):
            raise ConfigError("curve.levels", f"need a nonempty ascending list, got {cc.levels}")
    if "workers" in section:
        cc.workers = _convert("curve", "workers", section["workers"], int)
    if "drop_pL" in section:
        cc.drop_pL = _convert("curve", "drop_pL", section["drop_pL"], float)
    cc.augment = section.get("augment", "none")
    return cc


def load_run_config(path) -> RunConfig:
    path = Path(path).resolve()
    cp = _read(path)
    base = path.parent
    for name in cp.sections():
        if name not in ("run", "arch", "curve") and not name.startswith("stage:"):
            raise ConfigError(name, "unknown section")
    run = cp["run"] if "run" in cp else {}
    if run:
        _check_keys(run, RUN_KEYS, "run")
    if "arch" in cp:
        arch = arch_from_section(cp["arch"])
    elif "arch" in run:
        arch = load_arch(_path(base, "run", "arch", run["arch"]))
    else:
        raise ConfigError("run.arch", "no [arch] section and no arch file given")
    seed = _convert("run", "seed", run.get("seed", "0"), int)
    metrics = tuple(m.strip() for m in run.get("metrics", ",".join(METRICS)).split(",") if m.strip())
    for m in metrics:
        if m not in METRICS:
            raise ConfigError("run.metrics", f"unknown metric {m!r}; known: {METRICS}")
    cfg = RunConfig(path, arch, seed, metrics)
    for name in cp.sections():
        if name.startswith("stage:"):
            cfg.stages.append(_stage(name[len("stage:"):], cp[name], base, seed))
    if cfg.stages and cfg.stages[0].init == "from":
        raise ConfigError(f"stage:{cfg.stages[0].name}.init", "first stage cannot start from a predecessor")
    if "curve" in cp:
        cfg.curve = _curve(cp["curve"], base)
    return cfg
