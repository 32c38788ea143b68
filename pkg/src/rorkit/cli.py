"""``rorkit`` command line: inspect, train, eval, curve, plot, synth.

Every command writes its outputs under ``--out`` together with
``run_manifest.json`` (inputs and their hashes, seeds, artifacts and their
hashes). Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .aging import compute_curve, hard_thresholds, suggest_weights
from .arch import ArchSpecError, apply_policy, build, count_depth
from .checkpoint import load_checkpoint
from .config import ConfigError, DataRef, load_arch, load_run_config
from .data import (Dataset, ManifestError, assign_folds, holdout_folds, load_manifest, parse_overlap,
                   synth_dataset, write_manifest)
from .network import RoRNet
from .objective import format_mean_std, fold_summary
from .plotting import LogFormatError, plot_aging_curve, plot_logs
from .tensor import set_default_dtype
from .trainer import LabelSpaceError, evaluate, run_pipeline

logger = logging.getLogger("rorkit")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
USER_ERRORS = (ConfigError, ArchSpecError, ManifestError, LabelSpaceError, LogFormatError,
               FileNotFoundError)


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.args = args
        self.argv = list(argv)
        self.inputs: list[Path] = []
        self.artifacts: list[Path] = []
        self.seeds: dict[str, int] = {"seed": args.seed}

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, *paths) -> None:
        for p in paths:
            p = Path(p)
            if p.is_dir():
                self.artifacts += sorted(q for q in p.rglob("*") if q.is_file())
            else:
                self.artifacts.append(p)

    def write_json(self, rel: str, obj) -> Path:
        p = self.path(rel)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
        self.add(p)
        return p

    def finish(self, status: str) -> None:
        def rel(p: Path) -> str:
            try:
                return str(p.resolve().relative_to(self.out.resolve()))
            except ValueError:
                return str(p)

        def hashes(paths) -> dict[str, str]:
            return {rel(p): sha256_file(p) for p in dict.fromkeys(paths) if p.is_file()}

        manifest = {
            "rorkit": __version__,
            "command": self.args.command,
            "argv": self.argv,
            "status": status,
            "seeds": self.seeds,
            "precision": self.args.precision,
            "threads": self.args.threads,
            "inputs": hashes(Path(p).resolve() for p in self.inputs),
            "artifacts": hashes(self.artifacts),
        }
        (self.out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_inspect(args, run: Run) -> int:
    run.inputs.append(Path(args.spec))
    spec = load_arch(args.spec)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        depth = count_depth(spec)
    graph = apply_policy(build(spec), spec.shortcut_policy)
    report = {
        "depth": depth,
        "depth_label": spec.depth_label,
        "warnings": [str(w.message) for w in caught],
        "parameters": RoRNet(spec, seed=args.seed).num_parameters(),
        "census": graph.census(),
        "spec": spec.to_dict(),
    }
    run.write_json("graph.json", graph.to_json())
    dot = run.path("graph.dot")
    dot.write_text(graph.to_dot())
    run.add(dot)
    run.write_json("report.json", report)
    for msg in report["warnings"]:
        print(f"warning: {msg}", file=sys.stderr)
    print(f"depth {depth}")
    print(f"parameters {report['parameters']}")
    for level, counts in report["census"].items():
        print(f"shortcuts {level} " + " ".join(f"{k}:{v}" for k, v in counts.items()))
    return EXIT_OK


class _Manifests:
    def __init__(self, run: Run):
        self.run = run
        self.cache: dict[Path, Dataset] = {}

    def load(self, path: Path) -> Dataset:
        if path not in self.cache:
            self.cache[path] = load_manifest(path)
            self.run.inputs.append(path)
        return self.cache[path]

    def split(self, ref: DataRef, seed: int) -> tuple[Dataset, Dataset | None]:
        data = self.load(ref.manifest)
        if ref.val_manifest is not None:
            return data, self.load(ref.val_manifest)
        if ref.folds is not None:
            tr, va = assign_folds(data, ref.folds, seed).split(data, ref.val_fold)
            return data.subset(tr), data.subset(va)
        return data, None


def _select(rec: dict, metrics: Sequence[str]) -> dict:
    return {k: v for k, v in rec.items() if k in metrics or k == "n"}


def cmd_train(args, run: Run) -> int:
    cfg = load_run_config(args.config)
    if args.seed_given:
        cfg.seed = args.seed
        for st in cfg.stages:
            st.seed = args.seed
    if not cfg.stages:
        raise ConfigError("stage", "config defines no [stage:NAME] sections")
    run.inputs += cfg.inputs()
    run.seeds = {"run": cfg.seed, **{f"stage:{s.name}": s.seed for s in cfg.stages}}
    data = _Manifests(run)
    stages, vals = [], {}
    for sc in cfg.stages:
        train, val = data.split(sc.data, cfg.seed)
        vals[sc.name] = val
        stages.append(sc.to_stage(cfg.arch, train, val))

    handoffs = []

    def on_handoff(stage, model, before):
        handoffs.append({"stage": stage.name, "body_before": before,
                         "body_after": model.body_checksum()})

    results = run_pipeline(stages, run.out / "checkpoints", run.out / "logs", on_handoff)
    run.add(run.out / "checkpoints", run.out / "logs")

    summary = {"stages": [], "handoffs": handoffs}
    failed = None
    for stage, res in zip(stages, results):
        entry = {"name": stage.name, "task": stage.task, "status": res.status,
                 "epochs": len(res.log), "best_epoch": res.best_epoch,
                 "body_checksum": res.model.body_checksum()}
        if res.status == "ok":
            entry["train"] = _select(evaluate(res.model, stage.train, stage.task), cfg.metrics)
            if vals[stage.name] is not None and len(vals[stage.name].with_label(stage.task)):
                entry["val"] = _select(evaluate(res.model, vals[stage.name], stage.task), cfg.metrics)
        else:
            failed = stage.name
        summary["stages"].append(entry)
    run.write_json("metrics.json", summary)
    for e in summary["stages"]:
        val = e.get("val", {}).get("exact")
        print(f"stage {e['name']}: {e['status']}, {e['epochs']} epochs, "
              f"train exact {e.get('train', {}).get('exact')}, val exact {val}")
    if failed:
        raise RuntimeFailure(f"stage {failed!r} diverged; logs and last good checkpoint written")
    return EXIT_OK


def cmd_eval(args, run: Run) -> int:
    run.inputs.append(Path(args.manifest))
    data = load_manifest(args.manifest).with_label(args.task)
    models = []
    for ck in args.checkpoint:
        run.inputs += [Path(ck) / "manifest.json", Path(ck) / "tensors.bin"]
        models.append(load_checkpoint(ck)[0])
    out: dict = {"task": args.task, "checkpoints": [str(c) for c in args.checkpoint]}
    if args.folds is None:
        if len(models) != 1:
            raise UsageError("several checkpoints need --folds (one checkpoint per fold)")
        rec = evaluate(models[0], data, args.task)
        out.update(rec)
        print(f"exact {rec['exact']:.4f} one_off {rec['one_off']:.4f} n {rec['n']}")
    else:
        if len(models) not in (1, args.folds):
            raise UsageError(f"give one checkpoint or {args.folds} (one per fold), got {len(models)}")
        folds = assign_folds(data, args.folds, args.seed)
        per_fold = []
        for f in range(args.folds):
            model = models[f] if len(models) > 1 else models[0]
            rec = evaluate(model, data.subset(folds.fold_indices(data, f)), args.task)
            rec["fold"] = f
            per_fold.append(rec)
        out["folds"] = per_fold
        for key in ("exact", "one_off"):
            vals = [r[key] for r in per_fold]
            mean, std = fold_summary(vals)
            out[key] = {"mean": mean, "std": std, "formatted": format_mean_std(vals)}
            print(f"{key} " + " ".join(f"{v:.4f}" for v in vals) + f"  mean±std {format_mean_std(vals)}")
    run.write_json("metrics.json", out)
    return EXIT_OK


def cmd_curve(args, run: Run) -> int:
    cfg = load_run_config(args.config)
    if cfg.curve is None:
        raise ConfigError("curve", "config has no [curve] section")
    seed = args.seed if args.seed_given else cfg.seed
    run.seeds = {"curve": seed}
    run.inputs += cfg.inputs()
    cc = cfg.curve
    data = _Manifests(run).load(cc.data.manifest)
    folds = assign_folds(data, cc.data.folds, seed) if cc.data.folds else None
    if cc.data.val_manifest is not None:
        # explicit validation manifest: concatenate and hold out its subjects
        val = _Manifests(run).load(cc.data.val_manifest)
        try:
            data, folds = holdout_folds(data, val)
        except ValueError as e:
            raise ConfigError("curve.val_manifest", str(e)) from None
    curve = compute_curve(data, cfg.arch.with_classes(2), cc.optim, folds=folds,
                          val_fold=cc.data.val_fold if cc.data.val_manifest is None else 1,
                          seed=seed, drop_pL=cc.drop_pL, augment=cc.augment, workers=cc.workers)
    csv_path = run.path("curve.csv")
    curve.write_csv(csv_path)
    run.add(csv_path, plot_aging_curve(curve, run.path("curve.svg")))
    weights = suggest_weights(curve, cc.levels)
    run.write_json("weights.json", {
        "weights": list(weights.weights), "levels": list(cc.levels),
        "hard_thresholds": hard_thresholds(curve), "partial": curve.partial,
        "failed": curve.failed, "points": [[k, a] for k, a in curve.points]})
    for k, a in curve.points:
        print(f"k={k} accuracy {a:.4f}")
    print(f"suggested weights {weights.format()}")
    if curve.partial:
        print(f"warning: partial curve, failed thresholds {curve.failed}", file=sys.stderr)
    return EXIT_OK


def cmd_plot(args, run: Run) -> int:
    run.inputs += [Path(p) for p in args.logs]
    labels = args.labels.split(",") if args.labels else None
    if labels and len(labels) != len(args.logs):
        raise UsageError(f"{len(labels)} labels for {len(args.logs)} logs")
    out = plot_logs(args.logs, run.path(args.name), labels)
    run.add(out)
    print(out)
    return EXIT_OK


def cmd_synth(args, run: Run) -> int:
    try:
        overlap = parse_overlap(args.overlap)
    except ValueError as e:
        raise UsageError(f"--overlap: {e}") from None
    try:
        ds = synth_dataset(args.classes, args.per_class, args.size, overlap, seed=args.seed,
                           noise=args.noise, subject_prefix=args.subject_prefix)
    except ValueError as e:
        raise UsageError(str(e)) from None
    manifest = write_manifest(ds, run.out / args.name)
    run.add(manifest.parent)
    print(manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _globals(p: argparse.ArgumentParser, top: bool) -> None:
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(None), help="seed bundle root (default 0)")
    p.add_argument("--out", default=d("rorkit-out"), help="output directory")
    p.add_argument("--precision", choices=("single", "double"), default=d("single"))
    p.add_argument("--threads", type=int, default=d(None), help="BLAS thread limit")
    p.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rorkit", description="RoR networks: inspect, train, evaluate, aging curves, plots.")
    p.add_argument("--version", action="version", version=f"rorkit {__version__}")
    _globals(p, True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("inspect", help="compile an arch spec; write graph JSON/DOT and a report")
    s.add_argument("spec", help="arch spec file")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("train", help="run the pipeline stages of a run config")
    s.add_argument("config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate checkpoint(s) on a manifest")
    s.add_argument("checkpoint", nargs="+", help="checkpoint directory (one per fold with --folds)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--folds", type=int, help="subject-exclusive fold count")
    s.add_argument("--task", choices=("age", "gender"), default="age")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("curve", help="aging curve and suggested loss weights from a [curve] config")
    s.add_argument("config")
    s.set_defaults(func=cmd_curve)

    s = sub.add_parser("plot", help="validation error curves from training logs")
    s.add_argument("logs", nargs="+")
    s.add_argument("--labels", help="comma-separated legend labels")
    s.add_argument("--name", default="curves.svg", help="output file name under --out")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("synth", help="write a synthetic manifest and PNG tree")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--overlap", default="", help='e.g. "4:0.7,5:0.85,6:0.7"')
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--subject-prefix", default="s")
    s.add_argument("--name", default="data", help="subdirectory under --out")
    s.set_defaults(func=cmd_synth)

    for action in sub.choices.values():
        _globals(action, False)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("rorkit: error: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    set_default_dtype(np.float64 if args.precision == "double" else np.float32)
    try:
        run = Run(args, argv)
    except OSError as e:
        print(f"rorkit: error: cannot create output directory {args.out}: {e.strerror}", file=sys.stderr)
        return EXIT_USAGE
    code, status = EXIT_RUNTIME, "failed"
    try:
        with threadpool_limits(limits=args.threads):
            code = args.func(args, run)
        status = "ok"
    except (UsageError, *USER_ERRORS) as e:
        print(f"rorkit: error: {e}", file=sys.stderr)
        code, status = EXIT_USAGE, "usage-error"
    except RuntimeFailure as e:
        print(f"rorkit: failed: {e}", file=sys.stderr)
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime failure
        logger.debug("traceback", exc_info=True)
        print(f"rorkit: failed: {type(e).__name__}: {e}", file=sys.stderr)
    finally:
        set_default_dtype(np.float32)
    run.finish(status)
    return code


if __name__ == "__main__":
    sys.exit(main())
