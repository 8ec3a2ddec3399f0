"""Operator surface.

Subcommands: extract, train, eval, ablate, gradcheck (plus fixture, which
generates the bundled synthetic corpus). Exit codes: 0 success, 1 usage
error, 2 data error, 3 numerical failure. FUSIONNET_CACHE overrides the
default feature-cache directory.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import load_checkpoint, save_checkpoint
from .data import (
    DataError,
    ExperimentConfig,
    build_split_plan,
    channel_bins_for,
    drop_label,
    ensure_cached,
    extract_manifest,
    load_clip_data,
    load_manifest,
)
from .evaluation import (
    EvalReport,
    clip_samples,
    evaluate_clips,
    fit_standardizers,
    plan_to_json,
    reports_to_csv,
    render_table,
    run_ablation,
)
from .features import FeatureKind, Standardizer
from .fusion import FusionModel, FusionMode, ModelConfig
from .gradcheck import TOLERANCE, run_gradcheck
from .synthetic import make_fixture
from .training import TrainConfig, TrainingError, train, write_curves

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="fusionnet",
                     description="Multi-channel audio fusion experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_extract = sub.add_parser("extract", help="cache acoustic features")
    p_extract.add_argument("--manifest", required=True)
    p_extract.add_argument("--kinds", required=True,
                           help="comma list: mel,logmel,mfcc,cqt")
    p_extract.add_argument("--cache", default=None)
    p_extract.add_argument("--jobs", type=int, default=1)

    for name in ("train", "ablate"):
        p = sub.add_parser(name, help=f"{name} from a config + manifest")
        p.add_argument("--config", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--cache", default=None)
        p.add_argument("--mode", default=None,
                       choices=[m.value for m in FusionMode])
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--paper-scale", action="store_true")
        if name == "ablate":
            p.add_argument("--n-seeds", type=int, default=1)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--out", required=True, help="report CSV path")
    p_eval.add_argument("--cache", default=None)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--inject-fault", default=None, metavar="OP",
                        help=argparse.SUPPRESS)

    p_fix = sub.add_parser("fixture", help="generate the synthetic corpus")
    p_fix.add_argument("--out", required=True)
    p_fix.add_argument("--clips", type=int, default=400)
    p_fix.add_argument("--seed", type=int, default=0)

    return parser


def _kind_list(spec: str) -> list:
    aliases = {"mel": "MEL", "logmel": "LOG_MEL", "log_mel": "LOG_MEL",
               "mfcc": "MFCC", "cqt": "CQT"}
    kinds = []
    for token in spec.split(","):
        token = token.strip().lower()
        if token not in aliases:
            raise UsageError(f"unknown feature kind {token!r}")
        kinds.append(FeatureKind[aliases[token]])
    return kinds


def _cache_dir(flag_value, manifest_path) -> Path:
    if flag_value:
        return Path(flag_value)
    env = os.environ.get("FUSIONNET_CACHE")
    if env:
        return Path(env)
    return Path(manifest_path).parent / "feature_cache"


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    if getattr(args, "mode", None):
        config.mode = args.mode
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "paper_scale", False):
        config.apply_paper_scale()
    return config


def _prepare(config: ExperimentConfig, manifest_path, cache):
    """Load the manifest, warm the cache, and materialize derived config
    fields (vocabulary, class count, channel bins)."""
    manifest = load_manifest(manifest_path)
    if config.drop_label:
        manifest = drop_label(manifest, config.drop_label)
    clips = load_clip_data(manifest, config.kinds, cache, config.segment_frames)
    vocabulary = list(manifest.vocabulary)
    if config.n_classes == 0:
        config.n_classes = len(vocabulary)
    elif config.n_classes != len(vocabulary):
        raise DataError(
            f"config n_classes={config.n_classes} but manifest has "
            f"{len(vocabulary)} labels")
    if config.vocabulary is not None and list(config.vocabulary) != vocabulary:
        raise DataError("manifest labels do not match the config vocabulary")
    config.vocabulary = vocabulary
    config.channel_bins = channel_bins_for(config.kinds, clips)
    return manifest, clips


def _model_config(config: ExperimentConfig, mode=None) -> ModelConfig:
    return ModelConfig(
        channels=config.kinds, channel_bins=list(config.channel_bins),
        n_classes=config.n_classes, segment_frames=config.segment_frames,
        common_bins=config.common_bins, kernels_l1=config.kernels_l1,
        kernels_l2=config.kernels_l2, head_depth=config.head_depth,
        head_width=config.head_width, dropout=config.dropout,
        mode=FusionMode(mode or config.mode))


def _train_config(config: ExperimentConfig, seed=None) -> TrainConfig:
    return TrainConfig(learning_rate=config.learning_rate,
                       batch_size=config.batch_size, epochs=config.epochs,
                       l2=config.l2, dropout=config.dropout,
                       seed=config.seed if seed is None else seed)


def cmd_extract(args) -> int:
    manifest = load_manifest(args.manifest)
    kinds = _kind_list(args.kinds)
    cache = _cache_dir(args.cache, args.manifest)
    if args.jobs > 1:
        report = _parallel_extract(manifest, kinds, cache, args.jobs)
    else:
        report = extract_manifest(manifest, kinds, cache)
    print(f"extract: {report.written} written, {report.skipped} fresh, "
          f"{len(report.failures)} failed")
    for path, message in report.failures:
        print(f"  FAILED {path}: {message}", file=sys.stderr)
    return EXIT_DATA if report.failures else EXIT_OK


def _parallel_extract(manifest, kinds, cache, jobs):
    from .data import ExtractReport

    report = ExtractReport()
    tasks = [(e.path, k) for e in manifest.entries for k in kinds]

    def work(task):
        path, kind = task
        try:
            ensure_cached(path, kind, cache, report)
            return None
        except Exception as exc:  # noqa: BLE001 - per-file isolation
            return (str(path), f"{kind.name}: {exc}")

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for failure in pool.map(work, tasks):
            if failure:
                report.failures.append(failure)
    return report


def cmd_train(args) -> int:
    config = _load_config(args)
    cache = _cache_dir(args.cache, args.manifest)
    manifest, clips = _prepare(config, args.manifest, cache)
    plan = build_split_plan(manifest, config.split_scheme, config.seed,
                            k=config.split_k, train_frac=config.train_frac)
    fold = plan.folds[0]
    clips_by_id = {c.clip_id: c for c in clips}
    train_clips = [clips_by_id[i] for i in fold.train_ids]
    standardizers = fit_standardizers(train_clips)
    dataset = [s for clip in train_clips for s in clip_samples(clip, standardizers)]

    model = FusionModel(_model_config(config), seed=config.seed)
    model, curve = train(model, dataset, _train_config(config))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = model.state()
    for c, std in enumerate(standardizers):
        entries.append((f"norm/{c}/mean", std.mean))
        entries.append((f"norm/{c}/std", std.std))
    save_checkpoint(out / "checkpoint.fusn", entries)
    write_curves(out / "curves.csv", curve)
    (out / "config.resolved.json").write_text(config.to_json(), encoding="utf-8")
    print(f"train: {len(dataset)} samples, {len(curve)} iterations, "
          f"final bce {curve[-1].bce_loss:.4f}")
    print(f"train: wrote {out / 'checkpoint.fusn'}")
    return EXIT_OK


def _standardizers_from_checkpoint(entries, n_channels) -> list:
    by_name = dict(entries)
    standardizers = []
    for c in range(n_channels):
        try:
            mean = by_name[f"norm/{c}/mean"]
            std = by_name[f"norm/{c}/std"]
        except KeyError as exc:
            raise DataError(f"checkpoint missing normalization tensor {exc}")
        standardizers.append(Standardizer(mean=mean, std=std))
    return standardizers


def cmd_eval(args) -> int:
    config = _load_config(args)
    cache = _cache_dir(args.cache, args.manifest)
    _, clips = _prepare(config, args.manifest, cache)
    model = FusionModel(_model_config(config), seed=config.seed)
    entries = load_checkpoint(args.checkpoint)
    model.load_state(entries)
    standardizers = _standardizers_from_checkpoint(entries, len(config.kinds))
    metrics = evaluate_clips(model, clips, standardizers)
    report = EvalReport(mode=FusionMode(config.mode),
                        rows=[{"fold": 0, "seed": config.seed, **metrics}])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    reports_to_csv([report], out)
    summary = ", ".join(f"{k}={v:.4f}" for k, v in metrics.items())
    print(f"eval: {len(clips)} clips, {summary}")
    print(f"eval: wrote {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    cache = _cache_dir(args.cache, args.manifest)
    manifest, clips = _prepare(config, args.manifest, cache)
    plan = build_split_plan(manifest, config.split_scheme, config.seed,
                            k=config.split_k, train_frac=config.train_frac)
    seeds = [config.seed + i for i in range(args.n_seeds)]
    reports, curves = run_ablation(clips, plan, _model_config(config),
                                   _train_config(config), seeds=seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "folds.json").write_text(plan_to_json(plan), encoding="utf-8")
    reports_to_csv(reports, out / "report.csv")
    table = render_table(reports)
    (out / "table.txt").write_text(table, encoding="utf-8")
    curve_dir = out / "curves"
    curve_dir.mkdir(exist_ok=True)
    for (mode, fold_idx, seed), curve in curves.items():
        write_curves(curve_dir / f"{mode.value}_f{fold_idx}_s{seed}.csv", curve)
    (out / "config.resolved.json").write_text(config.to_json(), encoding="utf-8")
    print(table, end="")
    print(f"ablate: wrote {out / 'report.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ad._FAULT_OP = args.inject_fault
    try:
        lines, worst, passed = run_gradcheck()
    finally:
        ad._FAULT_OP = None
    failed = [(name, err) for name, err in lines if err > TOLERANCE]
    for name, err in lines:
        flag = "OK" if err <= TOLERANCE else "FAIL"
        print(f"gradcheck: {name:45s} max_rel_err={err:.3e} {flag}")
    print(f"gradcheck: worst {worst:.3e} (tolerance {TOLERANCE:g})")
    if failed:
        names = ", ".join(name for name, _ in failed)
        print(f"gradcheck: FAILED groups: {names}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_fixture(args) -> int:
    manifest_path = make_fixture(args.out, n_clips=args.clips, seed=args.seed)
    config = ExperimentConfig(channels=["MEL", "MFCC"], mode="hybrid",
                              batch_size=16, learning_rate=0.003,
                              split_scheme="dev_eval", seed=args.seed)
    config_path = Path(args.out) / "experiment.json"
    config_path.write_text(config.to_json(), encoding="utf-8")
    print(f"fixture: wrote {args.clips} clips, manifest {manifest_path}")
    print(f"fixture: wrote config {config_path}")
    return EXIT_OK


_COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "fixture": cmd_fixture,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
