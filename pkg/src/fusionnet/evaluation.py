"""Metrics, cross-validation splits, and the four-mode ablation grid.

Accuracy / macro precision / macro F1 serve single-label scene
classification; equal error rate (per tag, averaged) serves multi-label
tagging. `run_ablation` trains every fusion mode on byte-identical splits
with paired seeds so mode comparisons are like-for-like.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .features import Standardizer
from .fusion import ALL_MODES, FusionMode, FusionModel, ModelConfig
from .training import Sample, TrainConfig, segment_vote, train

METRIC_POLARITY = {
    "accuracy": "higher",
    "precision": "higher",
    "f1": "higher",
    "eer": "lower",
}


def accuracy(preds, truth) -> float:
    """Fraction of exactly matching class ids."""
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.size == 0 or preds.shape != truth.shape:
        raise ValueError("accuracy needs equal-length, non-empty id sequences")
    return float(np.mean(preds == truth))


def confusion_matrix(preds, truth, n_classes: int) -> np.ndarray:
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, t in zip(preds, truth):
        matrix[int(t), int(p)] += 1
    return matrix


def precision_f1(preds, truth, n_classes: int) -> tuple:
    """Macro-averaged precision and F1 over all classes.

    Classes with zero predicted (or zero true) positives contribute 0 to
    the average.
    """
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.size == 0 or preds.shape != truth.shape:
        raise ValueError("precision_f1 needs equal-length, non-empty id sequences")
    matrix = confusion_matrix(preds, truth, n_classes)
    precisions = np.zeros(n_classes)
    f1s = np.zeros(n_classes)
    for c in range(n_classes):
        tp = matrix[c, c]
        predicted = matrix[:, c].sum()
        actual = matrix[c, :].sum()
        prec = tp / predicted if predicted > 0 else 0.0
        rec = tp / actual if actual > 0 else 0.0
        precisions[c] = prec
        f1s[c] = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return float(precisions.mean()), float(f1s.mean())


def eer(scores, labels) -> float:
    """Equal error rate of a binary score list.

    Sweeps thresholds over the unique scores (predict positive when
    score >= threshold, plus a virtual all-negative endpoint); returns the
    FPR where FPR == FNR, linearly interpolating between the two
    bracketing thresholds when the crossing falls between them.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0 or scores.shape != labels.shape:
        raise ValueError("eer needs equal-length, non-empty inputs")
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("EER undefined: both label values must be present")
    thresholds = np.unique(scores)
    # score >= t  <->  count via searchsorted on the sorted score lists
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    fnr = np.searchsorted(pos, thresholds, side="left") / pos.size
    fpr = np.append(fpr, 0.0)  # virtual +inf threshold: nothing positive
    fnr = np.append(fnr, 1.0)
    diff = fpr - fnr
    for i in range(diff.size):
        if diff[i] == 0.0:
            return float(fpr[i])
        if diff[i] < 0.0:
            t = diff[i - 1] / (diff[i - 1] - diff[i])
            return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))
    raise AssertionError("EER sweep found no crossing")


def multilabel_eer(score_matrix, label_matrix) -> float:
    """Mean per-tag EER over the columns of [n_clips, n_tags] matrices.

    Tags with only one label value present are skipped.
    """
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(label_matrix)
    values = []
    for tag in range(scores.shape[1]):
        column = labels[:, tag]
        if column.min() == column.max():
            continue
        values.append(eer(scores[:, tag], column))
    if not values:
        raise ValueError("EER undefined: no tag has both label values")
    return float(np.mean(values))


class SplitScheme(Enum):
    PROVIDED_FOLDS = "provided_folds"
    RANDOM_CV = "random_cv"
    DEV_EVAL = "dev_eval"


@dataclass(frozen=True)
class Fold:
    train_ids: tuple
    test_ids: tuple


@dataclass(frozen=True)
class SplitPlan:
    scheme: SplitScheme
    seed: int
    folds: tuple

    def validate(self, all_ids) -> None:
        """Every fold must keep train and test disjoint and within the
        dataset; test folds of fold-style schemes partition the ids."""
        id_set = set(all_ids)
        for fold in self.folds:
            train, test = set(fold.train_ids), set(fold.test_ids)
            if train & test:
                raise ValueError("train/test overlap within a fold")
            if not (train | test) <= id_set:
                raise ValueError("fold references unknown sample ids")
        if self.scheme is SplitScheme.PROVIDED_FOLDS:
            seen = [i for fold in self.folds for i in fold.test_ids]
            if sorted(seen) != sorted(id_set):
                raise ValueError("provided folds must partition the sample ids")


def random_cv_plan(ids, k: int = 10, train_frac: float = 0.8, seed: int = 0) -> SplitPlan:
    """k repetitions of a random train/test split (default 80:20)."""
    ids = list(ids)
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(len(ids) * (1.0 - train_frac))))
    folds = []
    for _ in range(k):
        order = rng.permutation(len(ids))
        test = tuple(ids[i] for i in order[:n_test])
        trainset = tuple(ids[i] for i in order[n_test:])
        folds.append(Fold(train_ids=trainset, test_ids=test))
    return SplitPlan(scheme=SplitScheme.RANDOM_CV, seed=seed, folds=tuple(folds))


def provided_folds_plan(id_to_fold: dict, seed: int = 0) -> SplitPlan:
    """Cross-validation folds taken from per-sample fold hints."""
    fold_ids = sorted(set(id_to_fold.values()))
    if len(fold_ids) < 2:
        raise ValueError("provided folds need at least two distinct fold ids")
    folds = []
    for fid in fold_ids:
        test = tuple(i for i, f in id_to_fold.items() if f == fid)
        trainset = tuple(i for i, f in id_to_fold.items() if f != fid)
        folds.append(Fold(train_ids=trainset, test_ids=test))
    return SplitPlan(scheme=SplitScheme.PROVIDED_FOLDS, seed=seed, folds=tuple(folds))


def dev_eval_plan(dev_ids, eval_ids, seed: int = 0) -> SplitPlan:
    """Single development/evaluation split."""
    if not dev_ids or not eval_ids:
        raise ValueError("dev and eval splits must both be non-empty")
    fold = Fold(train_ids=tuple(dev_ids), test_ids=tuple(eval_ids))
    return SplitPlan(scheme=SplitScheme.DEV_EVAL, seed=seed, folds=(fold,))


@dataclass(frozen=True)
class ClipData:
    """Raw (unstandardized) per-channel segment features for one clip."""

    clip_id: str
    channel_segments: tuple  # per channel: tuple of [frames, bins] arrays
    target: np.ndarray  # multi-hot over the label vocabulary

    @property
    def n_samples(self) -> int:
        return min(len(segs) for segs in self.channel_segments)


def is_single_label(clips) -> bool:
    return all(int(np.sum(c.target)) == 1 for c in clips)


def fit_standardizers(clips) -> list:
    """Per-channel per-bin statistics from the given (training) clips."""
    n_channels = len(clips[0].channel_segments)
    standardizers = []
    for c in range(n_channels):
        maps = [seg for clip in clips for seg in clip.channel_segments[c]]
        standardizers.append(Standardizer.fit(maps))
    return standardizers


def clip_samples(clip: ClipData, standardizers) -> list:
    """Index-paired, standardized cross-channel samples of one clip."""
    samples = []
    for k in range(clip.n_samples):
        channels = [std.apply(clip.channel_segments[c][k])
                    for c, std in enumerate(standardizers)]
        samples.append(Sample(channels=channels, target=clip.target,
                              clip_id=clip.clip_id))
    return samples


def predict_clip(model: FusionModel, clip: ClipData, standardizers) -> np.ndarray:
    """Clip-level probabilities: mean vote over segment predictions."""
    preds = []
    for sample in clip_samples(clip, standardizers):
        preds.append(model.forward(sample.channels, train=False).data)
    return segment_vote(preds)


def evaluate_clips(model: FusionModel, clips, standardizers) -> dict:
    """Clip-level metrics for a trained model on held-out clips."""
    probs = np.stack([predict_clip(model, c, standardizers) for c in clips])
    targets = np.stack([c.target for c in clips])
    metrics = {}
    if is_single_label(clips):
        truth = targets.argmax(axis=1)
        preds = probs.argmax(axis=1)
        metrics["accuracy"] = accuracy(preds, truth)
        prec, f1 = precision_f1(preds, truth, n_classes=targets.shape[1])
        metrics["precision"] = prec
        metrics["f1"] = f1
    else:
        metrics["eer"] = multilabel_eer(probs, targets)
    return metrics


def train_fold(clips_by_id: dict, fold: Fold, model_cfg: ModelConfig,
               train_cfg: TrainConfig, run_seed: int):
    """Train one (fold, seed) run; returns (model, standardizers, metrics, curve)."""
    train_clips = [clips_by_id[i] for i in fold.train_ids]
    test_clips = [clips_by_id[i] for i in fold.test_ids]
    standardizers = fit_standardizers(train_clips)
    dataset = [s for clip in train_clips for s in clip_samples(clip, standardizers)]
    model = FusionModel(model_cfg, seed=run_seed)
    cfg = TrainConfig(learning_rate=train_cfg.learning_rate,
                      batch_size=train_cfg.batch_size, epochs=train_cfg.epochs,
                      l2=train_cfg.l2, dropout=train_cfg.dropout, seed=run_seed)
    model, curve = train(model, dataset, cfg)
    metrics = evaluate_clips(model, test_clips, standardizers)
    return model, standardizers, metrics, curve


@dataclass
class EvalReport:
    """Per-mode ablation results: one row per (fold, seed) run."""

    mode: FusionMode
    rows: list = field(default_factory=list)  # {"fold","seed",<metrics...>}

    def metric_names(self) -> list:
        names = []
        for row in self.rows:
            for key in row:
                if key not in ("fold", "seed") and key not in names:
                    names.append(key)
        return names

    def values(self, metric: str) -> np.ndarray:
        return np.asarray([row[metric] for row in self.rows if metric in row])

    def mean(self, metric: str) -> float:
        return float(self.values(metric).mean())

    def std(self, metric: str) -> float:
        return float(self.values(metric).std())


def run_ablation(clips, plan: SplitPlan, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, seeds=(0,), modes=ALL_MODES):
    """Train every fusion mode on identical splits with paired seeds.

    Returns (reports, curves) where curves maps (mode, fold_idx, seed) to
    the per-iteration training curve.
    """
    clips = list(clips)
    plan.validate([c.clip_id for c in clips])
    clips_by_id = {c.clip_id: c for c in clips}
    reports = []
    curves = {}
    for mode in modes:
        cfg_fields = {k: getattr(model_cfg, k) for k in (
            "channels", "channel_bins", "n_classes", "segment_frames",
            "common_bins", "kernels_l1", "kernels_l2", "head_depth",
            "head_width", "dropout")}
        mode_cfg = ModelConfig(mode=mode, **cfg_fields)
        report = EvalReport(mode=mode)
        for fold_idx, fold in enumerate(plan.folds):
            for seed in seeds:
                run_seed = int(seed) + 1000 * fold_idx
                _, _, metrics, curve = train_fold(
                    clips_by_id, fold, mode_cfg, train_cfg, run_seed)
                report.rows.append({"fold": fold_idx, "seed": int(seed), **metrics})
                curves[(mode, fold_idx, int(seed))] = curve
        reports.append(report)
    return reports, curves


MODE_LABELS = {
    FusionMode.VANILLA: "Vanilla",
    FusionMode.EARLY_FUSION: "EF",
    FusionMode.LATE_FUSION: "LF",
    FusionMode.HYBRID: "EF+LF",
}


def reports_to_csv(reports, path) -> None:
    """`mode,fold,metric,value` rows; multi-seed runs key the fold column
    as `<fold>/s<seed>`."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("mode,fold,metric,value\n")
        for report in reports:
            for row in report.rows:
                fold_key = str(row["fold"])
                if row.get("seed", 0) != 0 or any(r.get("seed", 0) != 0
                                                  for r in report.rows):
                    fold_key = f"{row['fold']}/s{row['seed']}"
                for metric in report.metric_names():
                    if metric in row:
                        fh.write(f"{MODE_LABELS[report.mode]},{fold_key},"
                                 f"{metric},{row[metric]:.12g}\n")


def render_table(reports) -> str:
    """Human-readable ablation table (mean +/- std per metric, with the
    polarity of each metric in the header)."""
    metrics = []
    for report in reports:
        for name in report.metric_names():
            if name not in metrics:
                metrics.append(name)
    headers = ["mode"] + [f"{m} ({METRIC_POLARITY.get(m, '?')}=better)" for m in metrics]
    lines = []
    rows = []
    for report in reports:
        cells = [MODE_LABELS[report.mode]]
        for m in metrics:
            values = report.values(m)
            if values.size:
                cells.append(f"{report.mean(m) * 100:.2f} +/- {report.std(m) * 100:.2f}")
            else:
                cells.append("-")
        rows.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for cells in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"


def plan_to_json(plan: SplitPlan) -> str:
    doc = {
        "scheme": plan.scheme.value,
        "seed": plan.seed,
        "folds": [{"train": list(f.train_ids), "test": list(f.test_ids)}
                  for f in plan.folds],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def plan_from_json(text: str) -> SplitPlan:
    doc = json.loads(text)
    folds = tuple(Fold(train_ids=tuple(f["train"]), test_ids=tuple(f["test"]))
                  for f in doc["folds"])
    return SplitPlan(scheme=SplitScheme(doc["scheme"]), seed=doc["seed"], folds=folds)
