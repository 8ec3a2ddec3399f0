"""Dataset manifests, the feature-extraction cache, and experiment
configuration.

A manifest is JSON-lines, one record per clip:
    {"path": "clip.wav", "labels": ["beach"], "split_hint": "dev"}
Paths are resolved relative to the manifest file. The cache holds one
binary feature file per (clip, kind), keyed by a content hash of the WAV
bytes plus the extraction parameters, so re-extraction is idempotent and
cache freshness survives renames.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict, fields, replace
from pathlib import Path

import numpy as np

from . import features as feat
from .evaluation import (
    ClipData,
    SplitPlan,
    dev_eval_plan,
    provided_folds_plan,
    random_cv_plan,
)
from .features import FeatureKind

PARAM_FINGERPRINT = (
    f"v1:win{feat.WINDOW_SIZE}:hop{feat.HOP_SIZE}:mel{feat.N_MEL_BANDS}"
    f":mfcc{feat.N_MFCC}:cqt{feat.CQT_BINS_PER_OCTAVE}@{feat.CQT_FMIN_HZ}"
)


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    labels: tuple
    split_hint: str | None = None

    @property
    def clip_id(self) -> str:
        return self.path.name


@dataclass(frozen=True)
class Manifest:
    entries: tuple
    vocabulary: tuple

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path) -> Manifest:
    """Parse and validate a JSONL manifest; every path must exist."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: bad JSON: {exc}")
            wav = (base / record["path"]).resolve()
            if not wav.exists():
                raise DataError(f"{path}:{lineno}: missing file {wav}")
            labels = tuple(record.get("labels", ()))
            if not labels:
                raise DataError(f"{path}:{lineno}: entry has no labels")
            entries.append(ManifestEntry(path=wav, labels=labels,
                                         split_hint=record.get("split_hint")))
    if not entries:
        raise DataError(f"{path}: empty manifest")
    vocabulary = tuple(sorted({l for e in entries for l in e.labels}))
    return Manifest(entries=tuple(entries), vocabulary=vocabulary)


def drop_label(manifest: Manifest, label: str) -> Manifest:
    """Remove one label from the vocabulary; entries left with no labels
    are dropped."""
    if label not in manifest.vocabulary:
        return manifest
    kept = []
    for entry in manifest.entries:
        labels = tuple(l for l in entry.labels if l != label)
        if labels:
            kept.append(replace(entry, labels=labels))
    if not kept:
        raise DataError(f"dropping label {label!r} removes every clip")
    vocabulary = tuple(l for l in manifest.vocabulary if l != label)
    return Manifest(entries=tuple(kept), vocabulary=vocabulary)


def cache_file_name(wav_path, kind: FeatureKind) -> str:
    digest = hashlib.sha256()
    with open(wav_path, "rb") as fh:
        digest.update(fh.read())
    digest.update(kind.name.encode())
    digest.update(PARAM_FINGERPRINT.encode())
    return f"{Path(wav_path).stem}.{digest.hexdigest()[:16]}.{kind.name.lower()}.caf"


@dataclass
class ExtractReport:
    written: int = 0
    skipped: int = 0
    failures: list = field(default_factory=list)  # (path, message)


def ensure_cached(wav_path, kind: FeatureKind, cache_dir,
                  report: ExtractReport | None = None) -> Path:
    """Extract one (clip, kind) into the cache unless already fresh."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    target = cache_dir / cache_file_name(wav_path, kind)
    if target.exists():
        if report:
            report.skipped += 1
        return target
    clip = feat.read_wav(wav_path)
    feature_map = feat.extract(clip, kind)
    feat.save_feature_map(target, feature_map)
    if report:
        report.written += 1
    return target


def extract_manifest(manifest: Manifest, kinds, cache_dir) -> ExtractReport:
    """Cache every (clip, kind); per-file failures are collected, not fatal."""
    report = ExtractReport()
    for entry in manifest.entries:
        for kind in kinds:
            try:
                ensure_cached(entry.path, kind, cache_dir, report)
            except Exception as exc:  # noqa: BLE001 - per-file isolation
                report.failures.append((str(entry.path), f"{kind.name}: {exc}"))
    return report


def load_clip_data(manifest: Manifest, kinds, cache_dir, segment_frames: int,
                   segment_hop: int | None = None) -> list:
    """Assemble per-clip training data from cached features.

    Each channel's map is segmented independently; cross-channel samples
    pair segments by index (count = min across channels).
    """
    if segment_hop is None:
        segment_hop = max(1, segment_frames // 2)
    clips = []
    for entry in manifest.entries:
        channel_segments = []
        for kind in kinds:
            cached = ensure_cached(entry.path, kind, cache_dir)
            feature_map = feat.load_feature_map(cached)
            segs = feat.segment(feature_map, length=segment_frames,
                                hop=segment_hop, parent_id=entry.clip_id)
            channel_segments.append(tuple(s.data for s in segs.segments))
        target = np.zeros(len(manifest.vocabulary))
        for label in entry.labels:
            target[manifest.vocabulary.index(label)] = 1.0
        clips.append(ClipData(clip_id=entry.clip_id,
                              channel_segments=tuple(channel_segments),
                              target=target))
    return clips


def build_split_plan(manifest: Manifest, scheme: str, seed: int,
                     k: int = 10, train_frac: float = 0.8) -> SplitPlan:
    """Instantiate the configured split scheme over the manifest clips."""
    ids = [e.clip_id for e in manifest.entries]
    if scheme == "random_cv":
        return random_cv_plan(ids, k=k, train_frac=train_frac, seed=seed)
    if scheme == "provided_folds":
        hints = {e.clip_id: e.split_hint for e in manifest.entries}
        if any(h is None for h in hints.values()):
            raise DataError("provided_folds requires a split_hint on every entry")
        return provided_folds_plan(hints, seed=seed)
    if scheme == "dev_eval":
        dev = [e.clip_id for e in manifest.entries if e.split_hint != "eval"]
        evl = [e.clip_id for e in manifest.entries if e.split_hint == "eval"]
        if not evl:
            raise DataError('dev_eval requires entries with split_hint "eval"')
        return dev_eval_plan(dev, evl, seed=seed)
    raise DataError(f"unknown split scheme {scheme!r}")


NATIVE_BINS = {FeatureKind.MEL: 40, FeatureKind.LOG_MEL: 40, FeatureKind.MFCC: 39}


def channel_bins_for(kinds, clips) -> list:
    """Native bin count per channel, read from the data for CQT."""
    bins = []
    for c, kind in enumerate(kinds):
        if kind in NATIVE_BINS:
            bins.append(NATIVE_BINS[kind])
        else:
            bins.append(clips[0].channel_segments[c][0].shape[1])
    return bins


@dataclass
class ExperimentConfig:
    """Fully describes one run; `resolve` materializes every derived field
    so a written config reproduces the run byte-identically."""

    channels: list
    mode: str = "vanilla"
    n_classes: int = 0  # 0 = derive from the manifest vocabulary
    kernels_l1: int = 8
    kernels_l2: int = 16
    head_depth: int = 2
    head_width: int = 32
    segment_frames: int = 64
    common_bins: int = 40
    learning_rate: float = 0.001
    batch_size: int = 100
    epochs: int = 10
    l2: float = 0.005
    dropout: float = 0.3
    seed: int = 0
    split_scheme: str = "dev_eval"
    split_k: int = 10
    train_frac: float = 0.8
    drop_label: str | None = None
    vocabulary: list | None = None
    channel_bins: list | None = None

    def __post_init__(self):
        if not self.channels:
            raise ValueError("config needs at least one channel")
        self.channels = [c.upper() if isinstance(c, str) else c.name
                         for c in self.channels]
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("channels must be distinct")
        for name in self.channels:
            if name not in FeatureKind.__members__:
                raise ValueError(f"unknown feature kind {name!r}")

    @property
    def kinds(self) -> list:
        return [FeatureKind[name] for name in self.channels]

    def apply_paper_scale(self) -> None:
        """Published-scale topology (slow; desk scale is the default)."""
        self.kernels_l1 = 128
        self.kernels_l2 = 256
        self.head_depth = 6
        self.head_width = 600
        self.segment_frames = 1024

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        doc = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))
