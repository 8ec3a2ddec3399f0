"""Bundled synthetic datasets.

`make_fixture` writes a 2-channel complementary-structure audio corpus.
Every clip carries a high-band chord and a low-band chord, each gated by
a burst envelope whose rate is slow, medium, or fast. Class structure:

    group bit    = presence of an ungated mid-band chord (a plain
                   marginal cue, readable by any mode);
    subclass bit = whether the high and low chords burst IN SYNC
                   (same continuous rate and phase) or independently.

Synchrony is a relation between the two band envelopes with identical
per-band marginals across classes, so no per-channel summary statistic
separates it linearly; cross-channel frame similarity and bilinear
interaction read it directly. That gives the fusion modes a measurable
advantage over the vanilla head at desk scale.

`make_separable_dataset` is a tiny feature-level two-class set used to
test training convergence in seconds.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .features import AudioClip, write_wav
from .training import Sample

FIXTURE_SAMPLE_RATE = 16000
FIXTURE_CLIP_SAMPLES = 33792  # 65 STFT frames -> one 64-frame segment
FIXTURE_CLASSES = 4
FIXTURE_HIGH_BAND = (2200.0, 3800.0)  # broadband burst carriers
FIXTURE_LOW_BAND = (250.0, 900.0)
FIXTURE_MID_HZ = (1150.0, 1300.0)
FIXTURE_RATE_RANGE = (2.5, 8.0)  # bursts per clip, continuous
FIXTURE_RATE_MARGIN = 1.5  # minimum rate difference when envelopes disagree
FIXTURE_BURST_AMP = 0.18
FIXTURE_MID_AMP = 0.10
FIXTURE_NOISE_AMP = 0.005


def _burst_envelope(n_samples: int, n_bursts: float, phase: float,
                    sample_rate: int, duty: float = 0.5) -> np.ndarray:
    """0/1 gating with `n_bursts` on-periods of `duty` fraction, 10 ms ramps."""
    t = np.arange(n_samples) / n_samples
    gate = (np.mod(t * n_bursts + phase, 1.0) < duty).astype(np.float64)
    ramp = max(1, int(0.010 * sample_rate))
    kernel = np.ones(ramp) / ramp
    return np.convolve(gate, kernel, mode="same")


def _band_noise(band, n_samples: int, sample_rate: int,
                rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS noise band-limited to [band[0], band[1]] Hz."""
    spectrum = np.fft.rfft(rng.standard_normal(n_samples))
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / sample_rate)
    spectrum[(freqs < band[0]) | (freqs > band[1])] = 0.0
    noise = np.fft.irfft(spectrum, n=n_samples)
    return noise / max(noise.std(), 1e-12)


def _chord(freqs, n_samples: int, sample_rate: int,
           rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n_samples) / sample_rate
    tone = np.zeros(n_samples)
    for f in freqs:
        tone += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return tone / len(freqs)


def _draw_rates(agree: bool, rng: np.random.Generator) -> tuple:
    lo, hi = FIXTURE_RATE_RANGE
    r1 = rng.uniform(lo, hi)
    if agree:
        return r1, r1
    while True:
        r2 = rng.uniform(lo, hi)
        if abs(r2 - r1) >= FIXTURE_RATE_MARGIN:
            return r1, r2


def fixture_clip(class_id: int, rng: np.random.Generator,
                 sample_rate: int = FIXTURE_SAMPLE_RATE,
                 n_samples: int = FIXTURE_CLIP_SAMPLES) -> AudioClip:
    """One synthetic clip for class 2*group + sync.

    group: mid chord present (1) or absent (0). sync: high and low noise
    bands gated by one shared burst envelope (1) or by independent
    envelopes with clearly different rates (0). Rates are continuous, so
    no marginal statistic (including the total burst count) pins the sync
    bit; only the cross-band temporal relation does. Bursts are broadband
    so the frame on/off state dominates standardized feature columns.
    """
    group_bit, sync_bit = class_id >> 1, class_id & 1
    rate_high, rate_low = _draw_rates(bool(sync_bit), rng)

    high = _band_noise(FIXTURE_HIGH_BAND, n_samples, sample_rate, rng)
    low = _band_noise(FIXTURE_LOW_BAND, n_samples, sample_rate, rng)
    env_high = _burst_envelope(n_samples, rate_high, rng.uniform(), sample_rate)
    if sync_bit:
        env_low = env_high
    else:
        env_low = _burst_envelope(n_samples, rate_low, rng.uniform(), sample_rate)

    amp_high = FIXTURE_BURST_AMP * rng.uniform(0.8, 1.25)
    amp_low = FIXTURE_BURST_AMP * rng.uniform(0.8, 1.25)
    samples = amp_high * env_high * high + amp_low * env_low * low
    if group_bit:
        samples += FIXTURE_MID_AMP * rng.uniform(0.8, 1.25) * _chord(
            FIXTURE_MID_HZ, n_samples, sample_rate, rng)
    samples += FIXTURE_NOISE_AMP * rng.uniform(0.7, 1.4) * rng.standard_normal(n_samples)
    return AudioClip(samples=np.clip(samples, -1.0, 1.0), sample_rate=sample_rate)


def make_fixture(out_dir, n_clips: int = 400, seed: int = 0,
                 dev_frac: float = 0.8) -> Path:
    """Write the fixture corpus (WAVs + JSONL manifest); returns the
    manifest path. Classes are balanced; each class's first `dev_frac`
    clips get split hint "dev", the rest "eval"."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    per_class = n_clips // FIXTURE_CLASSES
    entries = []
    index = 0
    for class_id in range(FIXTURE_CLASSES):
        for k in range(per_class):
            clip = fixture_clip(class_id, rng)
            name = f"clip_{index:04d}.wav"
            write_wav(out_dir / name, clip)
            hint = "dev" if k < int(round(per_class * dev_frac)) else "eval"
            entries.append({"path": name, "labels": [f"class{class_id}"],
                            "split_hint": hint})
            index += 1
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return manifest_path


def make_separable_dataset(n_samples: int = 200, seed: int = 0,
                           frames: int = 8, bins: int = 8,
                           n_channels: int = 2, n_classes: int = 2) -> list:
    """Feature-level, linearly separable classes: each class has a fixed
    random mean pattern per channel plus mild noise."""
    rng = np.random.default_rng(seed)
    patterns = rng.normal(size=(n_classes, n_channels, frames, bins))
    samples = []
    for i in range(n_samples):
        cls = i % n_classes
        target = np.zeros(n_classes)
        target[cls] = 1.0
        channels = [patterns[cls, c] + 0.3 * rng.normal(size=(frames, bins))
                    for c in range(n_channels)]
        samples.append(Sample(channels=channels, target=target, clip_id=f"s{i}"))
    return samples
