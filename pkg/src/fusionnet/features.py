"""Complementary acoustic feature extraction.

Turns raw mono audio into the four feature families consumed by the
multi-channel model (Mel, log-Mel, MFCC with deltas, constant-Q), cuts
feature maps into fixed-length training segments, and reads/writes the
flat binary feature-map format used by the extraction cache.

All extractors share one frame grid: window 1024 samples, hop 512
(50% overlap), Hann window. The constant-Q transform uses its longest
kernel as the effective window so its frames also land on the 512-sample
hop grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.fft
import scipy.io.wavfile

WINDOW_SIZE = 1024
HOP_SIZE = 512
N_MEL_BANDS = 40
N_MFCC = 13
LOG_FLOOR = 1e-10
DELTA_WINDOW = 2

CQT_BINS_PER_OCTAVE = 80
CQT_FMIN_HZ = 32.7

SEGMENT_LENGTH = 1024
SEGMENT_HOP = 512

FEATURE_MAGIC = b"CAF1"


class FeatureKind(Enum):
    """The four complementary feature families."""

    MEL = 0
    LOG_MEL = 1
    MFCC = 2
    CQT = 3


@dataclass(frozen=True)
class AudioClip:
    """Mono PCM audio: amplitude samples in [-1, 1] plus sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("clip must be a non-empty 1-D sample array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("clip contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class FeatureMap:
    """2-D time-by-bin feature matrix tagged with its feature kind."""

    kind: FeatureKind
    data: np.ndarray  # [n_frames, n_bins]
    frame_hop: int
    window_size: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("feature map must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite entries")
        if self.frame_hop <= 0 or self.window_size <= 0:
            raise ValueError("frame_hop and window_size must be positive")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SegmentSet:
    """Fixed-length windows cut from one parent feature map."""

    segments: tuple
    segment_length: int
    hop: int
    parent_id: str = ""

    def __len__(self) -> int:
        return len(self.segments)


def read_wav(path) -> AudioClip:
    """Read a 16-bit PCM WAV file; stereo is downmixed by averaging."""
    rate, raw = scipy.io.wavfile.read(path)
    if raw.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got dtype {raw.dtype}")
    samples = raw.astype(np.float64) / 32768.0
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples=samples, sample_rate=int(rate))


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as mono 16-bit PCM."""
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    scipy.io.wavfile.write(path, clip.sample_rate, pcm)


def hann_window(size: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(size) / size))


def frame_count(n_samples: int, window: int, hop: int) -> int:
    return (n_samples - window) // hop + 1


def stft(clip: AudioClip, window_size: int = WINDOW_SIZE, hop: int = HOP_SIZE) -> np.ndarray:
    """Short-time Fourier transform, Hann-windowed, no padding.

    Returns a complex [n_frames, window_size//2 + 1] matrix with
    n_frames = floor((len - window_size)/hop) + 1.
    """
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if len(clip) < window_size:
        raise ValueError(
            f"clip too short: {len(clip)} samples < window {window_size}"
        )
    n = frame_count(len(clip), window_size, hop)
    window = hann_window(window_size)
    starts = np.arange(n) * hop
    frames = np.stack([clip.samples[s : s + window_size] for s in starts])
    return np.fft.rfft(frames * window, axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft_bins: int, n_bands: int = N_MEL_BANDS) -> np.ndarray:
    """Peak-1 triangular filters on the mel scale, 0 Hz to Nyquist.

    Returns [n_bands, n_fft_bins] weights for an rfft power spectrum of a
    WINDOW_SIZE-point frame.
    """
    nyquist = sample_rate / 2.0
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_bands + 2))
    fft_freqs = np.linspace(0.0, nyquist, n_fft_bins)
    bank = np.zeros((n_bands, n_fft_bins))
    for m in range(n_bands):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (fft_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - center, 1e-12)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def mel_features(clip: AudioClip) -> FeatureMap:
    """40-band Mel energies of the STFT power spectrum."""
    spectrum = stft(clip)
    power = np.abs(spectrum) ** 2
    bank = mel_filterbank(clip.sample_rate, power.shape[1])
    return FeatureMap(
        kind=FeatureKind.MEL,
        data=power @ bank.T,
        frame_hop=HOP_SIZE,
        window_size=WINDOW_SIZE,
    )


def log_mel_features(clip: AudioClip) -> FeatureMap:
    """Entrywise log of the Mel map with a 1e-10 floor against silence."""
    mel = mel_features(clip)
    return FeatureMap(
        kind=FeatureKind.LOG_MEL,
        data=np.log(mel.data + LOG_FLOOR),
        frame_hop=HOP_SIZE,
        window_size=WINDOW_SIZE,
    )


def dct_ortho(x: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II along the last axis."""
    return scipy.fft.dct(x, type=2, norm="ortho", axis=-1)


def delta(coeffs: np.ndarray, window: int = DELTA_WINDOW) -> np.ndarray:
    """Regression delta over +/-window frames with edge replication.

    d[t] = sum_n n * (c[t+n] - c[t-n]) / (2 * sum_n n^2), indices clipped
    to the valid frame range.
    """
    n_frames = coeffs.shape[0]
    denom = 2.0 * sum(n * n for n in range(1, window + 1))
    out = np.zeros_like(coeffs)
    for n in range(1, window + 1):
        ahead = coeffs[np.clip(np.arange(n_frames) + n, 0, n_frames - 1)]
        behind = coeffs[np.clip(np.arange(n_frames) - n, 0, n_frames - 1)]
        out += n * (ahead - behind)
    return out / denom


def mfcc_features(clip: AudioClip) -> FeatureMap:
    """13 cepstral coefficients (incl. 0th) plus delta and acceleration.

    DCT-II (orthonormal) of the log-Mel bands, truncated to coefficients
    0..12, concatenated with first and second regression derivatives for
    39 bins total.
    """
    log_mel = log_mel_features(clip)
    static = dct_ortho(log_mel.data)[:, :N_MFCC]
    d1 = delta(static)
    d2 = delta(d1)
    return FeatureMap(
        kind=FeatureKind.MFCC,
        data=np.concatenate([static, d1, d2], axis=1),
        frame_hop=HOP_SIZE,
        window_size=WINDOW_SIZE,
    )


def cqt_bin_frequencies(sample_rate: int, f_min: float = CQT_FMIN_HZ,
                        bins_per_octave: int = CQT_BINS_PER_OCTAVE) -> np.ndarray:
    """Geometric center frequencies f_min * 2^(k/B), strictly below Nyquist."""
    nyquist = sample_rate / 2.0
    n_bins = int(np.floor(bins_per_octave * np.log2(nyquist / f_min)))
    if n_bins < 1:
        raise ValueError("sample rate too low for any CQT bin")
    freqs = f_min * 2.0 ** (np.arange(n_bins + 1) / bins_per_octave)
    return freqs[freqs < nyquist]


def cqt_features(clip: AudioClip, hop: int = HOP_SIZE) -> FeatureMap:
    """Constant-Q magnitudes, 80 bins/octave from 32.7 Hz to Nyquist.

    Direct evaluation: each bin k gets a Hann-windowed complex kernel of
    length N_k = ceil(Q * sr / f_k) with Q = 1/(2^(1/80) - 1), normalized
    by its window sum so a unit tone at a bin center responds equally in
    every bin. Frames are spaced by `hop`; the longest (lowest) kernel is
    the effective window, so frame k covers samples [k*hop, k*hop + N_max).
    """
    sr = clip.sample_rate
    freqs = cqt_bin_frequencies(sr)
    q_factor = 1.0 / (2.0 ** (1.0 / CQT_BINS_PER_OCTAVE) - 1.0)
    lengths = np.ceil(q_factor * sr / freqs).astype(int)
    n_max = int(lengths[0])
    if len(clip) < n_max:
        raise ValueError(
            f"clip too short for lowest CQT kernel: {len(clip)} < {n_max} samples"
        )
    kernels = []
    for f_k, n_k in zip(freqs, lengths):
        window = hann_window(int(n_k))
        phase = np.exp(-2j * np.pi * f_k * np.arange(n_k) / sr)
        kernels.append(window * phase / window.sum())
    n_frames = frame_count(len(clip), n_max, hop)
    out = np.empty((n_frames, len(freqs)))
    for t in range(n_frames):
        start = t * hop
        center = start + n_max // 2
        for k, kern in enumerate(kernels):
            n_k = lengths[k]
            lo = center - n_k // 2
            out[t, k] = np.abs(np.dot(clip.samples[lo : lo + n_k], kern))
    return FeatureMap(
        kind=FeatureKind.CQT, data=out, frame_hop=hop, window_size=n_max
    )


_EXTRACTORS = {
    FeatureKind.MEL: mel_features,
    FeatureKind.LOG_MEL: log_mel_features,
    FeatureKind.MFCC: mfcc_features,
    FeatureKind.CQT: cqt_features,
}


def extract(clip: AudioClip, kind: FeatureKind) -> FeatureMap:
    """Dispatch to the extractor for `kind`."""
    return _EXTRACTORS[kind](clip)


def segment(fm: FeatureMap, length: int = SEGMENT_LENGTH, hop: int = SEGMENT_HOP,
            parent_id: str = "") -> SegmentSet:
    """Cut a feature map into fixed-length frame windows.

    Segment k covers frames [k*hop, k*hop + length). A map shorter than
    one segment yields a single zero-padded segment.
    """
    if length < 1 or hop < 1:
        raise ValueError("length and hop must be >= 1")
    data = fm.data
    if fm.n_frames < length:
        padded = np.zeros((length, fm.n_bins))
        padded[: fm.n_frames] = data
        windows = [padded]
    else:
        count = (fm.n_frames - length) // hop + 1
        windows = [data[k * hop : k * hop + length] for k in range(count)]
    segments = tuple(
        FeatureMap(kind=fm.kind, data=w, frame_hop=fm.frame_hop,
                   window_size=fm.window_size)
        for w in windows
    )
    return SegmentSet(segments=segments, segment_length=length, hop=hop,
                      parent_id=parent_id)


def save_feature_map(path, fm: FeatureMap) -> None:
    """Write the flat binary format: magic, kind u8, n_frames u32 LE,
    n_bins u32 LE, then row-major float64."""
    header = FEATURE_MAGIC + struct.pack("<BII", fm.kind.value, fm.n_frames, fm.n_bins)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(fm.data.astype("<f8").tobytes(order="C"))


def load_feature_map(path) -> FeatureMap:
    """Read the flat binary feature-map format."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    kind_value, n_frames, n_bins = struct.unpack("<BII", blob[4:13])
    data = np.frombuffer(blob[13:], dtype="<f8", count=n_frames * n_bins)
    return FeatureMap(
        kind=FeatureKind(kind_value),
        data=data.reshape(n_frames, n_bins).copy(),
        frame_hop=HOP_SIZE,
        window_size=WINDOW_SIZE,
    )


@dataclass
class Standardizer:
    """Per-bin zero-mean unit-variance scaling, statistics from training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, maps: list) -> "Standardizer":
        stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in maps], axis=0)
        std = stacked.std(axis=0)
        return cls(mean=stacked.mean(axis=0), std=np.maximum(std, 1e-8))

    def apply(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.mean) / self.std
