"""Multi-channel fusion model.

Each acoustic feature channel is projected to a common bin count and run
through a two-layer conv/pool stack whose kernels are shared by every
channel. Early fusion computes a frame-similarity matrix between channel
pairs, turns it into attentive feature maps through shared attention
weights, and stacks those maps with the representative maps before the
second conv layer. Late fusion scores every channel pair with a shared
bilinear interaction matrix and appends the scores to the pooled features
feeding the dense head.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _accumulate, _fault_gain, _make
from .features import FeatureKind

COMMON_BINS = 40
CONV_KERNEL = 3


class FusionMode(Enum):
    VANILLA = "vanilla"
    EARLY_FUSION = "ef"
    LATE_FUSION = "lf"
    HYBRID = "hybrid"

    @property
    def uses_attention(self) -> bool:
        return self in (FusionMode.EARLY_FUSION, FusionMode.HYBRID)

    @property
    def uses_interaction(self) -> bool:
        return self in (FusionMode.LATE_FUSION, FusionMode.HYBRID)


ALL_MODES = (FusionMode.VANILLA, FusionMode.EARLY_FUSION,
             FusionMode.LATE_FUSION, FusionMode.HYBRID)


def similarity_score(a: np.ndarray, b: np.ndarray) -> float:
    """1 / (1 + ||a - b||_2) for two equal-length frame vectors."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"frame length mismatch: {a.shape} vs {b.shape}")
    return float(1.0 / (1.0 + np.linalg.norm(a - b)))


def build_similarity_matrix(f_i: Tensor, f_j: Tensor) -> Tensor:
    """Pairwise frame similarity between two [bins, frames] maps.

    Entry (x, y) = similarity_score(column x of f_i, column y of f_j).
    Differentiable in both maps; at coinciding frames the distance kink
    gets subgradient zero.
    """
    if f_i.data.ndim != 2 or f_j.data.ndim != 2 or f_i.shape[0] != f_j.shape[0]:
        raise ValueError(f"bin mismatch: {f_i.shape} vs {f_j.shape}")
    diff = f_i.data[:, :, None] - f_j.data[:, None, :]  # [b, t_i, t_j]
    dist = np.sqrt(np.sum(diff * diff, axis=0))
    sim = 1.0 / (1.0 + dist)

    def backward(g):
        g = g * _fault_gain("similarity_matrix")
        denom = (1.0 + dist) ** 2 * dist
        coeff = np.divide(-g, denom, out=np.zeros_like(dist), where=dist > 0)
        _accumulate(f_i, f_i.data * coeff.sum(axis=1)[None, :] - f_j.data @ coeff.T)
        _accumulate(f_j, f_j.data * coeff.sum(axis=0)[None, :] - f_i.data @ coeff)

    return _make(sim, (f_i, f_j), backward, "similarity_matrix")


def attentive_maps(sim: Tensor, w_i: Tensor, w_j: Tensor) -> tuple:
    """Attentive feature maps for both channels of a pair.

    Channel i gets w_i @ sim^T (shape [bins, t_i]); channel j gets
    w_j @ sim (shape [bins, t_j]).
    """
    return ad.matmul(w_i, ad.transpose(sim)), ad.matmul(w_j, sim)


def early_fuse(representative: Tensor, attentive: Tensor) -> Tensor:
    """Stack a representative map with its attentive map as 2 channels."""
    return ad.stack_channels([representative, attentive])


def interaction_score(x: Tensor, w: Tensor, y: Tensor) -> Tensor:
    """Bilinear interaction x^T W y between two pooled channel vectors."""
    if x.data.ndim != 1 or y.data.ndim != 1 or w.data.ndim != 2:
        raise ValueError(f"interaction expects vectors and a matrix, got "
                         f"{x.shape}, {w.shape}, {y.shape}")
    d1, d2 = w.shape
    if x.shape[0] != d1 or y.shape[0] != d2:
        raise ValueError(
            f"interaction dim mismatch: x {x.shape}, W {w.shape}, y {y.shape}"
        )
    value = x.data @ w.data @ y.data

    def backward(g):
        g = float(g) * _fault_gain("interaction_score")
        _accumulate(x, g * (w.data @ y.data))
        _accumulate(y, g * (w.data.T @ x.data))
        _accumulate(w, g * np.outer(x.data, y.data))

    return _make(np.asarray(value), (x, w, y), backward, "interaction_score")


def late_fuse(pooled: list, w: Tensor | None, include_scores: bool) -> Tensor:
    """Concatenate pooled channel vectors, plus pairwise interaction
    scores (unordered pairs, i < j) when `include_scores` is set."""
    parts = list(pooled)
    if include_scores:
        if w is None:
            raise ValueError("interaction matrix required for late fusion")
        for i, j in itertools.combinations(range(len(pooled)), 2):
            parts.append(interaction_score(pooled[i], w, pooled[j]))
    return ad.concat(parts)


@dataclass(frozen=True)
class ChannelOutput:
    """Per-channel forward products: the 2-D representative map and the
    pooled feature vector."""

    representative: Tensor
    pooled: Tensor
    channel_index: int


@dataclass
class ModelConfig:
    """Shape and mode parameters of a fusion model.

    Desk-scale defaults; the published-scale topology uses kernels 128/256,
    head depth 6 with 600 neurons, and 1024-frame segments.
    """

    channels: list
    channel_bins: list
    n_classes: int
    segment_frames: int = 64
    common_bins: int = COMMON_BINS
    kernels_l1: int = 8
    kernels_l2: int = 16
    head_depth: int = 2
    head_width: int = 32
    dropout: float = 0.3
    mode: FusionMode = FusionMode.VANILLA

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = FusionMode(self.mode)
        self.channels = [
            FeatureKind[c] if isinstance(c, str) else c for c in self.channels
        ]
        if len(self.channels) != len(set(self.channels)):
            raise ValueError("channels must be distinct")
        if len(self.channels) != len(self.channel_bins):
            raise ValueError("channel_bins must match channels")
        for value in (self.n_classes, self.segment_frames, self.common_bins,
                      self.kernels_l1, self.kernels_l2, self.head_depth,
                      self.head_width):
            if value <= 0:
                raise ValueError("model scale values must be positive")

    @property
    def n_channels(self) -> int:
        return len(self.channels)


def _after_conv_pool(h: int, w: int, kernel: int = CONV_KERNEL) -> tuple:
    """Spatial shape after one valid 3x3 conv and an optional 2x2 pool.

    The pool is skipped when the convolved map is smaller than 2x2 (tiny
    gradcheck shapes); the conv itself always applies.
    """
    h, w = h - kernel + 1, w - kernel + 1
    if h >= 2 and w >= 2:
        h, w = h // 2, w // 2
    return h, w


def _maybe_pool(x: Tensor) -> Tensor:
    _, h, w = x.shape
    if h >= 2 and w >= 2:
        return ad.max_pool2d(x)
    return x


class FusionModel:
    """Assembled multi-channel network with one shared parameter store.

    Conv kernels are a single set referenced by all channels; attention
    weights (early fusion) and the interaction matrix (late fusion) are
    shared across channel pairs. Attention weights draw from a separate
    seeded stream, so zeroing them reproduces the same-seed vanilla model
    bit for bit.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        cfg = config
        rng = np.random.default_rng(seed)
        self.params = {}

        for c, bins in enumerate(cfg.channel_bins):
            self.params[f"proj/{c}"] = ad.parameter(
                (cfg.common_bins, bins), rng, fan_in=bins, fan_out=cfg.common_bins,
                name=f"proj/{c}")
        k = CONV_KERNEL
        self.params["conv1/kernels"] = ad.parameter(
            (cfg.kernels_l1, 1, k, k), rng,
            fan_in=1 * k * k, fan_out=cfg.kernels_l1 * k * k, name="conv1/kernels")
        self.params["conv2/kernels"] = ad.parameter(
            (cfg.kernels_l2, 2, k, k), rng,
            fan_in=2 * k * k, fan_out=cfg.kernels_l2 * k * k, name="conv2/kernels")

        b1, t1 = _after_conv_pool(cfg.common_bins, cfg.segment_frames)
        self.layer1_shape = (b1, t1)
        if cfg.mode.uses_attention:
            # separate stream: attention draws must not shift the shared
            # conv/head draws, so forcing these to zero reproduces the
            # vanilla model of the same seed exactly
            att_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
            self.params["attention/w_i"] = ad.parameter(
                (b1, t1), att_rng, fan_in=t1, fan_out=b1, name="attention/w_i")
            self.params["attention/w_j"] = ad.parameter(
                (b1, t1), att_rng, fan_in=t1, fan_out=b1, name="attention/w_j")

        self.pooled_dim = cfg.kernels_l1 + cfg.kernels_l2
        if cfg.mode.uses_interaction:
            self.params["interaction/w"] = ad.parameter(
                (self.pooled_dim, self.pooled_dim), rng,
                fan_in=self.pooled_dim, fan_out=self.pooled_dim, name="interaction/w")

        n_pairs = cfg.n_channels * (cfg.n_channels - 1) // 2
        head_in = cfg.n_channels * self.pooled_dim
        if cfg.mode.uses_interaction:
            head_in += n_pairs
        self.head_input_dim = head_in
        width = cfg.head_width
        for layer in range(cfg.head_depth):
            fan_in = head_in if layer == 0 else width
            self.params[f"head/{layer}/weights"] = ad.parameter(
                (width, fan_in), rng, fan_in=fan_in, fan_out=width,
                name=f"head/{layer}/weights")
            self.params[f"head/{layer}/bias"] = ad.zeros_parameter(
                (width,), name=f"head/{layer}/bias")
        out_in = width if cfg.head_depth > 0 else head_in
        self.params["head/out/weights"] = ad.parameter(
            (cfg.n_classes, out_in), rng, fan_in=out_in, fan_out=cfg.n_classes,
            name="head/out/weights")
        self.params["head/out/bias"] = ad.zeros_parameter(
            (cfg.n_classes,), name="head/out/bias")

    def parameters(self) -> dict:
        return self.params

    def weight_parameters(self) -> dict:
        """Trainable tensors subject to L2 (biases excluded)."""
        return {n: t for n, t in self.params.items() if not n.endswith("/bias")}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def _channel_stack(self, x: np.ndarray, channel: int) -> tuple:
        """Project one [frames, bins] input and run conv layer 1."""
        data = np.asarray(x, dtype=np.float64)
        expected = (self.config.segment_frames, self.config.channel_bins[channel])
        if data.shape != expected:
            raise ValueError(
                f"channel {channel} input shape {data.shape} != expected {expected}"
            )
        projected = ad.matmul(self.params[f"proj/{channel}"], Tensor(data.T))
        conv = ad.conv2d(ad.expand_channel(projected), self.params["conv1/kernels"])
        return _maybe_pool(ad.relu(conv))

    def forward(self, channel_inputs: list, train: bool = False,
                dropout_rng: np.random.Generator | None = None,
                return_details: bool = False):
        """Per-class sigmoid probabilities for one multi-channel sample.

        `channel_inputs` holds one standardized [segment_frames, bins]
        array per configured channel.
        """
        cfg = self.config
        if len(channel_inputs) != cfg.n_channels:
            raise ValueError(
                f"got {len(channel_inputs)} channel inputs, config has {cfg.n_channels}"
            )
        layer1 = [self._channel_stack(x, c) for c, x in enumerate(channel_inputs)]
        reps = [ad.channel_mean(a) for a in layer1]

        if cfg.mode.uses_attention:
            w_i, w_j = self.params["attention/w_i"], self.params["attention/w_j"]
            contributions = [[] for _ in range(cfg.n_channels)]
            for i, j in itertools.combinations(range(cfg.n_channels), 2):
                sim = build_similarity_matrix(reps[i], reps[j])
                att_i, att_j = attentive_maps(sim, w_i, w_j)
                contributions[i].append(att_i)
                contributions[j].append(att_j)
            attentive = []
            for maps in contributions:
                total = maps[0]
                for extra in maps[1:]:
                    total = ad.add(total, extra)
                attentive.append(ad.mul(total, Tensor(1.0 / len(maps))))
        else:
            attentive = [Tensor(np.zeros(r.shape)) for r in reps]

        outputs = []
        for c in range(cfg.n_channels):
            stacked = early_fuse(reps[c], attentive[c])
            conv = ad.conv2d(stacked, self.params["conv2/kernels"])
            layer2 = _maybe_pool(ad.relu(conv))
            pooled = ad.concat([ad.global_avg_pool(layer1[c]),
                                ad.global_avg_pool(layer2)])
            outputs.append(ChannelOutput(representative=reps[c], pooled=pooled,
                                         channel_index=c))

        fused = late_fuse([o.pooled for o in outputs],
                          self.params.get("interaction/w"),
                          include_scores=cfg.mode.uses_interaction)

        hidden = fused
        keep_prob = 1.0 - cfg.dropout
        for layer in range(cfg.head_depth):
            hidden = ad.dense(hidden, self.params[f"head/{layer}/weights"],
                              self.params[f"head/{layer}/bias"])
            hidden = ad.relu(hidden)
            hidden = ad.dropout(hidden, keep_prob, rng=dropout_rng, train=train)
        logits = ad.dense(hidden, self.params["head/out/weights"],
                          self.params["head/out/bias"])
        probs = ad.sigmoid(logits)
        if return_details:
            return probs, outputs
        return probs

    def state(self) -> list:
        """Ordered (name, values) pairs for checkpointing."""
        return [(name, t.data.copy()) for name, t in self.params.items()]

    def load_state(self, entries: list) -> None:
        """Restore parameters from checkpoint entries, by name."""
        by_name = dict(entries)
        for name, tensor in self.params.items():
            if name not in by_name:
                raise ValueError(f"checkpoint missing tensor {name!r}")
            values = by_name[name]
            if values.shape != tensor.data.shape:
                raise ValueError(
                    f"checkpoint tensor {name!r} shape {values.shape} != "
                    f"model shape {tensor.data.shape}"
                )
            tensor.data = values.astype(np.float64).copy()
