"""Finite-difference verification of every differentiable primitive and
of the full toy hybrid model.

Used by the test suite and by the `gradcheck` CLI subcommand. All checks
use central differences (h = 1e-5) and the error metric
|analytic - numeric| / max(1, |analytic|), maximized over elements.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import FeatureKind
from .fusion import (
    FusionMode,
    FusionModel,
    ModelConfig,
    build_similarity_matrix,
    interaction_score,
)
from .training import bce_loss

TOLERANCE = 1e-4
FD_STEP = 1e-5

TOY_SEED = 0
TOY_ATTENTION_SEED = 100


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.tensor_sum(ad.mul(out, Tensor(weights)))


def check_primitives(h: float = FD_STEP) -> dict:
    """Max relative gradient error per primitive op."""
    rng = np.random.default_rng(42)
    results = {}

    def run(name, build_loss, params):
        errs = ad.finite_difference_gradients(build_loss, params, h=h)
        results[name] = max(errs.values())

    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = rng.normal(size=(4, 5))
    run("add", lambda: _weighted_sum(ad.add(a, b), w), {"a": a, "b": b})
    run("sub", lambda: _weighted_sum(ad.sub(a, b), w), {"a": a, "b": b})
    run("mul", lambda: _weighted_sum(ad.mul(a, b), w), {"a": a, "b": b})
    run("square", lambda: _weighted_sum(ad.square(a), w), {"a": a})
    run("sum", lambda: ad.tensor_sum(a), {"a": a})
    run("mean", lambda: ad.mean(a), {"a": a})
    run("sigmoid", lambda: _weighted_sum(ad.sigmoid(a), w), {"a": a})
    run("transpose", lambda: _weighted_sum(ad.transpose(a), w.T), {"a": a})

    # keep relu inputs away from the kink at 0
    r_data = rng.normal(size=(4, 5))
    r_data += np.sign(r_data) * 0.1
    r = Tensor(r_data, requires_grad=True)
    run("relu", lambda: _weighted_sum(ad.relu(r), w), {"r": r})

    m1 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    m2 = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    wm = rng.normal(size=(3, 6))
    run("matmul", lambda: _weighted_sum(ad.matmul(m1, m2), wm), {"m1": m1, "m2": m2})

    v1 = Tensor(rng.normal(size=4), requires_grad=True)
    v2 = Tensor(rng.normal(size=3), requires_grad=True)
    wc = rng.normal(size=7)
    run("concat", lambda: _weighted_sum(ad.concat([v1, v2]), wc), {"v1": v1, "v2": v2})

    s1 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    s2 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    ws = rng.normal(size=(2, 4, 5))
    run("stack_channels", lambda: _weighted_sum(ad.stack_channels([s1, s2]), ws),
        {"s1": s1, "s2": s2})

    cx = Tensor(rng.normal(size=(2, 7, 8)), requires_grad=True)
    ck = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    wconv = rng.normal(size=(3, 5, 6))
    run("conv2d", lambda: _weighted_sum(ad.conv2d(cx, ck), wconv), {"x": cx, "k": ck})

    px = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    wp = rng.normal(size=(2, 3, 3))
    run("max_pool2d", lambda: _weighted_sum(ad.max_pool2d(px), wp), {"x": px})

    gx = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    wg = rng.normal(size=3)
    run("global_avg_pool", lambda: _weighted_sum(ad.global_avg_pool(gx), wg), {"x": gx})
    wcm = rng.normal(size=(4, 5))
    run("channel_mean", lambda: _weighted_sum(ad.channel_mean(gx), wcm), {"x": gx})

    ex = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    wex = rng.normal(size=(1, 4, 5))
    run("expand_channel", lambda: _weighted_sum(ad.expand_channel(ex), wex), {"x": ex})

    dx = Tensor(rng.normal(size=6), requires_grad=True)
    dw = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    db = Tensor(rng.normal(size=4), requires_grad=True)
    wd = rng.normal(size=4)
    run("dense", lambda: _weighted_sum(ad.dense(dx, dw, db), wd),
        {"x": dx, "w": dw, "b": db})

    # fixed mask: same dropout RNG seed on every loss evaluation
    ox = Tensor(rng.normal(size=(8,)), requires_grad=True)
    wo = rng.normal(size=8)
    run("dropout",
        lambda: _weighted_sum(ad.dropout(ox, 0.7, rng=np.random.default_rng(5), train=True), wo),
        {"x": ox})

    f1 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    f2 = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    wsim = rng.normal(size=(5, 6))
    run("similarity_matrix",
        lambda: _weighted_sum(build_similarity_matrix(f1, f2), wsim),
        {"f1": f1, "f2": f2})

    ix = Tensor(rng.normal(size=5), requires_grad=True)
    iw = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    iy = Tensor(rng.normal(size=5), requires_grad=True)
    run("interaction_score",
        lambda: ad.mul(interaction_score(ix, iw, iy), Tensor(0.7)),
        {"x": ix, "w": iw, "y": iy})

    bp = Tensor(rng.uniform(0.05, 0.95, size=6), requires_grad=True)
    bt = (rng.random(6) > 0.5).astype(float)
    run("bce_loss", lambda: bce_loss(bp, bt), {"p": bp})

    return results


def toy_model(mode: FusionMode = FusionMode.HYBRID):
    """Tiny two-channel model (8x8 inputs, 2 kernels, pooled dim 4) with
    randomized parameters and inputs; all gradient paths are live."""
    cfg = ModelConfig(
        channels=[FeatureKind.MEL, FeatureKind.MFCC], channel_bins=[8, 8],
        n_classes=2, segment_frames=8, common_bins=8, kernels_l1=2,
        kernels_l2=2, head_depth=1, head_width=4, dropout=0.0, mode=mode)
    model = FusionModel(cfg, seed=TOY_SEED)
    rng = np.random.default_rng(TOY_ATTENTION_SEED)
    for name, tensor in model.params.items():
        if name.startswith("attention"):
            tensor.data = rng.normal(scale=0.5, size=tensor.data.shape)
    inputs = [rng.normal(size=(8, 8)) for _ in range(cfg.n_channels)]
    target = np.array([1.0, 0.0])
    return model, inputs, target


def check_full_model(mode: FusionMode = FusionMode.HYBRID, h: float = FD_STEP) -> dict:
    """Max relative gradient error per parameter of the toy model."""
    model, inputs, target = toy_model(mode)

    def build_loss():
        return bce_loss(model.forward(inputs, train=False), target)

    model.zero_grad()
    ad.backward(build_loss())
    dead = [n for n, t in model.params.items() if np.linalg.norm(t.grad) < 1e-12]
    if dead:
        raise AssertionError(f"toy model has dead gradient paths: {dead}")
    return ad.finite_difference_gradients(build_loss, model.params, h=h)


def run_gradcheck(tolerance: float = TOLERANCE):
    """All checks; returns (lines, worst, passed) for reporting."""
    lines = []
    worst = 0.0
    for name, err in check_primitives().items():
        lines.append((f"primitive {name}", err))
        worst = max(worst, err)
    for name, err in check_full_model().items():
        lines.append((f"model/hybrid {name}", err))
        worst = max(worst, err)
    return lines, worst, worst <= tolerance
