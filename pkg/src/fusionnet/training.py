"""Training loop: Adam on binary cross-entropy with L2 and dropout.

Every iteration logs the batch-mean BCE and the mean squared error
between sigmoid outputs and targets, so loss/MSE convergence curves can
be exported and compared across fusion modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _accumulate, _make
from .fusion import FusionModel

BCE_CLAMP = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Hyper-parameters of one training run (defaults are the published
    feature-fusion settings)."""

    learning_rate: float = 0.001
    batch_size: int = 100
    epochs: int = 10
    l2: float = 0.005
    dropout: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning_rate, batch_size, epochs must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0,1)")


@dataclass(frozen=True)
class CurvePoint:
    iteration: int
    bce_loss: float
    mse: float


@dataclass(frozen=True)
class Sample:
    """One training unit: a standardized segment per channel plus a
    multi-hot target."""

    channels: list
    target: np.ndarray
    clip_id: str = ""


def bce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over classes.

    Predictions are clamped to [1e-7, 1 - 1e-7]; the clamp is constant in
    the backward pass.
    """
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.data.ndim != 1 or pred.shape[0] != target.shape[0]:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    clamped = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (pred.data > BCE_CLAMP) & (pred.data < 1.0 - BCE_CLAMP)
    n = target.shape[0]
    value = -np.mean(target * np.log(clamped) + (1.0 - target) * np.log1p(-clamped))

    def backward(g):
        grad = (-target / clamped + (1.0 - target) / (1.0 - clamped)) / n
        _accumulate(pred, float(g) * grad * inside)

    return _make(np.asarray(value), (pred,), backward, "bce_loss")


def mse_value(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error between sigmoid outputs and targets (metric only)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    return float(np.mean((pred - target) ** 2))


def l2_penalty(weights, coeff: float = 0.005) -> Tensor:
    """coeff * sum of squared entries over the given weight tensors."""
    total = None
    for w in weights:
        term = ad.tensor_sum(ad.square(w))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return Tensor(np.asarray(0.0))
    return ad.mul(total, Tensor(coeff))


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, lr: float = 0.001,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                raise TrainingError(f"parameter {name!r} has no gradient")
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def batch_objective(model: FusionModel, batch: list, l2_coeff: float,
                    train: bool = False,
                    dropout_rng: np.random.Generator | None = None) -> tuple:
    """Batch-mean BCE plus L2 as an autodiff scalar, with logged metrics.

    Returns (objective tensor, mean bce, mean mse).
    """
    total = None
    bce_sum = 0.0
    mse_sum = 0.0
    for sample in batch:
        probs = model.forward(sample.channels, train=train, dropout_rng=dropout_rng)
        loss = bce_loss(probs, sample.target)
        bce_sum += float(loss.data)
        mse_sum += mse_value(probs.data, sample.target)
        total = loss if total is None else ad.add(total, loss)
    mean_bce = ad.mul(total, Tensor(1.0 / len(batch)))
    objective = mean_bce
    if l2_coeff > 0:
        objective = ad.add(objective, l2_penalty(model.weight_parameters().values(),
                                                 l2_coeff))
    return objective, bce_sum / len(batch), mse_sum / len(batch)


def train(model: FusionModel, dataset: list, cfg: TrainConfig):
    """Run the full Adam loop; returns (model, per-iteration curve).

    Deterministic for a fixed config seed: shuffling and dropout draw from
    independent seeded streams.
    """
    if not dataset:
        raise ValueError("empty dataset")
    shuffle_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2)
    )
    optimizer = Adam(model.parameters(), lr=cfg.learning_rate)
    curve = []
    iteration = 0
    for _epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            iteration += 1
            model.zero_grad()
            try:
                objective, bce, mse = batch_objective(
                    model, batch, cfg.l2, train=True, dropout_rng=dropout_rng)
                ad.backward(objective)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite loss at iteration {iteration}: {exc}")
            optimizer.step()
            curve.append(CurvePoint(iteration=iteration, bce_loss=bce, mse=mse))
    return model, curve


def segment_vote(per_segment_preds: list) -> np.ndarray:
    """Clip-level probabilities: arithmetic mean of segment probabilities."""
    if not per_segment_preds:
        raise ValueError("no segment predictions to vote on")
    stacked = np.stack([np.asarray(p, dtype=np.float64) for p in per_segment_preds])
    return stacked.mean(axis=0)


def write_curves(path, curve: list) -> None:
    """Export a curve as CSV: iteration,bce_loss,mse (12 significant digits)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration,bce_loss,mse\n")
        for point in curve:
            fh.write(f"{point.iteration},{point.bce_loss:.12g},{point.mse:.12g}\n")
