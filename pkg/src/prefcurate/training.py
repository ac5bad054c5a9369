"""Reward-model training and evaluation.

``train`` runs AdamW with a cosine learning-rate schedule over the flat
trainable vector, all through the graph engine. ``fit_convex`` is a separate
route for the linear model only: a damped-Newton solve (closed-form gradient
and Hessian through scipy) driven to a tight gradient-norm tolerance, which
is what the leave-one-out oracle and the convex acceptance instances need.

Accuracy is strict: a tie between the two rewards counts as incorrect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
from scipy.special import expit

from . import engine
from .autodiff import batch_mean_loss
from .errors import InputError, TrainingError

__all__ = [
    "TrainConfig",
    "TrainResult",
    "AccuracyReport",
    "wald_half_width",
    "evaluate",
    "train",
    "fit_convex",
    "save_loss_curve_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 3
    batch_size: int = 124
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or not math.isfinite(self.learning_rate):
            raise InputError("learning_rate must be positive and finite")
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InputError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise InputError("eps must be positive")
        if self.weight_decay < 0:
            raise InputError("weight_decay must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise InputError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "schedule": self.schedule,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class AccuracyReport:
    accuracy: float
    n: int
    wald_half_width: float
    correct: tuple = field(repr=False, default=())

    @classmethod
    def from_correct(cls, correct) -> "AccuracyReport":
        correct = tuple(bool(c) for c in correct)
        n = len(correct)
        if n == 0:
            raise InputError("cannot evaluate on an empty dataset")
        p = sum(correct) / n
        return cls(accuracy=p, n=n, wald_half_width=wald_half_width(p, n), correct=correct)


def wald_half_width(p: float, n: int) -> float:
    """95% Wald interval half-width: ``1.96 * sqrt(p (1 - p) / n)``."""
    if not 0.0 <= p <= 1.0:
        raise InputError("p must lie in [0, 1]")
    if n < 1:
        raise InputError("n must be >= 1")
    return 1.96 * math.sqrt(p * (1.0 - p) / n)


def evaluate(model, pairs) -> AccuracyReport:
    """Pairwise accuracy: reward(chosen) strictly above reward(rejected)."""
    return AccuracyReport.from_correct(
        model.reward(pair.chosen) > model.reward(pair.rejected) for pair in pairs
    )


@dataclass
class TrainResult:
    model: object
    loss_curve: list  # (step, learning_rate, batch_loss) triples
    config: TrainConfig


def _schedule_lr(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.schedule == "constant":
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def train(model, pairs, config: TrainConfig) -> TrainResult:
    """AdamW over the trainable vector; returns a new model and loss curve.

    Data order is a fresh seeded permutation per epoch; the last short batch
    is kept. The dropout stream (models that use it) is drawn from the same
    seed sequence, so a (model, data, config) triple fixes the run exactly.
    """
    if not pairs:
        raise InputError("cannot train on an empty dataset")
    layout = model.layout
    theta = model.params
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    order_rng, dropout_rng = (
        np.random.default_rng(s)
        for s in np.random.SeedSequence(config.seed).spawn(2)
    )
    n = len(pairs)
    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    curve = []
    step = 0
    for _ in range(config.epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [pairs[i] for i in order[start : start + config.batch_size]]
            leaves = model.bind(theta)
            loss = batch_mean_loss(model, leaves, batch, rng=dropout_rng)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingError(f"non-finite loss at step {step}")
            grads = engine.grad(loss, [leaves[name] for name in layout.names])
            g = layout.flatten(
                {name: t.data for name, t in zip(layout.names, grads)}
            )
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient at step {step}")
            lr = _schedule_lr(config, step, total_steps)
            step += 1
            m = config.beta1 * m + (1.0 - config.beta1) * g
            v = config.beta2 * v + (1.0 - config.beta2) * g * g
            m_hat = m / (1.0 - config.beta1**step)
            v_hat = v / (1.0 - config.beta2**step)
            theta = theta - lr * (
                m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * theta
            )
            curve.append((step, lr, loss_value))
    return TrainResult(model=model.with_params(theta), loss_curve=curve, config=config)


def save_loss_curve_csv(curve, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write("step,learning_rate,loss\n")
        for step, lr, loss in curve:
            handle.write(f"{step},{repr(float(lr))},{repr(float(loss))}\n")


def bt_objective_parts(deltas: np.ndarray, w: np.ndarray, l2_reg: float):
    """Value, gradient, Hessian of the regularized Bradley-Terry objective.

    ``deltas`` holds one row per pair: features(chosen) - features(rejected).
    Objective: mean softplus(-d @ w) + (l2_reg / 2) ||w||^2. Closed forms,
    no graph engine involved.
    """
    margins = deltas @ w
    n = deltas.shape[0]
    value = float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * l2_reg * (w @ w))
    sig_neg = expit(-margins)
    gradient = -(deltas.T @ sig_neg) / n + l2_reg * w
    weights = sig_neg * expit(margins)
    hessian = (deltas.T * weights) @ deltas / n + l2_reg * np.eye(w.shape[0])
    return value, gradient, hessian


def fit_convex(model, pairs, *, l2_reg: float = 0.0, grad_tol: float = 1e-8, max_iter: int = 500):
    """Train the linear model to a tight optimum; returns the fitted model.

    Raises :class:`TrainingError` if the final gradient norm misses
    ``grad_tol``. Only meaningful for models convex in their parameters.
    """
    if not hasattr(model, "delta_features"):
        raise InputError("fit_convex requires the linear reward model")
    if not pairs:
        raise InputError("cannot fit on an empty dataset")
    deltas = np.stack([model.delta_features(pair) for pair in pairs])
    result = scipy.optimize.minimize(
        lambda w: bt_objective_parts(deltas, w, l2_reg)[0],
        np.zeros(deltas.shape[1]),
        jac=lambda w: bt_objective_parts(deltas, w, l2_reg)[1],
        hess=lambda w: bt_objective_parts(deltas, w, l2_reg)[2],
        method="trust-exact",
        options={"gtol": grad_tol / 10.0, "maxiter": max_iter},
    )
    gradient_norm = float(
        np.linalg.norm(bt_objective_parts(deltas, result.x, l2_reg)[1])
    )
    if gradient_norm >= grad_tol:
        raise TrainingError(
            f"convex fit stalled: gradient norm {gradient_norm:.3e} >= {grad_tol:.0e}"
        )
    return model.with_params(result.x)
