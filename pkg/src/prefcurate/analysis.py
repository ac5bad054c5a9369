"""Rank-agreement diagnostics and the leave-one-out retraining oracle.

``spearman`` and ``topk_overlap`` compare two total orderings of the same id
set (rankings from :func:`curation.rank` have no ties by construction).
``loo_oracle`` is the ground truth that influence scores are checked
against: retrain the convex model once per held-out training example, to a
tight optimum, and record how much the mean validation loss drops when that
example is absent. Positive delta = removal helps = the example was harmful,
matching the sign of the influence score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import InputError, OracleError, TrainingError
from .models import mean_bt_loss
from .training import fit_convex

__all__ = [
    "spearman",
    "topk_overlap",
    "RankAgreementReport",
    "rank_agreement",
    "default_k_grid",
    "loo_oracle",
    "save_agreement_csv",
    "save_agreement_summary",
    "save_loo_csv",
]


def _check_same_ids(ranking_a, ranking_b):
    if len(ranking_a) != len(set(ranking_a)) or len(ranking_b) != len(set(ranking_b)):
        raise InputError("rankings must not repeat ids")
    if set(ranking_a) != set(ranking_b):
        raise InputError("rankings must cover the same id set")


def spearman(ranking_a, ranking_b) -> float:
    """Spearman rank correlation of two total orderings of one id set.

    No ties are possible, so the closed form 1 - 6 sum(d^2) / (n (n^2 - 1))
    applies directly.
    """
    _check_same_ids(ranking_a, ranking_b)
    n = len(ranking_a)
    if n < 2:
        raise InputError("spearman needs at least two items")
    position_b = {item: pos for pos, item in enumerate(ranking_b)}
    d_squared = sum(
        (pos - position_b[item]) ** 2 for pos, item in enumerate(ranking_a)
    )
    return 1.0 - 6.0 * d_squared / (n * (n * n - 1))


def topk_overlap(ranking_a, ranking_b, k: int, end: str = "top") -> float:
    """|intersection| / k between the two rankings' heads (or tails)."""
    _check_same_ids(ranking_a, ranking_b)
    if end not in ("top", "bottom"):
        raise InputError(f"end must be 'top' or 'bottom', got {end!r}")
    if not 1 <= k <= len(ranking_a):
        raise InputError(f"k must lie in [1, {len(ranking_a)}], got {k}")
    if end == "top":
        head_a, head_b = set(ranking_a[:k]), set(ranking_b[:k])
    else:
        head_a, head_b = set(ranking_a[-k:]), set(ranking_b[-k:])
    return len(head_a & head_b) / k


def default_k_grid(n: int) -> list:
    """k values at 1, 5, 10, 25, 50 percent of n (each at least 1, deduplicated)."""
    grid = sorted({max(1, round(n * pct / 100.0)) for pct in (1, 5, 10, 25, 50)})
    return [int(k) for k in grid]


@dataclass(frozen=True)
class RankAgreementReport:
    spearman_rho: float
    k_values: tuple
    top_overlap: tuple
    bottom_overlap: tuple


def rank_agreement(ranking_a, ranking_b, k_values=None) -> RankAgreementReport:
    if k_values is None:
        k_values = default_k_grid(len(ranking_a))
    k_values = tuple(int(k) for k in k_values)
    return RankAgreementReport(
        spearman_rho=spearman(ranking_a, ranking_b),
        k_values=k_values,
        top_overlap=tuple(
            topk_overlap(ranking_a, ranking_b, k, "top") for k in k_values
        ),
        bottom_overlap=tuple(
            topk_overlap(ranking_a, ranking_b, k, "bottom") for k in k_values
        ),
    )


def loo_oracle(
    model,
    split,
    *,
    l2_reg: float = 1e-3,
    grad_tol: float = 1e-8,
    max_train: int = 200,
) -> dict:
    """Per-train-example validation-loss deltas from exact retraining.

    Returns {train id: delta} with delta = mean val loss of the model fit on
    all training pairs minus mean val loss of the model fit without that
    example. Every fit starts from zero (no warm start) and must reach
    gradient norm < ``grad_tol``.
    """
    if not hasattr(model, "delta_features"):
        raise InputError("the oracle needs the convex (linear) reward model")
    train = sorted(split.train, key=lambda pair: pair.id)
    val = sorted(split.val, key=lambda pair: pair.id)
    if not train or not val:
        raise InputError("oracle needs nonempty train and val parts")
    if len(train) > max_train:
        raise InputError(
            f"oracle capped at {max_train} training examples, got {len(train)}"
        )
    try:
        full_fit = fit_convex(model, train, l2_reg=l2_reg, grad_tol=grad_tol)
    except TrainingError as exc:
        raise OracleError(f"full fit failed: {exc}") from exc
    full_loss = mean_bt_loss(full_fit, val)
    deltas = {}
    for i, held_out in enumerate(train):
        subset = train[:i] + train[i + 1 :]
        try:
            fit = fit_convex(model, subset, l2_reg=l2_reg, grad_tol=grad_tol)
        except TrainingError as exc:
            raise OracleError(
                f"retraining without example {held_out.id} failed: {exc}"
            ) from exc
        deltas[int(held_out.id)] = full_loss - mean_bt_loss(fit, val)
    return deltas


def save_agreement_csv(report: RankAgreementReport, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        handle.write("k,overlap_top,overlap_bottom\n")
        for k, top, bottom in zip(
            report.k_values, report.top_overlap, report.bottom_overlap
        ):
            handle.write(f"{k},{repr(float(top))},{repr(float(bottom))}\n")


def save_agreement_summary(report: RankAgreementReport, path, extra=None) -> None:
    payload = {
        "spearman_rho": report.spearman_rho,
        "k_values": list(report.k_values),
        "top_overlap": list(report.top_overlap),
        "bottom_overlap": list(report.bottom_overlap),
    }
    if extra:
        payload.update(extra)
    with Path(path).open("w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def save_loo_csv(deltas: dict, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        handle.write("train_id,delta\n")
        for train_id in sorted(deltas):
            handle.write(f"{train_id},{repr(float(deltas[train_id]))}\n")
