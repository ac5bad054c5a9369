"""Prune-and-retrain protocol over influence rankings.

The flow: rank training ids by mean score (most positive first), remove a
fraction from the harmful or helpful end, retrain from the original
checkpoint model with the identical config, evaluate on the untouched test
split. ``sweep`` runs the full strategy x direction x fraction grid plus a
no-exclusion baseline row and reports failures without stopping.

The random strategy draws one seeded permutation per (fraction, seed) cell
and both direction labels share its removal prefix: random removal has no
direction semantics, and sharing the set makes the two rows provably equal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import DatasetSplit
from .errors import InputError, PrefcurateError
from .influence import ScoreTable
from .training import AccuracyReport, TrainConfig, evaluate, train

__all__ = [
    "STRATEGIES",
    "DIRECTIONS",
    "CurationPlan",
    "CurationResult",
    "rank",
    "random_ranking",
    "removal_count",
    "removal_set",
    "prune",
    "retrain_eval",
    "sweep",
    "save_sweep_csv",
    "load_sweep_csv",
]

STRATEGIES = ("influence", "gradient_similarity", "random")
DIRECTIONS = ("drop_most_harmful", "drop_most_helpful")


@dataclass(frozen=True)
class CurationPlan:
    """One sweep cell: which scores, which end of the ranking, how much."""

    strategy: str
    direction: str
    fraction: float
    seed: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InputError(f"unknown strategy {self.strategy!r}")
        if self.direction not in DIRECTIONS:
            raise InputError(f"unknown direction {self.direction!r}")
        if not 0.0 < self.fraction < 100.0:
            raise InputError("fraction must lie strictly between 0 and 100")
        if self.strategy == "random" and self.seed is None:
            raise InputError("random strategy needs a seed")

    def label(self) -> str:
        return f"{self.strategy}/{self.direction}/{self.fraction:g}%"


@dataclass(frozen=True)
class CurationResult:
    plan: CurationPlan | None  # None marks the no-exclusion baseline row
    retained_size: int
    report: AccuracyReport
    pruned_ids: tuple
    train_seed: int


def rank(scores: ScoreTable) -> list:
    """Train ids ordered most harmful first: descending mean, then id."""
    order = sorted(
        zip(scores.train_ids, scores.mean_scores),
        key=lambda item: (-item[1], item[0]),
    )
    return [int(train_id) for train_id, _ in order]


def random_ranking(train_ids, seed: int) -> list:
    """Seeded permutation of the train ids; the head is the removal prefix."""
    train_ids = sorted(int(i) for i in train_ids)
    rng = np.random.default_rng(seed)
    return [train_ids[i] for i in rng.permutation(len(train_ids))]


def removal_count(n_train: int, fraction: float) -> int:
    """Round-half-up count of examples a fraction removes."""
    if n_train < 1:
        raise InputError("empty training set")
    return int(math.floor(n_train * fraction / 100.0 + 0.5))


def removal_set(ranking, plan: CurationPlan) -> tuple:
    """Ids the plan removes: the ranking's head for the harmful direction
    (and always for the random strategy, whose direction labels share the
    set), its tail for the helpful direction."""
    n = len(ranking)
    k = removal_count(n, plan.fraction)
    if k >= n:
        raise InputError(
            f"fraction {plan.fraction}% would remove all {n} examples"
        )
    if plan.strategy == "random" or plan.direction == "drop_most_harmful":
        return tuple(ranking[:k])
    return tuple(ranking[n - k :])


def prune(split: DatasetSplit, ranking, plan: CurationPlan) -> DatasetSplit:
    """Remove the planned slice of the ranking from the train part only."""
    train_ids = [pair.id for pair in split.train]
    if sorted(ranking) != sorted(train_ids):
        raise InputError("ranking must cover exactly the train ids")
    removed = set(removal_set(ranking, plan))
    return replace(
        split,
        train=tuple(pair for pair in split.train if pair.id not in removed),
    )


def retrain_eval(
    initial_model,
    pruned_split: DatasetSplit,
    train_config: TrainConfig,
    *,
    plan: CurationPlan | None = None,
    pruned_ids=(),
) -> CurationResult:
    """Train from the original initialization on the pruned set, then test."""
    try:
        result = train(initial_model, list(pruned_split.train), train_config)
    except PrefcurateError as exc:
        label = plan.label() if plan is not None else "baseline"
        raise type(exc)(f"cell {label}: {exc}") from exc
    return CurationResult(
        plan=plan,
        retained_size=len(pruned_split.train),
        report=evaluate(result.model, list(pruned_split.test)),
        pruned_ids=tuple(sorted(int(i) for i in pruned_ids)),
        train_seed=train_config.seed,
    )


def sweep(
    initial_model,
    split: DatasetSplit,
    tables: dict,
    fractions,
    train_config: TrainConfig,
    *,
    random_seed: int = 0,
) -> tuple:
    """Full grid over strategies x directions x fractions plus a baseline.

    ``tables`` maps score-based strategy names to their ScoreTable. A failed
    cell is recorded as (plan label, message) and the sweep continues.
    """
    fractions = [float(f) for f in fractions]
    if not fractions:
        raise InputError("sweep needs at least one fraction")
    results = []
    failures = []
    results.append(retrain_eval(initial_model, split, train_config))
    rankings = {name: rank(table) for name, table in tables.items()}
    train_ids = [pair.id for pair in split.train]
    for strategy in STRATEGIES:
        if strategy != "random" and strategy not in rankings:
            raise InputError(f"sweep is missing a score table for {strategy!r}")
        for direction in DIRECTIONS:
            for fraction in fractions:
                plan = CurationPlan(
                    strategy=strategy,
                    direction=direction,
                    fraction=fraction,
                    seed=random_seed if strategy == "random" else None,
                )
                ranking = (
                    random_ranking(train_ids, random_seed)
                    if strategy == "random"
                    else rankings[strategy]
                )
                try:
                    removed = removal_set(ranking, plan)
                    pruned = prune(split, ranking, plan)
                    results.append(
                        retrain_eval(
                            initial_model,
                            pruned,
                            train_config,
                            plan=plan,
                            pruned_ids=removed,
                        )
                    )
                except PrefcurateError as exc:
                    failures.append({"cell": plan.label(), "error": str(exc)})
    return results, failures


def _csv_row(result: CurationResult) -> str:
    plan = result.plan
    strategy = plan.strategy if plan else "none"
    direction = plan.direction if plan else "none"
    fraction = plan.fraction if plan else 0.0
    seed = plan.seed if plan and plan.seed is not None else result.train_seed
    report = result.report
    return (
        f"{strategy},{direction},{repr(float(fraction))},{repr(report.accuracy)},"
        f"{repr(report.wald_half_width)},{report.n},{result.retained_size},{seed}\n"
    )


def save_sweep_csv(results, path, failures=None, failures_path=None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(
            "strategy,direction,fraction,accuracy,wald_half_width,n,retained_count,seed\n"
        )
        for result in results:
            handle.write(_csv_row(result))
    if failures_path is not None:
        with Path(failures_path).open("w", encoding="utf-8") as handle:
            json.dump(failures or [], handle, indent=2, sort_keys=True)
            handle.write("\n")


def load_sweep_csv(path) -> list:
    """Rows back as dicts with numeric fields parsed (for plotting)."""
    import csv as _csv

    rows = []
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        for row in _csv.DictReader(handle):
            rows.append(
                {
                    "strategy": row["strategy"],
                    "direction": row["direction"],
                    "fraction": float(row["fraction"]),
                    "accuracy": float(row["accuracy"]),
                    "wald_half_width": float(row["wald_half_width"]),
                    "n": int(row["n"]),
                    "retained_count": int(row["retained_count"]),
                    "seed": int(row["seed"]),
                }
            )
    return rows
