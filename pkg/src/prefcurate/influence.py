"""Influence scores via damped inverse-Hessian-vector products.

For every validation example j, conjugate gradient solves
``(H + damping * I) x_j = g_j`` using only Hessian-vector products, and each
training example i is scored ``-<x_j, g_i>``. Positive mean score marks a
training example whose upweighting raises validation loss (harmful). The
gradient-similarity baseline replaces the solve with ``x_j = g_j``.

Determinism contract: training gradients are computed once, shard by shard
over contiguous id ranges, and concatenated in shard order (never reduced
across shards in floating point); every score column is one matrix-vector
product against that fixed gradient block. Given seeds and deterministic
HVP mode, tables are byte-identical across runs, worker counts, and shard
counts.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import EvalCounter, HvpOperator, example_gradient
from .errors import CurvatureError, InputError, NumericalError

__all__ = [
    "CgConfig",
    "CgReport",
    "ScoreTable",
    "cg_solve",
    "influence_pair",
    "influence_matrix",
    "gradient_similarity_matrix",
]


@dataclass(frozen=True)
class CgConfig:
    """Solver and curvature settings for the per-validation-example solves."""

    damping: float = 1e-2
    max_iterations: int = 10
    tolerance: float = 1e-4
    tolerance_mode: str = "relative"
    batch_size: int = 20
    hvp_mode: str = "stochastic"
    seed: int = 0
    zero_curvature: bool = False
    check_solution: bool = True

    def __post_init__(self):
        if not math.isfinite(self.damping) or self.damping <= 0:
            raise InputError("damping must be positive and finite")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if self.tolerance <= 0:
            raise InputError("tolerance must be positive")
        if self.tolerance_mode not in ("relative", "absolute"):
            raise InputError(f"unknown tolerance_mode {self.tolerance_mode!r}")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.hvp_mode not in ("stochastic", "deterministic"):
            raise InputError(f"unknown hvp_mode {self.hvp_mode!r}")

    def to_dict(self) -> dict:
        return {
            "damping": self.damping,
            "max_iterations": self.max_iterations,
            "tolerance": self.tolerance,
            "tolerance_mode": self.tolerance_mode,
            "batch_size": self.batch_size,
            "hvp_mode": self.hvp_mode,
            "seed": self.seed,
            "zero_curvature": self.zero_curvature,
            "check_solution": self.check_solution,
        }


@dataclass
class CgReport:
    iterations: int
    initial_residual: float
    final_residual: float
    converged: bool
    reason: str
    residual_history: list = field(default_factory=list)
    true_relative_residual: float | None = None
    hvp_count: int = 0

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_residual": self.initial_residual,
            "final_residual": self.final_residual,
            "converged": self.converged,
            "reason": self.reason,
            "true_relative_residual": self.true_relative_residual,
        }


def _operator_apply(operator):
    return operator.apply if hasattr(operator, "apply") else operator


def cg_solve(operator, g: np.ndarray, config: CgConfig):
    """Conjugate gradient on ``(H + damping I) x = g``. Returns (x, report).

    Convergence checks use the recurrence residual; when the operator is
    deterministic and ``check_solution`` is set, one extra product records
    the true relative residual in the report.
    """
    apply = _operator_apply(operator)
    damping = getattr(operator, "damping", None)
    if damping is not None and damping <= 0:
        raise InputError("cg_solve needs a positively damped operator")
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise InputError("right-hand side must be finite")
    norm_g = float(np.linalg.norm(g))
    history = [norm_g]
    if norm_g == 0.0:
        return np.zeros_like(g), CgReport(
            iterations=0,
            initial_residual=0.0,
            final_residual=0.0,
            converged=True,
            reason="zero_rhs",
            residual_history=history,
        )
    threshold = (
        config.tolerance * norm_g
        if config.tolerance_mode == "relative"
        else config.tolerance
    )
    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rr = float(r @ r)
    iterations = 0
    hvp_count = 0
    converged = norm_g < threshold
    reason = "rhs_below_tolerance" if converged else "iteration_budget"
    if not converged:
        for k in range(1, config.max_iterations + 1):
            h = apply(p)
            hvp_count += 1
            if not np.all(np.isfinite(h)):
                raise NumericalError(f"non-finite Hessian-vector product at iteration {k}")
            ph = float(p @ h)
            if ph <= 0.0:
                raise CurvatureError(
                    f"non-positive curvature <p, (H + damping I) p> = {ph:.3e} "
                    f"at iteration {k}"
                )
            alpha = rr / ph
            x = x + alpha * p
            r = r - alpha * h
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite iterate at iteration {k}")
            rr_new = float(r @ r)
            residual = math.sqrt(rr_new)
            history.append(residual)
            iterations = k
            if residual < threshold:
                converged = True
                reason = "tolerance"
                break
            p = r + (rr_new / rr) * p
            rr = rr_new
    report = CgReport(
        iterations=iterations,
        initial_residual=norm_g,
        final_residual=history[-1],
        converged=converged,
        reason=reason,
        residual_history=history,
        hvp_count=hvp_count,
    )
    deterministic = getattr(operator, "mode", "deterministic") == "deterministic"
    if config.check_solution and deterministic:
        true_residual = apply(x) - g
        report.hvp_count += 1
        report.true_relative_residual = float(np.linalg.norm(true_residual)) / norm_g
    return x, report


def influence_pair(x_j: np.ndarray, g_i: np.ndarray) -> float:
    """Score of one (train, val) pair: ``-<x_j, g_i>``."""
    x_j = np.asarray(x_j, dtype=np.float64)
    g_i = np.asarray(g_i, dtype=np.float64)
    if x_j.shape != g_i.shape:
        raise InputError(f"length mismatch: {x_j.shape} vs {g_i.shape}")
    return -float(np.dot(x_j, g_i))


@dataclass
class ScoreTable:
    """Dense (train x val) score matrix with per-train means and metadata."""

    train_ids: np.ndarray
    val_ids: np.ndarray
    scores: np.ndarray
    mean_scores: np.ndarray
    metadata: dict

    def __post_init__(self):
        self.train_ids = np.asarray(self.train_ids, dtype=np.int64)
        self.val_ids = np.asarray(self.val_ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.mean_scores = np.asarray(self.mean_scores, dtype=np.float64)
        if self.scores.shape != (self.train_ids.size, self.val_ids.size):
            raise InputError("score matrix shape does not match id vectors")
        if self.mean_scores.shape != (self.train_ids.size,):
            raise InputError("mean vector length does not match train ids")

    def mean_by_id(self) -> dict:
        return {
            int(i): float(m) for i, m in zip(self.train_ids, self.mean_scores)
        }

    def save(self, csv_path, meta_path=None) -> None:
        """Write (train_id, val_id, score) rows plus the metadata sidecar.

        Floats are serialized with ``repr``, which round-trips exactly, so
        equal tables produce byte-identical files.
        """
        csv_path = Path(csv_path)
        with csv_path.open("w", encoding="utf-8", newline="") as handle:
            handle.write("train_id,val_id,score\n")
            for i, train_id in enumerate(self.train_ids):
                for j, val_id in enumerate(self.val_ids):
                    handle.write(
                        f"{int(train_id)},{int(val_id)},{repr(float(self.scores[i, j]))}\n"
                    )
        if meta_path is None:
            meta_path = csv_path.with_suffix(".meta.json")
        with Path(meta_path).open("w", encoding="utf-8") as handle:
            json.dump(self.metadata, handle, indent=2, sort_keys=True)
            handle.write("\n")

    @classmethod
    def load(cls, csv_path, meta_path=None) -> "ScoreTable":
        csv_path = Path(csv_path)
        if meta_path is None:
            meta_path = csv_path.with_suffix(".meta.json")
        entries = {}
        train_ids, val_ids = [], []
        train_seen, val_seen = set(), set()
        with csv_path.open("r", encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            for row in reader:
                i, j = int(row["train_id"]), int(row["val_id"])
                if i not in train_seen:
                    train_seen.add(i)
                    train_ids.append(i)
                if j not in val_seen:
                    val_seen.add(j)
                    val_ids.append(j)
                entries[(i, j)] = float(row["score"])
        if len(entries) != len(train_ids) * len(val_ids):
            raise InputError(f"{csv_path}: incomplete score matrix")
        scores = np.array(
            [[entries[(i, j)] for j in val_ids] for i in train_ids], dtype=np.float64
        )
        metadata = {}
        meta_path = Path(meta_path)
        if meta_path.exists():
            metadata = json.loads(meta_path.read_text(encoding="utf-8"))
        return cls(
            train_ids=np.array(train_ids, dtype=np.int64),
            val_ids=np.array(val_ids, dtype=np.int64),
            scores=scores,
            mean_scores=scores.mean(axis=1),
            metadata=metadata,
        )


def _sorted_parts(split):
    train = sorted(split.train, key=lambda pair: pair.id)
    val = sorted(split.val, key=lambda pair: pair.id)
    if not train or not val:
        raise InputError("influence needs nonempty train and val parts")
    return train, val


def _shard_ranges(n: int, shard_count: int):
    if shard_count < 1:
        raise InputError("shard_count must be >= 1")
    bounds = np.linspace(0, n, shard_count + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _train_gradient_block(model, params, train, *, workers, shard_count, counter):
    """Per-example gradient rows, sharded by contiguous id range.

    Shards only partition the work; rows are written straight into their
    final slots, so the assembled block is independent of shard count and
    worker scheduling.
    """
    block = np.empty((len(train), model.layout.total))

    def fill(bounds):
        a, b = bounds
        for i in range(a, b):
            block[i] = example_gradient(model, params, train[i], counter)

    ranges = _shard_ranges(len(train), shard_count)
    if workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, ranges))
    else:
        for bounds in ranges:
            fill(bounds)
    return block


def _base_metadata(model, method, split_sizes, checkpoint_id, shard_count):
    return {
        "method": method,
        "architecture": model.architecture(),
        "checkpoint_id": checkpoint_id,
        "train_size": split_sizes[0],
        "val_size": split_sizes[1],
        "shard_count": shard_count,
    }


def influence_matrix(
    model,
    split,
    config: CgConfig,
    *,
    workers: int = 1,
    shard_count: int = 1,
    checkpoint_id: str | None = None,
    counter: EvalCounter | None = None,
) -> ScoreTable:
    """Score every (train, val) pair through the damped inverse-Hessian solve.

    Training gradients are computed exactly once each and reused across all
    validation columns. Each column's HVP operator draws its batches from a
    stream seeded by (config.seed, val id), so results do not depend on
    column scheduling.
    """
    train, val = _sorted_parts(split)
    params = model.params
    gradients = _train_gradient_block(
        model, params, train, workers=workers, shard_count=shard_count, counter=counter
    )
    scores = np.empty((len(train), len(val)))
    reports = [None] * len(val)

    def solve_column(j: int):
        pair = val[j]
        g_val = example_gradient(model, params, pair)
        operator = HvpOperator(
            model,
            params,
            train,
            config.damping,
            mode=config.hvp_mode,
            batch_size=(
                min(config.batch_size, len(train))
                if config.hvp_mode == "stochastic"
                else None
            ),
            seed=np.random.SeedSequence(config.seed, spawn_key=(int(pair.id),)),
            zero_curvature=config.zero_curvature,
            counter=counter,
        )
        try:
            x, report = cg_solve(operator, g_val, config)
        except (CurvatureError, NumericalError) as exc:
            raise type(exc)(f"validation example {pair.id}: {exc}") from exc
        scores[:, j] = -(gradients @ x)
        reports[j] = {"val_id": int(pair.id), **report.summary()}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(solve_column, range(len(val))))
    else:
        for j in range(len(val)):
            solve_column(j)

    metadata = _base_metadata(
        model, "influence", (len(train), len(val)), checkpoint_id, shard_count
    )
    metadata["cg_config"] = config.to_dict()
    metadata["cg_reports"] = reports
    return ScoreTable(
        train_ids=np.array([pair.id for pair in train], dtype=np.int64),
        val_ids=np.array([pair.id for pair in val], dtype=np.int64),
        scores=scores,
        mean_scores=scores.mean(axis=1),
        metadata=metadata,
    )


def gradient_similarity_matrix(
    model,
    split,
    *,
    workers: int = 1,
    shard_count: int = 1,
    checkpoint_id: str | None = None,
    counter: EvalCounter | None = None,
) -> ScoreTable:
    """First-order baseline: score ``-<g_val, g_train>``, no curvature."""
    train, val = _sorted_parts(split)
    params = model.params
    gradients = _train_gradient_block(
        model, params, train, workers=workers, shard_count=shard_count, counter=counter
    )
    scores = np.empty((len(train), len(val)))
    for j, pair in enumerate(val):
        g_val = example_gradient(model, params, pair)
        scores[:, j] = -(gradients @ g_val)
    metadata = _base_metadata(
        model, "gradient_similarity", (len(train), len(val)), checkpoint_id, shard_count
    )
    return ScoreTable(
        train_ids=np.array([pair.id for pair in train], dtype=np.int64),
        val_ids=np.array([pair.id for pair in val], dtype=np.int64),
        scores=scores,
        mean_scores=scores.mean(axis=1),
        metadata=metadata,
    )
