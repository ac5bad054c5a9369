"""Pairwise-preference datasets: loading, tokenizing, filtering, synthesis.

A dataset is a list of :class:`PreferencePair` records. Two jsonl layouts are
understood:

* raw: ``{"chosen": <text>, "rejected": <text>}`` plus optional ``id`` and
  ``noise_flag`` fields; text is tokenized on load,
* prepared: ``{"id": ..., "chosen_tokens": [...], "rejected_tokens": [...],
  "noise_flag": ...}`` as written by :func:`save_pairs`.

Tokenization is a keyed-hash bucket scheme: deterministic across processes,
no vocabulary file to carry around. Synthesis produces pairs whose preference
is decided by a hidden linear scorer over the same bag-of-tokens features the
linear reward model uses, with an exact number of label flips injected.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InputError

__all__ = [
    "PreferencePair",
    "Tokenizer",
    "DatasetSplit",
    "projection_matrix",
    "bag_features",
    "load_raw_jsonl",
    "load_pairs",
    "save_pairs",
    "length_filter",
    "split_dataset",
    "synthesize",
]


@dataclass(frozen=True)
class PreferencePair:
    """One comparison: the chosen sequence should outscore the rejected one."""

    id: int
    chosen: tuple
    rejected: tuple
    noise_flag: bool = False

    def __post_init__(self):
        if not self.chosen or not self.rejected:
            raise InputError(f"pair {self.id}: both sequences must be nonempty")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "chosen_tokens": list(self.chosen),
            "rejected_tokens": list(self.rejected),
            "noise_flag": self.noise_flag,
        }

    @classmethod
    def from_record(cls, record: dict) -> "PreferencePair":
        return cls(
            id=int(record["id"]),
            chosen=tuple(int(t) for t in record["chosen_tokens"]),
            rejected=tuple(int(t) for t in record["rejected_tokens"]),
            noise_flag=bool(record.get("noise_flag", False)),
        )


@dataclass(frozen=True)
class Tokenizer:
    """Keyed blake2b hash of lowercased whitespace tokens into id buckets."""

    vocab_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InputError("vocab_size must be at least 2")

    def encode(self, text: str) -> tuple:
        key = self.seed.to_bytes(8, "little", signed=True)
        ids = []
        for word in text.lower().split():
            digest = hashlib.blake2b(
                word.encode("utf-8"), digest_size=8, key=key
            ).digest()
            ids.append(int.from_bytes(digest, "little") % self.vocab_size)
        return tuple(ids)


def load_raw_jsonl(path, tokenizer: Tokenizer) -> list:
    """Read text pairs, tokenize both sides, assign line-order ids if absent."""
    pairs = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{line_no + 1}: invalid json") from exc
            for field in ("chosen", "rejected"):
                if field not in record:
                    raise InputError(f"{path}:{line_no + 1}: missing {field!r}")
            chosen = tokenizer.encode(record["chosen"])
            rejected = tokenizer.encode(record["rejected"])
            if not chosen or not rejected:
                raise InputError(
                    f"{path}:{line_no + 1}: empty sequence after tokenization"
                )
            pairs.append(
                PreferencePair(
                    id=int(record.get("id", len(pairs))),
                    chosen=chosen,
                    rejected=rejected,
                    noise_flag=bool(record.get("noise_flag", False)),
                )
            )
    if not pairs:
        raise InputError(f"{path}: empty dataset")
    _check_unique_ids(pairs)
    return pairs


def load_pairs(path) -> list:
    """Read a prepared (token-id) jsonl dataset."""
    pairs = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle):
            line = line.strip()
            if not line:
                continue
            try:
                pairs.append(PreferencePair.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise InputError(f"{path}:{line_no + 1}: bad record") from exc
    if not pairs:
        raise InputError(f"{path}: empty dataset")
    _check_unique_ids(pairs)
    return pairs


def save_pairs(path, pairs) -> None:
    """Write pairs as prepared jsonl, one record per line, stable key order."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for pair in pairs:
            handle.write(json.dumps(pair.to_record(), sort_keys=True))
            handle.write("\n")


def _check_unique_ids(pairs) -> None:
    seen = set()
    for pair in pairs:
        if pair.id in seen:
            raise InputError(f"duplicate pair id {pair.id}")
        seen.add(pair.id)


def length_filter(pairs, max_tokens: int) -> list:
    """Keep a pair iff its shorter side has at most ``max_tokens`` tokens."""
    if max_tokens < 1:
        raise InputError("max_tokens must be positive")
    return [
        pair
        for pair in pairs
        if min(len(pair.chosen), len(pair.rejected)) <= max_tokens
    ]


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/validation/test partitions, each sorted by id."""

    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        ids = [p.id for part in (self.train, self.val, self.test) for p in part]
        if len(ids) != len(set(ids)):
            raise InputError("split parts must be disjoint by id")
        for name in ("train", "val", "test"):
            part = getattr(self, name)
            if list(part) != sorted(part, key=lambda p: p.id):
                raise InputError(f"{name} part must be sorted by id")

    def save(self, directory) -> dict:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name in ("train", "val", "test"):
            paths[name] = directory / f"{name}.jsonl"
            save_pairs(paths[name], getattr(self, name))
        return paths

    @classmethod
    def load(cls, directory) -> "DatasetSplit":
        directory = Path(directory)
        parts = {}
        for name in ("train", "val", "test"):
            path = directory / f"{name}.jsonl"
            if not path.exists():
                raise InputError(f"missing split file {path}")
            parts[name] = tuple(load_pairs(path))
        return cls(**parts)


def split_dataset(pairs, *, val_size: int = 100, train_fraction: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Seeded disjoint partition; each part comes back sorted by id.

    ``val_size`` examples are carved out first, then the remainder splits
    into train/test by ``train_fraction``.
    """
    n = len(pairs)
    if val_size < 0 or val_size >= n:
        raise InputError(f"val_size must be in [0, {n - 1}], got {val_size}")
    if not 0.0 < train_fraction < 1.0:
        raise InputError("train_fraction must be strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    val_idx = set(order[:val_size].tolist())
    rest = order[val_size:]
    n_train = int(round(train_fraction * len(rest)))
    if n_train < 1 or n_train >= len(rest):
        raise InputError("train_fraction leaves an empty train or test part")
    train_idx = set(rest[:n_train].tolist())
    by_id = sorted(range(n), key=lambda i: pairs[i].id)
    train = tuple(pairs[i] for i in by_id if i in train_idx)
    val = tuple(pairs[i] for i in by_id if i in val_idx)
    test = tuple(
        pairs[i] for i in by_id if i not in train_idx and i not in val_idx
    )
    return DatasetSplit(train=train, val=val, test=test)


def projection_matrix(vocab_size: int, feature_dim: int, seed: int) -> np.ndarray:
    """Fixed random projection from token-count space to feature space."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((feature_dim, vocab_size))


def bag_features(tokens, projection: np.ndarray) -> np.ndarray:
    """Length-normalized projected token counts: ``P @ counts / sqrt(len)``."""
    counts = np.bincount(
        np.asarray(tokens, dtype=np.int64), minlength=projection.shape[1]
    ).astype(np.float64)
    return (projection @ counts) / math.sqrt(len(tokens))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def synthesize(
    n: int,
    noise_rate: float,
    *,
    seed: int = 0,
    vocab_size: int = 4096,
    feature_dim: int = 32,
    projection_seed: int = 0,
    truth_seed: int | None = None,
    min_len: int = 6,
    max_len: int = 24,
    margin_floor: float = 0.2,
    max_redraws: int = 200,
) -> list:
    """Generate ``n`` pairs labeled by a hidden linear scorer, then flip some.

    The scorer acts on the same bag-of-tokens features the linear reward
    model uses (same projection seed and width), so the task is learnable by
    that model. Every pair's true margin is at least ``margin_floor`` in
    absolute value; exactly ``round(n * noise_rate)`` pairs (half-up) get
    their sides swapped and ``noise_flag`` set.

    With ``truth_seed`` the hidden scorer is drawn from its own stream, so
    separate calls (say a noisy train pool and a clean validation pool) can
    share one scorer while drawing different pairs.
    """
    if n < 1:
        raise InputError("n must be positive")
    if not 0.0 <= noise_rate <= 1.0:
        raise InputError("noise_rate must lie in [0, 1]")
    if not 1 <= min_len <= max_len:
        raise InputError("need 1 <= min_len <= max_len")
    projection = projection_matrix(vocab_size, feature_dim, projection_seed)
    rng = np.random.default_rng(seed)
    truth_rng = rng if truth_seed is None else np.random.default_rng(truth_seed)
    truth = truth_rng.standard_normal(feature_dim) / math.sqrt(feature_dim)

    def draw_side():
        length = int(rng.integers(min_len, max_len + 1))
        return tuple(int(t) for t in rng.integers(0, vocab_size, size=length))

    pairs = []
    for i in range(n):
        for _ in range(max_redraws):
            a, b = draw_side(), draw_side()
            margin = float(
                truth @ (bag_features(a, projection) - bag_features(b, projection))
            )
            if abs(margin) >= margin_floor:
                break
        else:
            raise InputError(
                "margin floor not reached after "
                f"{max_redraws} redraws; lower margin_floor"
            )
        chosen, rejected = (a, b) if margin > 0 else (b, a)
        pairs.append(PreferencePair(id=i, chosen=chosen, rejected=rejected))

    flip_count = _round_half_up(n * noise_rate)
    flips = rng.permutation(n)[:flip_count]
    for i in flips:
        pair = pairs[i]
        pairs[i] = replace(
            pair, chosen=pair.rejected, rejected=pair.chosen, noise_flag=True
        )
    return pairs
