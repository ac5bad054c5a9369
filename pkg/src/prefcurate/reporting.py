"""Figure rendering for sweep curves, rank agreement, and training loss."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .curation import DIRECTIONS, load_sweep_csv
from .errors import InputError

__all__ = ["render_sweep_figure", "render_agreement_figure", "render_loss_figure"]

_STRATEGY_STYLE = {
    "influence": {"color": "tab:blue", "marker": "o"},
    "gradient_similarity": {"color": "tab:orange", "marker": "s"},
    "random": {"color": "tab:gray", "marker": "^"},
}

_DIRECTION_TITLE = {
    "drop_most_harmful": "Excluding most harmful examples",
    "drop_most_helpful": "Excluding most helpful examples",
}


def render_sweep_figure(sweep_csv, out_path) -> Path:
    """Two panels (one per pruning direction): accuracy vs excluded fraction.

    Every curve starts at the shared no-exclusion baseline point; error bars
    are the Wald half-widths stored in the sweep CSV.
    """
    rows = load_sweep_csv(sweep_csv)
    baseline = [r for r in rows if r["strategy"] == "none"]
    if not baseline:
        raise InputError(f"{sweep_csv} has no baseline row")
    base = baseline[0]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.2), sharey=True)
    for axis, direction in zip(axes, DIRECTIONS):
        for strategy, style in _STRATEGY_STYLE.items():
            points = sorted(
                (
                    r
                    for r in rows
                    if r["strategy"] == strategy and r["direction"] == direction
                ),
                key=lambda r: r["fraction"],
            )
            if not points:
                continue
            fractions = [0.0] + [r["fraction"] for r in points]
            accuracy = [base["accuracy"]] + [r["accuracy"] for r in points]
            errors = [base["wald_half_width"]] + [
                r["wald_half_width"] for r in points
            ]
            axis.errorbar(
                fractions,
                accuracy,
                yerr=errors,
                label=strategy.replace("_", " "),
                capsize=3,
                **style,
            )
        axis.axhline(
            base["accuracy"], linestyle=":", color="black", linewidth=1,
            label="no exclusion",
        )
        axis.set_title(_DIRECTION_TITLE.get(direction, direction))
        axis.set_xlabel("excluded fraction of training data (%)")
        axis.grid(alpha=0.3)
    axes[0].set_ylabel("test accuracy")
    axes[0].legend(loc="lower left", fontsize=9)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_agreement_figure(agreement_csv, out_path, *, spearman_rho=None) -> Path:
    """Top-k and bottom-k overlap curves between the two score rankings."""
    import csv

    ks, top, bottom = [], [], []
    with Path(agreement_csv).open("r", encoding="utf-8", newline="") as handle:
        for row in csv.DictReader(handle):
            ks.append(int(row["k"]))
            top.append(float(row["overlap_top"]))
            bottom.append(float(row["overlap_bottom"]))
    if not ks:
        raise InputError(f"{agreement_csv} has no rows")
    fig, axis = plt.subplots(figsize=(6, 4.2))
    axis.plot(ks, top, marker="o", color="tab:blue", label="top-k overlap")
    axis.plot(
        ks, bottom, marker="s", linestyle="--", color="tab:orange",
        label="bottom-k overlap",
    )
    axis.set_xlabel("k")
    axis.set_ylabel("|intersection| / k")
    axis.set_ylim(-0.02, 1.02)
    title = "Influence vs gradient-similarity ranking agreement"
    if spearman_rho is not None:
        title += f" (Spearman rho = {spearman_rho:.3f})"
    axis.set_title(title, fontsize=10)
    axis.grid(alpha=0.3)
    axis.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_loss_figure(loss_csv, out_path) -> Path:
    """Training loss per step with the learning-rate schedule on a twin axis."""
    import csv

    steps, lrs, losses = [], [], []
    with Path(loss_csv).open("r", encoding="utf-8", newline="") as handle:
        for row in csv.DictReader(handle):
            steps.append(int(row["step"]))
            lrs.append(float(row["learning_rate"]))
            losses.append(float(row["loss"]))
    if not steps:
        raise InputError(f"{loss_csv} has no rows")
    fig, axis = plt.subplots(figsize=(6, 4.2))
    axis.plot(steps, losses, color="tab:blue", linewidth=1.2)
    axis.set_xlabel("step")
    axis.set_ylabel("batch loss", color="tab:blue")
    twin = axis.twinx()
    twin.plot(steps, lrs, color="tab:red", linewidth=1.0, alpha=0.6)
    twin.set_ylabel("learning rate", color="tab:red")
    axis.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
