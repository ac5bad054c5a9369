"""Command-line pipeline driver.

Stages: ``prepare`` (load or synthesize pairs, filter, split), ``train``
(fit a reward model, save initial and trained checkpoints), ``influence``
and ``similarity`` (score tables), ``sweep`` (prune-and-retrain grid),
``analyze`` (rank agreement, optional leave-one-out oracle), ``report``
(figures). Every stage reads its inputs through the run manifest, which
digest-checks artifacts and refuses to run against stale files.

Flags override a flat ``key = value`` config file (``--config``); keys may
be plain (``lr = 0.01``) or stage-prefixed (``train.lr = 0.01``). Defaults
follow the reference hyperparameters (lr 1e-5, batch 124, 3 epochs, damping
1e-2, HVP batch 20, validation size 100, 24-token filter).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .analysis import (
    default_k_grid,
    loo_oracle,
    rank_agreement,
    save_agreement_csv,
    save_agreement_summary,
    save_loo_csv,
    spearman,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .curation import rank, save_sweep_csv, sweep
from .data import (
    DatasetSplit,
    Tokenizer,
    length_filter,
    load_raw_jsonl,
    save_pairs,
    split_dataset,
    synthesize,
)
from .errors import InputError, PrefcurateError
from .influence import CgConfig, ScoreTable, gradient_similarity_matrix, influence_matrix
from .manifest import RunManifest
from .models import (
    LinearConfig,
    LinearRewardModel,
    TinyTransformerRewardModel,
    TransformerConfig,
)
from .training import TrainConfig, evaluate, save_loss_curve_csv, train

_STAGES = ("prepare", "train", "influence", "similarity", "sweep", "analyze", "report")


def _comma_floats(raw: str) -> list:
    try:
        return [float(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated float list: {raw!r}")


def _comma_ints(raw: str) -> list:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {raw!r}")


def _comma_names(raw: str) -> list:
    return [part.strip() for part in raw.split(",") if part.strip()]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="prefcurate",
        description="Influence-based curation of pairwise-preference training data.",
    )
    parser.add_argument("--version", action="version", version=f"prefcurate {__version__}")
    commands = parser.add_subparsers(dest="command", metavar="stage")
    subparsers = {}

    def stage(name, help_text):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--run-dir", default="run", help="run directory (default: run)")
        sub.add_argument("--config", default=None, help="flat key = value config file")
        subparsers[name] = sub
        return sub

    prepare = stage("prepare", "load or synthesize pairs, filter, split")
    prepare.add_argument("--input", default=None, help="raw jsonl with chosen/rejected text")
    prepare.add_argument("--synth-n", type=int, default=None, help="synthesize this many pairs")
    prepare.add_argument("--noise", type=float, default=0.0, help="flip fraction for synthesis")
    prepare.add_argument("--seed", type=int, default=0, help="synthesis seed")
    prepare.add_argument("--split-seed", type=int, default=0)
    prepare.add_argument("--vocab-size", type=int, default=4096)
    prepare.add_argument("--tokenizer-seed", type=int, default=0)
    prepare.add_argument("--max-tokens", type=int, default=24, help="length filter bound")
    prepare.add_argument("--val-size", type=int, default=100)
    prepare.add_argument("--train-fraction", type=float, default=0.8)
    prepare.add_argument("--feature-dim", type=int, default=32, help="synthesis truth width")
    prepare.add_argument("--projection-seed", type=int, default=0)
    prepare.add_argument(
        "--truth-seed", type=int, default=None,
        help="draw the hidden scorer from its own stream (shareable across runs)",
    )
    prepare.add_argument("--min-len", type=int, default=6)
    prepare.add_argument("--max-len", type=int, default=24)
    prepare.add_argument("--margin-floor", type=float, default=0.2)

    train_cmd = stage("train", "train a reward model from a fresh initialization")
    train_cmd.add_argument("--arch", choices=("linear", "transformer"), default="linear")
    train_cmd.add_argument("--feature-dim", type=int, default=32)
    train_cmd.add_argument("--projection-seed", type=int, default=0)
    train_cmd.add_argument("--width", type=int, default=64)
    train_cmd.add_argument("--layers", type=int, default=2)
    train_cmd.add_argument("--heads", type=int, default=4)
    train_cmd.add_argument("--ffn-mult", type=int, default=4)
    train_cmd.add_argument("--max-len", type=int, default=64)
    train_cmd.add_argument("--adapter-rank", type=int, default=8)
    train_cmd.add_argument("--adapter-alpha", type=float, default=16.0)
    train_cmd.add_argument("--adapter-dropout", type=float, default=0.05)
    train_cmd.add_argument("--adapt", type=_comma_names, default=["q", "k", "v", "o"])
    train_cmd.add_argument("--base-seed", type=int, default=0)
    train_cmd.add_argument("--freeze-head", action="store_true")
    train_cmd.add_argument("--lr", type=float, default=1e-5)
    train_cmd.add_argument("--epochs", type=int, default=3)
    train_cmd.add_argument("--batch-size", type=int, default=124)
    train_cmd.add_argument("--beta1", type=float, default=0.9)
    train_cmd.add_argument("--beta2", type=float, default=0.98)
    train_cmd.add_argument("--eps", type=float, default=1e-8)
    train_cmd.add_argument("--weight-decay", type=float, default=0.0)
    train_cmd.add_argument("--schedule", choices=("cosine", "constant"), default="cosine")
    train_cmd.add_argument("--seed", type=int, default=0, help="data order / dropout seed")

    influence_cmd = stage("influence", "inverse-Hessian influence score table")
    influence_cmd.add_argument("--damping", type=float, default=1e-2)
    influence_cmd.add_argument("--cg-iters", type=int, default=10)
    influence_cmd.add_argument("--tolerance", type=float, default=1e-4)
    influence_cmd.add_argument("--tolerance-mode", choices=("relative", "absolute"), default="relative")
    influence_cmd.add_argument("--hvp-batch", type=int, default=20)
    influence_cmd.add_argument("--hvp-mode", choices=("stochastic", "deterministic"), default="stochastic")
    influence_cmd.add_argument("--seed", type=int, default=0)
    influence_cmd.add_argument("--workers", type=int, default=1)
    influence_cmd.add_argument("--shards", type=int, default=1)
    influence_cmd.add_argument("--no-check-solution", action="store_true")

    similarity_cmd = stage("similarity", "gradient-similarity score table")
    similarity_cmd.add_argument("--workers", type=int, default=1)
    similarity_cmd.add_argument("--shards", type=int, default=1)

    sweep_cmd = stage("sweep", "prune-and-retrain grid over both score tables")
    sweep_cmd.add_argument("--fractions", type=_comma_floats, default=[5.0, 10.0, 15.0, 20.0, 30.0])
    sweep_cmd.add_argument("--random-seed", type=int, default=0)

    analyze_cmd = stage("analyze", "rank agreement and optional LOO oracle")
    analyze_cmd.add_argument("--k-grid", type=_comma_ints, default=None)
    analyze_cmd.add_argument("--loo", action="store_true", help="run the leave-one-out oracle")
    analyze_cmd.add_argument("--l2-reg", type=float, default=1e-3)
    analyze_cmd.add_argument("--grad-tol", type=float, default=1e-8)
    analyze_cmd.add_argument("--loo-max-train", type=int, default=200)

    report_cmd = stage("report", "render figures from existing artifacts")
    report_cmd.add_argument("--formats", type=_comma_names, default=["png"])

    return parser, subparsers


def _load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    entries = {}
    with path.open("r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{line_no}: expected 'key = value'")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def _apply_config(command: str, subparser, entries: dict) -> None:
    actions = {
        action.dest: action
        for action in subparser._actions
        if action.dest not in ("help", "config")
    }
    overrides = {}
    for key, raw in entries.items():
        if "." in key:
            stage_name, name = key.split(".", 1)
        else:
            stage_name, name = None, key
        if stage_name is not None:
            if stage_name not in _STAGES:
                raise InputError(f"config key {key!r}: unknown stage {stage_name!r}")
            if stage_name != command:
                continue
        dest = name.replace("-", "_")
        action = actions.get(dest)
        if action is None:
            if stage_name is None:
                # A plain key must match some stage to be a valid typo-free file.
                if any(
                    dest in {a.dest for a in sub._actions}
                    for sub in _ALL_SUBPARSERS.values()
                ):
                    continue
            raise InputError(f"config key {key!r} matches no {command} option")
        if action.nargs == 0:
            overrides[dest] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                overrides[dest] = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise InputError(f"config key {key!r}: {exc}") from exc
        else:
            overrides[dest] = raw
    subparser.set_defaults(**overrides)


_ALL_SUBPARSERS: dict = {}


def _probe_argv(argv):
    command = next((token for token in argv if not token.startswith("-")), None)
    config = None
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif token.startswith("--config="):
            config = token.split("=", 1)[1]
    return command, config


def _say(message: str) -> None:
    print(message)


def _write_json(payload: dict, path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _load_split(manifest: RunManifest) -> DatasetSplit:
    for name in ("train_split", "val_split", "test_split"):
        manifest.require(name)
    return DatasetSplit.load(manifest.run_dir / "splits")


def cmd_prepare(args) -> int:
    if (args.input is None) == (args.synth_n is None):
        raise InputError("prepare needs exactly one of --input or --synth-n")
    run_dir = Path(args.run_dir)
    manifest = RunManifest.create(run_dir, __version__)
    if args.input is not None:
        input_path = Path(args.input)
        if not input_path.exists():
            raise InputError(f"input file not found: {input_path}")
        tokenizer = Tokenizer(vocab_size=args.vocab_size, seed=args.tokenizer_seed)
        pairs = load_raw_jsonl(input_path, tokenizer)
        manifest.record_input("raw_pairs", input_path)
        source = {"input": str(input_path)}
    else:
        pairs = synthesize(
            args.synth_n,
            args.noise,
            seed=args.seed,
            vocab_size=args.vocab_size,
            feature_dim=args.feature_dim,
            projection_seed=args.projection_seed,
            truth_seed=args.truth_seed,
            min_len=args.min_len,
            max_len=args.max_len,
            margin_floor=args.margin_floor,
        )
        source = {
            "synth_n": args.synth_n,
            "noise": args.noise,
            "seed": args.seed,
            "feature_dim": args.feature_dim,
            "projection_seed": args.projection_seed,
            "truth_seed": args.truth_seed,
            "min_len": args.min_len,
            "max_len": args.max_len,
            "margin_floor": args.margin_floor,
        }
    total = len(pairs)
    pairs = length_filter(pairs, args.max_tokens)
    if not pairs:
        raise InputError("length filter removed every pair")
    dataset_path = run_dir / "dataset.jsonl"
    save_pairs(dataset_path, pairs)
    manifest.record_artifact("dataset", dataset_path)
    split = split_dataset(
        pairs,
        val_size=args.val_size,
        train_fraction=args.train_fraction,
        seed=args.split_seed,
    )
    split_paths = split.save(run_dir / "splits")
    for name, path in split_paths.items():
        manifest.record_artifact(f"{name}_split", path)
    manifest.set_config(
        "prepare",
        {
            **source,
            "vocab_size": args.vocab_size,
            "tokenizer_seed": args.tokenizer_seed,
            "max_tokens": args.max_tokens,
            "val_size": args.val_size,
            "train_fraction": args.train_fraction,
            "split_seed": args.split_seed,
        },
    )
    manifest.save()
    flagged = sum(1 for pair in pairs if pair.noise_flag)
    _say(
        f"dataset: {len(pairs)} pairs kept of {total} ({flagged} noise-flagged); "
        f"train/val/test = {len(split.train)}/{len(split.val)}/{len(split.test)}"
    )
    return 0


def _build_fresh_model(args):
    if args.arch == "linear":
        return LinearRewardModel(
            LinearConfig(
                vocab_size=args.vocab_size,
                feature_dim=args.feature_dim,
                projection_seed=args.projection_seed,
            )
        )
    return TinyTransformerRewardModel(
        TransformerConfig(
            vocab_size=args.vocab_size,
            max_len=args.max_len,
            width=args.width,
            layers=args.layers,
            heads=args.heads,
            ffn_mult=args.ffn_mult,
            adapter_rank=args.adapter_rank,
            adapter_alpha=args.adapter_alpha,
            adapter_dropout=args.adapter_dropout,
            adapted=tuple(args.adapt),
            head_trainable=not args.freeze_head,
            base_seed=args.base_seed,
        )
    )


def cmd_train(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = RunManifest.load(run_dir)
    split = _load_split(manifest)
    prepare_config = manifest.data["configs"].get("prepare", {})
    args.vocab_size = int(prepare_config.get("vocab_size", 4096))
    model = _build_fresh_model(args)
    init_path = run_dir / "checkpoint_init.ckpt"
    init_id = save_checkpoint(model, init_path)
    manifest.record_artifact("checkpoint_init", init_path)
    config = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        beta1=args.beta1,
        beta2=args.beta2,
        eps=args.eps,
        weight_decay=args.weight_decay,
        schedule=args.schedule,
        seed=args.seed,
    )
    result = train(model, list(split.train), config)
    trained_path = run_dir / "checkpoint_trained.ckpt"
    save_checkpoint(result.model, trained_path)
    manifest.record_artifact("checkpoint_trained", trained_path)
    loss_path = run_dir / "train_loss.csv"
    save_loss_curve_csv(result.loss_curve, loss_path)
    manifest.record_artifact("loss_curve", loss_path)
    report = evaluate(result.model, list(split.test))
    eval_path = run_dir / "train_eval.json"
    _write_json(
        {
            "accuracy": report.accuracy,
            "n": report.n,
            "wald_half_width": report.wald_half_width,
        },
        eval_path,
    )
    manifest.record_artifact("train_eval", eval_path)
    manifest.set_config(
        "train",
        {
            "architecture": result.model.architecture(),
            "train": config.to_dict(),
            "checkpoint_init_id": init_id,
        },
    )
    manifest.save()
    _say(
        f"trained {args.arch} model: test accuracy "
        f"{report.accuracy:.4f} +/- {report.wald_half_width:.4f} (n={report.n})"
    )
    return 0


def cmd_influence(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = RunManifest.load(run_dir)
    split = _load_split(manifest)
    model, checkpoint_id = load_checkpoint(manifest.require("checkpoint_trained"))
    config = CgConfig(
        damping=args.damping,
        max_iterations=args.cg_iters,
        tolerance=args.tolerance,
        tolerance_mode=args.tolerance_mode,
        batch_size=args.hvp_batch,
        hvp_mode=args.hvp_mode,
        seed=args.seed,
        check_solution=not args.no_check_solution,
    )
    table = influence_matrix(
        model,
        split,
        config,
        workers=args.workers,
        shard_count=args.shards,
        checkpoint_id=checkpoint_id,
    )
    csv_path = run_dir / "scores_influence.csv"
    table.save(csv_path)
    manifest.record_artifact("scores_influence", csv_path)
    manifest.record_artifact("scores_influence_meta", csv_path.with_suffix(".meta.json"))
    manifest.set_config("influence", config.to_dict())
    manifest.save()
    reports = table.metadata["cg_reports"]
    converged = sum(1 for r in reports if r["converged"])
    _say(
        f"influence: {table.scores.shape[0]} x {table.scores.shape[1]} scores; "
        f"cg converged {converged}/{len(reports)}"
    )
    return 0


def cmd_similarity(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = RunManifest.load(run_dir)
    split = _load_split(manifest)
    model, checkpoint_id = load_checkpoint(manifest.require("checkpoint_trained"))
    table = gradient_similarity_matrix(
        model,
        split,
        workers=args.workers,
        shard_count=args.shards,
        checkpoint_id=checkpoint_id,
    )
    csv_path = run_dir / "scores_gradient_similarity.csv"
    table.save(csv_path)
    manifest.record_artifact("scores_gradient_similarity", csv_path)
    manifest.record_artifact(
        "scores_gradient_similarity_meta", csv_path.with_suffix(".meta.json")
    )
    manifest.set_config("similarity", {"workers": args.workers, "shards": args.shards})
    manifest.save()
    _say(
        f"gradient similarity: {table.scores.shape[0]} x {table.scores.shape[1]} scores"
    )
    return 0


def _train_config_from_manifest(manifest: RunManifest) -> TrainConfig:
    stage = manifest.data["configs"].get("train")
    if not stage:
        raise InputError("no train config in manifest; run the train stage first")
    return TrainConfig(**stage["train"])


def cmd_sweep(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = RunManifest.load(run_dir)
    split = _load_split(manifest)
    initial_model, _ = load_checkpoint(manifest.require("checkpoint_init"))
    tables = {
        "influence": ScoreTable.load(manifest.require("scores_influence")),
        "gradient_similarity": ScoreTable.load(
            manifest.require("scores_gradient_similarity")
        ),
    }
    train_config = _train_config_from_manifest(manifest)
    results, failures = sweep(
        initial_model,
        split,
        tables,
        args.fractions,
        train_config,
        random_seed=args.random_seed,
    )
    sweep_path = run_dir / "sweep.csv"
    failures_path = run_dir / "sweep_failures.json"
    save_sweep_csv(results, sweep_path, failures=failures, failures_path=failures_path)
    manifest.record_artifact("sweep", sweep_path)
    manifest.record_artifact("sweep_failures", failures_path)
    manifest.set_config(
        "sweep", {"fractions": args.fractions, "random_seed": args.random_seed}
    )
    manifest.save()
    _say(f"sweep: {len(results)} rows -> {sweep_path} ({len(failures)} failures)")
    return 0


def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = RunManifest.load(run_dir)
    influence_table = ScoreTable.load(manifest.require("scores_influence"))
    similarity_table = ScoreTable.load(manifest.require("scores_gradient_similarity"))
    ranking_influence = rank(influence_table)
    ranking_similarity = rank(similarity_table)
    report = rank_agreement(ranking_influence, ranking_similarity, args.k_grid)
    agreement_path = run_dir / "agreement.csv"
    save_agreement_csv(report, agreement_path)
    manifest.record_artifact("agreement", agreement_path)
    extra = {}
    if args.loo:
        split = _load_split(manifest)
        model, _ = load_checkpoint(manifest.require("checkpoint_trained"))
        deltas = loo_oracle(
            model,
            split,
            l2_reg=args.l2_reg,
            grad_tol=args.grad_tol,
            max_train=args.loo_max_train,
        )
        loo_path = run_dir / "loo.csv"
        save_loo_csv(deltas, loo_path)
        manifest.record_artifact("loo", loo_path)
        oracle_ranking = [
            train_id
            for train_id, _ in sorted(deltas.items(), key=lambda kv: (-kv[1], kv[0]))
        ]
        extra["loo_spearman_rho"] = spearman(ranking_influence, oracle_ranking)
    summary_path = run_dir / "agreement_summary.json"
    save_agreement_summary(report, summary_path, extra=extra)
    manifest.record_artifact("agreement_summary", summary_path)
    manifest.set_config(
        "analyze",
        {
            "k_grid": list(report.k_values),
            "loo": bool(args.loo),
            "l2_reg": args.l2_reg,
            "grad_tol": args.grad_tol,
        },
    )
    manifest.save()
    line = f"rank agreement: spearman rho = {report.spearman_rho:.4f}"
    if "loo_spearman_rho" in extra:
        line += f"; influence vs oracle rho = {extra['loo_spearman_rho']:.4f}"
    _say(line)
    return 0


def cmd_report(args) -> int:
    from . import reporting

    run_dir = Path(args.run_dir)
    manifest = RunManifest.load(run_dir)
    jobs = (
        ("sweep", "figure_sweep", reporting.render_sweep_figure),
        ("agreement", "figure_agreement", reporting.render_agreement_figure),
        ("loss_curve", "figure_loss", reporting.render_loss_figure),
    )
    written = []
    for artifact, figure_name, renderer in jobs:
        if artifact not in manifest.data["artifacts"]:
            continue
        source = manifest.require(artifact)
        for fmt in args.formats:
            out_path = run_dir / f"{figure_name}.{fmt}"
            renderer(source, out_path)
            manifest.record_artifact(f"{figure_name}_{fmt}", out_path)
            written.append(out_path.name)
    if not written:
        raise InputError(
            "nothing to render: run sweep, analyze, or train before report"
        )
    manifest.save()
    _say(f"report: wrote {', '.join(written)}")
    return 0


_HANDLERS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "influence": cmd_influence,
    "similarity": cmd_similarity,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, subparsers = build_parser()
    _ALL_SUBPARSERS.clear()
    _ALL_SUBPARSERS.update(subparsers)
    command, config_path = _probe_argv(argv)
    try:
        if config_path is not None and command in subparsers:
            entries = _load_config_file(config_path)
            _apply_config(command, subparsers[command], entries)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 2
        return _HANDLERS[args.command](args)
    except PrefcurateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
