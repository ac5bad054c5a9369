"""Influence-based curation of pairwise-preference training data.

Score every training pair's effect on validation loss through damped
inverse-Hessian-vector products over a low-rank trainable subspace, prune
the harmful (or helpful) end of the ranking, retrain, and compare against
gradient-similarity and random baselines.
"""

__version__ = "0.1.0"

from .analysis import RankAgreementReport, loo_oracle, rank_agreement, spearman, topk_overlap
from .autodiff import EvalCounter, HvpOperator, ParameterLayout, example_gradient
from .checkpoint import load_checkpoint, save_checkpoint
from .curation import (
    CurationPlan,
    CurationResult,
    prune,
    rank,
    removal_set,
    retrain_eval,
    sweep,
)
from .data import (
    DatasetSplit,
    PreferencePair,
    Tokenizer,
    length_filter,
    load_pairs,
    load_raw_jsonl,
    save_pairs,
    split_dataset,
    synthesize,
)
from .errors import (
    CurvatureError,
    InputError,
    ManifestError,
    NumericalError,
    OracleError,
    PrefcurateError,
    TrainingError,
)
from .influence import (
    CgConfig,
    CgReport,
    ScoreTable,
    cg_solve,
    gradient_similarity_matrix,
    influence_matrix,
    influence_pair,
)
from .models import (
    LinearConfig,
    LinearRewardModel,
    TinyTransformerRewardModel,
    TransformerConfig,
    bt_loss,
    mean_bt_loss,
    reward,
)
from .training import (
    AccuracyReport,
    TrainConfig,
    TrainResult,
    evaluate,
    fit_convex,
    train,
    wald_half_width,
)

__all__ = [
    "__version__",
    "RankAgreementReport",
    "loo_oracle",
    "rank_agreement",
    "spearman",
    "topk_overlap",
    "EvalCounter",
    "HvpOperator",
    "ParameterLayout",
    "example_gradient",
    "load_checkpoint",
    "save_checkpoint",
    "CurationPlan",
    "CurationResult",
    "prune",
    "rank",
    "removal_set",
    "retrain_eval",
    "sweep",
    "DatasetSplit",
    "PreferencePair",
    "Tokenizer",
    "length_filter",
    "load_pairs",
    "load_raw_jsonl",
    "save_pairs",
    "split_dataset",
    "synthesize",
    "CurvatureError",
    "InputError",
    "ManifestError",
    "NumericalError",
    "OracleError",
    "PrefcurateError",
    "TrainingError",
    "CgConfig",
    "CgReport",
    "ScoreTable",
    "cg_solve",
    "gradient_similarity_matrix",
    "influence_matrix",
    "influence_pair",
    "LinearConfig",
    "LinearRewardModel",
    "TinyTransformerRewardModel",
    "TransformerConfig",
    "bt_loss",
    "mean_bt_loss",
    "reward",
    "AccuracyReport",
    "TrainConfig",
    "TrainResult",
    "evaluate",
    "fit_convex",
    "train",
    "wald_half_width",
]
