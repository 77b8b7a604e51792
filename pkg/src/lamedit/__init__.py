"""Desk-scale batch knowledge editing on toy associative-memory stacks.

The package builds a synthetic multilingual editing benchmark, computes
closed-form weight edits per language, merges them under six different rules,
and scores the result on efficacy / generalization / specificity /
portability, with a CLI for experiments and sweeps.
"""

from .covariance import CovStats, KeyBatch, cov_per_language, cov_shared, const_stats, request_keys
from .errors import (
    ConfigError,
    FitError,
    IllConditionedError,
    InvalidRequestError,
    LameditError,
    RankRatioError,
    ShapeError,
)
from .merging import (
    MergeConfig,
    MergedDelta,
    apply_update,
    merge,
    merge_mean,
    merge_sum,
    merge_tsvm,
    truncate_svd,
)
from .metrics import MetricsReport, MetricsRow, accuracy, evaluate, evaluate_all, run_mono
from .model import (
    HiddenTrace,
    LamLayer,
    ToyModel,
    compute_key,
    compute_target_values,
    forward,
    forward_batch,
    predict,
    predict_batch,
)
from .solvers import (
    DeltaMatrix,
    DeltaSet,
    LanguageRequests,
    NullProjector,
    edit_model,
    nullspace_projector,
    solve_alphaedit,
    solve_memit,
)
from .synthdata import (
    EditRequest,
    GenConfig,
    MultilingualDataset,
    ProbeSet,
    build_benchmark,
    fit_initial_model,
    generate_dataset,
)

__version__ = "0.1.0"
