"""Dual-importance-protected SVD compression of layered linear models.

The library compresses each weight matrix through an SVD of the whitened
weight ``W @ S``, where ``S`` factors the (optionally channel-amplified)
Gram of the weight's calibration activations. That makes the truncation
loss on the calibration data equal the root-sum-square of the dropped
singular values, so rank budgets translate directly into output error.
Layer-wise budgets come either from a Fisher-sensitivity/effective-rank
heuristic or from budget-constrained Bayesian optimization.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractViolationError,
    DegenerateSpectrumError,
    DipsvdError,
    FactorizationError,
    FormatError,
    InfeasibleBudgetError,
    ShapeError,
    SingularWhiteningError,
    UndefinedCorrelationError,
    UndefinedSimilarityError,
)
from .linalg import (
    SvdFactors,
    as_matrix,
    frobenius_norm,
    pearson,
    seeded_rng,
    svd,
    sym_eig,
)
from .calibration import (
    CalibrationMatrix,
    capture_activations,
    generate_synthetic,
    load_matrix,
    save_matrix,
)
from .whitening import (
    ChannelScaling,
    WhiteningTransform,
    build_scaling,
    build_whitening,
    channel_importance,
    identity_scaling,
    identity_whitening,
)
from .compressor import (
    CompressedModel,
    CompressionLoss,
    LowRankFactors,
    WeightMatrix,
    compress_model,
    compress_weight,
    drop_singular_triples,
    flops_report,
    load_factors,
    mac_counts,
    rank_from_ratio,
    save_factors,
    truncation_loss_observed,
)
from .toymodel import (
    Layer,
    ToyModel,
    cosine_output_similarity,
    forward,
    gradients,
    load_model,
    random_model,
    save_model,
    scalar_loss,
    spectral_model,
)
from .allocation import (
    CompressionPlan,
    LayerScores,
    allocate,
    combine_scores,
    effective_rank,
    fisher_sensitivity,
    layer_effective_ranks,
    score_layers,
    uniform_plan,
)
from .bayesopt import (
    BoConfig,
    BoTrace,
    compare_allocators,
    optimize,
    project_to_budget,
)
from .pipeline import (
    RunConfig,
    method_comparison,
    render_report,
    run_allocate,
    run_compress,
    run_verify_loss,
)

__all__ = [name for name in dir() if not name.startswith("_")]
