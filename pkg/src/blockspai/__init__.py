"""blockspai: block-sparse approximate inverses for distributed estimation."""

from .errors import (
    BlockspaiError,
    DimensionMismatchError,
    MissingSignalError,
    NotConvergedError,
    SingularMatrixError,
    ValidationError,
)
from .blocksparse import (
    BlockSparseMatrix,
    PatternMatrix,
    binarize,
    drop_small,
    kernel_policy,
    mask_pattern,
    pattern_power_sum,
    pattern_product,
    sp_add,
    spgemm,
    transpose,
)
from .spectral import (
    DEFAULT_SEED,
    SingularInterval,
    extreme_eigs_of_gram_factor,
    extreme_singular_values,
    power_iteration,
    spectral_norm,
    two_norm_error,
)
from .statespace import (
    Gramian,
    InterconnectedSystem,
    LiftedModel,
    LiftedSignal,
    controllability_index,
    ctrl_gramian,
    lift,
    observability_index,
    obs_gramian,
    simulate,
    truncate_stable_powers,
    window_signals,
)
from .models import (
    HeatModelSpec,
    RandomModelSpec,
    generate_banded_chain,
    generate_heat3d,
    generate_random,
    heat_lattice_pattern,
)
from .spai import (
    ApproxInverse,
    FrobeniusInverse,
    InvertSpec,
    NewtonSchulzConfig,
    NewtonSchulzInverse,
    SpaiReport,
    banded_pattern,
    error_bound,
    frobenius_spai,
    initial_guess,
    invert,
    newton_schulz,
    predict_pattern_neumann,
    regularize_and_invert,
)
from .estimator import (
    CommunicationGraph,
    DistributedEstimator,
    SignalProvider,
    build_estimator,
    centralized_estimate,
    distributed_estimate,
    impulse_response_solve,
    least_norm_control,
    load_estimator,
    local_estimate,
    predict_estimator_patterns,
    predict_gramian_pattern,
    predict_obs_pattern,
    save_estimator,
)
from .mmio import read_block_matrix, read_pattern, write_block_matrix, write_pattern

__version__ = "0.1.0"

__all__ = [
    "BlockspaiError",
    "ValidationError",
    "DimensionMismatchError",
    "SingularMatrixError",
    "MissingSignalError",
    "NotConvergedError",
    "BlockSparseMatrix",
    "PatternMatrix",
    "spgemm",
    "sp_add",
    "transpose",
    "binarize",
    "pattern_product",
    "pattern_power_sum",
    "mask_pattern",
    "drop_small",
    "kernel_policy",
    "DEFAULT_SEED",
    "SingularInterval",
    "extreme_singular_values",
    "extreme_eigs_of_gram_factor",
    "power_iteration",
    "spectral_norm",
    "two_norm_error",
    "InterconnectedSystem",
    "LiftedModel",
    "LiftedSignal",
    "Gramian",
    "lift",
    "obs_gramian",
    "ctrl_gramian",
    "observability_index",
    "controllability_index",
    "truncate_stable_powers",
    "simulate",
    "window_signals",
    "HeatModelSpec",
    "RandomModelSpec",
    "generate_heat3d",
    "generate_banded_chain",
    "generate_random",
    "heat_lattice_pattern",
    "ApproxInverse",
    "SpaiReport",
    "InvertSpec",
    "NewtonSchulzConfig",
    "NewtonSchulzInverse",
    "FrobeniusInverse",
    "newton_schulz",
    "regularize_and_invert",
    "frobenius_spai",
    "invert",
    "banded_pattern",
    "predict_pattern_neumann",
    "initial_guess",
    "error_bound",
    "DistributedEstimator",
    "SignalProvider",
    "CommunicationGraph",
    "build_estimator",
    "local_estimate",
    "distributed_estimate",
    "centralized_estimate",
    "least_norm_control",
    "impulse_response_solve",
    "predict_obs_pattern",
    "predict_gramian_pattern",
    "predict_estimator_patterns",
    "save_estimator",
    "load_estimator",
    "read_block_matrix",
    "write_block_matrix",
    "read_pattern",
    "write_pattern",
    "__version__",
]
