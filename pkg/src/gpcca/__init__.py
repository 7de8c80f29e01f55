"""Probabilistic joint dimensionality reduction of multi-modal data.

A latent factor model shared across R >= 2 stacked data modalities with a
block-diagonal, ridge-regularized error covariance, estimated by EM under
arbitrary missing-data masks. Includes model-based imputation, consensus
selection of the latent dimension, graph-based clustering of the learned
embeddings, and a synthetic multi-modality data generator.
"""

from .blocks import BlockSpd, bdiag_project, block_logdet, block_solve, woodbury_posterior
from .cluster import NeighborGraph, Partition, adjusted_rand_index, knn_graph, louvain
from .em import (
    EmConfig,
    EStepBuffers,
    e_step,
    fit,
    fit_complete,
    impute,
    init_params,
    m_step,
    transform,
)
from .errors import (
    DataError,
    DegenerateCovarianceError,
    GpccaError,
    NumericalError,
    SingularMomentError,
)
from .model import (
    FitReport,
    LatentPosterior,
    ModalityLayout,
    ModelParams,
    ObservedDataset,
    stack_modalities,
    validate_dataset,
)
from .ridge import (
    RidgeSpec,
    correlation_decompose,
    ridge_correlation,
    ridge_covariance,
    ridge_penalty,
)
from .selection import (
    CandidateResult,
    consensus_matrix,
    consensus_score,
    init_rmse,
    select_latent_dim,
)
from .simulate import SimOutput, SimSpec, ar1_correlation, generate, mvnormal_sample, mvt_sample

__version__ = "0.1.0"

__all__ = [
    "ModalityLayout",
    "ObservedDataset",
    "ModelParams",
    "LatentPosterior",
    "FitReport",
    "validate_dataset",
    "stack_modalities",
    "BlockSpd",
    "block_solve",
    "woodbury_posterior",
    "block_logdet",
    "bdiag_project",
    "RidgeSpec",
    "correlation_decompose",
    "ridge_correlation",
    "ridge_covariance",
    "ridge_penalty",
    "EmConfig",
    "EStepBuffers",
    "init_params",
    "e_step",
    "m_step",
    "fit",
    "fit_complete",
    "transform",
    "impute",
    "NeighborGraph",
    "Partition",
    "knn_graph",
    "louvain",
    "adjusted_rand_index",
    "CandidateResult",
    "consensus_matrix",
    "consensus_score",
    "init_rmse",
    "select_latent_dim",
    "SimSpec",
    "SimOutput",
    "ar1_correlation",
    "generate",
    "mvnormal_sample",
    "mvt_sample",
    "GpccaError",
    "DataError",
    "NumericalError",
    "DegenerateCovarianceError",
    "SingularMomentError",
]
