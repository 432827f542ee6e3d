"""Latent Markov models for multivariate categorical longitudinal panels.

Fits k-state latent chains with multinomial-logit links on the initial and
transition probabilities, selects models by information criteria, and
reconstructs per-subject posterior state probability profiles.
"""

from .em import FitOptions, FitResult, best_state_alignment, em_step, fit, initialize
from .errors import (
    DuplicateObservationError,
    FitFailureError,
    InvalidCategoryError,
    InvalidGradeError,
    LmPanelError,
    ModelMismatchError,
    MStepFailureError,
    NumericOverflowError,
    SchemaMismatchError,
)
from .likelihood import (
    pairwise_posteriors,
    posteriors,
    subject_lattice,
    subject_loglik,
    total_loglik,
)
from .model import (
    ModelSpec,
    Parameters,
    TransitionStructure,
    apply_state_permutation,
    count_free_params,
    initial_probs,
    load_model,
    save_model,
    transition_matrix,
)
from .panel import (
    CovariateDecl,
    GradeMergeMap,
    IngestConfig,
    ItemSchema,
    LongitudinalPanel,
    PanelSchema,
    ResponseItem,
    category_frequencies,
    load_panel,
    load_schema,
    merge_grade,
    write_panel,
    write_schema,
)
from .profiles import (
    LatentProfile,
    average_initial,
    build_profiles,
    local_decode,
    prevalence_over_time,
)
from .selection import (
    SelectionReport,
    SelectionRow,
    information_criteria,
    select_states,
    stepwise_covariates,
)
from .simulate import CovariateGenerator, SimConfig, simulate_panel

__version__ = "0.1.0"

__all__ = [
    "CovariateDecl",
    "CovariateGenerator",
    "DuplicateObservationError",
    "FitFailureError",
    "FitOptions",
    "FitResult",
    "GradeMergeMap",
    "IngestConfig",
    "InvalidCategoryError",
    "InvalidGradeError",
    "ItemSchema",
    "LatentProfile",
    "LmPanelError",
    "LongitudinalPanel",
    "MStepFailureError",
    "ModelMismatchError",
    "ModelSpec",
    "NumericOverflowError",
    "PanelSchema",
    "Parameters",
    "ResponseItem",
    "SchemaMismatchError",
    "SelectionReport",
    "SelectionRow",
    "SimConfig",
    "TransitionStructure",
    "apply_state_permutation",
    "average_initial",
    "best_state_alignment",
    "build_profiles",
    "category_frequencies",
    "count_free_params",
    "em_step",
    "fit",
    "information_criteria",
    "initial_probs",
    "initialize",
    "load_model",
    "load_panel",
    "load_schema",
    "local_decode",
    "merge_grade",
    "pairwise_posteriors",
    "posteriors",
    "prevalence_over_time",
    "save_model",
    "select_states",
    "simulate_panel",
    "stepwise_covariates",
    "subject_lattice",
    "subject_loglik",
    "total_loglik",
    "transition_matrix",
    "write_panel",
    "write_schema",
]
