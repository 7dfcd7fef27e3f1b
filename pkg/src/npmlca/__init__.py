"""Conditional nonparametric multilevel latent class analysis and its simulation study."""
from .alignment import Relabeling, align, find_level1_permutation, find_level2_permutation, relabel
from .estimator import (
    FitOptions,
    FitResult,
    Posteriors,
    classify,
    e_step,
    fit,
    m_step,
    standard_errors,
    wald_tests,
)
from .metrics import (
    ReplicationRecord,
    classification_error,
    eta_squared,
    parameter_recovery,
    rejection_rate,
)
from .model import (
    Dataset,
    ModelSpec,
    Parameters,
    class_membership_probs,
    count_free_parameters,
    group_loglik,
    information_criteria,
    relative_entropy,
    response_loglik,
    total_loglik,
)
from .simulator import Condition, build_true_parameters, condition_grid, generate_dataset

__version__ = "0.1.0"
