"""Debiased in-sample inference for post-hoc identified subgroups.

Estimates the average treatment effect of a subgroup identified from the
whole dataset (all subjects whose fitted effect score clears a threshold)
and builds confidence intervals that stay valid despite the identify-then-
evaluate reuse of the data, via conditional adaptive multiplier
perturbation.  Naive in-sample, sample-split, and oracle baselines plus a
Monte Carlo coverage benchmark are included.
"""

from .data import (
    Dataset,
    FoldAssignment,
    Observation,
    RngStream,
    load_dataset_csv,
    make_folds,
    rng_child,
)
from .crossfit import (
    NuisancePredictions,
    crossfit_nuisances,
    dump_nuisances,
    logistic_propensity_learner,
    pseudo_outcome,
    pseudo_outcomes,
    spline_outcome_learner,
)
from .inference import (
    ConfidenceInterval,
    PipelineConfig,
    PisaEstimate,
    empirical_quantile,
    fit_nuisance_and_cate,
    fit_pipeline,
    naive_ci,
    oracle_ci,
    perturb_once,
    perturbation_ci,
    pivotal_pisa,
    sample_split_ci,
    select_m_adaptive,
    select_subset,
)
from .subgroup import (
    CateModel,
    SubgroupSpec,
    boundary_diagnostic,
    cate_refitter,
    export_blackbox,
    fit_cate_dr,
    fit_cate_tlearner,
    load_blackbox,
    membership,
)
from .simbench import (
    DgpSpec,
    SimulationConfig,
    StudyRow,
    draw_dataset,
    draw_mixture_z2,
    run_replication,
    run_study,
    true_baseline,
    true_cate,
    true_pisa,
)
from . import errors, learners

__version__ = "0.1.0"

__all__ = [
    "CateModel",
    "ConfidenceInterval",
    "Dataset",
    "DgpSpec",
    "FoldAssignment",
    "NuisancePredictions",
    "Observation",
    "PipelineConfig",
    "PisaEstimate",
    "RngStream",
    "SimulationConfig",
    "StudyRow",
    "SubgroupSpec",
    "boundary_diagnostic",
    "cate_refitter",
    "crossfit_nuisances",
    "draw_dataset",
    "draw_mixture_z2",
    "dump_nuisances",
    "empirical_quantile",
    "errors",
    "export_blackbox",
    "fit_cate_dr",
    "fit_cate_tlearner",
    "fit_nuisance_and_cate",
    "fit_pipeline",
    "learners",
    "load_blackbox",
    "load_dataset_csv",
    "logistic_propensity_learner",
    "make_folds",
    "membership",
    "naive_ci",
    "oracle_ci",
    "perturb_once",
    "perturbation_ci",
    "pivotal_pisa",
    "pseudo_outcome",
    "pseudo_outcomes",
    "rng_child",
    "run_replication",
    "run_study",
    "sample_split_ci",
    "select_m_adaptive",
    "select_subset",
    "spline_outcome_learner",
    "true_baseline",
    "true_cate",
    "true_pisa",
]
