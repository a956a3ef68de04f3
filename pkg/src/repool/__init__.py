"""Settlement, equilibrium, and stability tools for pooled renewable producers."""

__version__ = "0.1.0"

from .market import (
    PriceSystem,
    CommitmentProfile,
    RealizationProfile,
    PayoffAllocation,
    separate_payoff,
    aggregate_payoff,
    allocate_payoffs,
    excess_payoff,
)
from .models import (
    DegenerateModelError,
    EstimationSupportError,
    ConditionalMeanSlope,
    GaussianJointModel,
    EmpiricalJointModel,
)
from .equilibrium import (
    EquilibriumExistenceWarning,
    ConditionReport,
    EquilibriumResult,
    BestResponseReport,
    newsvendor_fractile,
    newsvendor_commitment,
    check_ne_condition,
    nash_commitments,
    expected_payoff,
    payoff_quadrature_tolerance,
    verify_best_response,
    optimal_separate_commitment,
    find_counterexample_prices,
)
from .coalition import (
    CapacityError,
    CoalitionReport,
    CoreAudit,
    CompetitiveEquilibrium,
    ExAnteCollusionReport,
    coalition_value,
    audit_expost_core,
    audit_expost_no_collusion,
    no_collusion_differences,
    optimal_redistribution,
    competitive_equilibrium,
    audit_exante_stability,
    audit_exante_no_collusion,
)
from .simulate import (
    HistoryFormatError,
    MarketHistory,
    CaseResult,
    SimOptions,
    construct_rt_prices,
    fit_error_model,
    run_case,
    run_all_cases,
    run_custom_case,
    synthetic_error_model,
    synthetic_history,
)

__all__ = [
    "PriceSystem",
    "CommitmentProfile",
    "RealizationProfile",
    "PayoffAllocation",
    "separate_payoff",
    "aggregate_payoff",
    "allocate_payoffs",
    "excess_payoff",
    "DegenerateModelError",
    "EstimationSupportError",
    "ConditionalMeanSlope",
    "GaussianJointModel",
    "EmpiricalJointModel",
    "EquilibriumExistenceWarning",
    "ConditionReport",
    "EquilibriumResult",
    "BestResponseReport",
    "newsvendor_fractile",
    "newsvendor_commitment",
    "check_ne_condition",
    "nash_commitments",
    "expected_payoff",
    "payoff_quadrature_tolerance",
    "verify_best_response",
    "optimal_separate_commitment",
    "find_counterexample_prices",
    "CapacityError",
    "CoalitionReport",
    "CoreAudit",
    "CompetitiveEquilibrium",
    "ExAnteCollusionReport",
    "coalition_value",
    "audit_expost_core",
    "audit_expost_no_collusion",
    "no_collusion_differences",
    "optimal_redistribution",
    "competitive_equilibrium",
    "audit_exante_stability",
    "audit_exante_no_collusion",
    "HistoryFormatError",
    "MarketHistory",
    "CaseResult",
    "SimOptions",
    "construct_rt_prices",
    "fit_error_model",
    "run_case",
    "run_all_cases",
    "run_custom_case",
    "synthetic_error_model",
    "synthetic_history",
]
