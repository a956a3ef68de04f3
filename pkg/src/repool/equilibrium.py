"""Commitment equilibrium of the pooled settlement game.

The pool's efficient total commitment is the newsvendor quantile of the
pooled generation at the critical fractile of the prices. Each member's
equilibrium commitment is its conditional expected generation given that the
pool delivers exactly that total, so the members' commitments sum to the
efficient total. The candidate is a true Nash equilibrium whenever no
member's conditional mean grows faster than the pooled total itself
(slope at most one everywhere); when some slope exceeds one, prices exist
under which a member profits by deviating.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .market import PriceSystem
from .models import ConditionalMeanSlope, EstimationSupportError

__all__ = [
    "CONDITION_TOL",
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
]

# Slack allowed on the slope-at-most-one existence condition.
CONDITION_TOL = 1e-9

# Integrals of conditional-mean mass run over [mean - 8 sd, commitment];
# the truncated tail is below 1e-15 of the total mass.
_TAIL_SDS = 8.0

# Default absolute quadrature tolerance, as a fraction of total_std.
_QUAD_RTOL = 1e-6


class EquilibriumExistenceWarning(UserWarning):
    """The closed-form candidate may not be a Nash equilibrium."""


@dataclass(frozen=True)
class ConditionReport:
    """Verdict on the equilibrium existence condition."""

    slopes: ConditionalMeanSlope
    tol: float

    @property
    def max_slope(self) -> float:
        return self.slopes.max_slope

    @property
    def satisfied(self) -> bool:
        return self.max_slope <= 1.0 + self.tol


@dataclass(frozen=True)
class EquilibriumResult:
    """Equilibrium candidate commitments for every pool member.

    ``commitments`` sum to ``total_commitment`` (the efficient newsvendor
    total), so the pool at equilibrium commits exactly what a single
    profit-maximizing owner of all units would. ``condition`` reports
    whether the candidate is guaranteed to be a Nash equilibrium.
    """

    commitments: np.ndarray
    total_commitment: float
    fractile: float
    condition: ConditionReport

    def __post_init__(self):
        arr = np.array(self.commitments, dtype=float)
        arr.flags.writeable = False
        object.__setattr__(self, "commitments", arr)


@dataclass(frozen=True)
class BestResponseReport:
    """Grid search of one member's expected payoff against the others' equilibrium play.

    ``improvement`` is the largest payoff gain found on the grid relative to
    the member's own equilibrium commitment; values within ``tolerance``
    (the quadrature tolerance) are numerical noise, anything above it is a
    genuine profitable deviation.
    """

    unit: int
    grid: np.ndarray
    payoffs: np.ndarray
    equilibrium_payoff: float
    best_commitment: float
    improvement: float
    tolerance: float

    @property
    def profitable(self) -> bool:
        return self.improvement > self.tolerance


def newsvendor_fractile(prices: PriceSystem) -> float:
    """Critical fractile (day_ahead - rt_sell) / (rt_buy - rt_sell)."""
    if prices.spread <= 0.0:
        raise ValueError("degenerate prices: rt_buy equals rt_sell")
    return (prices.day_ahead - prices.rt_sell) / prices.spread


def newsvendor_commitment(model, prices: PriceSystem) -> float:
    """Expected-payoff-maximizing total commitment for the pooled generation."""
    return model.sum_quantile(newsvendor_fractile(prices))


def check_ne_condition(model, tol: float = CONDITION_TOL) -> ConditionReport:
    """Check that every member's conditional-mean slope is at most one."""
    return ConditionReport(model.conditional_mean_slopes(), tol)


def nash_commitments(model, prices: PriceSystem) -> EquilibriumResult:
    """Closed-form equilibrium candidate commitments.

    Each member commits its conditional expected generation given that the
    pool total equals the efficient newsvendor commitment. If the existence
    condition fails, the candidate is still returned but an
    ``EquilibriumExistenceWarning`` is issued; callers that need certainty
    should inspect ``result.condition``.
    """
    total = newsvendor_commitment(model, prices)
    commitments = np.asarray(model.conditional_means(total), dtype=float).copy()
    # Conditional means sum to the conditioning value in exact arithmetic;
    # spread any smoothing or rounding residual evenly to keep the identity.
    commitments += (total - commitments.sum()) / commitments.size
    condition = check_ne_condition(model)
    if not condition.satisfied:
        warnings.warn(
            f"existence condition fails (max slope {condition.max_slope:.6g} > 1): "
            "returned commitments are a candidate only",
            EquilibriumExistenceWarning,
            stacklevel=2,
        )
    return EquilibriumResult(commitments, total, newsvendor_fractile(prices), condition)


def payoff_quadrature_tolerance(model, prices: PriceSystem) -> float:
    """Absolute payoff tolerance of the expected-payoff quadrature."""
    return _QUAD_RTOL * prices.spread * model.total_std


def expected_payoff(model, unit: int, commitment: float, others_total: float,
                    prices: PriceSystem, quad_tol: float | None = None) -> float:
    """Expected settlement payoff of one member against fixed rivals.

    Evaluates the closed form of the member's expected payoff when the other
    members together commit ``others_total``: a linear term in the member's
    commitment plus a spread-weighted integral of its conditional mean over
    pool totals below the combined commitment. The integral is done by
    adaptive quadrature.

    Args:
        model: joint generation model.
        unit: member index.
        commitment: this member's day-ahead commitment.
        others_total: sum of all other members' commitments.
        prices: settlement prices.
        quad_tol: absolute tolerance for the integral in energy units;
            defaults to 1e-6 times the pooled standard deviation, which
            bounds the payoff error by 1e-6 * spread * total_std.

    Returns:
        Expected payoff in $.
    """
    pool_commitment = float(commitment) + float(others_total)
    sd = model.total_std
    if quad_tol is None:
        quad_tol = _QUAD_RTOL * sd
    lo = min(model.total_mean, pool_commitment) - _TAIL_SDS * sd
    cdf = model.sum_cdf(pool_commitment)

    def integrand(s: float) -> float:
        # Conditional mass below the pool commitment. Points outside an
        # empirical model's support carry no density; count them as zero.
        try:
            return model.conditional_mean(unit, s) * model.sum_pdf(s)
        except EstimationSupportError:
            return 0.0

    integral, _ = quad(integrand, lo, pool_commitment, epsabs=quad_tol, epsrel=1e-10, limit=200)
    mu_i = float(model.mean[unit])
    return (
        prices.rt_sell * mu_i
        + (prices.day_ahead - prices.rt_sell) * float(commitment)
        + prices.spread * (integral - float(commitment) * cdf)
    )


def verify_best_response(model, prices: PriceSystem, unit: int, grid=None,
                         points: int = 101, span: float = 4.0,
                         quad_tol: float | None = None) -> BestResponseReport:
    """Probe one member's payoff along a commitment grid at the equilibrium.

    The other members hold their equilibrium commitments. The default grid
    covers the member's equilibrium commitment plus or minus ``span`` of its
    own standard deviation with ``points`` points.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EquilibriumExistenceWarning)
        eq = nash_commitments(model, prices)
    c_eq = float(eq.commitments[unit])
    others = eq.total_commitment - c_eq
    if grid is None:
        sd_i = float(model.component_stds[unit])
        grid = np.linspace(c_eq - span * sd_i, c_eq + span * sd_i, points)
    else:
        grid = np.asarray(grid, dtype=float)
    base = expected_payoff(model, unit, c_eq, others, prices, quad_tol)
    payoffs = np.array([expected_payoff(model, unit, c, others, prices, quad_tol) for c in grid])
    best = int(np.argmax(payoffs))
    return BestResponseReport(
        unit=unit,
        grid=grid,
        payoffs=payoffs,
        equilibrium_payoff=base,
        best_commitment=float(grid[best]),
        improvement=float(payoffs[best] - base),
        tolerance=payoff_quadrature_tolerance(model, prices),
    )


def optimal_separate_commitment(model, members, prices: PriceSystem) -> float:
    """Best stand-alone total commitment for a subset of members.

    The subset settling on its own faces the same newsvendor problem on its
    own pooled generation, so the answer is the subset-total quantile at the
    same fractile.
    """
    return model.marginal(members).sum_quantile(newsvendor_fractile(prices))


def _slope_at(model, unit: int, alpha: float, h: float) -> float:
    lo = model.conditional_mean(unit, alpha - h)
    hi = model.conditional_mean(unit, alpha + h)
    return (hi - lo) / (2.0 * h)


def find_counterexample_prices(model, unit: int, rt_buy: float = 60.0,
                               rt_sell: float = 20.0, grid=None,
                               tol: float = CONDITION_TOL) -> PriceSystem | None:
    """Construct prices under which the equilibrium candidate fails, if possible.

    Scans the member's conditional-mean slope over a grid of pool totals
    (default: mean plus or minus four pooled standard deviations). If the
    slope never exceeds one, returns None: the candidate is an equilibrium
    for every price system. Otherwise the lower edge of the violating region
    is located by bisection and the returned prices put the newsvendor
    fractile exactly there, which makes commitments just above the candidate
    attractive for this member.

    Note the anchoring matters: with the fractile at the lower edge, the
    density of the pool total grows through the violating region, which is
    what lets the deviation's gains outweigh its local second-order loss.
    Mid-distribution fractiles generally do not break a candidate whose
    slope stays below two.
    """
    if grid is None:
        sd = model.total_std
        grid = np.linspace(model.total_mean - 4.0 * sd, model.total_mean + 4.0 * sd, 257)
    else:
        grid = np.asarray(grid, dtype=float)
    h = 0.5 * (grid[1] - grid[0])
    slopes = np.array([_slope_at(model, unit, a, h) for a in grid])
    violating = slopes > 1.0 + tol
    if not violating.any():
        return None
    first = int(np.argmax(violating))
    if first == 0:
        edge = float(grid[0])
    else:
        lo, hi = float(grid[first - 1]), float(grid[first])
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _slope_at(model, unit, mid, h) > 1.0 + tol:
                hi = mid
            else:
                lo = mid
        edge = hi
    fractile = min(max(model.sum_cdf(edge), 1e-9), 1.0 - 1e-9)
    day_ahead = rt_sell + fractile * (rt_buy - rt_sell)
    return PriceSystem(day_ahead=day_ahead, rt_buy=rt_buy, rt_sell=rt_sell)
