"""Two-settlement market arithmetic for pooled renewable producers.

A producer commits energy day ahead and is settled in real time against its
actual generation. Participating separately, each producer buys back its own
shortfall at the real-time buy price and sells its own surplus at the
real-time sell price. Participating through the pool, only the net deviation
of the whole group touches the real-time market, and the pool settles every
member's deviation at the single marginal rate the group faced. Internal
netting of opposite deviations is what makes the pool worth joining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TIE_TOL",
    "PriceSystem",
    "CommitmentProfile",
    "RealizationProfile",
    "PayoffAllocation",
    "separate_payoff",
    "aggregate_payoff",
    "allocate_payoffs",
    "excess_payoff",
]

# Absolute tolerance (MWh) below which the pool's net deviation counts as zero.
TIE_TOL = 1e-9

# Relative tolerance on the budget-balance identity sum(payoffs) == aggregate.
BALANCE_RTOL = 1e-9


def _finite_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must have at least one entry")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} entries must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PriceSystem:
    """Prices ($/MWh) for one settlement interval.

    ``rt_sell`` may be negative: dumping surplus into a saturated market can
    cost money. No-arbitrage ordering ``rt_sell <= day_ahead <= rt_buy`` is
    enforced at construction, which keeps the critical fractile
    ``(day_ahead - rt_sell) / (rt_buy - rt_sell)`` inside [0, 1].

    ``tie_price`` settles deviations when the pool's net deviation is exactly
    zero. Any value between the real-time prices is admissible; it defaults
    to their midpoint.
    """

    day_ahead: float
    rt_buy: float
    rt_sell: float
    tie_price: float | None = None

    def __post_init__(self):
        for name in ("day_ahead", "rt_buy", "rt_sell"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if not (self.rt_sell <= self.day_ahead <= self.rt_buy):
            raise ValueError(
                "prices must satisfy rt_sell <= day_ahead <= rt_buy, got "
                f"rt_sell={self.rt_sell}, day_ahead={self.day_ahead}, rt_buy={self.rt_buy}"
            )
        tie = self.tie_price
        if tie is None:
            tie = 0.5 * (self.rt_buy + self.rt_sell)
        tie = float(tie)
        if not np.isfinite(tie):
            raise ValueError("tie_price must be finite")
        if not (self.rt_sell <= tie <= self.rt_buy):
            raise ValueError(
                f"tie_price must lie in [rt_sell, rt_buy], got {tie} "
                f"outside [{self.rt_sell}, {self.rt_buy}]"
            )
        object.__setattr__(self, "tie_price", tie)

    @property
    def spread(self) -> float:
        """Real-time price spread rt_buy - rt_sell (nonnegative)."""
        return self.rt_buy - self.rt_sell


@dataclass(frozen=True)
class CommitmentProfile:
    """Day-ahead commitments (MWh) for each pool member.

    Negative commitments are permitted: a member may position itself as a
    net buyer day ahead.
    """

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _finite_vector(self.values, "commitments"))

    def __len__(self) -> int:
        return self.values.size

    @property
    def total(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class RealizationProfile:
    """Delivered generation (MWh) for each pool member, nonnegative."""

    values: np.ndarray

    def __post_init__(self):
        arr = _finite_vector(self.values, "realizations")
        if np.any(arr < 0):
            raise ValueError("realizations must be nonnegative")
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.size

    @property
    def total(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class PayoffAllocation:
    """Result of settling the pool and splitting the proceeds.

    ``branch`` records which side of the real-time market the pool ended on:
    ``"shortfall"``, ``"tie"``, or ``"surplus"``. ``aggregate`` is the pool's
    total market revenue; the member payoffs sum to it (budget balance), which
    is checked at construction.
    """

    payoffs: np.ndarray
    aggregate: float
    branch: str

    def __post_init__(self):
        object.__setattr__(self, "payoffs", _finite_vector(self.payoffs, "payoffs"))
        resid = self.budget_residual
        scale = max(1.0, abs(self.aggregate))
        if abs(resid) > BALANCE_RTOL * scale:
            raise ValueError(f"budget balance violated: residual {resid}")

    @property
    def budget_residual(self) -> float:
        return float(self.payoffs.sum()) - self.aggregate


def _commitments(obj) -> np.ndarray:
    if isinstance(obj, CommitmentProfile):
        return obj.values
    return CommitmentProfile(obj).values


def _realizations(obj) -> np.ndarray:
    if isinstance(obj, RealizationProfile):
        return obj.values
    return RealizationProfile(obj).values


def separate_payoff(commitment, realization, prices: PriceSystem):
    """Payoff of a producer (or a stand-alone group) settling on its own.

    Day-ahead revenue on the commitment, shortfall bought back at ``rt_buy``,
    surplus sold off at ``rt_sell``. Accepts scalars or arrays and
    broadcasts.
    """
    c = np.asarray(commitment, dtype=float)
    x = np.asarray(realization, dtype=float)
    pay = (
        prices.day_ahead * c
        - prices.rt_buy * np.maximum(c - x, 0.0)
        + prices.rt_sell * np.maximum(x - c, 0.0)
    )
    if pay.ndim == 0:
        return float(pay)
    return pay


def aggregate_payoff(total_commitment: float, total_realization: float, prices: PriceSystem) -> float:
    """Market revenue of the pool settling as a single participant."""
    return float(separate_payoff(total_commitment, total_realization, prices))


def settlement_rate(total_commitment: float, total_realization: float,
                    prices: PriceSystem, tie_tol: float = TIE_TOL) -> tuple[float, str]:
    """Marginal rate the pool faced, and the branch label.

    The pool's net deviation picks the rate: ``rt_buy`` on a shortfall,
    ``rt_sell`` on a surplus, ``tie_price`` when the deviation is zero to
    within ``tie_tol`` (absolute, MWh).
    """
    deviation = total_realization - total_commitment
    if deviation < -tie_tol:
        return prices.rt_buy, "shortfall"
    if deviation > tie_tol:
        return prices.rt_sell, "surplus"
    return prices.tie_price, "tie"


def allocate_payoffs(commitments, realizations, prices: PriceSystem,
                     tie_tol: float = TIE_TOL) -> PayoffAllocation:
    """Settle the pool and pay each member at the pool's marginal rate.

    Member i receives day-ahead revenue on its own commitment plus its own
    deviation priced at the rate the whole pool faced. Summing members
    reproduces the pool's aggregate revenue, so the rule is budget balanced
    by construction (the tie branch balances to within ``tie_tol`` times the
    tie price).

    Args:
        commitments: per-member day-ahead commitments (profile or array).
        realizations: per-member delivered energy (profile or array).
        prices: settlement prices.
        tie_tol: absolute tolerance for calling the pool deviation zero.

    Returns:
        PayoffAllocation with per-member payoffs, the aggregate revenue, and
        the settlement branch.

    Raises:
        ValueError: on length mismatch or invalid profiles.
    """
    c = _commitments(commitments)
    x = _realizations(realizations)
    if c.size != x.size:
        raise ValueError(f"length mismatch: {c.size} commitments vs {x.size} realizations")
    rate, branch = settlement_rate(c.sum(), x.sum(), prices, tie_tol)
    payoffs = prices.day_ahead * c + rate * (x - c)
    aggregate = aggregate_payoff(float(c.sum()), float(x.sum()), prices)
    if branch == "tie":
        # On an exact tie the aggregate formula has no deviation term; force
        # consistency rather than leave a tie_tol-sized residual.
        aggregate = float(payoffs.sum())
    return PayoffAllocation(payoffs, aggregate, branch)


def excess_payoff(commitments, realizations, prices: PriceSystem) -> float:
    """Pool revenue minus the sum of the members' separate payoffs.

    Equals the real-time spread times the netted volume, the smaller of the
    group's total surplus and total shortfall: only energy that can be
    matched internally avoids the buy/sell spread. Nonnegative whenever
    rt_sell <= rt_buy.
    """
    c = _commitments(commitments)
    x = _realizations(realizations)
    if c.size != x.size:
        raise ValueError(f"length mismatch: {c.size} commitments vs {x.size} realizations")
    dev = x - c
    over = dev[dev >= 0].sum()
    under = -dev[dev < 0].sum()
    return float(prices.spread * min(over, under))
