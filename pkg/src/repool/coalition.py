"""Coalitional stability of the pooled settlement rule.

A subset of members can always walk out and settle as its own pool, so the
settlement rule must give every subset at least its stand-alone market value
(core property), and merging members into one participant must never change
what they collectively receive (no-collusion). Both hold deal by deal for
the rate-sharing rule, and this module audits them: exhaustively over
subsets after the fact, and in expectation via common-random-number Monte
Carlo before the fact. It also constructs the competitive equilibrium of the
equivalent exchange market, whose payoffs reproduce the settlement rule's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import (
    PriceSystem,
    TIE_TOL,
    _commitments,
    _realizations,
    aggregate_payoff,
    allocate_payoffs,
    separate_payoff,
    settlement_rate,
)
from .equilibrium import nash_commitments, optimal_separate_commitment

__all__ = [
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
]

# Exhaustive subset enumeration is capped here; beyond it use sampled audits.
MAX_EXHAUSTIVE_UNITS = 24

# Expected-value audits simulate every subset, so they cap earlier.
MAX_EXANTE_UNITS = 12

_SLACK_RTOL = 1e-9


class CapacityError(ValueError):
    """Too many members for the requested audit mode."""


@dataclass(frozen=True)
class CoalitionReport:
    """Stand-alone value versus allocated total for one subset of members.

    ``mask`` is the subset bitmask (bit i set means member i belongs).
    ``slack`` is allocated minus stand-alone; a negative slack beyond
    tolerance means the subset would rather leave. ``stderr`` is set only
    for Monte Carlo (expected-value) audits.
    """

    mask: int
    allocated: float
    standalone: float
    slack: float
    stderr: float | None = None

    @property
    def members(self) -> tuple[int, ...]:
        out, bit, mask = [], 0, self.mask
        while mask:
            if mask & 1:
                out.append(bit)
            mask >>= 1
            bit += 1
        return tuple(out)


@dataclass(frozen=True)
class CoreAudit:
    """Outcome of a stability audit over a family of subsets."""

    reports: tuple[CoalitionReport, ...]
    min_slack: float
    worst: CoalitionReport
    scale: float
    passed: bool
    sampled: bool = False


@dataclass(frozen=True)
class CompetitiveEquilibrium:
    """Clearing price and internal redistribution of the exchange market.

    ``redistribution`` is the energy each member ends up holding after
    internal trades; it sums to the delivered total. ``payoffs`` are each
    member's production payoff on the held energy plus the value of the
    internal trade at the clearing price.
    """

    price: float
    redistribution: np.ndarray
    payoffs: np.ndarray
    branch: str

    def __post_init__(self):
        for name in ("redistribution", "payoffs"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class ExAnteCollusionReport:
    """Expected-payoff comparison between merged and separate participation."""

    members: tuple[int, ...]
    merged_commitment: float
    commitment_sum: float
    difference: float
    stderr: float
    others_residual: float
    merged_candidate_residual: float

    @property
    def others_unchanged(self) -> bool:
        return self.others_residual <= 1e-9 * max(1.0, abs(self.commitment_sum))


def _mask_members(mask: int, n: int) -> np.ndarray:
    return np.array([i for i in range(n) if mask >> i & 1], dtype=int)


def _members_mask(members) -> int:
    mask = 0
    for i in np.atleast_1d(np.asarray(members, dtype=int)):
        mask |= 1 << int(i)
    return mask


def coalition_value(members, commitments, realizations, prices: PriceSystem) -> float:
    """Market value of a subset settling as its own pool.

    The subset keeps its submitted commitments and delivered energy; only
    its own net deviation touches the real-time market.
    """
    c = _commitments(commitments)
    x = _realizations(realizations)
    idx = np.atleast_1d(np.asarray(members, dtype=int))
    if idx.size == 0:
        raise ValueError("coalition must be nonempty")
    if idx.min() < 0 or idx.max() >= c.size:
        raise ValueError(f"member indices must be in [0, {c.size})")
    return aggregate_payoff(float(c[idx].sum()), float(x[idx].sum()), prices)


def _subset_sums(masks: np.ndarray, values: np.ndarray) -> np.ndarray:
    bits = (masks[:, None] >> np.arange(values.size)) & 1
    return bits @ values


def audit_expost_core(payoffs, commitments, realizations, prices: PriceSystem,
                      tol: float = _SLACK_RTOL, sampled: bool = False,
                      n_subsets: int = 4096, seed=None) -> CoreAudit:
    """Check that no subset is paid less than its stand-alone market value.

    Exhaustive over all nonempty subsets (grand coalition included) up to
    24 members; beyond that, pass ``sampled=True`` to audit all singletons,
    the grand coalition, and ``n_subsets`` uniformly random subsets.

    Args:
        payoffs: allocation under audit (array or PayoffAllocation.payoffs).
        commitments, realizations: the settled instance.
        prices: settlement prices.
        tol: relative slack tolerance (scaled by the money magnitude).
        sampled: audit a random subset family instead of all subsets.
        n_subsets: number of random subsets in sampled mode.
        seed: rng seed for sampled mode.

    Returns:
        CoreAudit; ``passed`` is True iff the minimum slack is above
        ``-tol * scale``.
    """
    p = np.asarray(getattr(payoffs, "payoffs", payoffs), dtype=float)
    c = _commitments(commitments)
    x = _realizations(realizations)
    n = c.size
    if not (p.size == n == x.size):
        raise ValueError("payoffs, commitments, and realizations must have equal length")

    if sampled:
        if seed is None:
            raise ValueError("sampled audit requires a seed")
        rng = np.random.default_rng(seed)
        picks = {1 << i for i in range(n)}
        picks.add((1 << n) - 1)
        while len(picks) < min(n_subsets + n + 1, (1 << n) - 1):
            bits = rng.random(n) < 0.5
            mask = sum(1 << i for i in range(n) if bits[i])
            if mask:
                picks.add(mask)
        masks = np.array(sorted(picks), dtype=np.int64)
    else:
        if n > MAX_EXHAUSTIVE_UNITS:
            raise CapacityError(
                f"{n} members exceeds the exhaustive audit cap of "
                f"{MAX_EXHAUSTIVE_UNITS}; use sampled=True"
            )
        masks = np.arange(1, 1 << n, dtype=np.int64)

    c_t = _subset_sums(masks, c)
    x_t = _subset_sums(masks, x)
    alloc = _subset_sums(masks, p)
    values = (
        prices.day_ahead * c_t
        - prices.rt_buy * np.maximum(c_t - x_t, 0.0)
        + prices.rt_sell * np.maximum(x_t - c_t, 0.0)
    )
    slack = alloc - values
    scale = max(1.0, float(np.abs(alloc).max()), float(np.abs(values).max()))
    reports = tuple(
        CoalitionReport(int(m), float(a), float(v), float(s))
        for m, a, v, s in zip(masks, alloc, values, slack)
    )
    worst = int(np.argmin(slack))
    min_slack = float(slack[worst])
    return CoreAudit(
        reports=reports,
        min_slack=min_slack,
        worst=reports[worst],
        scale=scale,
        passed=min_slack >= -tol * scale,
        sampled=sampled,
    )


def audit_expost_no_collusion(commitments, realizations, prices: PriceSystem,
                              members) -> float:
    """Payoff change from merging a subset into a single participant.

    The merged participant submits the subset's total commitment and
    delivers its total energy; everyone else is unchanged. Returns the
    merged participant's payoff minus the sum of the subset's original
    payoffs. Zero (to rounding) because the settlement rate depends only on
    pool totals, which merging preserves.
    """
    c = _commitments(commitments)
    x = _realizations(realizations)
    idx = np.atleast_1d(np.asarray(members, dtype=int))
    if idx.size == 0:
        raise ValueError("subset must be nonempty")
    rest = np.setdiff1d(np.arange(c.size), idx)
    before = allocate_payoffs(c, x, prices)
    merged_c = np.concatenate([[c[idx].sum()], c[rest]])
    merged_x = np.concatenate([[x[idx].sum()], x[rest]])
    after = allocate_payoffs(merged_c, merged_x, prices)
    return float(after.payoffs[0] - before.payoffs[idx].sum())


def no_collusion_differences(commitments, realizations, prices: PriceSystem) -> np.ndarray:
    """Merge-versus-sum payoff differences for every nonempty subset at once.

    Vectorized over subset bitmasks 1 .. 2**n - 1; entry k corresponds to
    mask k + 1. Merging preserves pool totals, so the settlement rate is the
    one the unmerged pool faced.
    """
    c = _commitments(commitments)
    x = _realizations(realizations)
    if c.size > MAX_EXHAUSTIVE_UNITS:
        raise CapacityError(f"{c.size} members exceeds cap {MAX_EXHAUSTIVE_UNITS}")
    alloc = allocate_payoffs(c, x, prices)
    rate, _ = settlement_rate(c.sum(), x.sum(), prices)
    masks = np.arange(1, 1 << c.size, dtype=np.int64)
    c_t = _subset_sums(masks, c)
    x_t = _subset_sums(masks, x)
    merged = prices.day_ahead * c_t + rate * (x_t - c_t)
    summed = _subset_sums(masks, alloc.payoffs)
    return merged - summed


def optimal_redistribution(members, commitments, realizations) -> np.ndarray:
    """Internal energy transfer that maximizes a subset's production payoff.

    Returns the energy each subset member should hold, in the order of
    ``members``. The holdings sum to the subset's delivered total. When the
    subset is short overall, members with surplus hand it off and keep
    exactly their commitment; shortfall members are topped up toward their
    commitments in ascending member order. When the subset is long overall,
    shortfall members are made whole and the remaining surplus stays with
    surplus members, drained in ascending member order. Either way the
    subset's payoff equals its stand-alone market value: internal transfers
    monetize every matched MWh at the day-ahead price instead of crossing
    the real-time spread.
    """
    c_all = _commitments(commitments)
    x_all = _realizations(realizations)
    idx = np.atleast_1d(np.asarray(members, dtype=int))
    if idx.size == 0:
        raise ValueError("subset must be nonempty")
    c = c_all[idx].astype(float)
    x = x_all[idx].astype(float)
    dev = x - c
    z = x.copy()
    if dev.sum() < 0.0:
        # Net short: surpluses are given away in full, shorts topped up in order.
        pool = dev[dev >= 0].sum()
        z[dev >= 0] = c[dev >= 0]
        for i in np.flatnonzero(dev < 0):
            take = min(c[i] - x[i], pool)
            z[i] = x[i] + take
            pool -= take
    else:
        # Net long (or exactly balanced): shorts made whole, surplus drained in order.
        need = -dev[dev < 0].sum()
        z[dev < 0] = c[dev < 0]
        for i in np.flatnonzero(dev >= 0):
            give = min(x[i] - c[i], need)
            z[i] = x[i] - give
            need -= give
    return z


def competitive_equilibrium(commitments, realizations, prices: PriceSystem,
                            tie_tol: float = TIE_TOL) -> CompetitiveEquilibrium:
    """Clearing price and allocation of the internal energy exchange.

    Members trade delivered energy among themselves before settling, and a
    single internal price clears the exchange. A pool that is short overall
    clears at ``rt_buy`` (each member holds at most its commitment), a pool
    that is long clears at ``rt_sell`` (each member holds at least its
    commitment), and an exactly balanced pool clears at ``tie_price`` with
    every member holding its commitment. The resulting payoffs coincide with
    the settlement rule's member by member.
    """
    c = _commitments(commitments)
    x = _realizations(realizations)
    if c.size != x.size:
        raise ValueError(f"length mismatch: {c.size} commitments vs {x.size} realizations")
    total_dev = float(x.sum() - c.sum())
    dev = x - c
    if total_dev < -tie_tol:
        price, branch = prices.rt_buy, "shortfall"
        if np.any(c < 0):
            # Degenerate analysis-mode instance: park the whole deficit on
            # member 0, which keeps every holding at or below commitment.
            z = c.copy()
            z[0] += total_dev
        else:
            z = np.where(dev >= 0, c, 0.0)
            rem = float(x.sum() - c[dev >= 0].sum())
            for i in np.flatnonzero(dev < 0):
                z[i] = min(c[i], rem)
                rem -= z[i]
    elif total_dev > tie_tol:
        price, branch = prices.rt_sell, "surplus"
        z = c.copy()
        rem = total_dev
        for i in np.flatnonzero(dev >= 0):
            give = min(x[i] - c[i], rem)
            z[i] = c[i] + give
            rem -= give
    else:
        price, branch = prices.tie_price, "tie"
        z = c.copy()
    production = separate_payoff(c, z, prices)
    payoffs = production - price * (z - x)
    return CompetitiveEquilibrium(price=float(price), redistribution=z,
                                  payoffs=payoffs, branch=branch)


def audit_exante_stability(model, prices: PriceSystem, n_samples: int = 100_000,
                           seed=0, tol: float = _SLACK_RTOL) -> CoreAudit:
    """Expected-value core audit at the equilibrium commitments.

    Monte Carlo with common random numbers: each subset's expected allocated
    payoff (members commit their equilibrium values) is compared against its
    stand-alone expected payoff at its own optimal total commitment, using
    the same generation draws on both sides. Slack is reported per subset
    with its standard error; the audit passes if every slack is above minus
    three standard errors (less a small absolute tolerance).

    Capacity is capped at 12 members because every subset is simulated.
    """
    n = model.n_units
    if n > MAX_EXANTE_UNITS:
        raise CapacityError(f"{n} members exceeds the expected-value audit cap of {MAX_EXANTE_UNITS}")
    eq = nash_commitments(model, prices)
    c = eq.commitments
    draws = model.sample(n_samples, seed)
    pool_dev = draws.sum(axis=1) - c.sum()
    rate = np.where(pool_dev < -TIE_TOL, prices.rt_buy,
                    np.where(pool_dev > TIE_TOL, prices.rt_sell, prices.tie_price))
    reports = []
    scale = 1.0
    for mask in range(1, 1 << n):
        idx = _mask_members(mask, n)
        x_t = draws[:, idx].sum(axis=1)
        c_t = float(c[idx].sum())
        alloc = prices.day_ahead * c_t + rate * (x_t - c_t)
        c_star = optimal_separate_commitment(model, idx, prices)
        standalone = separate_payoff(c_star, x_t, prices)
        diff = alloc - standalone
        slack = float(diff.mean())
        stderr = float(diff.std(ddof=1) / np.sqrt(n_samples))
        reports.append(CoalitionReport(mask, float(alloc.mean()), float(standalone.mean()),
                                       slack, stderr))
        scale = max(scale, abs(float(alloc.mean())), abs(float(standalone.mean())))
    worst = min(range(len(reports)), key=lambda k: reports[k].slack)
    passed = all(r.slack >= -3.0 * r.stderr - tol * scale for r in reports)
    return CoreAudit(
        reports=tuple(reports),
        min_slack=reports[worst].slack,
        worst=reports[worst],
        scale=scale,
        passed=passed,
        sampled=False,
    )


def audit_exante_no_collusion(model, prices: PriceSystem, members,
                              n_samples: int = 100_000, seed=0) -> ExAnteCollusionReport:
    """Expected-payoff test that merging a subset changes nothing.

    The merged participant's equilibrium commitment equals the sum of the
    subset's separate equilibrium commitments (conditional expectation is
    additive), so with common random numbers the expected payoff difference
    is zero. The merged game's equilibrium is also recomputed from the
    merged model as a cross-check, both for the merged participant and for
    the untouched members.
    """
    import warnings as _warnings
    from .equilibrium import EquilibriumExistenceWarning

    idx = np.atleast_1d(np.asarray(members, dtype=int))
    if idx.size == 0:
        raise ValueError("subset must be nonempty")
    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore", EquilibriumExistenceWarning)
        eq = nash_commitments(model, prices)
        merged_eq = nash_commitments(model.merge(idx), prices)
    c = eq.commitments
    rest = np.setdiff1d(np.arange(model.n_units), idx)
    merged_commitment = float(c[idx].sum())

    others_residual = float(np.abs(merged_eq.commitments[1:] - c[rest]).max()) if rest.size else 0.0
    candidate_residual = abs(float(merged_eq.commitments[0]) - merged_commitment)

    draws = model.sample(n_samples, seed)
    x_t = draws[:, idx].sum(axis=1)

    def subset_payoff(commit_t: float, total_commit: float) -> np.ndarray:
        pool_dev = draws.sum(axis=1) - total_commit
        rate = np.where(pool_dev < -TIE_TOL, prices.rt_buy,
                        np.where(pool_dev > TIE_TOL, prices.rt_sell, prices.tie_price))
        return prices.day_ahead * commit_t + rate * (x_t - commit_t)

    before = subset_payoff(merged_commitment, float(c.sum()))
    after = subset_payoff(merged_commitment, merged_commitment + float(c[rest].sum()))
    diff = after - before
    return ExAnteCollusionReport(
        members=tuple(int(i) for i in idx),
        merged_commitment=merged_commitment,
        commitment_sum=merged_commitment,
        difference=float(diff.mean()),
        stderr=float(diff.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0,
        others_residual=others_residual,
        merged_candidate_residual=candidate_residual,
    )
