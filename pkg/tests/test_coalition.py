"""Coalitional audits: core, no-collusion, redistribution, exchange clearing."""

import numpy as np
import pytest

from repool import (
    CapacityError,
    GaussianJointModel,
    PriceSystem,
    allocate_payoffs,
    audit_exante_no_collusion,
    audit_exante_stability,
    audit_expost_core,
    audit_expost_no_collusion,
    coalition_value,
    competitive_equilibrium,
    no_collusion_differences,
    optimal_redistribution,
    separate_payoff,
)
from repool.coalition import CoalitionReport

from helpers import random_instance

PRICES = PriceSystem(day_ahead=40.0, rt_buy=60.0, rt_sell=20.0)
C2 = np.array([10.0, 10.0])
X_SHORT = np.array([12.0, 7.0])


def test_coalition_value_worked_example():
    assert coalition_value([0], C2, X_SHORT, PRICES) == 440.0
    assert coalition_value([1], C2, X_SHORT, PRICES) == 220.0
    assert coalition_value([0, 1], C2, X_SHORT, PRICES) == 740.0
    with pytest.raises(ValueError):
        coalition_value([], C2, X_SHORT, PRICES)
    with pytest.raises(ValueError):
        coalition_value([2], C2, X_SHORT, PRICES)


def test_coalition_report_mask_decoding():
    report = CoalitionReport(mask=5, allocated=0.0, standalone=0.0, slack=0.0)
    assert report.members == (0, 2)


def test_core_audit_passes_for_pool_rule():
    alloc = allocate_payoffs(C2, X_SHORT, PRICES)
    audit = audit_expost_core(alloc.payoffs, C2, X_SHORT, PRICES)
    assert audit.passed
    assert len(audit.reports) == 3
    assert audit.min_slack == pytest.approx(0.0, abs=1e-12)
    by_mask = {r.mask: r for r in audit.reports}
    assert by_mask[1].slack == pytest.approx(80.0)
    assert by_mask[2].slack == pytest.approx(0.0)
    assert by_mask[3].slack == pytest.approx(0.0)


def test_core_audit_rejects_proportional_split():
    # Splitting the pool revenue proportionally to commitments ignores who
    # actually delivered; the strong member walks.
    total = allocate_payoffs(C2, X_SHORT, PRICES).aggregate
    prop = total * C2 / C2.sum()
    audit = audit_expost_core(prop, C2, X_SHORT, PRICES)
    assert not audit.passed
    assert audit.worst.mask == 1
    assert audit.worst.slack == pytest.approx(-70.0)


def test_core_audit_random_instances():
    rng = np.random.default_rng(41)
    for _ in range(100):
        c, x, prices = random_instance(rng, n_max=7)
        alloc = allocate_payoffs(c, x, prices)
        audit = audit_expost_core(alloc.payoffs, c, x, prices)
        assert audit.passed, (c, x, prices)


def test_core_audit_capacity_and_sampling():
    rng = np.random.default_rng(43)
    n = 25
    c = rng.uniform(0, 50, n)
    x = rng.uniform(0, 50, n)
    alloc = allocate_payoffs(c, x, PRICES)
    with pytest.raises(CapacityError):
        audit_expost_core(alloc.payoffs, c, x, PRICES)
    with pytest.raises(ValueError):
        audit_expost_core(alloc.payoffs, c, x, PRICES, sampled=True)
    audit = audit_expost_core(alloc.payoffs, c, x, PRICES, sampled=True,
                              n_subsets=64, seed=7)
    assert audit.sampled
    assert audit.passed
    masks = {r.mask for r in audit.reports}
    assert {1 << i for i in range(n)} <= masks
    assert (1 << n) - 1 in masks


def test_no_collusion_single_subset():
    diff = audit_expost_no_collusion(C2, X_SHORT, PRICES, [0, 1])
    assert diff == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        audit_expost_no_collusion(C2, X_SHORT, PRICES, [])


def test_no_collusion_all_subsets_random():
    rng = np.random.default_rng(47)
    for _ in range(50):
        c, x, prices = random_instance(rng, n_max=6)
        diffs = no_collusion_differences(c, x, prices)
        assert diffs.size == (1 << c.size) - 1
        scale = max(1.0, float(np.abs(separate_payoff(c, x, prices)).sum()))
        assert np.abs(diffs).max() <= 1e-9 * scale


def test_no_collusion_vectorized_agrees_with_merge_route():
    rng = np.random.default_rng(53)
    c, x, prices = rng.uniform(0, 50, 4), rng.uniform(0, 50, 4), PRICES
    diffs = no_collusion_differences(c, x, prices)
    for mask in (1, 5, 11, 15):
        members = [i for i in range(4) if mask >> i & 1]
        honest = audit_expost_no_collusion(c, x, prices, members)
        assert diffs[mask - 1] == pytest.approx(honest, abs=1e-9)


def test_optimal_redistribution_worked_example():
    z = optimal_redistribution([0, 1], C2, X_SHORT)
    np.testing.assert_allclose(z, [10.0, 9.0])
    value = separate_payoff(C2, z, PRICES).sum()
    assert value == pytest.approx(coalition_value([0, 1], C2, X_SHORT, PRICES))


def test_optimal_redistribution_attains_coalition_value():
    rng = np.random.default_rng(59)
    for _ in range(200):
        c, x, prices = random_instance(rng, n_max=6)
        n = c.size
        members = np.flatnonzero(rng.random(n) < 0.6)
        if members.size == 0:
            members = np.array([int(rng.integers(n))])
        z = optimal_redistribution(members, c, x)
        assert z.min() >= -1e-12
        assert z.sum() == pytest.approx(x[members].sum(), abs=1e-9)
        got = separate_payoff(c[members], z, prices).sum()
        want = coalition_value(members, c, x, prices)
        assert got == pytest.approx(want, abs=1e-9 * max(1.0, abs(want)))


def test_optimal_redistribution_all_on_one_side():
    # Nothing to net: everyone keeps what they delivered.
    z = optimal_redistribution([0, 1], C2, np.array([12.0, 11.0]))
    np.testing.assert_allclose(z, [12.0, 11.0])
    z = optimal_redistribution([0], C2, X_SHORT)
    np.testing.assert_allclose(z, [12.0])


def test_competitive_equilibrium_shortfall():
    ce = competitive_equilibrium(C2, X_SHORT, PRICES)
    assert ce.branch == "shortfall"
    assert ce.price == 60.0
    np.testing.assert_allclose(ce.redistribution, [10.0, 9.0])
    np.testing.assert_allclose(ce.payoffs, [520.0, 220.0])


def test_competitive_equilibrium_surplus():
    ce = competitive_equilibrium(C2, np.array([12.0, 9.0]), PRICES)
    assert ce.branch == "surplus"
    assert ce.price == 20.0
    np.testing.assert_allclose(ce.redistribution, [11.0, 10.0])
    np.testing.assert_allclose(ce.payoffs, [440.0, 380.0])


def test_competitive_equilibrium_tie():
    ce = competitive_equilibrium(C2, np.array([12.0, 8.0]), PRICES)
    assert ce.branch == "tie"
    assert ce.price == 40.0
    np.testing.assert_allclose(ce.redistribution, C2)
    np.testing.assert_allclose(ce.payoffs, [480.0, 320.0])


def test_competitive_equilibrium_clears_and_matches_pool_rule():
    rng = np.random.default_rng(61)
    for _ in range(200):
        c, x, prices = random_instance(rng, n_max=6)
        ce = competitive_equilibrium(c, x, prices)
        alloc = allocate_payoffs(c, x, prices)
        scale = max(1.0, float(np.abs(alloc.payoffs).max()))
        np.testing.assert_allclose(ce.payoffs, alloc.payoffs, atol=1e-9 * scale)
        if ce.branch == "tie":
            assert abs(ce.redistribution.sum() - c.sum()) <= 1e-9
        else:
            assert ce.redistribution.sum() == pytest.approx(x.sum(), abs=1e-9)
        if ce.branch == "shortfall":
            assert np.all(ce.redistribution <= c + 1e-9)
        elif ce.branch == "surplus":
            assert np.all(ce.redistribution >= c - 1e-9)


def test_competitive_equilibrium_negative_commitment():
    c = np.array([-5.0, 10.0])
    x = np.array([0.0, 3.0])
    ce = competitive_equilibrium(c, x, PRICES)
    alloc = allocate_payoffs(c, x, PRICES)
    np.testing.assert_allclose(ce.payoffs, alloc.payoffs, atol=1e-9)
    assert ce.redistribution.sum() == pytest.approx(x.sum(), abs=1e-9)


MODEL3 = GaussianJointModel([10.0, 20.0, 5.0], np.diag([4.0, 9.0, 1.0]))


def test_exante_stability_fixture():
    audit = audit_exante_stability(MODEL3, PRICES, n_samples=20_000, seed=0)
    assert audit.passed
    assert len(audit.reports) == 7
    assert all(r.stderr is not None for r in audit.reports)
    grand = next(r for r in audit.reports if r.mask == 7)
    # The pool at equilibrium commits exactly what the grand coalition
    # would commit alone, so its slack is identically zero.
    assert abs(grand.slack) <= 1e-6 * audit.scale
    for r in audit.reports:
        assert r.slack >= -3.0 * r.stderr - 1e-9 * audit.scale


def test_exante_stability_capacity():
    big = GaussianJointModel(np.full(13, 10.0), np.eye(13))
    with pytest.raises(CapacityError):
        audit_exante_stability(big, PRICES, n_samples=10)


def test_exante_no_collusion_fixture():
    report = audit_exante_no_collusion(MODEL3, PRICES, [0, 1], n_samples=20_000, seed=0)
    assert report.members == (0, 1)
    # Conditional expectation is additive, so the merged participant's
    # equilibrium commitment is exactly the sum of the members'.
    assert report.merged_commitment == report.commitment_sum
    assert report.merged_candidate_residual <= 1e-9
    assert report.others_unchanged
    assert abs(report.difference) <= max(3.0 * report.stderr, 1e-9)
    with pytest.raises(ValueError):
        audit_exante_no_collusion(MODEL3, PRICES, [], n_samples=10)
