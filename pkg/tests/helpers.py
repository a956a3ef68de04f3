"""Shared random-instance generators for the test suite."""

import numpy as np

from repool import GaussianJointModel, PriceSystem, check_ne_condition


def random_prices(rng, lo=-10.0, hi=30.0, spread_lo=5.0, spread_hi=60.0):
    """Valid price system with the day-ahead price strictly between the
    real-time prices (fractile in roughly (0.02, 0.98))."""
    rt_sell = rng.uniform(lo, hi)
    spread = rng.uniform(spread_lo, spread_hi)
    rt_buy = rt_sell + spread
    day_ahead = rt_sell + rng.uniform(0.02, 0.98) * spread
    return PriceSystem(day_ahead=day_ahead, rt_buy=rt_buy, rt_sell=rt_sell)


def random_instance(rng, n_max=8):
    """Random ex-post settlement instance (commitments, realizations, prices)."""
    n = int(rng.integers(1, n_max + 1))
    c = rng.uniform(0.0, 50.0, n)
    x = rng.uniform(0.0, 50.0, n)
    return c, x, random_prices(rng)


def random_gaussian_model(rng, n_min=2, n_max=5, require_condition=True):
    """Random correlated Gaussian model, optionally resampled until the
    equilibrium existence condition holds."""
    while True:
        n = int(rng.integers(n_min, n_max + 1))
        a = rng.standard_normal((n, n + 2))
        corr = a @ a.T
        d = np.sqrt(np.diag(corr))
        corr = corr / np.outer(d, d)
        sds = rng.uniform(1.0, 6.0, n)
        cov = np.outer(sds, sds) * corr
        mu = rng.uniform(5.0, 60.0, n)
        model = GaussianJointModel(mu, cov)
        if not require_condition or check_ne_condition(model).satisfied:
            return model
