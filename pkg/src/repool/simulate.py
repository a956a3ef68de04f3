"""Hourly market simulation: fit an error model, commit, settle, compare.

The harness replays a historical (or synthetic) sequence of hours. Each hour
has per-member forecasts and actuals and a day-ahead / real-time price pair;
real-time buy and sell prices are constructed from those with a fixed
penalty rule. Three participation cases are compared:

  case2  pool commits the equilibrium profile and settles through the pool
  case3  members commit their individually optimal amounts, settle through
         the pool
  case4  members commit their individually optimal amounts, settle alone
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from datetime import datetime

import numpy as np
from scipy.special import ndtri

from .market import PriceSystem
from .models import GaussianJointModel
from .equilibrium import check_ne_condition

__all__ = [
    "CASE_IDS",
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

CASE_IDS = ("case2", "case3", "case4")

# Real-time penalty factors: shortfalls buy back at the worse of 1.2x the
# day-ahead price and 2x the real-time price; surpluses sell at the better
# of day-ahead/1.2 and real-time/2.
_BUY_FACTOR = 1.2
_RT_BUY_MULT = 2.0


class HistoryFormatError(ValueError):
    """Malformed market history input."""


@dataclass(frozen=True)
class MarketHistory:
    """Aligned hourly series of forecasts, actuals, and prices.

    ``forecasts`` and ``actuals`` are (hours x members) arrays in MWh,
    nonnegative. Timestamps must be strictly increasing. ``p_day_ahead``
    must be strictly positive so the real-time price construction stays
    arbitrage-free.
    """

    timestamps: tuple[datetime, ...]
    forecasts: np.ndarray
    actuals: np.ndarray
    p_day_ahead: np.ndarray
    p_real_time: np.ndarray

    def __post_init__(self):
        fc = np.array(self.forecasts, dtype=float)
        ac = np.array(self.actuals, dtype=float)
        da = np.array(self.p_day_ahead, dtype=float)
        rt = np.array(self.p_real_time, dtype=float)
        ts = tuple(self.timestamps)
        t = len(ts)
        if fc.ndim != 2 or fc.shape[0] != t:
            raise HistoryFormatError(f"forecasts must be ({t} x members), got {fc.shape}")
        if ac.shape != fc.shape:
            raise HistoryFormatError("actuals shape must match forecasts")
        if da.shape != (t,) or rt.shape != (t,):
            raise HistoryFormatError("price series must have one entry per hour")
        if t == 0 or fc.shape[1] == 0:
            raise HistoryFormatError("history must contain at least one hour and one member")
        for arr, name in ((fc, "forecasts"), (ac, "actuals"), (da, "p_day_ahead"), (rt, "p_real_time")):
            if not np.all(np.isfinite(arr)):
                raise HistoryFormatError(f"{name} must be finite")
        if np.any(fc < 0) or np.any(ac < 0):
            raise HistoryFormatError("forecasts and actuals must be nonnegative")
        if np.any(da <= 0):
            raise HistoryFormatError("day-ahead prices must be positive")
        if np.any(rt < 0):
            raise HistoryFormatError("real-time prices must be nonnegative")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise HistoryFormatError("timestamps must be strictly increasing")
        for name, arr in (("forecasts", fc), ("actuals", ac),
                          ("p_day_ahead", da), ("p_real_time", rt)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "timestamps", ts)

    @property
    def n_hours(self) -> int:
        return self.forecasts.shape[0]

    @property
    def n_units(self) -> int:
        return self.forecasts.shape[1]

    def with_actuals(self, actuals) -> "MarketHistory":
        """Same hours and prices with a replacement actuals matrix."""
        return replace(self, actuals=np.asarray(actuals, dtype=float))

    @classmethod
    def from_csv(cls, path) -> "MarketHistory":
        """Load ``timestamp,forecast_1..N,actual_1..N,p_da,p_rt`` rows."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise HistoryFormatError(f"{path}: empty file") from None
            header = [h.strip() for h in header]
            n_fc = sum(1 for h in header if h.startswith("forecast_"))
            n_ac = sum(1 for h in header if h.startswith("actual_"))
            if n_fc == 0 or n_fc != n_ac:
                raise HistoryFormatError(
                    f"{path}: header must carry matching forecast_i and actual_i columns"
                )
            expected = (["timestamp"]
                        + [f"forecast_{i}" for i in range(1, n_fc + 1)]
                        + [f"actual_{i}" for i in range(1, n_fc + 1)]
                        + ["p_da", "p_rt"])
            if header != expected:
                raise HistoryFormatError(f"{path}: unexpected header {header}")
            ts, rows = [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(expected):
                    raise HistoryFormatError(
                        f"{path}, row {lineno}: expected {len(expected)} fields, got {len(row)}"
                    )
                try:
                    ts.append(datetime.fromisoformat(row[0].strip()))
                    rows.append([float(v) for v in row[1:]])
                except ValueError as exc:
                    raise HistoryFormatError(f"{path}, row {lineno}: {exc}") from None
        if not rows:
            raise HistoryFormatError(f"{path}: no data rows")
        data = np.array(rows)
        try:
            return cls(
                timestamps=tuple(ts),
                forecasts=data[:, :n_fc],
                actuals=data[:, n_fc:2 * n_fc],
                p_day_ahead=data[:, 2 * n_fc],
                p_real_time=data[:, 2 * n_fc + 1],
            )
        except HistoryFormatError as exc:
            raise HistoryFormatError(f"{path}: {exc}") from None

    def to_csv(self, path) -> None:
        n = self.n_units
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp"]
                            + [f"forecast_{i}" for i in range(1, n + 1)]
                            + [f"actual_{i}" for i in range(1, n + 1)]
                            + ["p_da", "p_rt"])
            for t in range(self.n_hours):
                writer.writerow(
                    [self.timestamps[t].isoformat()]
                    + [repr(float(v)) for v in self.forecasts[t]]
                    + [repr(float(v)) for v in self.actuals[t]]
                    + [repr(float(self.p_day_ahead[t])), repr(float(self.p_real_time[t]))]
                )


@dataclass(frozen=True)
class CaseResult:
    """Settled payoffs of one participation case over a history."""

    case_id: str
    payoffs: np.ndarray
    commitments: np.ndarray
    ne_condition_ok: bool | None = None
    clipped_hours: int = 0

    def __post_init__(self):
        for name in ("payoffs", "commitments"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def per_rpp_totals(self) -> np.ndarray:
        return self.payoffs.sum(axis=0)

    @property
    def per_hour_totals(self) -> np.ndarray:
        return self.payoffs.sum(axis=1)

    @property
    def grand_total(self) -> float:
        return float(self.per_hour_totals.sum())


@dataclass(frozen=True)
class SimOptions:
    """Run options; ``physical`` clips negative commitments at zero."""

    physical: bool = False
    tie_tol: float = 1e-9


def construct_rt_prices(p_da, p_rt):
    """Penalty-rule real-time prices (buy, sell) from day-ahead and spot.

    Guarantees rt_sell < p_da < rt_buy whenever p_da > 0, so the hourly
    price system is always valid. Accepts scalars or arrays.
    """
    da = np.asarray(p_da, dtype=float)
    rt = np.asarray(p_rt, dtype=float)
    if np.any(da <= 0):
        raise ValueError("day-ahead price must be positive")
    if np.any(rt < 0):
        raise ValueError("real-time price must be nonnegative")
    buy = np.maximum(_BUY_FACTOR * da, _RT_BUY_MULT * rt)
    sell = np.minimum(da / _BUY_FACTOR, rt / _RT_BUY_MULT)
    if buy.ndim == 0:
        return float(buy), float(sell)
    return buy, sell


def fit_error_model(history: MarketHistory) -> GaussianJointModel:
    """Zero-mean Gaussian model of forecast errors (actual minus forecast).

    Uses the unbiased sample covariance of the error rows; needs at least
    members + 1 hours. Identically zero errors produce a model flagged
    degenerate.
    """
    n = history.n_units
    if history.n_hours < n + 1:
        raise ValueError(
            f"need at least {n + 1} hours to fit {n} members, got {history.n_hours}"
        )
    errors = history.actuals - history.forecasts
    cov = np.atleast_2d(np.cov(errors, rowvar=False, ddof=1))
    return GaussianJointModel(np.zeros(n), cov)


def _hourly_price_arrays(history: MarketHistory):
    da = history.p_day_ahead
    buy, sell = construct_rt_prices(da, history.p_real_time)
    fractile = (da - sell) / (buy - sell)
    return da, buy, sell, fractile


def _commitment_matrix(case_id: str, history: MarketHistory,
                       error_model: GaussianJointModel,
                       fractile: np.ndarray) -> np.ndarray:
    """Per-hour commitments: fitted errors shifted by each hour's forecast."""
    z = ndtri(fractile)
    if case_id == "case2":
        slopes = error_model.conditional_mean_slopes().slopes
        return history.forecasts + np.outer(z * error_model.total_std, slopes)
    # Individually optimal: each member's own newsvendor quantile.
    sds = error_model.component_stds
    return history.forecasts + np.outer(z, sds)


def run_case(case_id: str, history: MarketHistory, error_model: GaussianJointModel,
             options: SimOptions | None = None) -> CaseResult:
    """Settle one participation case across the whole history.

    The error model must be zero-mean; each hour's generation model is the
    fitted error distribution shifted by that hour's forecasts. For the
    equilibrium case the existence condition is checked once (it depends
    only on the error covariance, not the forecasts); failure is recorded
    on the result, not raised.
    """
    if case_id not in CASE_IDS:
        raise ValueError(f"unknown case {case_id!r}, expected one of {CASE_IDS}")
    options = options or SimOptions()
    if error_model.degenerate:
        raise ValueError("error model is degenerate (zero total variance)")
    da, buy, sell, fractile = _hourly_price_arrays(history)
    commitments = _commitment_matrix(case_id, history, error_model, fractile)
    clipped = 0
    if options.physical:
        below = commitments < 0.0
        clipped = int(np.any(below, axis=1).sum())
        commitments = np.maximum(commitments, 0.0)
    x = history.actuals
    dev = x - commitments
    if case_id == "case4":
        payoffs = (da[:, None] * commitments
                   - buy[:, None] * np.maximum(-dev, 0.0)
                   + sell[:, None] * np.maximum(dev, 0.0))
    else:
        pool_dev = dev.sum(axis=1)
        tie = 0.5 * (buy + sell)
        rate = np.where(pool_dev < -options.tie_tol, buy,
                        np.where(pool_dev > options.tie_tol, sell, tie))
        payoffs = da[:, None] * commitments + rate[:, None] * dev
    condition_ok = None
    if case_id == "case2":
        condition_ok = check_ne_condition(error_model).satisfied
    return CaseResult(case_id=case_id, payoffs=payoffs, commitments=commitments,
                      ne_condition_ok=condition_ok, clipped_hours=clipped)


def run_all_cases(history: MarketHistory, error_model: GaussianJointModel,
                  options: SimOptions | None = None) -> dict[str, CaseResult]:
    return {cid: run_case(cid, history, error_model, options) for cid in CASE_IDS}


def run_custom_case(case_id: str, history: MarketHistory,
                    commit_fn, settle_fn, options: SimOptions | None = None) -> CaseResult:
    """Hour-by-hour run with caller-supplied commitment and settlement rules.

    ``commit_fn(hour_index, prices)`` returns the members' commitments for
    the hour; ``settle_fn(commitments, actuals, prices)`` returns their
    payoffs. Escape hatch for allocation rules the harness does not build
    in; the stock cases use the vectorized path in ``run_case``.
    """
    options = options or SimOptions()
    da, buy, sell, _ = _hourly_price_arrays(history)
    rows = []
    commits = []
    for t in range(history.n_hours):
        prices = PriceSystem(day_ahead=float(da[t]), rt_buy=float(buy[t]), rt_sell=float(sell[t]))
        c = np.asarray(commit_fn(t, prices), dtype=float)
        if options.physical:
            c = np.maximum(c, 0.0)
        commits.append(c)
        rows.append(np.asarray(settle_fn(c, history.actuals[t], prices), dtype=float))
    return CaseResult(case_id=case_id, payoffs=np.array(rows), commitments=np.array(commits))


def synthetic_error_model(n_units: int = 10, seed=0) -> GaussianJointModel:
    """Random correlated zero-mean error model satisfying the existence condition.

    Mixes positive and negative correlations, then rescales off-diagonals
    until no conditional-mean slope exceeds one.
    """
    rng = np.random.default_rng(seed)
    sds = rng.uniform(2.0, 6.0, n_units)
    a = rng.standard_normal((n_units, 2 * n_units)) / np.sqrt(2 * n_units)
    corr = a @ a.T
    d = np.sqrt(np.diag(corr))
    corr = corr / np.outer(d, d)
    for shrink in np.linspace(1.0, 0.0, 21):
        mixed = shrink * corr + (1 - shrink) * np.eye(n_units)
        cov = np.outer(sds, sds) * mixed
        model = GaussianJointModel(np.zeros(n_units), cov)
        if check_ne_condition(model).satisfied:
            return model
    return GaussianJointModel(np.zeros(n_units), np.diag(sds ** 2))


def synthetic_history(n_hours: int = 720, n_units: int = 10, seed=0,
                      error_model: GaussianJointModel | None = None) -> tuple[MarketHistory, GaussianJointModel]:
    """Generate a synthetic history consistent with a known error model.

    Forecasts follow per-member diurnal profiles, actuals are forecasts plus
    a draw from the error model (clipped at zero, which at these forecast
    levels essentially never binds), and prices mix a diurnal day-ahead
    shape with a noisy real-time multiplier so the hourly critical fractile
    sweeps a wide range.
    """
    rng = np.random.default_rng(seed)
    model = error_model or synthetic_error_model(n_units, seed=rng.integers(2 ** 31))
    if model.n_units != n_units:
        raise ValueError("error model size must match n_units")
    hours = np.arange(n_hours)
    base = rng.uniform(30.0, 70.0, n_units)
    amp = rng.uniform(5.0, 12.0, n_units)
    phase = rng.uniform(0.0, 2 * np.pi, n_units)
    forecasts = base + amp * np.sin(2 * np.pi * hours[:, None] / 24.0 + phase)
    forecasts = np.maximum(forecasts, 5.0)
    errors = model.sample(n_hours, seed=rng.integers(2 ** 31))
    actuals = np.maximum(forecasts + errors, 0.0)
    p_da = 30.0 + 8.0 * np.sin(2 * np.pi * (hours % 24 - 9) / 24.0) + rng.normal(0.0, 2.0, n_hours)
    p_da = np.maximum(p_da, 5.0)
    p_rt = p_da * np.exp(rng.normal(0.0, 0.45, n_hours))
    start = datetime(2024, 1, 1)
    from datetime import timedelta
    ts = tuple(start + timedelta(hours=int(h)) for h in hours)
    history = MarketHistory(timestamps=ts, forecasts=forecasts, actuals=actuals,
                            p_day_ahead=p_da, p_real_time=p_rt)
    return history, model
