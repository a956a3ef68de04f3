"""Joint generation models: Gaussian with closed forms, empirical with kernels.

Both model classes expose the same query surface so downstream code can stay
model-agnostic: distribution of the pooled total (cdf, pdf, quantile),
conditional means of each member given the pooled total, slopes of those
conditional means, marginal sub-models, member merging, and sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "DegenerateModelError",
    "EstimationSupportError",
    "ConditionalMeanSlope",
    "GaussianJointModel",
    "EmpiricalJointModel",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)

# Relative symmetry tolerance for covariance input.
_SYM_RTOL = 1e-12

# Eigenvalues of the covariance may dip below zero by at most this fraction
# of the trace before the matrix is rejected; smaller dips are clipped away.
_PSD_RTOL = 1e-9

# Kernel evaluations further than this many bandwidths from every scenario
# carry no usable mass.
_SUPPORT_CUTOFF = 8.0


class DegenerateModelError(ValueError):
    """The pooled total has zero variance, so distributional queries fail."""


class EstimationSupportError(ValueError):
    """A kernel estimate was requested where the data carry no mass."""


@dataclass(frozen=True)
class ConditionalMeanSlope:
    """Per-member slopes of the conditional mean in the pooled total.

    For a Gaussian model the slopes are constants; for an empirical model
    they are the maxima of finite-difference slopes over an evaluation grid.
    At any fixed point the slopes sum to one, because the conditional means
    themselves sum to the conditioning value.
    """

    slopes: np.ndarray

    def __post_init__(self):
        arr = np.array(self.slopes, dtype=float)
        arr.flags.writeable = False
        object.__setattr__(self, "slopes", arr)

    @property
    def max_slope(self) -> float:
        return float(self.slopes.max())


def _norm_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z) / _SQRT2PI


class GaussianJointModel:
    """Jointly Gaussian member generation.

    The pooled total is Gaussian with mean ``sum(mean)`` and variance
    ``sum(covariance)``, and the conditional mean of member i given the total
    is affine with constant slope ``rowsum_i(covariance) / sum(covariance)``.

    The covariance must be symmetric; eigenvalues slightly below zero
    (within 1e-9 of the trace, as produced by sample covariances) are clipped
    to zero. A model whose pooled total has zero variance is constructible,
    flagged ``degenerate``, and rejects distributional queries.
    """

    def __init__(self, mean, covariance):
        mu = np.array(mean, dtype=float)
        if mu.ndim != 1 or mu.size == 0:
            raise ValueError("mean must be a nonempty vector")
        if not np.all(np.isfinite(mu)):
            raise ValueError("mean entries must be finite")
        cov = np.array(covariance, dtype=float)
        if cov.shape != (mu.size, mu.size):
            raise ValueError(f"covariance must be {mu.size}x{mu.size}, got {cov.shape}")
        if not np.all(np.isfinite(cov)):
            raise ValueError("covariance entries must be finite")
        scale = max(float(np.abs(cov).max()), 1e-300)
        if float(np.abs(cov - cov.T).max()) > _SYM_RTOL * scale:
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)

        eigval, eigvec = np.linalg.eigh(cov)
        trace = float(np.trace(cov))
        floor = -_PSD_RTOL * max(trace, 0.0)
        if eigval.min() < floor:
            raise ValueError(
                f"covariance is not positive semidefinite: min eigenvalue {eigval.min():g}"
            )
        if eigval.min() < 0.0:
            eigval = np.clip(eigval, 0.0, None)
            cov = eigvec @ np.diag(eigval) @ eigvec.T
            cov = 0.5 * (cov + cov.T)

        mu.flags.writeable = False
        cov.flags.writeable = False
        self._mean = mu
        self._cov = cov
        # Factor with factor @ factor.T == cov, for deterministic sampling.
        self._factor = eigvec * np.sqrt(np.clip(eigval, 0.0, None))
        self._total_mean = float(mu.sum())
        self._total_var = max(float(cov.sum()), 0.0)
        self._row_sums = cov.sum(axis=1)

    @property
    def n_units(self) -> int:
        return self._mean.size

    @property
    def mean(self) -> np.ndarray:
        return self._mean

    @property
    def covariance(self) -> np.ndarray:
        return self._cov

    @property
    def total_mean(self) -> float:
        return self._total_mean

    @property
    def total_var(self) -> float:
        return self._total_var

    @property
    def total_std(self) -> float:
        return math.sqrt(self._total_var)

    @property
    def component_stds(self) -> np.ndarray:
        return np.sqrt(np.diag(self._cov))

    @property
    def degenerate(self) -> bool:
        return self._total_var <= 0.0

    def _require_nondegenerate(self):
        if self.degenerate:
            raise DegenerateModelError("pooled total has zero variance")

    def sum_cdf(self, alpha: float) -> float:
        """P(pooled total <= alpha)."""
        self._require_nondegenerate()
        return float(ndtr((alpha - self._total_mean) / self.total_std))

    def sum_pdf(self, alpha: float) -> float:
        self._require_nondegenerate()
        sd = self.total_std
        return _norm_pdf((alpha - self._total_mean) / sd) / sd

    def sum_quantile(self, q: float) -> float:
        """Quantile of the pooled total; requires 0 < q < 1."""
        self._require_nondegenerate()
        if not 0.0 < q < 1.0:
            raise ValueError(f"quantile level must be in (0, 1), got {q}")
        return self._total_mean + float(ndtri(q)) * self.total_std

    def conditional_mean(self, unit: int, alpha):
        """E[member unit | pooled total = alpha]; alpha may be an array."""
        self._require_nondegenerate()
        beta = self._row_sums[unit] / self._total_var
        out = self._mean[unit] + beta * (np.asarray(alpha, dtype=float) - self._total_mean)
        if out.ndim == 0:
            return float(out)
        return out

    def conditional_means(self, alpha: float) -> np.ndarray:
        """Conditional means of all members given pooled total alpha."""
        self._require_nondegenerate()
        beta = self._row_sums / self._total_var
        return self._mean + beta * (float(alpha) - self._total_mean)

    def conditional_mean_slopes(self) -> ConditionalMeanSlope:
        self._require_nondegenerate()
        return ConditionalMeanSlope(self._row_sums / self._total_var)

    def marginal(self, members) -> "GaussianJointModel":
        """Sub-model of the selected members (order preserved)."""
        idx = _member_index(members, self.n_units)
        return GaussianJointModel(self._mean[idx], self._cov[np.ix_(idx, idx)])

    def merge(self, members) -> "GaussianJointModel":
        """Model with the selected members collapsed into one component.

        The merged component comes first, the remaining members follow in
        ascending index. The pooled total is unchanged.
        """
        idx = _member_index(members, self.n_units)
        rest = np.array([i for i in range(self.n_units) if i not in set(idx.tolist())], dtype=int)
        mean = np.concatenate([[self._mean[idx].sum()], self._mean[rest]])
        k = rest.size + 1
        cov = np.empty((k, k))
        cov[0, 0] = self._cov[np.ix_(idx, idx)].sum()
        cross = self._cov[np.ix_(idx, rest)].sum(axis=0)
        cov[0, 1:] = cross
        cov[1:, 0] = cross
        cov[1:, 1:] = self._cov[np.ix_(rest, rest)]
        return GaussianJointModel(mean, cov)

    def sample(self, n: int, seed, physical: bool = False) -> np.ndarray:
        """Draw n joint generation vectors, deterministically in the seed.

        In the default analysis mode draws may be negative; with
        ``physical=True`` they are clipped at zero (which biases the model
        the pool actually planned against).
        """
        if n < 1:
            raise ValueError("sample size must be positive")
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((int(n), self.n_units))
        draws = self._mean + z @ self._factor.T
        if physical:
            draws = np.maximum(draws, 0.0)
        return draws


class EmpiricalJointModel:
    """Scenario-based joint model with kernel-smoothed conditional means.

    Holds S weighted scenarios of the N-member generation vector. Total-sum
    queries use the weighted empirical distribution exactly; conditional
    means use a Nadaraya-Watson estimate with a Gaussian kernel on the
    scenario totals.
    """

    def __init__(self, scenarios, weights=None, bandwidth: float | None = None):
        scen = np.array(scenarios, dtype=float)
        if scen.ndim != 2 or scen.shape[0] == 0 or scen.shape[1] == 0:
            raise ValueError("scenarios must be a nonempty S x N matrix")
        if not np.all(np.isfinite(scen)):
            raise ValueError("scenario entries must be finite")
        s, n = scen.shape
        if weights is None:
            w = np.full(s, 1.0 / s)
        else:
            w = np.array(weights, dtype=float)
            if w.shape != (s,):
                raise ValueError(f"weights must have length {s}")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"weights must sum to 1, got {w.sum()}")
            w = w / w.sum()
        scen.flags.writeable = False
        w.flags.writeable = False
        self._scen = scen
        self._w = w
        self._sums = scen.sum(axis=1)
        order = np.argsort(self._sums, kind="stable")
        self._sorted_sums = self._sums[order]
        self._cum_w = np.cumsum(w[order])
        self._total_mean = float(w @ self._sums)
        self._total_var = max(float(w @ (self._sums - self._total_mean) ** 2), 0.0)
        if bandwidth is None:
            # Silverman's rule on the scenario totals.
            bandwidth = 1.06 * math.sqrt(self._total_var) * s ** (-0.2)
        if bandwidth < 0:
            raise ValueError("bandwidth must be nonnegative")
        self._bandwidth = float(bandwidth)

    @property
    def n_units(self) -> int:
        return self._scen.shape[1]

    @property
    def n_scenarios(self) -> int:
        return self._scen.shape[0]

    @property
    def scenarios(self) -> np.ndarray:
        return self._scen

    @property
    def weights(self) -> np.ndarray:
        return self._w

    @property
    def bandwidth(self) -> float:
        return self._bandwidth

    @property
    def mean(self) -> np.ndarray:
        return self._w @ self._scen

    @property
    def total_mean(self) -> float:
        return self._total_mean

    @property
    def total_var(self) -> float:
        return self._total_var

    @property
    def total_std(self) -> float:
        return math.sqrt(self._total_var)

    @property
    def component_stds(self) -> np.ndarray:
        mu = self.mean
        return np.sqrt(self._w @ (self._scen - mu) ** 2)

    @property
    def degenerate(self) -> bool:
        return self._total_var <= 0.0

    def _require_nondegenerate(self):
        if self.degenerate:
            raise DegenerateModelError("pooled total has zero variance")

    def sum_cdf(self, alpha: float) -> float:
        """Weighted fraction of scenarios whose total is <= alpha."""
        self._require_nondegenerate()
        k = int(np.searchsorted(self._sorted_sums, alpha, side="right"))
        if k == 0:
            return 0.0
        return float(self._cum_w[k - 1])

    def sum_pdf(self, alpha: float) -> float:
        """Kernel density of the pooled total at alpha."""
        self._require_nondegenerate()
        h = self._bandwidth
        if h <= 0:
            raise EstimationSupportError("kernel density needs a positive bandwidth")
        z = (alpha - self._sums) / h
        return float(self._w @ (np.exp(-0.5 * z * z) / _SQRT2PI)) / h

    def sum_quantile(self, q: float) -> float:
        """Smallest realized total whose cdf reaches q; requires 0 < q <= 1."""
        self._require_nondegenerate()
        if not 0.0 < q <= 1.0:
            raise ValueError(f"quantile level must be in (0, 1], got {q}")
        idx = int(np.searchsorted(self._cum_w, q - 1e-12, side="left"))
        idx = min(idx, self._sorted_sums.size - 1)
        return float(self._sorted_sums[idx])

    def _kernel_weights(self, alpha: float) -> np.ndarray:
        h = self._bandwidth
        if h <= 0:
            raise EstimationSupportError("conditional mean needs a positive bandwidth")
        z = (alpha - self._sums) / h
        if float(np.abs(z[self._w > 0]).min()) > _SUPPORT_CUTOFF:
            raise EstimationSupportError(
                f"no scenario mass within {_SUPPORT_CUTOFF} bandwidths of {alpha}"
            )
        k = self._w * np.exp(-0.5 * z * z)
        total = k.sum()
        if total <= 0.0:
            raise EstimationSupportError(f"kernel weights vanish at {alpha}")
        return k / total

    def conditional_mean(self, unit: int, alpha) -> float:
        """Nadaraya-Watson estimate of E[member unit | pooled total = alpha]."""
        self._require_nondegenerate()
        alpha_arr = np.asarray(alpha, dtype=float)
        if alpha_arr.ndim == 0:
            return float(self._kernel_weights(float(alpha_arr)) @ self._scen[:, unit])
        return np.array([self._kernel_weights(float(a)) @ self._scen[:, unit] for a in alpha_arr])

    def conditional_means(self, alpha: float) -> np.ndarray:
        self._require_nondegenerate()
        return self._kernel_weights(float(alpha)) @ self._scen

    def slope_grid(self, points: int = 101) -> np.ndarray:
        """Default evaluation grid for conditional-mean slopes.

        Spans the 1st to 99th weighted percentile of the pooled totals.
        Kernel estimates at the extreme order statistics are dominated by a
        handful of scenarios and their finite-difference slopes are noise,
        so the default grid stays where the data carry mass; pass an
        explicit grid to look at the tails anyway.
        """
        self._require_nondegenerate()
        lo = self.sum_quantile(0.01)
        hi = self.sum_quantile(0.99)
        if hi <= lo:
            lo = float(self._sorted_sums[0])
            hi = float(self._sorted_sums[-1])
        if hi <= lo:
            raise DegenerateModelError("scenario totals are all equal")
        return np.linspace(lo, hi, points)

    def conditional_mean_slopes(self, grid=None) -> ConditionalMeanSlope:
        """Max finite-difference slope of each member's conditional mean.

        Central differences on ``grid`` (default: 101 points over the
        realized range of totals). The maximum over the grid is what matters
        for equilibrium existence, so that is what is reported per member.
        """
        self._require_nondegenerate()
        grid = self.slope_grid() if grid is None else np.asarray(grid, dtype=float)
        if grid.size < 3:
            raise ValueError("slope grid needs at least 3 points")
        curves = np.array([self.conditional_means(a) for a in grid])
        slopes = np.gradient(curves, grid, axis=0)
        return ConditionalMeanSlope(slopes.max(axis=0))

    def marginal(self, members) -> "EmpiricalJointModel":
        idx = _member_index(members, self.n_units)
        return EmpiricalJointModel(self._scen[:, idx], self._w, bandwidth=None)

    def merge(self, members) -> "EmpiricalJointModel":
        """Collapse the selected members into one column (placed first)."""
        idx = _member_index(members, self.n_units)
        rest = [i for i in range(self.n_units) if i not in set(idx.tolist())]
        merged = self._scen[:, idx].sum(axis=1, keepdims=True)
        cols = np.hstack([merged, self._scen[:, rest]]) if rest else merged
        return EmpiricalJointModel(cols, self._w, bandwidth=self._bandwidth)

    def sample(self, n: int, seed, physical: bool = False) -> np.ndarray:
        """Resample n scenarios by weight, deterministically in the seed."""
        if n < 1:
            raise ValueError("sample size must be positive")
        rng = np.random.default_rng(seed)
        idx = rng.choice(self.n_scenarios, size=int(n), p=self._w)
        draws = self._scen[idx]
        if physical:
            draws = np.maximum(draws, 0.0)
        return draws


def _member_index(members, n_units: int) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(members, dtype=int))
    if idx.size == 0:
        raise ValueError("member subset must be nonempty")
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("member subset has duplicates")
    if idx.min() < 0 or idx.max() >= n_units:
        raise ValueError(f"member indices must be in [0, {n_units})")
    return idx
