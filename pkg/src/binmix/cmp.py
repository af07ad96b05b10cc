"""Conway-Maxwell Poisson distribution with certified series evaluation.

The pmf is lambda^x / (x!)^nu / Z(lambda, nu), with the normalizing constant
Z an infinite series.  Everything here runs in log space: the series is
summed with streaming log-sum-exp and truncated only once a geometric tail
bound certifies the requested relative error.  An asymptotic closed form is
available as an opt-in fast path for lambda > 10^nu.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = [
    "CmpParams",
    "ZPolicy",
    "ZEvaluation",
    "DivergentSeriesError",
    "SeriesTruncationError",
    "log_z",
    "log_z_values",
    "log_pmf",
    "pmf_table",
    "sample",
    "mean_var",
]

LOG10 = math.log(10.0)

#: terms beyond this raise rather than silently truncate
MAX_SERIES_TERMS = 1_000_000

#: omitted tail mass for sampling / moment truncation
SUPPORT_TAIL_MASS = 1e-12


class DivergentSeriesError(ValueError):
    """nu = 0 with lambda >= 1: the Z series does not converge."""


class SeriesTruncationError(RuntimeError):
    """The Z series needed more than MAX_SERIES_TERMS terms."""


@dataclass(frozen=True)
class CmpParams:
    """Intensity/dispersion pair (lambda, nu); nu<1 over-, nu>1 underdispersed."""

    lam: float
    nu: float

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam > 0.0):
            raise ValueError(f"lambda must be positive and finite, got {self.lam}")
        if not (math.isfinite(self.nu) and self.nu >= 0.0):
            raise ValueError(f"nu must be nonnegative and finite, got {self.nu}")
        if self.nu == 0.0 and self.lam >= 1.0:
            raise DivergentSeriesError(
                f"nu=0 requires lambda < 1 for convergence, got lambda={self.lam}"
            )


@dataclass(frozen=True)
class ZPolicy:
    """Controls when the asymptotic route may replace the truncated series.

    The asymptotic closed form is only ever considered where it is valid
    (lambda > 10^nu).  ``min_mode`` additionally requires the series mode
    (roughly the number of terms a series evaluation would need) to be large
    enough that the approximation pays off, and ``min_scale`` requires the
    expansion parameter nu * lambda^(1/nu) to be large enough for accuracy.
    """

    use_asymptotic: bool = False
    min_mode: float = 100.0
    min_scale: float = 5.0


SERIES_ONLY = ZPolicy(use_asymptotic=False)


@dataclass(frozen=True)
class ZEvaluation:
    log_z: float
    terms_used: int
    method: str  # "truncated-series" or "asymptotic"
    tail_bound: float


def _series_mode(lam, nu):
    """Index near which the series terms peak: lambda^(1/nu) for nu > 0.

    For nu = 0 (convergent only when lambda < 1) the terms decrease from j=0.
    """
    lam = np.asarray(lam, dtype=float)
    if nu == 0.0:
        return np.zeros_like(lam)
    with np.errstate(over="ignore"):
        return np.exp(np.log(lam) / nu)


def _log_z_asymptotic(lam, nu):
    """Closed-form approximation for lambda > 10^nu, with first-order correction."""
    lam = np.asarray(lam, dtype=float)
    root = np.exp(np.log(lam) / nu)
    base = (
        nu * root
        - (nu - 1.0) / (2.0 * nu) * np.log(lam)
        - (nu - 1.0) / 2.0 * math.log(2.0 * math.pi)
        - 0.5 * math.log(nu)
    )
    return base + np.log1p((nu * nu - 1.0) / 24.0 / (nu * root))


def _log_z_series_batch(log_lam, nu, rel_tol):
    """Sum the Z series for a vector of lambdas sharing one nu.

    Returns (log_z, terms_used, tail_bound) arrays.  Stops once every row's
    geometric tail bound certifies relative error below rel_tol.
    """
    log_lam = np.atleast_1d(np.asarray(log_lam, dtype=float))
    n = log_lam.shape[0]
    log_sum = np.full(n, -np.inf)
    tail = np.full(n, np.inf)
    done = np.zeros(n, dtype=bool)
    terms = np.zeros(n, dtype=np.int64)
    log_rel_tol = math.log(rel_tol)

    start = 0
    block = 64
    while True:
        stop = min(start + block, MAX_SERIES_TERMS + 1)
        js = np.arange(start, stop, dtype=float)
        # t[i, j] = j*log(lam_i) - nu*log(j!)
        t = np.outer(log_lam[~done], js) - nu * gammaln(js + 1.0)
        m = np.maximum(np.max(t, axis=1), log_sum[~done])
        with np.errstate(divide="ignore"):
            log_sum[~done] = m + np.log(
                np.exp(log_sum[~done] - m) + np.sum(np.exp(t - m[:, None]), axis=1)
            )
        # tail after the last included index J = stop-1:
        #   sum_{j>J} exp(t_j) <= exp(t_{J+1}) / (1 - r),  r = lam/(J+1+1)^nu
        jn = float(stop)
        log_r = log_lam[~done] - nu * math.log(jn + 1.0)
        t_next = jn * log_lam[~done] - nu * gammaln(jn + 1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            log_tail = np.where(
                log_r < 0.0, t_next - np.log1p(-np.exp(log_r)) - log_sum[~done], np.inf
            )
        newly = log_tail < log_rel_tol
        idx = np.flatnonzero(~done)
        tail[idx[newly]] = np.exp(log_tail[newly])
        terms[idx[newly]] = stop
        done[idx[newly]] = True
        if done.all():
            break
        if stop > MAX_SERIES_TERMS:
            raise SeriesTruncationError(
                f"Z series exceeded {MAX_SERIES_TERMS} terms (nu={nu}, "
                f"max log lambda={log_lam.max():.4g})"
            )
        start = stop
        block = min(block * 2, 65536)

    if not np.all(np.isfinite(log_sum)):
        raise FloatingPointError("non-finite intermediate in Z series")
    return log_sum, terms, tail


def log_z_values(lam, nu, rel_tol=1e-12, policy=SERIES_ONLY):
    """Vectorized log Z over an array of lambdas sharing a single nu.

    Hot path for likelihood evaluation; performs the same route selection as
    :func:`log_z` but returns a bare float array.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0.0):
        raise ValueError("lambda values must be positive and finite")
    if nu == 0.0 and np.any(lam >= 1.0):
        raise DivergentSeriesError("nu=0 requires lambda < 1")
    out = np.empty_like(lam)
    use_asym = np.zeros(lam.shape, dtype=bool)
    if policy.use_asymptotic and nu > 0.0:
        mode = _series_mode(lam, nu)
        use_asym = (lam > 10.0**nu) & (mode >= policy.min_mode) & (nu * mode >= policy.min_scale)
        if use_asym.any():
            out[use_asym] = _log_z_asymptotic(lam[use_asym], nu)
    if (~use_asym).any():
        mode = _series_mode(lam[~use_asym], nu)
        if np.any(mode > MAX_SERIES_TERMS):
            raise SeriesTruncationError(
                f"series mode {mode.max():.3g} exceeds the term cap "
                f"(nu={nu}); enable the asymptotic policy or move parameters"
            )
        out[~use_asym], _, _ = _log_z_series_batch(np.log(lam[~use_asym]), nu, rel_tol)
    return out


def log_z(params: CmpParams, rel_tol=1e-12, policy=SERIES_ONLY) -> ZEvaluation:
    """log of the normalizing constant, with the evaluation record."""
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must be in (0, 1), got {rel_tol}")
    lam, nu = params.lam, params.nu
    if policy.use_asymptotic and nu > 0.0 and lam > 10.0**nu:
        mode = float(_series_mode(lam, nu))
        if mode >= policy.min_mode and nu * mode >= policy.min_scale:
            value = float(_log_z_asymptotic(lam, nu))
            return ZEvaluation(value, 0, "asymptotic", math.nan)
    mode = float(_series_mode(lam, nu))
    if mode > MAX_SERIES_TERMS:
        raise SeriesTruncationError(
            f"series mode {mode:.3g} exceeds the term cap for "
            f"(lambda={lam}, nu={nu})"
        )
    vals, terms, tails = _log_z_series_batch(np.array([math.log(lam)]), nu, rel_tol)
    return ZEvaluation(float(vals[0]), int(terms[0]), "truncated-series", float(tails[0]))


def log_pmf(x, params: CmpParams, rel_tol=1e-12, policy=SERIES_ONLY):
    """log P(X = x); x may be a scalar or array of nonnegative integers."""
    x = np.asarray(x)
    if np.any(x < 0) or not np.issubdtype(x.dtype, np.integer):
        raise ValueError("x must be nonnegative integer(s)")
    lz = log_z(params, rel_tol=rel_tol, policy=policy).log_z
    out = x * math.log(params.lam) - params.nu * gammaln(x + 1.0) - lz
    return float(out) if np.isscalar(x) or x.ndim == 0 else out


def pmf_table(params: CmpParams, tail_mass=SUPPORT_TAIL_MASS, rel_tol=1e-12,
              policy=SERIES_ONLY):
    """Normalized pmf over 0..U where the omitted tail mass is < tail_mass.

    The cut point is certified by the geometric tail bound on the series
    terms, so arbitrarily small tail masses work without catastrophic
    cancellation in a 1 - cumsum comparison.
    """
    if not 0.0 < tail_mass < 1.0:
        raise ValueError("tail_mass must be in (0, 1)")
    lz = log_z(params, rel_tol=rel_tol, policy=policy).log_z
    lam, nu = params.lam, params.nu
    log_lam = math.log(lam)
    log_tm = math.log(tail_mass)
    upper = 64
    while True:
        x = np.arange(upper + 2, dtype=float)
        logp = x * log_lam - nu * gammaln(x + 1.0) - lz
        # tail after index U: sum_{j>U} p_j <= p_{U+1} / (1 - lam/(U+2)^nu)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_r = log_lam - nu * np.log(x[2:] )
            log_bound = np.where(
                log_r < 0.0, logp[1:-1] - np.log1p(-np.exp(log_r)), np.inf
            )
        ok = np.flatnonzero(log_bound < log_tm)
        if ok.size:
            cut = int(ok[0]) + 1
            return np.exp(logp[:cut])
        upper *= 2
        if upper > MAX_SERIES_TERMS:
            raise SeriesTruncationError("pmf support exceeds the term cap")


def sample(params: CmpParams, rng: np.random.Generator, size=None,
           rel_tol=1e-12, policy=SERIES_ONLY):
    """Exact draws by inverse CDF over the truncated support."""
    probs = pmf_table(params, rel_tol=rel_tol, policy=policy)
    cdf = np.cumsum(probs)
    u = rng.random(size)
    draws = np.searchsorted(cdf, u, side="right")
    draws = np.minimum(draws, len(probs) - 1)
    return int(draws) if size is None else draws


def mean_var(params: CmpParams, rel_tol=1e-12, policy=SERIES_ONLY):
    """Exact mean and variance by direct summation over the truncated support."""
    probs = pmf_table(params, rel_tol=rel_tol, policy=policy)
    probs = probs / probs.sum()
    x = np.arange(len(probs), dtype=float)
    mean = float(np.dot(x, probs))
    var = float(np.dot(x * x, probs) - mean * mean)
    return mean, var
