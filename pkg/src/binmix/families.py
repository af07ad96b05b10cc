"""Pluggable abundance distributions: CMP, Poisson, and negative binomial.

Each family exposes the same (lambda, nu) surface: lambda is always the
intensity, nu the dispersion knob.  Poisson ignores nu; the negative
binomial uses nu as its size parameter so that Var = lambda + lambda^2/nu.
"""

from __future__ import annotations

import enum
import math

import numpy as np
from scipy.special import gammaln
from scipy.stats import nbinom, poisson

from . import cmp
from .cmp import SERIES_ONLY, CmpParams

__all__ = [
    "AbundanceFamily",
    "abundance_log_pmf",
    "abundance_log_weights",
    "abundance_support_bound",
    "abundance_pmf_table",
]


class AbundanceFamily(str, enum.Enum):
    CMP = "cmp"
    POISSON = "poisson"
    NEGATIVE_BINOMIAL = "negative-binomial"


def _validate(family, lam, nu):
    if not (np.all(np.isfinite(lam)) and np.all(np.asarray(lam) > 0.0)):
        raise ValueError("lambda must be positive and finite")
    if family is AbundanceFamily.CMP:
        if not (math.isfinite(nu) and nu >= 0.0):
            raise ValueError("CMP requires nu >= 0")
        if nu == 0.0 and np.any(np.asarray(lam) >= 1.0):
            raise cmp.DivergentSeriesError("nu=0 requires lambda < 1")
    elif family is AbundanceFamily.NEGATIVE_BINOMIAL:
        if not (math.isfinite(nu) and nu > 0.0):
            raise ValueError("negative binomial requires nu > 0")


def abundance_log_pmf(family, n, lam, nu=1.0, zpolicy=SERIES_ONLY):
    """log f(n | lambda, nu) for the selected family."""
    family = AbundanceFamily(family)
    _validate(family, lam, nu)
    n = np.asarray(n)
    if np.any(n < 0) or not np.issubdtype(n.dtype, np.integer):
        raise ValueError("n must be nonnegative integer(s)")
    if family is AbundanceFamily.POISSON:
        out = n * math.log(lam) - lam - gammaln(n + 1.0)
    elif family is AbundanceFamily.CMP:
        out = cmp.log_pmf(n, CmpParams(lam, nu), policy=zpolicy)
    else:
        out = (
            gammaln(n + nu)
            - gammaln(nu)
            - gammaln(n + 1.0)
            + nu * (math.log(nu) - math.log(nu + lam))
            + n * (math.log(lam) - math.log(nu + lam))
        )
    return float(out) if n.ndim == 0 else out


def abundance_log_weights(family, n_grid, lam_vec, nu, zpolicy=SERIES_ONLY):
    """Matrix of log f(n | lam_i, nu) over cells x grid, sharing one nu.

    The CMP normalizer is evaluated in batch; this is the likelihood hot path.
    """
    family = AbundanceFamily(family)
    _validate(family, lam_vec, nu)
    lam_vec = np.asarray(lam_vec, dtype=float)
    n = np.asarray(n_grid, dtype=float)
    log_lam = np.log(lam_vec)[:, None]
    if family is AbundanceFamily.POISSON:
        return n * log_lam - lam_vec[:, None] - gammaln(n + 1.0)
    if family is AbundanceFamily.CMP:
        log_zs = cmp.log_z_values(lam_vec, nu, policy=zpolicy)
        return n * log_lam - nu * gammaln(n + 1.0) - log_zs[:, None]
    return (
        gammaln(n + nu)
        - gammaln(nu)
        - gammaln(n + 1.0)
        + nu * np.log(nu / (nu + lam_vec))[:, None]
        + n * np.log(lam_vec / (nu + lam_vec))[:, None]
    )


def _cdf(family, n, lam, nu, zpolicy):
    """P(X <= n) for integer n; closed form where available."""
    if family is AbundanceFamily.POISSON:
        return float(poisson.cdf(n, lam))
    if family is AbundanceFamily.NEGATIVE_BINOMIAL:
        return float(nbinom.cdf(n, nu, nu / (nu + lam)))
    probs = cmp.pmf_table(CmpParams(lam, nu), tail_mass=1e-16, policy=zpolicy)
    if n >= len(probs) - 1:
        return 1.0
    return float(np.cumsum(probs)[int(n)])


def abundance_support_bound(family, lam, nu, tail_mass, zpolicy=SERIES_ONLY):
    """Smallest U with sum_{n > U} f(n) < tail_mass.

    Doubles an upper candidate until the tail condition holds, then binary
    searches; O(log U) CDF evaluations for the closed-form families.
    """
    family = AbundanceFamily(family)
    _validate(family, lam, nu)
    if not 0.0 < tail_mass < 1.0:
        raise ValueError("tail_mass must be in (0, 1)")
    target = 1.0 - tail_mass
    if _cdf(family, 0, lam, nu, zpolicy) > target:
        return 0
    hi = 1
    while _cdf(family, hi, lam, nu, zpolicy) <= target:
        hi *= 2
        if hi > cmp.MAX_SERIES_TERMS:
            raise cmp.SeriesTruncationError("support bound exceeds the term cap")
    lo = hi // 2
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if _cdf(family, mid, lam, nu, zpolicy) > target:
            hi = mid
        else:
            lo = mid
    return hi


def abundance_pmf_table(family, lam, nu, tail_mass=cmp.SUPPORT_TAIL_MASS,
                        zpolicy=SERIES_ONLY):
    """Normalized pmf over 0..U with omitted tail below tail_mass.

    All families share this inverse-CDF-ready representation so generated
    data coincide whenever two families describe the same distribution.
    """
    family = AbundanceFamily(family)
    upper = abundance_support_bound(family, lam, nu, tail_mass, zpolicy)
    logw = abundance_log_weights(
        family, np.arange(upper + 1), np.array([lam]), nu, zpolicy
    )[0]
    probs = np.exp(logw - logw.max())
    return probs / probs.sum()
