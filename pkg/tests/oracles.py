"""Independent brute-force oracles used across the test suite.

Everything here deliberately avoids the production code paths: factorial
logs come from cumulative summation in extended (80-bit) precision, series
are summed directly over fixed large supports, and no certified-truncation
logic is shared with the package.
"""

from __future__ import annotations

import numpy as np

LD = np.longdouble


def log_factorials(n):
    """log(0!), ..., log(n!) by cumulative summation in extended precision."""
    out = np.zeros(n + 1, dtype=LD)
    if n >= 1:
        out[1:] = np.cumsum(np.log(np.arange(1, n + 1, dtype=LD)))
    return out


def cmp_log_weights(lam, nu, upper):
    """Unnormalized log series terms j*log(lam) - nu*log(j!) for j=0..upper."""
    j = np.arange(upper + 1, dtype=LD)
    return j * np.log(LD(lam)) - LD(nu) * log_factorials(upper)


def cmp_log_z(lam, nu, upper=10_000):
    """Brute-force log Z by direct summation of `upper`+1 terms."""
    t = cmp_log_weights(lam, nu, upper)
    m = t.max()
    return float(m + np.log(np.sum(np.exp(t - m))))


def cmp_log_pmf(x, lam, nu, upper=10_000):
    t = LD(x) * np.log(LD(lam)) - LD(nu) * log_factorials(x)[-1]
    return float(t) - cmp_log_z(lam, nu, upper)


def cmp_moments(lam, nu, upper=10_000):
    """Mean and variance by direct summation."""
    t = cmp_log_weights(lam, nu, upper)
    w = np.exp(t - t.max())
    w /= w.sum()
    x = np.arange(upper + 1, dtype=LD)
    mean = np.sum(x * w)
    var = np.sum(x * x * w) - mean * mean
    return float(mean), float(var)


def cmp_support_bound(lam, nu, tail_mass, upper=100_000):
    """Smallest U with the omitted tail mass below tail_mass, by full CDF scan."""
    t = cmp_log_weights(lam, nu, upper)
    w = np.exp(t - t.max())
    w /= w.sum()
    tail = 1.0 - np.cumsum(w)
    return int(np.argmax(tail < LD(tail_mass)))


def nb_log_pmf(n, lam, nu, lgamma_cache=None):
    """Negative binomial with mean lam and Var = lam + lam^2/nu (size nu)."""
    from scipy.special import gammaln

    return float(
        gammaln(n + nu)
        - gammaln(nu)
        - gammaln(n + 1)
        + nu * (np.log(nu) - np.log(nu + lam))
        + n * (np.log(lam) - np.log(nu + lam))
    )


def cell_log_marginal(y, p, lam, nu, upper=10_000):
    """Brute-force marginal of a replicated-count cell, in extended precision.

    Sums over the latent abundance N = max(y)..upper of
    prod_k Binomial(y_k; N, p_k) times CMP(N; lam, nu), all in log space with
    an independently built log-factorial table.
    """
    y = np.asarray(y, dtype=int)
    p = np.asarray(p, dtype=LD)
    lf = log_factorials(upper + 1)
    n_lo = int(y.max())
    ns = np.arange(n_lo, upper + 1)
    terms = ns * np.log(LD(lam)) - LD(nu) * lf[ns]
    for yk, pk in zip(y, p):
        terms = (
            terms
            + lf[ns]
            - lf[yk]
            - lf[ns - yk]
            + LD(yk) * np.log(pk)
            + (ns - yk) * np.log1p(-pk)
        )
    m = terms.max()
    log_num = float(m + np.log(np.sum(np.exp(terms - m))))
    return log_num - cmp_log_z(lam, nu, upper)


def cell_posterior_moments(y, p, lam, nu, upper=10_000):
    """Posterior mean/variance of the latent abundance for one cell."""
    y = np.asarray(y, dtype=int)
    p = np.asarray(p, dtype=LD)
    lf = log_factorials(upper + 1)
    n_lo = int(y.max())
    ns = np.arange(n_lo, upper + 1)
    terms = ns * np.log(LD(lam)) - LD(nu) * lf[ns]
    for yk, pk in zip(y, p):
        terms = (
            terms
            + lf[ns]
            - lf[yk]
            - lf[ns - yk]
            + LD(yk) * np.log(pk)
            + (ns - yk) * np.log1p(-pk)
        )
    w = np.exp(terms - terms.max())
    w /= w.sum()
    nsf = ns.astype(LD)
    mean = np.sum(nsf * w)
    var = np.sum(nsf * nsf * w) - mean * mean
    return float(mean), float(var)
