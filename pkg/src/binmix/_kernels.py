"""Numba kernel for the per-cell latent-abundance summation.

Each cell is summed independently from its y_max upward with a streaming
log-sum-exp; the loop stops as soon as the geometric tail bound certifies
the requested relative mass.  Terms are assembled from an integer
log-factorial table, so the inner loop is gather + fused arithmetic.

The summand for cell c at abundance N decomposes as

    t(N) = const_c + N * drift_c + cf * lg[N] - sum_k lg[N - y_k] + extra(N)

with drift the combined log intensity and thinning rate, cf = n_c - nu for
CMP (n_c - 1 for Poisson and negative binomial), and extra(N) the
gammaln(N + nu) term only the negative binomial needs.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

FAMILY_CMP = 0
FAMILY_POISSON = 1
FAMILY_NB = 2


@njit(cache=True, nogil=True)
def cell_marginals(y, log1mp, const_main, const_sat, starts, ends, y_max,
                   log_lam, nu, family, lg, log_tail_mass, max_upper,
                   want_moments):
    """Returns (log_marginal, upper, rel_tail, log_m1, log_m2, status) arrays.

    const_main folds the y*log(p), log(y!), and -y*log(1-p) observation
    constants; const_sat omits the log(1-p) pieces for the saturated-p
    branch.  The abundance prior's normalizer is added by the caller.
    status 0 = certified, 1 = hit max_upper (caller decides how to react).
    The log_m* outputs are only meaningful when want_moments is set.
    """
    n_cells = starts.shape[0]
    out = np.empty(n_cells)
    upper = np.zeros(n_cells, dtype=np.int64)
    tail = np.zeros(n_cells)
    lm1 = np.full(n_cells, -np.inf)
    lm2 = np.full(n_cells, -np.inf)
    status = np.zeros(n_cells, dtype=np.int64)

    for c in range(n_cells):
        o0, o1 = starts[c], ends[c]
        n_obs = o1 - o0
        ym = int(y_max[c])

        # detect saturated detection (p == 1): only N equal to that count
        # has positive probability
        saturated = False
        for o in range(o0, o1):
            if not np.isfinite(log1mp[o]):
                saturated = True
        if saturated:
            feasible = True
            for o in range(o0, o1):
                if not np.isfinite(log1mp[o]) and y[o] != ym:
                    feasible = False
            if not feasible:
                out[c] = -np.inf
                upper[c] = ym
                continue
            # single surviving term at N = ym
            t = const_sat[c]
            for o in range(o0, o1):
                if np.isfinite(log1mp[o]):
                    t += lg[ym] - lg[ym - y[o]] + (ym - y[o]) * log1mp[o]
                else:
                    t += lg[ym] - lg[ym - y[o]]  # (N - y) == 0 here
            if family == FAMILY_CMP:
                t += ym * log_lam[c] - nu * lg[ym]
            elif family == FAMILY_POISSON:
                t += ym * log_lam[c] - lg[ym]
            else:
                lam = math.exp(log_lam[c])
                t += (math.lgamma(ym + nu) - lg[ym]
                      + ym * (log_lam[c] - math.log(nu + lam)))
            out[c] = t
            upper[c] = ym
            if want_moments and ym > 0:
                lm1[c] = t + math.log(ym)
                lm2[c] = t + 2.0 * math.log(ym)
            elif want_moments:
                lm1[c] = -np.inf
                lm2[c] = -np.inf
            continue

        drift = log_lam[c]
        cf = n_obs - nu
        lam = math.exp(log_lam[c])
        if family == FAMILY_POISSON:
            cf = float(n_obs) - 1.0
        elif family == FAMILY_NB:
            drift = log_lam[c] - math.log(nu + lam)
            cf = float(n_obs) - 1.0
        for o in range(o0, o1):
            drift += log1mp[o]

        # streaming log-sum-exp state (value, N and N^2 moments)
        m = -np.inf
        s = 0.0
        s1 = 0.0
        s2 = 0.0
        prev_t = -np.inf
        n_val = ym
        cert_upper = -1
        rel_tail = 0.0
        while True:
            t = const_main[c] + n_val * drift + cf * lg[n_val]
            for o in range(o0, o1):
                t -= lg[n_val - y[o]]
            if family == FAMILY_NB:
                t += math.lgamma(n_val + nu)

            # certification check BEFORE adding the term: the tail from
            # n_val onward is bounded by t / (1 - r) with r an upper bound
            # on all later ratios
            if n_val > ym and s > 0.0:
                log_r_now = t - prev_t
                if log_r_now < 0.0:
                    nf = float(n_val + 1)
                    log_r_bound = drift + n_obs * (math.log(nf) - math.log(nf - ym))
                    if family == FAMILY_CMP:
                        log_r_bound += -nu * math.log(nf)
                    elif family == FAMILY_POISSON:
                        log_r_bound += -math.log(nf)
                    else:
                        extra = math.log(nf - 1.0 + nu) - math.log(nf)
                        log_r_bound += extra if extra > 0.0 else 0.0
                    if log_r_bound > log_r_now:
                        log_r = log_r_bound
                    else:
                        log_r = log_r_now
                    if log_r < 0.0:
                        log_tail = t - math.log1p(-math.exp(log_r))
                        log_partial = m + math.log(s)
                        if log_tail - log_partial < log_tail_mass:
                            cert_upper = n_val - 1
                            rel_tail = math.exp(
                                min(log_tail - log_partial, 700.0)
                            )
                            break

            # streaming LSE update
            if t > m:
                if m == -np.inf:
                    s = 1.0
                    s1 = float(n_val)
                    s2 = float(n_val) * float(n_val)
                else:
                    scale = math.exp(m - t)
                    s = s * scale + 1.0
                    s1 = s1 * scale + float(n_val)
                    s2 = s2 * scale + float(n_val) * float(n_val)
                m = t
            elif m > -np.inf:
                w = math.exp(t - m)
                s += w
                s1 += w * float(n_val)
                s2 += w * float(n_val) * float(n_val)
            prev_t = t
            n_val += 1
            if n_val > max_upper:
                status[c] = 1
                cert_upper = n_val - 1
                rel_tail = np.inf
                break

        if m == -np.inf:
            out[c] = -np.inf
        else:
            out[c] = m + math.log(s)
            if want_moments:
                lm1[c] = m + math.log(s1) if s1 > 0.0 else -np.inf
                lm2[c] = m + math.log(s2) if s2 > 0.0 else -np.inf
        upper[c] = cert_upper
        tail[c] = rel_tail
    return out, upper, tail, lm1, lm2, status


@njit(cache=True, nogil=True)
def summand_peak_estimate(log_lam, nu, sum_log1mp, family):
    """Asymptotic location of the cell summand peak, used to refuse clearly
    infeasible parameter proposals before any summation.

    For large N the binomial-coefficient growth cancels against the
    (N - y_k) factorials, so the peak sits near exp(drift/nu) for CMP and
    exp(drift) for Poisson, with drift the combined log intensity and
    thinning rate.  The negative binomial sum converges only for drift < 0.
    """
    n = log_lam.shape[0]
    out = np.empty(n)
    for c in range(n):
        drift = log_lam[c] + sum_log1mp[c]
        if family == FAMILY_NB:
            drift = log_lam[c] - math.log(nu + math.exp(log_lam[c])) + sum_log1mp[c]
            out[c] = np.inf if drift >= 0.0 else math.exp(log_lam[c])
        elif family == FAMILY_POISSON:
            out[c] = math.exp(min(drift, 700.0))
        elif nu <= 0.0:
            out[c] = np.inf if drift >= 0.0 else 0.0
        else:
            out[c] = math.exp(min(drift / nu, 700.0))
    return out
