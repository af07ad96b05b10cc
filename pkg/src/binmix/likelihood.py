"""Exact marginal cell likelihoods by summation over the latent abundance.

The marginal of a cell's replicated counts integrates the abundance N out of
the binomial observation model against the abundance prior.  The infinite
sum is truncated with a certified geometric tail bound on the summand
itself: past its peak the summand ratio

    r(N) = lam * prod_k (1 - p_k) * prod_k N/(N - y_k) * N^(-nu_adj)

is strictly decreasing, so the remaining tail is bounded by a geometric
series.  All arithmetic is in log space, vectorized across the cells of an
occasion (which share nu), and reductions use a fixed-order pairwise tree so
results are bit-identical for any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

from . import cmp
from .cmp import SERIES_ONLY
from .families import AbundanceFamily
from .model import ModelVariant, detection_prob, intensity_matrix

__all__ = [
    "CellLikelihoodResult",
    "TruncationError",
    "LikelihoodEvaluator",
    "cell_log_marginal",
    "joint_log_posterior",
    "latent_abundance_posterior",
    "tree_sum",
]

DEFAULT_TAIL_MASS = 1e-10
INITIAL_MARGIN = 32
MAX_BLOCK = 8192
MAX_UPPER = 200_000

_FAMILY_CODES = {
    AbundanceFamily.CMP: 0,
    AbundanceFamily.POISSON: 1,
    AbundanceFamily.NEGATIVE_BINOMIAL: 2,
}


class TruncationError(RuntimeError):
    """The latent-abundance sum could not be certified within the cap."""


@dataclass(frozen=True)
class CellLikelihoodResult:
    log_marginal: float
    truncation_upper: int
    tail_bound: float


def tree_sum(values) -> float:
    """Pairwise tree reduction in a fixed order (worker-count independent)."""
    buf = np.asarray(values, dtype=float).ravel().copy()
    if buf.size == 0:
        return 0.0
    while buf.size > 1:
        half = buf.size // 2
        head = buf[: 2 * half].reshape(half, 2).sum(axis=1)
        buf = np.concatenate([head, buf[2 * half:]]) if buf.size % 2 else head
    return float(buf[0])


class _LogFactorialTable:
    """Growable table of log(n!) shared by all evaluations."""

    def __init__(self, size=4096):
        self.values = gammaln(np.arange(size + 1, dtype=float) + 1.0)

    def upto(self, n):
        if n >= len(self.values):
            size = len(self.values)
            while size <= n:
                size *= 2
            self.values = gammaln(np.arange(size + 1, dtype=float) + 1.0)
        return self.values


_LOG_FACT = _LogFactorialTable()


def _prior_log_weights(family, grid, log_lam, nu, lg):
    """Unnormalized log f over the grid, cells x grid; the per-cell constant
    (normalizer) is returned separately."""
    if family is AbundanceFamily.CMP:
        return grid * log_lam[:, None] - nu * lg[None, :]
    if family is AbundanceFamily.POISSON:
        return grid * log_lam[:, None] - lg[None, :]
    # negative binomial: gammaln(N + nu) varies over the grid only
    lam = np.exp(log_lam)
    return (
        gammaln(grid + nu)[None, :]
        - lg[None, :]
        + grid * (log_lam - np.log(nu + lam))[:, None]
    )


def _prior_log_const(family, lam, nu, zpolicy):
    """Per-cell additive constant completing the prior log pmf."""
    if family is AbundanceFamily.CMP:
        return -cmp.log_z_values(lam, nu, policy=zpolicy)
    if family is AbundanceFamily.POISSON:
        return -lam
    return -gammaln(nu) + nu * (math.log(nu) - np.log(nu + lam))


def _prior_log_ratio_bound(family, log_lam, nu, n_next):
    """Upper bound on the prior part of the summand ratio f(n)/f(n-1) for all
    n >= n_next.  CMP and Poisson ratios are decreasing in n; the negative
    binomial ratio approaches lam/(nu+lam) from below when nu < 1, so the
    bound takes the larger of the current ratio and that limit."""
    if family is AbundanceFamily.CMP:
        return log_lam - nu * math.log(n_next)
    if family is AbundanceFamily.POISSON:
        return log_lam - math.log(n_next)
    lam = np.exp(log_lam)
    return (
        max(0.0, math.log(n_next - 1.0 + nu) - math.log(n_next))
        + log_lam
        - np.log(nu + lam)
    )


def _group_marginals(y, log_p, log1mp, starts, log_lam, nu, y_max, family,
                     tail_mass, zpolicy, max_upper, want_moments=False):
    """Marginal log likelihoods for the cells of one occasion.

    y, log_p, log1mp: per-observation arrays for the group, cell-contiguous.
    starts: reduceat boundaries into those arrays (one per cell).
    Returns (log_marginal, upper, tail_bound[, log_m1, log_m2]) arrays.
    """
    if y.size == 0:
        raise ValueError("a likelihood group must contain observations")
    n_cells = len(starts)
    counts_ok = np.isfinite(log1mp)
    log_const = _prior_log_const(family, np.exp(log_lam), nu, zpolicy)
    # per-observation constant: y*log(p) - log(y!)
    lg_full = _LOG_FACT.upto(int(y.max()))
    with np.errstate(invalid="ignore"):
        obs_const = np.where(y > 0, y * log_p, 0.0) - lg_full[y]
    cell_obs_const = np.add.reduceat(obs_const, starts)
    cell_log1mp_sum = np.add.reduceat(np.where(counts_ok, log1mp, 0.0), starts)
    any_p_one = not counts_ok.all()

    log_tm = math.log(tail_mass)
    log_partial = np.full(n_cells, -np.inf)
    log_m1 = np.full(n_cells, -np.inf)
    log_m2 = np.full(n_cells, -np.inf)
    tail_at_stop = np.full(n_cells, np.inf)
    upper = np.zeros(n_cells, dtype=np.int64)

    lo = 0
    width = int(y_max.max()) + INITIAL_MARGIN if n_cells else INITIAL_MARGIN
    done = np.zeros(n_cells, dtype=bool)
    while True:
        hi = min(lo + width, max_upper)
        grid = np.arange(lo, hi, dtype=np.int64)
        lg = _LOG_FACT.upto(hi)
        gridf = grid.astype(float)

        # binomial log terms per (observation, N): log C(N, y) + (N-y) log(1-p)
        nm_y = grid[None, :] - y[:, None]
        valid = nm_y >= 0
        nm_y_cl = np.where(valid, nm_y, 0)
        binom = lg[grid][None, :] - lg[nm_y_cl]
        if any_p_one:
            with np.errstate(invalid="ignore"):
                tail_term = np.where(
                    np.isfinite(log1mp)[:, None], nm_y_cl * log1mp[:, None],
                    np.where(nm_y_cl > 0, -np.inf, 0.0),
                )
        else:
            tail_term = nm_y_cl * log1mp[:, None]
        binom = binom + tail_term
        cell_terms = np.add.reduceat(binom, starts, axis=0) if y.size else \
            np.zeros((n_cells, grid.size))

        s = cell_terms + cell_obs_const[:, None] + _prior_log_weights(
            family, gridf, log_lam, nu, lg[grid]
        )
        s[gridf[None, :] < y_max[:, None]] = -np.inf

        with np.errstate(invalid="ignore"):
            m = s.max(axis=1)
            safe_m = np.where(np.isfinite(m), m, 0.0)
            block = safe_m + np.log(np.sum(np.exp(s - safe_m[:, None]), axis=1))
            block = np.where(np.isfinite(m), block, -np.inf)
        # cells already certified keep their frozen value
        log_partial = np.where(done, log_partial, np.logaddexp(log_partial, block))
        if want_moments:
            with np.errstate(divide="ignore", invalid="ignore"):
                logn = np.where(grid > 0, np.log(np.maximum(gridf, 1.0)), -np.inf)
                b1 = _masked_lse(s + logn[None, :])
                b2 = _masked_lse(s + 2.0 * logn[None, :])
            log_m1 = np.where(done, log_m1, np.logaddexp(log_m1, b1))
            log_m2 = np.where(done, log_m2, np.logaddexp(log_m2, b2))

        # certified tail after N = hi-1: the summand ratio past its peak is
        # bounded by log_r, giving a geometric bound on the remaining mass
        n_next = float(hi)
        log_r = _prior_log_ratio_bound(family, log_lam, nu, n_next) + cell_log1mp_sum
        ratio_obs = math.log(n_next) - np.log(n_next - y)
        log_r = log_r + np.add.reduceat(ratio_obs, starts)
        s_last = s[:, -1]
        with np.errstate(invalid="ignore", divide="ignore"):
            log_tail = np.where(
                log_r < 0.0, s_last + log_r - np.log1p(-np.exp(log_r)), np.inf
            )
            rel = log_tail - log_partial
        impossible = np.isinf(log_partial) & (log_partial < 0) & (s_last == -np.inf)
        newly = ~done & ((rel < log_tm) | impossible)
        upper[newly] = hi - 1
        with np.errstate(invalid="ignore"):
            tail_at_stop[newly] = np.where(
                impossible[newly], 0.0, np.exp(np.minimum(rel[newly], 700.0))
            )
        done |= newly
        if done.all():
            break
        if hi >= max_upper:
            raise TruncationError(
                f"latent abundance sum not certified by N={max_upper} "
                f"(nu={nu:.4g}, max log lambda={log_lam.max():.4g})"
            )
        lo = hi
        width = min(width * 2, MAX_BLOCK)

    log_marg = log_partial + log_const
    if want_moments:
        return log_marg, upper, tail_at_stop, log_m1 + log_const, log_m2 + log_const
    return log_marg, upper, tail_at_stop


def _masked_lse(mat):
    m = mat.max(axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    out = safe + np.log(np.sum(np.exp(mat - safe[:, None]), axis=1))
    return np.where(np.isfinite(m), out, -np.inf)


class LikelihoodEvaluator:
    """Vectorized whole-dataset likelihood with per-occasion grouping.

    Cells sharing an occasion share nu and are evaluated together; the
    joint log likelihood reduces the per-cell values with a fixed-order
    pairwise tree, so the result is identical for any number of workers.
    """

    def __init__(self, dataset, family, variant=ModelVariant.M2, basis=None,
                 tail_mass=DEFAULT_TAIL_MASS, zpolicy=SERIES_ONLY, workers=1,
                 max_upper=MAX_UPPER, engine="numba"):
        self.dataset = dataset
        self.family = AbundanceFamily(family)
        self.variant = ModelVariant(variant)
        self.basis = basis
        self.tail_mass = float(tail_mass)
        self.zpolicy = zpolicy
        self.workers = int(workers)
        self.max_upper = int(max_upper)
        if engine not in ("numba", "numpy"):
            raise ValueError("engine must be 'numba' or 'numpy'")
        self.engine = engine
        if engine == "numba":
            self._lg = _LOG_FACT.upto(self.max_upper + 2)
        self._pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        self._groups = []
        d = dataset
        for j in range(d.n_occasions):
            c0, c1 = d.occasion_cell_slices[j]
            if c0 == c1:
                continue
            o0, o1 = int(d.cell_ptr[c0]), int(d.cell_ptr[c1])
            starts = (d.cell_ptr[c0:c1] - o0).astype(np.int64)
            ends = np.append(starts[1:], o1 - o0).astype(np.int64)
            self._groups.append({
                "occasion": j,
                "cells": slice(c0, c1),
                "obs": slice(o0, o1),
                "starts": starts,
                "ends": ends,
                "y": d.counts[o0:o1].astype(np.int64),
                "x": d.detection_covariates[o0:o1],
                "sites": d.cell_site[c0:c1],
                "y_max": d.cell_y_max[c0:c1].astype(float),
            })

    def lambda_matrix(self, state, structure):
        return intensity_matrix(state, structure, self.dataset.site_covariates,
                                self.variant, self.basis)

    def _eval_group(self, grp, state, nu_by_occ, lam, want_moments):
        j = grp["occasion"]
        p = detection_prob(state.beta, grp["x"])
        with np.errstate(divide="ignore"):
            log_p = np.log(p)
            log1mp = np.log1p(-p)
        log_lam = np.log(lam[grp["sites"], j])
        nu = float(nu_by_occ[j])
        if self.engine == "numpy":
            return _group_marginals(
                grp["y"], log_p, log1mp, grp["starts"], log_lam, nu,
                grp["y_max"], self.family, self.tail_mass, self.zpolicy,
                self.max_upper, want_moments,
            )
        return self._eval_group_numba(grp, log_p, log1mp, log_lam, nu,
                                      want_moments)

    def _eval_group_numba(self, grp, log_p, log1mp, log_lam, nu, want_moments):
        from . import _kernels

        y = grp["y"]
        starts, ends = grp["starts"], grp["ends"]
        fam = _FAMILY_CODES[self.family]
        finite = np.isfinite(log1mp)
        sum_log1mp = np.add.reduceat(np.where(finite, log1mp, 0.0), starts)
        # refuse proposals whose summand peak is clearly out of reach
        peaks = _kernels.summand_peak_estimate(log_lam, nu, sum_log1mp, fam)
        if np.any(peaks > 0.5 * self.max_upper):
            raise TruncationError(
                f"summand peak estimate {peaks.max():.3g} exceeds the "
                f"truncation cap (nu={nu:.4g})"
            )
        lg_y = _LOG_FACT.upto(int(y.max()) if y.size else 1)[y]
        with np.errstate(invalid="ignore"):
            ylogp = np.where(y > 0, y * log_p, 0.0)
        const_sat = np.add.reduceat(ylogp - lg_y, starts)
        y1mp = np.add.reduceat(np.where(finite, -y * log1mp, 0.0), starts)
        const_main = const_sat + y1mp
        # normalizing constant of the abundance prior, shared across N
        log_const = _prior_log_const(self.family, np.exp(log_lam), nu, self.zpolicy)
        logm, upper, tail, lm1, lm2, status = _kernels.cell_marginals(
            y, log1mp, const_main, const_sat, starts, ends,
            grp["y_max"].astype(np.int64), log_lam, nu, fam, self._lg,
            math.log(self.tail_mass), self.max_upper, want_moments,
        )
        if np.any(status != 0):
            raise TruncationError(
                f"latent abundance sum not certified by N={self.max_upper} "
                f"(nu={nu:.4g})"
            )
        logm = logm + log_const
        if want_moments:
            return logm, upper, tail, lm1 + log_const, lm2 + log_const
        return logm, upper, tail

    def cell_log_marginals(self, state, structure, occasions=None, base=None,
                           want_moments=False):
        """Per-cell marginal log likelihoods, optionally recomputing only the
        given occasions on top of a cached base array."""
        d = self.dataset
        out = np.empty(d.n_cells) if base is None else base.copy()
        moments = None
        if want_moments:
            moments = (np.empty(d.n_cells), np.empty(d.n_cells))
        nu_by_occ = state.nu_by_occasion(structure)
        lam = self.lambda_matrix(state, structure)
        if not np.all(np.isfinite(lam)):
            raise TruncationError("non-finite intensity (overflow in exp link)")
        groups = [g for g in self._groups
                  if occasions is None or g["occasion"] in occasions]

        def run(grp):
            return grp, self._eval_group(grp, state, nu_by_occ, lam, want_moments)

        if self._pool is not None and len(groups) > 1:
            results = list(self._pool.map(run, groups))
        else:
            results = [run(g) for g in groups]
        for grp, res in results:
            out[grp["cells"]] = res[0]
            if want_moments:
                with np.errstate(invalid="ignore"):
                    m1 = np.exp(res[3] - res[0])
                    m2 = np.exp(res[4] - res[0])
                moments[0][grp["cells"]] = m1
                moments[1][grp["cells"]] = np.maximum(m2 - m1 * m1, 0.0)
        if want_moments:
            return out, moments[0], moments[1]
        return out

    def log_likelihood(self, state, structure):
        return tree_sum(self.cell_log_marginals(state, structure))


def _single_cell_evaluator(data, family, variant, basis, tail_mass, zpolicy,
                           max_upper):
    return LikelihoodEvaluator(data, family, variant=variant, basis=basis,
                               tail_mass=tail_mass, zpolicy=zpolicy,
                               max_upper=max_upper)


def cell_log_marginal(data, state, structure, i, j, tail_mass=DEFAULT_TAIL_MASS,
                      family=AbundanceFamily.CMP, variant=ModelVariant.M2,
                      basis=None, zpolicy=SERIES_ONLY,
                      max_upper=MAX_UPPER) -> CellLikelihoodResult:
    """Marginal log likelihood of one (site, occasion) cell."""
    c = data.cell_index_of(i, j)
    if c is None:
        raise ValueError(f"cell (site={i}, occasion={j}) has no observed visits")
    ev = _single_cell_evaluator(data, family, variant, basis, tail_mass,
                                zpolicy, max_upper)
    nu_by_occ = state.nu_by_occasion(structure)
    lam = ev.lambda_matrix(state, structure)
    for grp in ev._groups:
        if grp["occasion"] != j:
            continue
        res = ev._eval_group(grp, state, nu_by_occ, lam, False)
        local = c - grp["cells"].start
        return CellLikelihoodResult(
            float(res[0][local]), int(res[1][local]), float(res[2][local])
        )
    raise ValueError(f"occasion {j} has no observed cells")


def latent_abundance_posterior(data, state, structure, i, j,
                               tail_mass=DEFAULT_TAIL_MASS,
                               family=AbundanceFamily.CMP,
                               variant=ModelVariant.M2, basis=None,
                               zpolicy=SERIES_ONLY):
    """Normalized posterior over the latent abundance of one cell.

    Returns (n0, probs): probabilities over N = n0, n0+1, ...  For a cell
    with no observed visits the posterior is the abundance prior.
    """
    from .families import abundance_pmf_table

    ev = _single_cell_evaluator(data, family, variant, basis, tail_mass, zpolicy,
                                MAX_UPPER)
    lam = ev.lambda_matrix(state, structure)
    nu_by_occ = state.nu_by_occasion(structure)
    c = data.cell_index_of(i, j)
    if c is None:
        probs = abundance_pmf_table(family, float(lam[i, j]), float(nu_by_occ[j]),
                                    tail_mass=tail_mass, zpolicy=zpolicy)
        return 0, probs

    y, x = data.visits_in_cell(i, j)
    p = detection_prob(state.beta, x)
    with np.errstate(divide="ignore"):
        log_p, log1mp = np.log(p), np.log1p(-p)
    y_max = int(y.max())
    res = _group_marginals(
        y, log_p, log1mp, np.array([0]), np.log(lam[[i], j]),
        float(nu_by_occ[j]), np.array([float(y_max)]), ev.family, tail_mass,
        zpolicy, MAX_UPPER,
    )
    upper = int(res[1][0])
    grid = np.arange(y_max, upper + 1)
    lg = _LOG_FACT.upto(upper + 1)
    binom = np.zeros(grid.size)
    for yk, lpk, l1k in zip(y, log_p, log1mp):
        binom += lg[grid] - lg[yk] - lg[grid - yk]
        binom += yk * lpk if yk else 0.0
        if np.isfinite(l1k):
            binom += (grid - yk) * l1k
        else:
            binom += np.where(grid - yk > 0, -np.inf, 0.0)
    prior = _prior_log_weights(ev.family, grid.astype(float),
                               np.log(lam[[i], j]), float(nu_by_occ[j]),
                               lg[grid])[0]
    logw = binom + prior
    logw -= logw.max()
    probs = np.exp(logw)
    probs /= probs.sum()
    return y_max, probs


def joint_log_posterior(data, state, structure, priors, basis=None,
                        family=AbundanceFamily.CMP, variant=ModelVariant.M2,
                        tail_mass=DEFAULT_TAIL_MASS, zpolicy=SERIES_ONLY,
                        workers=1) -> float:
    """Log posterior up to an additive constant: summed cell marginals plus
    the log prior of the active parameters."""
    lp = priors.log_density(state, structure)
    if not math.isfinite(lp):
        return -math.inf
    ev = LikelihoodEvaluator(data, family, variant=variant, basis=basis,
                             tail_mass=tail_mass, zpolicy=zpolicy, workers=workers)
    return ev.log_likelihood(state, structure) + lp
