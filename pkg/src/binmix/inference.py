"""Post-processing: convergence diagnostics, posterior model tables,
parameter summaries, and latent-abundance maps."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .families import AbundanceFamily, abundance_pmf_table
from .likelihood import LikelihoodEvaluator
from .model import ModelStructure, ModelVariant, ParameterState, parse_partition

__all__ = [
    "gelman_rubin",
    "batch_mc_se",
    "ModelTable",
    "SummaryTable",
    "model_probabilities",
    "summarize",
    "abundance_summary",
]


def gelman_rubin(chains, split=True) -> float:
    """Potential scale reduction factor, split-chain by default.

    With ``split`` each chain is halved and the between/within variance
    decomposition runs over the 2C half-chains, which also flags
    within-chain drift.  The pooled-variance convention V = W + B/n keeps
    R-hat >= 1 exactly, and makes duplicated chains give exactly 1 in the
    non-split variant.
    """
    chains = [np.asarray(c, dtype=float) for c in chains]
    if len(chains) < 2:
        raise ValueError("at least two chains are required")
    n = len(chains[0])
    if any(len(c) != n for c in chains):
        raise ValueError("chains must have equal lengths")
    if n < 10:
        raise ValueError("chains must have length >= 10")
    if split:
        half = n // 2
        seqs = []
        for c in chains:
            seqs.append(c[:half])
            seqs.append(c[half: 2 * half])
    else:
        seqs = chains
    mat = np.stack(seqs)
    length = mat.shape[1]
    within = mat.var(axis=1, ddof=1).mean()
    means = mat.mean(axis=1)
    between = length * means.var(ddof=1)
    if within == 0.0:
        return 1.0 if between == 0.0 else math.inf
    return math.sqrt((within + between / length) / within)


def batch_mc_se(indicator, n_batches=50) -> float:
    """Monte Carlo standard error of a chain mean by batch means."""
    x = np.asarray(indicator, dtype=float)
    if len(x) < 2 * n_batches:
        n_batches = max(2, len(x) // 2)
    usable = (len(x) // n_batches) * n_batches
    batches = x[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(batches.std(ddof=1) / math.sqrt(n_batches))


@dataclass(frozen=True)
class ModelTable:
    target: str                 # "beta" | "gamma" | "nu" | "joint"
    rows: tuple                 # ((fingerprint, frequency, probability), ...)

    @property
    def mode(self):
        return self.rows[0][0]

    @property
    def mode_probability(self):
        return self.rows[0][2]

    def probability_of(self, fingerprint):
        for fp, _, prob in self.rows:
            if fp == fingerprint:
                return prob
        return 0.0


@dataclass(frozen=True)
class SummaryTable:
    rows: tuple  # ((name, mean, sd, q025, q975, rhat), ...)

    def row(self, name):
        for r in self.rows:
            if r[0] == name:
                return r
        raise KeyError(name)


def _visit_lists(outputs, target):
    attr = {"beta": "beta_models", "gamma": "gamma_models", "nu": "nu_models"}
    if target == "joint":
        return [tuple(zip(o.beta_models, o.gamma_models, o.nu_models))
                for o in outputs]
    return [getattr(o, attr[target]) for o in outputs]


def model_probabilities(outputs, target="beta") -> ModelTable:
    """Visit frequencies of model structures across the retained draws of
    one or more chains."""
    outputs = outputs if isinstance(outputs, (list, tuple)) else [outputs]
    counts = Counter()
    for visits in _visit_lists(outputs, target):
        counts.update(visits)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("no retained draws")
    rows = tuple(
        (fp if target != "joint" else "|".join(fp), freq, freq / total)
        for fp, freq in counts.most_common()
    )
    return ModelTable(target=target, rows=rows)


def _mode_mask(output, mode_triple):
    fb, fg, fn = mode_triple
    return np.array([
        b == fb and g == fg and n == fn
        for b, g, n in zip(output.beta_models, output.gamma_models, output.nu_models)
    ])


def summarize(outputs, conditioning="all", min_mode_draws=100) -> SummaryTable:
    """Posterior mean/sd/quantiles per parameter, with split-chain R-hat when
    several chains are given.

    conditioning="mode" keeps only the draws visiting the joint posterior
    mode model; coefficient summaries then describe that model's parameters
    (inactive-coefficient draws are excluded by construction).
    """
    outputs = outputs if isinstance(outputs, (list, tuple)) else [outputs]
    names = outputs[0].param_names
    if conditioning == "mode":
        joint = model_probabilities(outputs, "joint")
        mode = tuple(joint.rows[0][0].split("|"))
        masks = [_mode_mask(o, mode) for o in outputs]
        total = int(sum(m.sum() for m in masks))
        if total < min_mode_draws:
            raise ValueError(
                f"posterior mode model has only {total} retained draws "
                f"(need {min_mode_draws})"
            )
        mats = [o.draws[m] for o, m in zip(outputs, masks)]
    elif conditioning == "all":
        mats = [o.draws for o in outputs]
    else:
        raise ValueError("conditioning must be 'all' or 'mode'")

    pooled = np.vstack(mats)
    rows = []
    for k, name in enumerate(names):
        col = pooled[:, k]
        mean = float(col.mean())
        sd = float(col.std(ddof=1)) if len(col) > 1 else 0.0
        q025, q975 = (float(q) for q in np.quantile(col, [0.025, 0.975]))
        rhat = math.nan
        per_chain = [m[:, k] for m in mats if m.shape[0] >= 10]
        if len(per_chain) >= 2:
            shortest = min(len(c) for c in per_chain)
            try:
                rhat = gelman_rubin([c[:shortest] for c in per_chain])
            except ValueError:
                rhat = math.nan
        rows.append((name, mean, sd, q025, q975, rhat))
    return SummaryTable(rows=tuple(rows))


def _state_from_draw(output, draw_index, data, variant, tau):
    """Rebuild (state, structure) from a retained draw."""
    variant = ModelVariant(variant)
    names = output.param_names
    row = output.draws[draw_index]
    vec = dict(zip(names, row))
    beta = np.array([vec[f"beta_{n}"] for n in data.detection_names])
    gamma = np.array([vec.get(f"gamma_{n}", 0.0) for n in data.site_cov_names])
    j_count = data.n_occasions
    gamma0 = np.array([vec[f"gamma0_{j+1}"] for j in range(j_count)])
    nu_by_occ = np.array([vec[f"nu_{j+1}"] for j in range(j_count)])
    partition = parse_partition(output.nu_models[draw_index])
    nu_values = np.array([nu_by_occ[b[0]] for b in partition])
    alpha = sigma2 = None
    if variant.has_spatial:
        alpha = np.array([
            [vec[f"alpha_{l+1}_{j+1}"] for j in range(j_count)]
            for l in range(tau)
        ])
        sigma2 = np.array([vec[f"sigma2_alpha_{j+1}"] for j in range(j_count)])
    active_beta = {m for m, n in enumerate(data.detection_names) if beta[m] != 0.0}
    active_gamma = {m for m, n in enumerate(data.site_cov_names) if gamma[m] != 0.0}
    structure = ModelStructure(
        active_beta=active_beta, active_gamma=active_gamma,
        forced_beta=frozenset(), forced_gamma=frozenset(),
        nu_partition=partition,
    )
    state = ParameterState(beta=beta, gamma=gamma, gamma0=gamma0,
                           nu_values=nu_values, alpha_star=alpha,
                           sigma2_alpha=sigma2)
    return state, structure


def abundance_summary(outputs, data, family=AbundanceFamily.CMP,
                      variant=ModelVariant.M2, basis=None, stride=1,
                      tail_mass=1e-10, zpolicy=None):
    """Rao-Blackwellized posterior mean and sd of the latent abundance.

    For each retained draw the exact conditional moments of N given the
    cell's counts are computed (prior moments for never-visited cells), then
    averaged over draws.  Returns a list of dict rows keyed by site/occasion.
    """
    from .cmp import SERIES_ONLY

    outputs = outputs if isinstance(outputs, (list, tuple)) else [outputs]
    variant = ModelVariant(variant)
    zpolicy = zpolicy if zpolicy is not None else SERIES_ONLY
    tau = basis.tau if basis is not None else 0
    ev = LikelihoodEvaluator(data, family, variant=variant, basis=basis,
                             tail_mass=tail_mass, zpolicy=zpolicy)
    g, j_count = data.n_sites, data.n_occasions
    sum_mean = np.zeros((g, j_count))
    sum_sq = np.zeros((g, j_count))
    sum_var = np.zeros((g, j_count))
    n_used = 0
    empty_cells = [
        (i, j) for i in range(g) for j in range(j_count)
        if data.cell_index_of(i, j) is None
    ]
    for output in outputs:
        for d in range(0, output.n_draws, stride):
            state, structure = _state_from_draw(output, d, data, variant, tau)
            _, m1, var = ev.cell_log_marginals(state, structure, want_moments=True)
            mean_mat = np.zeros((g, j_count))
            var_mat = np.zeros((g, j_count))
            mean_mat[data.cell_site, data.cell_occasion] = m1
            var_mat[data.cell_site, data.cell_occasion] = var
            if empty_cells:
                lam = ev.lambda_matrix(state, structure)
                nu_by_occ = state.nu_by_occasion(structure)
                for (i, j) in empty_cells:
                    probs = abundance_pmf_table(
                        family, float(lam[i, j]), float(nu_by_occ[j]),
                        tail_mass=tail_mass, zpolicy=zpolicy,
                    )
                    ns = np.arange(len(probs), dtype=float)
                    m = float(np.dot(ns, probs))
                    mean_mat[i, j] = m
                    var_mat[i, j] = float(np.dot(ns * ns, probs) - m * m)
            sum_mean += mean_mat
            sum_sq += mean_mat**2
            sum_var += var_mat
            n_used += 1
    post_mean = sum_mean / n_used
    # law of total variance across draws
    post_var = sum_var / n_used + sum_sq / n_used - post_mean**2
    post_sd = np.sqrt(np.maximum(post_var, 0.0))
    rows = []
    for i in range(g):
        for j in range(j_count):
            rows.append({
                "site_id": data.site_ids[i],
                "x": float(data.sites[i, 0]),
                "y": float(data.sites[i, 1]),
                "occasion": j + 1,
                "post_mean": float(post_mean[i, j]),
                "post_sd": float(post_sd[i, j]),
            })
    return rows
