"""Metropolis-Hastings-within-Gibbs sampler with reversible-jump moves.

Each sweep updates the continuous blocks (beta, gamma, gamma0, nu, alpha)
by symmetric Gaussian random walks, draws the spatial scales from their
conjugate full conditionals, then attempts one birth/death move per
covariate target and one split/combine move on the dispersion grouping.

Proposals whose likelihood cannot be evaluated within the truncation caps
are rejected outright: this restricts the support to the numerically
feasible region, which is a valid Metropolis-Hastings scheme on the
restricted posterior and keeps wandering proposals from aborting a chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import cmp
from .cmp import SERIES_ONLY, ZPolicy
from .families import AbundanceFamily
from .likelihood import DEFAULT_TAIL_MASS, MAX_UPPER, LikelihoodEvaluator, TruncationError, tree_sum
from .model import ModelStructure, ModelVariant, ParameterState, structure_fingerprints

__all__ = ["SamplerConfig", "MoveStats", "ChainOutput", "run_chain", "run_chains"]

RW_MOVES = ("rw-beta", "rw-gamma", "rw-gamma0", "rw-nu", "rw-alpha")
RJ_MOVES = ("beta-birth", "beta-death", "gamma-birth", "gamma-death",
            "nu-split", "nu-combine")
ALL_MOVES = RW_MOVES + ("gibbs-sigma-alpha",) + RJ_MOVES

#: infeasible-likelihood proposals are rejected; evaluation errors they raise
_REJECTABLE = (TruncationError, cmp.SeriesTruncationError, FloatingPointError)


@dataclass
class SamplerConfig:
    iterations: int
    burn_in: int
    thin: int = 1
    zeta: float = 2.0        # sd of the Gaussian birth proposal for coefficients
    eta: float = 0.1         # half-width of the uniform split perturbation
    rw_scales: dict = field(default_factory=lambda: {
        "rw-beta": 0.05, "rw-gamma": 0.02, "rw-gamma0": 0.05,
        "rw-nu": 0.02, "rw-alpha": 0.1,
    })
    seed: int = 0
    workers: int = 1
    chains: int = 1
    tail_mass: float = DEFAULT_TAIL_MASS
    max_upper: int = MAX_UPPER
    use_asymptotic_z: bool = True
    adapt: bool = True
    adapt_window: int = 50
    target_acceptance: float = 0.3
    full_initial_model: bool = True
    progress_every: int = 0
    progress_hook: object = None
    debug_checks: bool = False

    def __post_init__(self):
        if self.iterations < 0 or self.burn_in < 0:
            raise ValueError("iterations and burn_in must be nonnegative")
        if self.burn_in > self.iterations:
            raise ValueError("burn_in must not exceed iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.zeta <= 0 or self.eta <= 0:
            raise ValueError("zeta and eta must be positive")

    def zpolicy(self) -> ZPolicy:
        return ZPolicy(use_asymptotic=True) if self.use_asymptotic_z else SERIES_ONLY


@dataclass
class MoveStats:
    proposals: dict = field(default_factory=lambda: {m: 0 for m in ALL_MOVES})
    accepts: dict = field(default_factory=lambda: {m: 0 for m in ALL_MOVES})
    infeasible: int = 0

    def record(self, move, accepted):
        self.proposals[move] += 1
        if accepted:
            self.accepts[move] += 1

    def acceptance_rate(self, move):
        n = self.proposals[move]
        return self.accepts[move] / n if n else math.nan


@dataclass
class ChainOutput:
    param_names: tuple
    draws: np.ndarray               # (n_draws, n_params)
    log_posterior: np.ndarray       # (n_draws,)
    iterations: np.ndarray          # sweep index of each retained draw
    beta_models: tuple              # fingerprints per retained draw
    gamma_models: tuple
    nu_models: tuple
    move_stats: MoveStats
    seed: int
    chain_index: int = 0

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def column(self, name) -> np.ndarray:
        return self.draws[:, self.param_names.index(name)]


def _param_layout(data, variant, tau):
    names = [f"beta_{n}" for n in data.detection_names]
    if variant.has_covariates:
        names += [f"gamma_{n}" for n in data.site_cov_names]
    names += [f"gamma0_{j+1}" for j in range(data.n_occasions)]
    names += [f"nu_{j+1}" for j in range(data.n_occasions)]
    if variant.has_spatial:
        names += [f"alpha_{l+1}_{j+1}" for j in range(data.n_occasions)
                  for l in range(tau)]
        names += [f"sigma2_alpha_{j+1}" for j in range(data.n_occasions)]
    return tuple(names)


def _flatten_state(state, structure, variant):
    parts = [state.beta]
    if variant.has_covariates:
        parts.append(state.gamma)
    parts.append(state.gamma0)
    parts.append(state.nu_by_occasion(structure))
    if state.alpha_star is not None:
        parts.append(state.alpha_star.T.ravel())
        parts.append(state.sigma2_alpha)
    return np.concatenate(parts)


def _canonical_blocks_values(pairs):
    """Sort (block, value) pairs into the canonical partition order."""
    pairs = sorted(((tuple(sorted(b)), v) for b, v in pairs), key=lambda t: t[0][0])
    blocks = tuple(b for b, _ in pairs)
    values = np.array([v for _, v in pairs])
    return blocks, values


def _log_normal_pdf(x, sd):
    return -0.5 * (x / sd) ** 2 - math.log(sd) - 0.5 * math.log(2.0 * math.pi)


def draw_sigma2_alpha(rng, shape0, scale0, alpha_col):
    """Conjugate inverse-gamma full-conditional draw for one occasion's
    spatial-coefficient variance."""
    shape = shape0 + 0.5 * len(alpha_col)
    scale = scale0 + 0.5 * float(np.dot(alpha_col, alpha_col))
    return scale / rng.gamma(shape)


class _Chain:
    def __init__(self, data, priors, config, variant, family, basis,
                 forced_beta, forced_gamma, rng, chain_index=0):
        self.data = data
        self.priors = priors
        self.config = config
        self.variant = ModelVariant(variant)
        self.family = AbundanceFamily(family)
        self.basis = basis
        self.rng = rng
        self.chain_index = chain_index
        if self.variant.has_spatial and basis is None:
            raise ValueError(f"variant {self.variant.value} requires a spatial basis")
        if self.variant is ModelVariant.M3 and data.n_site_covariates:
            # M3 has no covariate term; covariates may exist in the data but
            # the gamma block is absent from the model
            pass
        self.evaluator = LikelihoodEvaluator(
            data, self.family, variant=self.variant, basis=basis,
            tail_mass=config.tail_mass, zpolicy=config.zpolicy(),
            workers=config.workers, max_upper=config.max_upper,
        )
        self.scales = dict(config.rw_scales)
        self._adapt_counts = {m: [0, 0] for m in RW_MOVES}
        self._adapt_batches = {m: 0 for m in RW_MOVES}
        self.stats = MoveStats()
        self.n_beta = data.n_detection_covariates
        self.n_gamma = data.n_site_covariates if self.variant.has_covariates else 0
        self.forced_beta = frozenset(forced_beta)
        self.forced_gamma = frozenset(forced_gamma) if self.n_gamma else frozenset()
        self._in_burn_in = True
        self._init_state(config.full_initial_model)

    # ---- initialization ------------------------------------------------

    def _init_state(self, full_model):
        data, J = self.data, self.data.n_occasions
        tau = self.basis.tau if self.variant.has_spatial else 0
        self.structure = ModelStructure.initial(
            self.n_beta, self.n_gamma, self.forced_beta, self.forced_gamma,
            n_occasions=J, full=full_model,
        )
        # data-informed occasion intercepts: with beta=0 (p=1/2) and nu=1,
        # lambda ~= 2 * mean count keeps the first sweeps in a sane region
        gamma0 = np.zeros(J)
        for j in range(J):
            mask = data.obs_occasion == j
            mean_y = data.counts[mask].mean() if mask.any() else 0.0
            gamma0[j] = math.log(max(2.0 * mean_y, 0.5))
        lo, hi = self.priors.nu_lower, self.priors.nu_upper
        nu0 = float(np.clip(1.0, lo.max(), hi.min()))
        self.state = ParameterState(
            beta=np.zeros(self.n_beta),
            gamma=np.zeros(data.n_site_covariates),
            gamma0=gamma0,
            nu_values=np.array([nu0]),
            alpha_star=np.zeros((tau, J)) if self.variant.has_spatial else None,
            sigma2_alpha=np.ones(J) if self.variant.has_spatial else None,
        )
        try:
            self.cell_logm = self.evaluator.cell_log_marginals(self.state, self.structure)
        except _REJECTABLE as exc:
            raise RuntimeError(f"initial state is numerically infeasible: {exc}") from exc
        self.log_lik = tree_sum(self.cell_logm)
        self.log_prior = self.priors.log_density(self.state, self.structure)
        if not math.isfinite(self.log_prior):
            raise RuntimeError("initial state has zero prior density")

    @property
    def log_post(self):
        return self.log_lik + self.log_prior

    # ---- generic MH step -------------------------------------------------

    def _attempt(self, move, new_state, new_structure, occasions=None,
                 log_hastings=0.0):
        new_prior = self.priors.log_density(new_state, new_structure)
        if not math.isfinite(new_prior):
            self.stats.record(move, False)
            return False
        try:
            new_logm = self.evaluator.cell_log_marginals(
                new_state, new_structure, occasions=occasions, base=self.cell_logm
            )
        except _REJECTABLE:
            self.stats.infeasible += 1
            self.stats.record(move, False)
            return False
        new_lik = tree_sum(new_logm)
        log_alpha = (new_lik + new_prior) - (self.log_lik + self.log_prior) + log_hastings
        if math.isnan(log_alpha):
            accept = False
        elif log_alpha >= 0.0:
            accept = True
        else:
            accept = math.log(self.rng.random()) < log_alpha
        if accept:
            self.state = new_state
            self.structure = new_structure
            self.cell_logm = new_logm
            self.log_lik = new_lik
            self.log_prior = new_prior
        self.stats.record(move, accept)
        return accept

    # ---- random-walk blocks ---------------------------------------------

    def _rw_vector(self, move, values, indices):
        step = self.scales[move] * self.rng.standard_normal(len(indices))
        out = values.copy()
        out[indices] += step
        return out

    def _adapt_record(self, move, accepted):
        if not (self.config.adapt and self._in_burn_in):
            return
        c = self._adapt_counts[move]
        c[0] += 1
        c[1] += int(accepted)
        if c[0] >= self.config.adapt_window:
            self._adapt_batches[move] += 1
            rate = c[1] / c[0]
            step = 1.0 / self._adapt_batches[move] ** 0.6
            self.scales[move] *= math.exp(step * (rate - self.config.target_acceptance))
            c[0] = c[1] = 0

    def _move_rw_beta(self):
        idx = sorted(self.structure.active_beta)
        if not idx:
            return
        new_state = self.state.copy()
        new_state.beta = self._rw_vector("rw-beta", self.state.beta, idx)
        acc = self._attempt("rw-beta", new_state, self.structure)
        self._adapt_record("rw-beta", acc)

    def _move_rw_gamma(self):
        if not self.variant.has_covariates:
            return
        idx = sorted(self.structure.active_gamma)
        if not idx:
            return
        new_state = self.state.copy()
        new_state.gamma = self._rw_vector("rw-gamma", self.state.gamma, idx)
        acc = self._attempt("rw-gamma", new_state, self.structure)
        self._adapt_record("rw-gamma", acc)

    def _move_rw_gamma0(self):
        new_state = self.state.copy()
        new_state.gamma0 = self._rw_vector(
            "rw-gamma0", self.state.gamma0, list(range(len(self.state.gamma0)))
        )
        acc = self._attempt("rw-gamma0", new_state, self.structure)
        self._adapt_record("rw-gamma0", acc)

    def _move_rw_nu(self):
        new_state = self.state.copy()
        new_state.nu_values = self._rw_vector(
            "rw-nu", self.state.nu_values, list(range(len(self.state.nu_values)))
        )
        lo, hi = self.priors.nu_block_bounds(self.structure)
        if np.any(new_state.nu_values < lo) or np.any(new_state.nu_values > hi):
            self.stats.record("rw-nu", False)     # outside the prior support
            self._adapt_record("rw-nu", False)
            return
        acc = self._attempt("rw-nu", new_state, self.structure)
        self._adapt_record("rw-nu", acc)

    def _move_rw_alpha(self):
        if not self.variant.has_spatial:
            return
        tau = self.basis.tau
        for j in range(self.data.n_occasions):
            new_state = self.state.copy()
            new_state.alpha_star = self.state.alpha_star.copy()
            new_state.alpha_star[:, j] += self.scales["rw-alpha"] * \
                self.rng.standard_normal(tau)
            acc = self._attempt("rw-alpha", new_state, self.structure, occasions={j})
            self._adapt_record("rw-alpha", acc)

    def _move_gibbs_sigma_alpha(self):
        if not self.variant.has_spatial:
            return
        new_state = self.state.copy()
        for j in range(self.data.n_occasions):
            new_state.sigma2_alpha[j] = draw_sigma2_alpha(
                self.rng, self.priors.sigma_alpha_shape,
                self.priors.sigma_alpha_scale, self.state.alpha_star[:, j],
            )
        self.state = new_state
        self.log_prior = self.priors.log_density(self.state, self.structure)
        self.stats.record("gibbs-sigma-alpha", True)

    # ---- reversible jump: covariate birth/death --------------------------

    def _move_rj_variable(self, target):
        if target == "beta":
            selectable = sorted(set(range(self.n_beta)) - self.forced_beta)
            active = self.structure.active_beta
        else:
            if not self.variant.has_covariates:
                return
            selectable = sorted(set(range(self.n_gamma)) - self.forced_gamma)
            active = self.structure.active_gamma
        if not selectable:
            return
        m = selectable[self.rng.integers(len(selectable))]
        zeta = self.config.zeta
        new_state = self.state.copy()
        if m in active:
            move = f"{target}-death"
            old = self.state.beta[m] if target == "beta" else self.state.gamma[m]
            if target == "beta":
                new_state.beta[m] = 0.0
                new_structure = replace(self.structure,
                                        active_beta=active - {m})
            else:
                new_state.gamma[m] = 0.0
                new_structure = replace(self.structure,
                                        active_gamma=active - {m})
            log_hastings = _log_normal_pdf(old, zeta)
        else:
            move = f"{target}-birth"
            draw = zeta * self.rng.standard_normal()
            if target == "beta":
                new_state.beta[m] = draw
                new_structure = replace(self.structure,
                                        active_beta=active | {m})
            else:
                new_state.gamma[m] = draw
                new_structure = replace(self.structure,
                                        active_gamma=active | {m})
            log_hastings = -_log_normal_pdf(draw, zeta)
        self._attempt(move, new_state, new_structure, log_hastings=log_hastings)

    # ---- reversible jump: dispersion grouping ----------------------------

    def _move_rj_dispersion(self):
        if self.data.n_occasions < 2:
            return
        if self.rng.random() < 0.5:
            self._dispersion_split()
        else:
            self._dispersion_combine()

    def _dispersion_split(self):
        blocks = self.structure.nu_partition
        splittable = [b for b, members in enumerate(blocks) if len(members) > 1]
        if not splittable:
            return
        n_s = len(splittable)
        b = splittable[self.rng.integers(n_s)]
        members = blocks[b]
        size = len(members)
        # uniform unordered nonempty bipartition: bits over members[1:]
        u = int(self.rng.integers(1, 2 ** (size - 1)))
        part2 = tuple(members[i + 1] for i in range(size - 1) if (u >> i) & 1)
        part1 = tuple(sorted(set(members) - set(part2)))
        eps = self.rng.uniform(-self.config.eta, self.config.eta)
        old_value = self.state.nu_values[b]
        pairs = [(blk, val) for i, (blk, val) in
                 enumerate(zip(blocks, self.state.nu_values)) if i != b]
        pairs.append((part1, old_value + eps))   # part1 holds the block minimum
        pairs.append((part2, old_value - eps))
        new_blocks, new_values = _canonical_blocks_values(pairs)
        new_structure = self.structure.with_partition(new_blocks)
        new_state = self.state.copy()
        new_state.nu_values = new_values

        n_new = len(new_blocks)
        log_hastings = (
            -math.log(math.comb(n_new, 2))          # reverse combine picks this pair
            + math.log(n_s)
            + math.log(2 ** (size - 1) - 1)
            + math.log(2.0 * self.config.eta)       # 1 / h(eps)
            + math.log(2.0)                         # Jacobian of (nu, eps) -> (nu1, nu2)
        )
        self._attempt("nu-split", new_state, new_structure,
                      occasions=set(members), log_hastings=log_hastings)

    def _dispersion_combine(self):
        blocks = self.structure.nu_partition
        n_t = len(blocks)
        if n_t < 2:
            return
        i = int(self.rng.integers(n_t))
        j = int(self.rng.integers(n_t - 1))
        if j >= i:
            j += 1
        merged = tuple(sorted(blocks[i] + blocks[j]))
        v_i, v_j = self.state.nu_values[i], self.state.nu_values[j]
        merged_value = 0.5 * (v_i + v_j)
        # epsilon of the reverse split: the part holding the block minimum
        # received nu + eps
        first = i if min(blocks[i]) < min(blocks[j]) else j
        eps = self.state.nu_values[first] - merged_value
        if abs(eps) >= self.config.eta:
            self.stats.record("nu-combine", False)  # reverse density is zero
            return
        pairs = [(blk, val) for k, (blk, val) in
                 enumerate(zip(blocks, self.state.nu_values)) if k not in (i, j)]
        pairs.append((merged, merged_value))
        new_blocks, new_values = _canonical_blocks_values(pairs)
        new_structure = self.structure.with_partition(new_blocks)
        new_state = self.state.copy()
        new_state.nu_values = new_values

        n_s_rev = sum(1 for b in new_blocks if len(b) > 1)
        log_hastings = (
            -math.log(n_s_rev)
            - math.log(2 ** (len(merged) - 1) - 1)
            + math.log(math.comb(n_t, 2))
            - math.log(2.0 * self.config.eta)       # h(eps)
            - math.log(2.0)                          # inverse-map Jacobian
        )
        self._attempt("nu-combine", new_state, new_structure,
                      occasions=set(merged), log_hastings=log_hastings)

    # ---- the sweep --------------------------------------------------------

    def sweep(self):
        self._move_rw_beta()
        self._move_rw_gamma()
        self._move_rw_gamma0()
        self._move_rw_nu()
        self._move_rw_alpha()
        self._move_gibbs_sigma_alpha()
        self._move_rj_variable("beta")
        self._move_rj_variable("gamma")
        self._move_rj_dispersion()

    def run(self):
        cfg = self.config
        tau = self.basis.tau if self.variant.has_spatial else 0
        names = _param_layout(self.data, self.variant, tau)
        draws, logps, iters = [], [], []
        fps_beta, fps_gamma, fps_nu = [], [], []
        for it in range(cfg.iterations):
            self._in_burn_in = it < cfg.burn_in
            try:
                self.sweep()
            except Exception as exc:
                fps = structure_fingerprints(
                    self.structure, self.data.detection_names,
                    self.data.site_cov_names,
                )
                raise RuntimeError(
                    f"numerical failure at iteration {it} "
                    f"(structure={fps}, log_post={self.log_post:.6g})"
                ) from exc
            if cfg.debug_checks:
                self.state.check_consistent(self.structure)
            if cfg.progress_every and (it + 1) % cfg.progress_every == 0 and \
                    cfg.progress_hook is not None:
                cfg.progress_hook(it + 1, self.log_post, self.structure)
            if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
                draws.append(_flatten_state(self.state, self.structure, self.variant))
                logps.append(self.log_post)
                iters.append(it)
                fb, fg, fn = structure_fingerprints(
                    self.structure, self.data.detection_names, self.data.site_cov_names
                )
                fps_beta.append(fb)
                fps_gamma.append(fg)
                fps_nu.append(fn)
        return ChainOutput(
            param_names=names,
            draws=np.array(draws).reshape(len(draws), len(names)),
            log_posterior=np.array(logps),
            iterations=np.array(iters, dtype=np.int64),
            beta_models=tuple(fps_beta),
            gamma_models=tuple(fps_gamma),
            nu_models=tuple(fps_nu),
            move_stats=self.stats,
            seed=cfg.seed,
            chain_index=self.chain_index,
        )


def run_chain(data, priors, config: SamplerConfig, variant=ModelVariant.M2,
              family=AbundanceFamily.CMP, basis=None, forced_beta=(),
              forced_gamma=(), chain_index=0, rng=None) -> ChainOutput:
    """Run a single chain; fully reproducible from (seed, chain_index).

    SeedSequence spawning is prefix-stable, so chain c gets the same stream
    no matter how many chains run alongside it.
    """
    if rng is None:
        ss = np.random.SeedSequence(config.seed).spawn(chain_index + 1)[chain_index]
        rng = np.random.Generator(np.random.PCG64(ss))
    chain = _Chain(data, priors, config, variant, family, basis,
                   forced_beta, forced_gamma, rng, chain_index)
    return chain.run()


def _run_chain_worker(args):
    return run_chain(*args[:-1], chain_index=args[-1])


def run_chains(data, priors, config: SamplerConfig, variant=ModelVariant.M2,
               family=AbundanceFamily.CMP, basis=None, forced_beta=(),
               forced_gamma=(), processes=1):
    """Run config.chains independent chains with split RNG streams."""
    jobs = [
        (data, priors, config, variant, family, basis, forced_beta,
         forced_gamma, c)
        for c in range(config.chains)
    ]
    if processes > 1 and len(jobs) > 1:
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        with ctx.Pool(min(processes, len(jobs))) as pool:
            return list(pool.map(_run_chain_worker, jobs))
    return [_run_chain_worker(j) for j in jobs]
