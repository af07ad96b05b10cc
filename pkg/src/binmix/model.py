"""Model structure (covariate sets, dispersion grouping), parameter state,
priors, and the detection/intensity link functions."""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, gammaln

__all__ = [
    "ModelVariant",
    "ModelStructure",
    "ParameterState",
    "Priors",
    "detection_prob",
    "intensity_matrix",
    "structure_fingerprints",
    "parse_partition",
]


class ModelVariant(str, enum.Enum):
    """Intensity model forms: M1 covariates+spatial, M2 covariates, M3 spatial."""

    M1 = "M1"
    M2 = "M2"
    M3 = "M3"

    @property
    def has_covariates(self) -> bool:
        return self in (ModelVariant.M1, ModelVariant.M2)

    @property
    def has_spatial(self) -> bool:
        return self in (ModelVariant.M1, ModelVariant.M3)


@dataclass(frozen=True)
class ModelStructure:
    """The model triple: active detection/intensity covariates plus the
    partition of occasions into shared-dispersion blocks."""

    active_beta: frozenset
    active_gamma: frozenset
    forced_beta: frozenset
    forced_gamma: frozenset
    nu_partition: tuple  # tuple of tuples of 0-based occasion indices

    def __post_init__(self):
        object.__setattr__(self, "active_beta", frozenset(self.active_beta))
        object.__setattr__(self, "active_gamma", frozenset(self.active_gamma))
        object.__setattr__(self, "forced_beta", frozenset(self.forced_beta))
        object.__setattr__(self, "forced_gamma", frozenset(self.forced_gamma))
        if not self.forced_beta <= self.active_beta:
            raise ValueError("forced detection covariates must be active")
        if not self.forced_gamma <= self.active_gamma:
            raise ValueError("forced intensity covariates must be active")
        blocks = tuple(tuple(sorted(b)) for b in self.nu_partition)
        blocks = tuple(sorted(blocks, key=lambda b: b[0]))
        if any(len(b) == 0 for b in blocks):
            raise ValueError("partition blocks must be nonempty")
        flat = [j for b in blocks for j in b]
        if sorted(flat) != list(range(len(flat))):
            raise ValueError("partition must cover occasions exactly once")
        object.__setattr__(self, "nu_partition", blocks)

    @property
    def n_occasions(self) -> int:
        return sum(len(b) for b in self.nu_partition)

    @property
    def n_blocks(self) -> int:
        return len(self.nu_partition)

    def block_of(self, j: int) -> int:
        for b, members in enumerate(self.nu_partition):
            if j in members:
                return b
        raise KeyError(j)

    def block_index_by_occasion(self) -> np.ndarray:
        out = np.empty(self.n_occasions, dtype=np.int64)
        for b, members in enumerate(self.nu_partition):
            for j in members:
                out[j] = b
        return out

    def with_partition(self, blocks) -> "ModelStructure":
        return replace(self, nu_partition=tuple(tuple(b) for b in blocks))

    @staticmethod
    def initial(n_beta, n_gamma, forced_beta=(), forced_gamma=(), n_occasions=1,
                full=True) -> "ModelStructure":
        active_b = frozenset(range(n_beta)) if full else frozenset(forced_beta)
        active_g = frozenset(range(n_gamma)) if full else frozenset(forced_gamma)
        return ModelStructure(
            active_beta=active_b,
            active_gamma=active_g,
            forced_beta=frozenset(forced_beta),
            forced_gamma=frozenset(forced_gamma),
            nu_partition=(tuple(range(n_occasions)),),
        )


def structure_fingerprints(structure: ModelStructure, detection_names,
                           site_cov_names):
    """Canonical strings for the three structure components.

    Covariates are listed in column order; partition blocks are sorted by
    their smallest (1-based) occasion.
    """
    beta = "{" + ",".join(
        detection_names[m] for m in sorted(structure.active_beta)
    ) + "}"
    gamma = "{" + ",".join(
        site_cov_names[m] for m in sorted(structure.active_gamma)
    ) + "}"
    nu = "".join(
        "{" + ",".join(str(j + 1) for j in block) + "}"
        for block in structure.nu_partition
    )
    return beta, gamma, nu


def parse_partition(text: str) -> tuple:
    """Inverse of the nu fingerprint: '{1,3,5}{2,4}' -> ((0,2,4),(1,3))."""
    blocks = re.findall(r"\{([^{}]*)\}", text)
    if not blocks:
        raise ValueError(f"not a partition fingerprint: {text!r}")
    return tuple(tuple(int(x) - 1 for x in b.split(",") if x) for b in blocks)


@dataclass
class ParameterState:
    """Current parameter values; inactive coefficients are exactly zero."""

    beta: np.ndarray        # (P,)
    gamma: np.ndarray       # (M,)
    gamma0: np.ndarray      # (J,)
    nu_values: np.ndarray   # one value per partition block
    alpha_star: np.ndarray | None = None   # (tau, J)
    sigma2_alpha: np.ndarray | None = None  # (J,)

    def copy(self) -> "ParameterState":
        return ParameterState(
            beta=self.beta.copy(),
            gamma=self.gamma.copy(),
            gamma0=self.gamma0.copy(),
            nu_values=self.nu_values.copy(),
            alpha_star=None if self.alpha_star is None else self.alpha_star.copy(),
            sigma2_alpha=None if self.sigma2_alpha is None else self.sigma2_alpha.copy(),
        )

    def nu_by_occasion(self, structure: ModelStructure) -> np.ndarray:
        return self.nu_values[structure.block_index_by_occasion()]

    def check_consistent(self, structure: ModelStructure):
        """Debug assertion: inactive coefficients are exactly zero and the
        block-value vector matches the partition."""
        inactive_b = set(range(len(self.beta))) - structure.active_beta
        inactive_g = set(range(len(self.gamma))) - structure.active_gamma
        assert all(self.beta[m] == 0.0 for m in inactive_b)
        assert all(self.gamma[m] == 0.0 for m in inactive_g)
        assert len(self.nu_values) == structure.n_blocks


@dataclass(frozen=True)
class Priors:
    """Vague independent priors; diagonal Gaussians plus uniform dispersion."""

    mu_beta: np.ndarray
    sd_beta: np.ndarray
    mu_gamma: np.ndarray
    sd_gamma: np.ndarray
    mu_gamma0: np.ndarray
    sd_gamma0: np.ndarray
    nu_lower: np.ndarray   # per occasion
    nu_upper: np.ndarray
    sigma_alpha_shape: float = 0.1
    sigma_alpha_scale: float = 0.1

    @staticmethod
    def default(n_beta, n_gamma, n_occasions, coef_sd=10.0,
                nu_bounds=(0.02, 2.0)) -> "Priors":
        return Priors(
            mu_beta=np.zeros(n_beta),
            sd_beta=np.full(n_beta, coef_sd),
            mu_gamma=np.zeros(n_gamma),
            sd_gamma=np.full(n_gamma, coef_sd),
            mu_gamma0=np.zeros(n_occasions),
            sd_gamma0=np.full(n_occasions, coef_sd),
            nu_lower=np.full(n_occasions, nu_bounds[0]),
            nu_upper=np.full(n_occasions, nu_bounds[1]),
        )

    def nu_block_bounds(self, structure: ModelStructure):
        """Support of each block value: the intersection of its occasions'
        bounds."""
        lo = np.array([self.nu_lower[list(b)].max() for b in structure.nu_partition])
        hi = np.array([self.nu_upper[list(b)].min() for b in structure.nu_partition])
        return lo, hi

    def log_density(self, state: ParameterState, structure: ModelStructure) -> float:
        """Log prior of the active parameters; -inf outside the support.

        The model prior over structures is uniform, hence an additive
        constant that is omitted.
        """
        total = 0.0
        for m in sorted(structure.active_beta):
            total += _normal_logpdf(state.beta[m], self.mu_beta[m], self.sd_beta[m])
        for m in sorted(structure.active_gamma):
            total += _normal_logpdf(state.gamma[m], self.mu_gamma[m], self.sd_gamma[m])
        total += float(np.sum(_normal_logpdf(state.gamma0, self.mu_gamma0, self.sd_gamma0)))
        lo, hi = self.nu_block_bounds(structure)
        if np.any(state.nu_values < lo) or np.any(state.nu_values > hi) or np.any(hi <= lo):
            return -np.inf
        total += float(-np.sum(np.log(hi - lo)))
        if state.alpha_star is not None:
            sd = np.sqrt(state.sigma2_alpha)[None, :]
            total += float(np.sum(_normal_logpdf(state.alpha_star, 0.0, sd)))
            total += float(np.sum(_invgamma_logpdf(
                state.sigma2_alpha, self.sigma_alpha_shape, self.sigma_alpha_scale
            )))
        return total


def _normal_logpdf(x, mu, sd):
    z = (np.asarray(x, dtype=float) - mu) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * math.log(2.0 * math.pi)


def _invgamma_logpdf(x, shape, scale):
    x = np.asarray(x, dtype=float)
    return (
        shape * math.log(scale)
        - gammaln(shape)
        - (shape + 1.0) * np.log(x)
        - scale / x
    )


def detection_prob(beta, x):
    """Visit detection probability through the logistic link."""
    return expit(np.asarray(x, dtype=float) @ np.asarray(beta, dtype=float))


def intensity_matrix(state: ParameterState, structure: ModelStructure,
                     site_covariates, variant: ModelVariant,
                     basis=None) -> np.ndarray:
    """(G, J) matrix of intensities lambda_ij for the chosen variant."""
    g = site_covariates.shape[0]
    j = len(state.gamma0)
    eta = np.tile(state.gamma0, (g, 1))
    if variant.has_covariates:
        eta += (site_covariates @ state.gamma)[:, None]
    if variant.has_spatial:
        if basis is None or state.alpha_star is None:
            raise ValueError(f"variant {variant.value} requires a spatial basis")
        phi = basis.phi_star_orth if variant is ModelVariant.M1 else basis.phi_star
        eta += phi @ state.alpha_star
    with np.errstate(over="ignore"):
        return np.exp(eta)
