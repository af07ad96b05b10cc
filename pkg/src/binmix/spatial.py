"""Low-rank thin-plate spline spatial basis.

Builds the radial basis Phi over site-knot displacements, whitens it with
the inverse square root of the knot Gram matrix Omega so the spatial
coefficients get independent priors, and optionally projects out the column
space of the site-covariate design to avoid confounding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KnotSet",
    "SpatialBasis",
    "tps_kernel",
    "default_knot_count",
    "select_knots",
    "build_basis",
    "save_knots",
    "load_knots",
]

EIGEN_FLOOR = 1e-10


@dataclass(frozen=True)
class KnotSet:
    """Fixed 2-D knot locations for the low-rank basis."""

    knots: np.ndarray  # (tau, 2)

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 2 or k.shape[1] != 2 or k.shape[0] < 1:
            raise ValueError("knots must be a (tau, 2) array with tau >= 1")
        d = _pairwise_sq_dists(k, k)
        d[np.diag_indices_from(d)] = np.inf
        if np.any(d <= 0.0):
            raise ValueError("knots must be pairwise distinct")
        object.__setattr__(self, "knots", k)

    @property
    def tau(self) -> int:
        return self.knots.shape[0]


@dataclass(frozen=True)
class SpatialBasis:
    """Whitened basis Phi* and its covariate-orthogonalized variant."""

    phi_star: np.ndarray        # (G, tau)
    phi_star_orth: np.ndarray   # (G, tau)
    knots: KnotSet
    warnings: tuple = field(default=())

    @property
    def tau(self) -> int:
        return self.knots.tau


def tps_kernel(r, v: int = 2):
    """Radial kernel ||r||^(2v-2) * log ||r|| of a 2-D displacement.

    Accepts arrays of displacements with shape (..., 2); the limit value at
    r = 0 is 0.
    """
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != 2:
        raise ValueError("displacements must have a trailing axis of length 2")
    norm = np.sqrt(np.sum(r * r, axis=-1))
    out = np.where(norm > 0.0, norm ** (2 * v - 2) * np.log(np.maximum(norm, 1e-300)), 0.0)
    return float(out) if out.ndim == 0 else out


def default_knot_count(n_sites: int) -> int:
    """max{20, min(G/4, 150)} rule for the number of knots."""
    return max(20, min(n_sites // 4, 150))


def _pairwise_sq_dists(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=-1)


def _coverage(dist2, knot_idx):
    """Max over sites of the distance to the nearest knot (squared)."""
    return float(np.max(np.min(dist2[:, knot_idx], axis=1)))


def select_knots(sites, tau, rng: np.random.Generator, max_sweeps: int = 100) -> KnotSet:
    """Space-filling knot subset by farthest-point seeding plus swap descent.

    Minimizes the coverage criterion (maximum distance from any site to its
    nearest knot).  Deterministic given the generator state.
    """
    sites = np.asarray(sites, dtype=float)
    distinct = np.unique(sites, axis=0)
    if tau > distinct.shape[0]:
        raise ValueError(
            f"requested {tau} knots but only {distinct.shape[0]} distinct sites"
        )
    candidates = distinct
    n = candidates.shape[0]
    dist2 = _pairwise_sq_dists(candidates, candidates)

    # greedy farthest-point initialization from a random seed point
    chosen = [int(rng.integers(n))]
    mind = dist2[:, chosen[0]].copy()
    while len(chosen) < tau:
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, dist2[:, nxt])

    chosen = np.array(sorted(chosen))
    best = _coverage(dist2, chosen)
    in_set = np.zeros(n, dtype=bool)
    in_set[chosen] = True
    for _ in range(max_sweeps):
        improved = False
        for pos in range(tau):
            rest = np.delete(chosen, pos)
            # nearest-knot distance with this knot removed, then try candidates
            base = np.min(dist2[:, rest], axis=1) if rest.size else np.full(n, np.inf)
            outside = np.flatnonzero(~in_set)
            if outside.size == 0:
                continue
            cover = np.max(np.minimum(base[:, None], dist2[:, outside]), axis=0)
            k = int(np.argmin(cover))
            if cover[k] < best - 1e-15:
                in_set[chosen[pos]] = False
                in_set[outside[k]] = True
                chosen[pos] = outside[k]
                best = float(cover[k])
                improved = True
        if not improved:
            break
    return KnotSet(candidates[np.sort(chosen)])


def build_basis(sites, knots: KnotSet, covariates=None) -> SpatialBasis:
    """Phi from site-knot kernels, whitened by Omega^(-1/2), then projected
    off the covariate column space.

    covariates: optional (G, M) design matrix W; when given, phi_star_orth is
    (I - W (W'W)^+ W') Phi*.  Without covariates the two matrices coincide.
    """
    sites = np.asarray(sites, dtype=float)
    kn = knots.knots
    phi = tps_kernel(sites[:, None, :] - kn[None, :, :])
    omega = tps_kernel(kn[:, None, :] - kn[None, :, :])
    omega = 0.5 * (omega + omega.T)  # symmetric by construction, enforce exactly

    evals, evecs = np.linalg.eigh(omega)
    mags = np.abs(evals)
    if mags.max() == 0.0:
        # single knot (or all pairs at unit distance): Omega is identically
        # zero; the basis is well defined only when Phi vanishes too
        if np.all(phi == 0.0):
            zeros = np.zeros_like(phi)
            return SpatialBasis(zeros, zeros.copy(), knots,
                                ("omega identically zero; basis is zero",))
        raise np.linalg.LinAlgError("omega is singular (degenerate knot geometry)")
    floor = EIGEN_FLOOR * mags.max()
    notes = []
    if np.any(mags < floor):
        notes.append(f"omega: {int(np.sum(mags < floor))} eigenvalue(s) clipped")
        mags = np.maximum(mags, floor)
    # The TPS Gram matrix has zero trace, so it is indefinite; the usual
    # low-rank-spline convention takes the SVD square root (absolute
    # eigenvalues), keeping the whitening transform real and symmetric.
    inv_sqrt = (evecs * (1.0 / np.sqrt(mags))) @ evecs.T
    phi_star = phi @ inv_sqrt

    if covariates is None:
        return SpatialBasis(phi_star, phi_star.copy(), knots, ())

    w = np.asarray(covariates, dtype=float)
    if w.ndim != 2 or w.shape[0] != sites.shape[0]:
        raise ValueError("covariates must be a (G, M) matrix")
    rank = np.linalg.matrix_rank(w)
    if rank < w.shape[1]:
        notes.append(f"covariate design rank {rank} < {w.shape[1]}; using pseudo-inverse")
        warnings.warn("rank-deficient covariate design in basis orthogonalization")
    proj = w @ np.linalg.pinv(w)
    phi_orth = phi_star - proj @ phi_star
    return SpatialBasis(phi_star, phi_orth, knots, tuple(notes))


def save_knots(knots: KnotSet, path):
    """Plain-text coordinate table, one `x y` pair per line."""
    np.savetxt(path, knots.knots, fmt="%.17g", header="x y")


def load_knots(path) -> KnotSet:
    return KnotSet(np.loadtxt(path, ndmin=2))
