"""Survey dataset container: unbalanced replicated counts with covariates.

Observations are stored flat, sorted by (occasion, site, visit), with a
CSR-style index over the nonempty (site, occasion) cells grouped by
occasion.  That layout is what the likelihood evaluator vectorizes over.
Covariates are standardized at construction (constant columns are left
untouched) and the transforms retained for back-transformation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Standardization", "SurveyDataset", "build_dataset"]


@dataclass(frozen=True)
class Standardization:
    """Per-column affine transform applied at ingestion: (value - mean)/scale."""

    means: np.ndarray
    scales: np.ndarray

    def apply(self, raw):
        return (np.asarray(raw, dtype=float) - self.means) / self.scales

    def invert(self, standardized):
        return np.asarray(standardized, dtype=float) * self.scales + self.means


def standardize_columns(matrix):
    """Zero-mean unit-variance columns; constant columns pass through."""
    m = np.asarray(matrix, dtype=float)
    if m.size == 0:
        return m.copy(), Standardization(np.zeros(m.shape[1]), np.ones(m.shape[1]))
    means = m.mean(axis=0)
    scales = m.std(axis=0)
    constant = scales == 0.0
    means = np.where(constant, 0.0, means)
    scales = np.where(constant, 1.0, scales)
    return (m - means) / scales, Standardization(means, scales)


@dataclass(frozen=True)
class SurveyDataset:
    site_ids: tuple                 # length G
    sites: np.ndarray               # (G, 2) coordinates
    n_occasions: int                # J
    max_visits: int                 # K
    detection_names: tuple          # length P
    site_cov_names: tuple           # length M
    site_covariates: np.ndarray     # (G, M), standardized
    obs_site: np.ndarray            # (N,) site index per observation
    obs_occasion: np.ndarray        # (N,) 0-based occasion index
    obs_visit: np.ndarray           # (N,) 0-based visit index
    counts: np.ndarray              # (N,) observed counts
    detection_covariates: np.ndarray  # (N, P), standardized
    detection_transform: Standardization
    site_transform: Standardization
    # derived cell index over nonempty cells, grouped by occasion
    cell_site: np.ndarray = field(default=None)
    cell_occasion: np.ndarray = field(default=None)
    cell_ptr: np.ndarray = field(default=None)
    cell_y_max: np.ndarray = field(default=None)
    occasion_cell_slices: tuple = field(default=None)

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    @property
    def n_detection_covariates(self) -> int:
        return len(self.detection_names)

    @property
    def n_site_covariates(self) -> int:
        return len(self.site_cov_names)

    @property
    def n_observations(self) -> int:
        return len(self.counts)

    @property
    def n_cells(self) -> int:
        return len(self.cell_site)

    def visits_in_cell(self, i, j):
        """Observed counts and detection covariates of cell (site i, occasion j)."""
        mask = (self.obs_site == i) & (self.obs_occasion == j)
        return self.counts[mask], self.detection_covariates[mask]

    def cell_index_of(self, i, j):
        hits = np.flatnonzero((self.cell_site == i) & (self.cell_occasion == j))
        return int(hits[0]) if hits.size else None

    def equals(self, other) -> bool:
        """Bit-for-bit equality of all payload arrays and metadata."""
        return (
            self.site_ids == other.site_ids
            and self.n_occasions == other.n_occasions
            and self.max_visits == other.max_visits
            and self.detection_names == other.detection_names
            and self.site_cov_names == other.site_cov_names
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in (
                    "sites", "site_covariates", "obs_site", "obs_occasion",
                    "obs_visit", "counts", "detection_covariates",
                )
            )
            and np.array_equal(self.detection_transform.means, other.detection_transform.means)
            and np.array_equal(self.detection_transform.scales, other.detection_transform.scales)
            and np.array_equal(self.site_transform.means, other.site_transform.means)
            and np.array_equal(self.site_transform.scales, other.site_transform.scales)
        )


def build_dataset(site_ids, sites, site_covariates, site_cov_names,
                  obs_site, obs_occasion, obs_visit, counts,
                  detection_covariates, detection_names,
                  n_occasions=None, max_visits=None,
                  standardized=False,
                  detection_transform=None, site_transform=None) -> SurveyDataset:
    """Assemble and validate a SurveyDataset from raw arrays.

    Raw covariates are standardized here unless ``standardized`` is set (in
    which case the transforms must be supplied).  Observations may arrive in
    any order; they are sorted into the canonical (occasion, site, visit)
    layout.
    """
    sites = np.asarray(sites, dtype=float)
    g = len(site_ids)
    if sites.shape != (g, 2):
        raise ValueError(f"sites must be ({g}, 2), got {sites.shape}")
    if len(set(site_ids)) != g:
        raise ValueError("duplicate site ids")

    obs_site = np.asarray(obs_site, dtype=np.int64)
    obs_occasion = np.asarray(obs_occasion, dtype=np.int64)
    obs_visit = np.asarray(obs_visit, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    detection_covariates = np.asarray(detection_covariates, dtype=float)
    site_covariates = np.asarray(site_covariates, dtype=float)
    n = len(counts)
    if detection_covariates.shape != (n, len(detection_names)):
        raise ValueError("detection covariate matrix shape mismatch")
    if site_covariates.shape != (g, len(site_cov_names)):
        raise ValueError("site covariate matrix shape mismatch")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    if not np.all(np.isfinite(detection_covariates)):
        raise ValueError("detection covariates contain non-finite values")
    if not np.all(np.isfinite(site_covariates)):
        raise ValueError("site covariates contain non-finite values")
    if n and (obs_site.min() < 0 or obs_site.max() >= g):
        raise ValueError("observation references an unknown site")

    j_count = int(n_occasions if n_occasions is not None
                  else (obs_occasion.max() + 1 if n else 0))
    if j_count < 1:
        raise ValueError("at least one primary occasion is required")
    if n and (obs_occasion.min() < 0 or obs_occasion.max() >= j_count):
        raise ValueError("occasion index out of range")

    k_count = int(max_visits if max_visits is not None
                  else (obs_visit.max() + 1 if n else 1))
    if n and (obs_visit.min() < 0 or obs_visit.max() >= k_count):
        raise ValueError("visit index out of range")

    keys = obs_occasion * (g * k_count) + obs_site * k_count + obs_visit
    if len(np.unique(keys)) != n:
        raise ValueError("duplicate (site, occasion, visit) observation")
    order = np.argsort(keys, kind="stable")
    obs_site, obs_occasion, obs_visit = obs_site[order], obs_occasion[order], obs_visit[order]
    counts = counts[order]
    detection_covariates = detection_covariates[order]

    if standardized:
        if detection_transform is None or site_transform is None:
            raise ValueError("standardized inputs require their transforms")
        det_std, site_std = detection_covariates, site_covariates
    else:
        det_std, detection_transform = standardize_columns(detection_covariates)
        site_std, site_transform = standardize_columns(site_covariates)

    # CSR cell index: observations already sorted by (occasion, site, visit)
    if n:
        cell_key = obs_occasion * g + obs_site
        boundaries = np.flatnonzero(np.diff(cell_key)) + 1
        starts = np.concatenate([[0], boundaries])
        cell_ptr = np.concatenate([starts, [n]])
        cell_site = obs_site[starts]
        cell_occasion = obs_occasion[starts]
        cell_y_max = np.maximum.reduceat(counts, starts)
    else:
        cell_ptr = np.array([0], dtype=np.int64)
        cell_site = np.array([], dtype=np.int64)
        cell_occasion = np.array([], dtype=np.int64)
        cell_y_max = np.array([], dtype=np.int64)

    occ_slices = []
    for j in range(j_count):
        idx = np.flatnonzero(cell_occasion == j)
        occ_slices.append((int(idx[0]), int(idx[-1] + 1)) if idx.size else (0, 0))

    return SurveyDataset(
        site_ids=tuple(site_ids),
        sites=sites,
        n_occasions=j_count,
        max_visits=k_count,
        detection_names=tuple(detection_names),
        site_cov_names=tuple(site_cov_names),
        site_covariates=site_std,
        obs_site=obs_site,
        obs_occasion=obs_occasion,
        obs_visit=obs_visit,
        counts=counts,
        detection_covariates=det_std,
        detection_transform=detection_transform,
        site_transform=site_transform,
        cell_site=cell_site,
        cell_occasion=cell_occasion,
        cell_ptr=cell_ptr,
        cell_y_max=cell_y_max,
        occasion_cell_slices=tuple(occ_slices),
    )
