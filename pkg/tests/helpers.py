"""Small constructors shared by the test modules."""

from __future__ import annotations

import numpy as np

from binmix.data import Standardization, build_dataset
from binmix.model import ModelStructure, ParameterState, Priors


def make_dataset(cells, n_sites, n_occasions, detection_names=("x1",),
                 site_cov_names=(), site_covariates=None, sites=None,
                 max_visits=None):
    """Build a SurveyDataset from a {(site, occasion): [(count, xvec), ...]}
    mapping, bypassing standardization (covariates are used as given)."""
    obs_site, obs_occ, obs_visit, counts, xs = [], [], [], [], []
    for (i, j), visits in sorted(cells.items()):
        for k, (y, x) in enumerate(visits):
            obs_site.append(i)
            obs_occ.append(j)
            obs_visit.append(k)
            counts.append(y)
            xs.append(np.asarray(x, dtype=float))
    p = len(detection_names)
    m = len(site_cov_names)
    if site_covariates is None:
        site_covariates = np.zeros((n_sites, m))
    if sites is None:
        rng = np.random.default_rng(0)
        sites = rng.random((n_sites, 2))
    return build_dataset(
        site_ids=[f"s{i}" for i in range(n_sites)],
        sites=sites,
        site_covariates=site_covariates,
        site_cov_names=site_cov_names,
        obs_site=obs_site,
        obs_occasion=obs_occ,
        obs_visit=obs_visit,
        counts=counts,
        detection_covariates=np.asarray(xs, dtype=float).reshape(len(counts), p),
        detection_names=detection_names,
        n_occasions=n_occasions,
        max_visits=max_visits,
        standardized=True,
        detection_transform=Standardization(np.zeros(p), np.ones(p)),
        site_transform=Standardization(np.zeros(m), np.ones(m)),
    )


def simple_state(beta, gamma0, nu, n_gamma=0, structure=None):
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    gamma0 = np.atleast_1d(np.asarray(gamma0, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    state = ParameterState(
        beta=beta,
        gamma=np.zeros(n_gamma),
        gamma0=gamma0,
        nu_values=nu,
    )
    if structure is None:
        if len(nu) != 1:
            raise ValueError("pass a structure when nu has several blocks")
        structure = ModelStructure.initial(
            n_beta=len(beta), n_gamma=n_gamma, forced_beta=range(len(beta)),
            forced_gamma=range(n_gamma), n_occasions=len(gamma0),
        )
    return state, structure


def default_priors(dataset, nu_bounds=(0.02, 2.0)):
    return Priors.default(
        n_beta=dataset.n_detection_covariates,
        n_gamma=dataset.n_site_covariates,
        n_occasions=dataset.n_occasions,
        nu_bounds=nu_bounds,
    )
