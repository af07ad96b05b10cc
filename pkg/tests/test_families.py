import math

import numpy as np
import pytest

from binmix.families import (
    AbundanceFamily,
    abundance_log_pmf,
    abundance_pmf_table,
    abundance_support_bound,
)

import oracles

# frozen from a high-precision direct summation (mpmath, 50 digits)
NB_LOGP0 = {(2.0, 1.5): -1.2709467905808054206, (5.0, 0.7): -1.4679987831454657382}
CMP_SUPPORT_BOUND_S1 = 129  # (cmp, e^0.44, 0.15, 1e-10) by brute-force CDF scan


def test_poisson_log_pmf():
    got = abundance_log_pmf("poisson", 2, 3.0)
    want = 2.0 * math.log(3.0) - 3.0 - math.log(2.0)
    assert abs(got - want) < 1e-12


def test_cmp_nu_one_equals_poisson():
    for lam in [0.5, 2.0, 10.0]:
        n = np.arange(101)
        a = abundance_log_pmf("cmp", n, lam, 1.0)
        b = abundance_log_pmf("poisson", n, lam)
        assert np.max(np.abs(a - b)) < 1e-12


def test_negative_binomial_p0_and_normalization():
    for (lam, nu), want in NB_LOGP0.items():
        got = abundance_log_pmf("negative-binomial", 0, lam, nu)
        assert abs(got - want) < 1e-12
        # normalization: direct sum of pmf over a generous support
        n = np.arange(3000)
        total = np.exp(abundance_log_pmf("negative-binomial", n, lam, nu)).sum()
        assert abs(total - 1.0) < 1e-10


def test_negative_binomial_moments_match_parameterization():
    lam, nu = 4.0, 2.5
    n = np.arange(5000)
    probs = np.exp(abundance_log_pmf("negative-binomial", n, lam, nu))
    mean = np.dot(n, probs)
    var = np.dot(n * n.astype(float), probs) - mean**2
    assert abs(mean - lam) < 1e-8
    assert abs(var - (lam + lam**2 / nu)) < 1e-6


def test_invalid_parameters():
    with pytest.raises(ValueError):
        abundance_log_pmf("poisson", 1, -1.0)
    with pytest.raises(ValueError):
        abundance_log_pmf("negative-binomial", 1, 2.0, 0.0)
    with pytest.raises(ValueError):
        abundance_log_pmf("cmp", 1, 2.0, -0.5)
    with pytest.raises(ValueError):
        AbundanceFamily("gamma")


def test_support_bound_poisson_hand_value():
    # P(X<=0) = e^-1 = 0.368 leaves tail 0.632 > 0.5; P(X<=1) = 2e^-1 = 0.736
    assert abundance_support_bound("poisson", 1.0, 1.0, 0.5) == 1


def test_support_bound_cmp_oracle():
    got = abundance_support_bound("cmp", math.e**0.44, 0.15, 1e-10)
    assert got == CMP_SUPPORT_BOUND_S1
    assert got == oracles.cmp_support_bound(math.e**0.44, 0.15, 1e-10, upper=2000)


def test_support_bound_degenerate_tail_mass():
    assert abundance_support_bound("negative-binomial", 2.0, 1.0, 1 - 1e-9) == 0
    assert abundance_support_bound("poisson", 3.0, 1.0, 1 - 1e-9) == 0


def test_support_bound_monotone_in_tail_mass():
    masses = [0.5, 1e-2, 1e-4, 1e-8, 1e-12]
    for family, lam, nu in [("poisson", 4.0, 1.0), ("cmp", 2.0, 0.5),
                            ("negative-binomial", 3.0, 1.2)]:
        bounds = [abundance_support_bound(family, lam, nu, t) for t in masses]
        assert all(a <= b for a, b in zip(bounds, bounds[1:])), (family, bounds)


def test_support_bound_definition_is_tight():
    # U is the smallest integer with tail < tail_mass
    family, lam, nu, t = "poisson", 4.0, 1.0, 1e-6
    u = abundance_support_bound(family, lam, nu, t)
    n = np.arange(u + 200)
    probs = np.exp(abundance_log_pmf(family, n, lam, nu))
    tail_at = lambda k: 1.0 - probs[: k + 1].sum()
    assert tail_at(u) < t
    assert tail_at(u - 1) >= t


def test_pmf_table_normalized():
    probs = abundance_pmf_table("cmp", 2.0, 0.5)
    assert abs(probs.sum() - 1.0) < 1e-12
    assert probs.min() >= 0.0
