import math

import numpy as np
import pytest

from binmix.spatial import (
    KnotSet,
    build_basis,
    default_knot_count,
    load_knots,
    save_knots,
    select_knots,
    tps_kernel,
)


class TestKernel:
    def test_unit_norm_is_zero(self):
        assert tps_kernel(np.array([1.0, 0.0])) == 0.0
        assert tps_kernel(np.array([0.6, 0.8])) == pytest.approx(0.0, abs=1e-15)

    def test_zero_displacement_is_zero(self):
        assert tps_kernel(np.array([0.0, 0.0])) == 0.0

    def test_norm_two(self):
        assert tps_kernel(np.array([2.0, 0.0])) == pytest.approx(4.0 * math.log(2.0))

    def test_batched(self):
        rs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
        got = tps_kernel(rs)
        assert np.allclose(got, [0.0, 0.0, 4.0 * math.log(2.0)])


class TestKnotSelection:
    def test_forced_square_corners(self):
        corners = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        ks = select_knots(corners, 4, np.random.default_rng(0))
        assert ks.tau == 4
        assert np.array_equal(np.sort(ks.knots, axis=0), np.sort(corners, axis=0))

    def test_default_count_rule(self):
        assert default_knot_count(131) == max(20, min(131 // 4, 150)) == 32
        assert default_knot_count(40) == 20
        assert default_knot_count(10_000) == 150

    def test_beats_random_subsets(self):
        # coverage of the optimized design <= coverage of 20 random subsets
        g = np.stack(np.meshgrid(np.arange(10.0), np.arange(10.0)), -1).reshape(-1, 2)
        rng = np.random.default_rng(42)
        ks = select_knots(g, 10, rng)

        def coverage(knots):
            d = np.linalg.norm(g[:, None, :] - knots[None, :, :], axis=-1)
            return d.min(axis=1).max()

        ours = coverage(ks.knots)
        for _ in range(20):
            idx = rng.choice(len(g), size=10, replace=False)
            assert ours <= coverage(g[idx]) + 1e-12

    def test_deterministic_given_seed(self):
        pts = np.random.default_rng(3).random((60, 2))
        a = select_knots(pts, 12, np.random.default_rng(7))
        b = select_knots(pts, 12, np.random.default_rng(7))
        assert np.array_equal(a.knots, b.knots)

    def test_too_few_sites(self):
        with pytest.raises(ValueError):
            select_knots(np.zeros((3, 2)) + np.arange(3)[:, None], 5,
                         np.random.default_rng(0))

    def test_duplicate_knots_rejected(self):
        with pytest.raises(ValueError):
            KnotSet(np.array([[0.0, 0.0], [0.0, 0.0]]))


class TestBasis:
    def setup_method(self):
        rng = np.random.default_rng(2024)
        self.sites = rng.random((25, 2)) * 4.0
        self.knots = select_knots(self.sites, 6, rng)

    def test_single_knot_at_site(self):
        sites = np.array([[0.3, 0.7]])
        basis = build_basis(sites, KnotSet(sites.copy()))
        assert basis.phi_star.shape == (1, 1)
        assert basis.phi_star[0, 0] == 0.0  # C(0) = 0 through the whitening

    def test_omega_symmetric_exactly(self):
        kn = self.knots.knots
        omega = tps_kernel(kn[:, None, :] - kn[None, :, :])
        assert np.array_equal(omega, omega.T)

    def test_gram_identity(self):
        # Phi* Phi*' = Phi |Omega|^-1 Phi'; the TPS Gram matrix is indefinite
        # (zero trace), so the SVD square-root convention applies.
        kn = self.knots.knots
        phi = tps_kernel(self.sites[:, None, :] - kn[None, :, :])
        omega = tps_kernel(kn[:, None, :] - kn[None, :, :])
        evals, evecs = np.linalg.eigh(omega)
        abs_inv = (evecs * (1.0 / np.abs(evals))) @ evecs.T
        basis = build_basis(self.sites, self.knots)
        got = basis.phi_star @ basis.phi_star.T
        want = phi @ abs_inv @ phi.T
        assert np.max(np.abs(got - want)) / np.max(np.abs(want)) < 1e-8

    def test_transform_inverts_magnitude_spectrum(self):
        kn = self.knots.knots
        omega = tps_kernel(kn[:, None, :] - kn[None, :, :])
        evals, evecs = np.linalg.eigh(omega)
        abs_inv = (evecs * (1.0 / np.abs(evals))) @ evecs.T
        # reconstruct the whitening matrix and square it
        basis = build_basis(np.eye(self.knots.tau) @ kn, self.knots)
        inv_sqrt = np.linalg.lstsq(
            tps_kernel(kn[:, None, :] - kn[None, :, :]) @ np.eye(self.knots.tau),
            basis.phi_star, rcond=None,
        )[0]
        got = inv_sqrt @ inv_sqrt
        assert np.max(np.abs(got - abs_inv)) / np.max(np.abs(abs_inv)) < 1e-8

    def test_orthogonalization_against_ones(self):
        rng = np.random.default_rng(5)
        sites = rng.random((10, 2))
        knots = select_knots(sites, 3, rng)
        basis = build_basis(sites, knots, covariates=np.ones((10, 1)))
        sums = basis.phi_star_orth.sum(axis=0)
        assert np.max(np.abs(sums)) < 1e-8

    def test_orthogonal_to_covariate_columns(self):
        rng = np.random.default_rng(6)
        w = np.column_stack([np.ones(25), rng.standard_normal((25, 3))])
        basis = build_basis(self.sites, self.knots, covariates=w)
        # normalized inner products below 1e-8
        wn = w / np.linalg.norm(w, axis=0)
        pn = basis.phi_star_orth / np.maximum(
            np.linalg.norm(basis.phi_star_orth, axis=0), 1e-300
        )
        assert np.max(np.abs(wn.T @ pn)) < 1e-8

    def test_orthogonalization_idempotent(self):
        rng = np.random.default_rng(8)
        w = rng.standard_normal((25, 4))
        basis = build_basis(self.sites, self.knots, covariates=w)
        proj = w @ np.linalg.pinv(w)
        twice = basis.phi_star_orth - proj @ basis.phi_star_orth
        assert np.max(np.abs(twice - basis.phi_star_orth)) < 1e-10

    def test_rank_deficient_covariates_warn(self):
        w = np.ones((25, 2))  # duplicated column
        with pytest.warns(UserWarning):
            basis = build_basis(self.sites, self.knots, covariates=w)
        assert any("rank" in note for note in basis.warnings)

    def test_prior_equivalence_monte_carlo(self):
        # cov(Phi* a), a ~ N(0, sigma^2 I), matches sigma^2 Phi |Omega|^-1 Phi'
        rng = np.random.default_rng(9)
        basis = build_basis(self.sites, self.knots)
        sigma = 1.7
        draws = basis.phi_star @ (sigma * rng.standard_normal((self.knots.tau, 10_000)))
        emp = draws @ draws.T / draws.shape[1]
        want = sigma**2 * basis.phi_star @ basis.phi_star.T
        scale = np.max(np.abs(want))
        assert np.max(np.abs(emp - want)) / scale < 0.05


def test_knot_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    ks = select_knots(rng.random((40, 2)), 8, rng)
    path = tmp_path / "knots.txt"
    save_knots(ks, path)
    back = load_knots(path)
    assert np.array_equal(back.knots, ks.knots)
