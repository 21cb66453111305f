"""
Tests for the stability bound, the MSE decomposition and image error metrics
"""

import itertools
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.append(str(Path(__file__).parent.parent / 'app'))

from analysis import (
    adversarial_instance, coefficient_moments, monte_carlo_mse, mse_decomposition, rmse,
    save_stability_reports, stability_bound,
)
from data import make_angle_grid, make_mesh
from geometry import relative_angle_data
from gram import GramMatrix, assemble_circulant, assemble_dense
from kernels import GaussianKernelParams, cross_gram_entry
from recon import ImageRaster
from solve import solve_tikhonov
from utils import InvalidArgumentError, RankZeroError


class TestStability:
    """Test the worst-case error bound and its attaining instance"""

    def setup_method(self):
        """Setup test fixtures"""
        self.W = GramMatrix.from_dense(np.diag([1.0, 2.0, 4.0, 8.0]))

    def test_bound_formula(self):
        """Test rho^2 + eps^2 / (d + 2 nu) with d the smallest eigenvalue"""
        report = stability_bound(self.W, 0.5, 1.0, 2.0)
        assert report.d == pytest.approx(1.0)
        assert report.bound == pytest.approx(1.0 + 4.0 / 2.0)

    def test_rank_deficient_gram(self):
        """Test d skips zero eigenvalues"""
        W = GramMatrix.from_dense(np.diag([0.0, 3.0, 5.0]))
        assert stability_bound(W, 1.0, 0.0, 1.0).d == pytest.approx(3.0)
        with pytest.raises(RankZeroError):
            stability_bound(GramMatrix.from_dense(np.zeros((2, 2))), 1.0, 1.0, 1.0)

    def test_adversarial_attains_bound(self):
        """Test the constructed instance reaches the bound"""
        alpha0, noise, report = adversarial_instance(self.W, 0.5, 1.0, 1.0)
        assert report.attained
        assert report.achieved == pytest.approx(1.5, rel=1e-10)
        assert report.gap == pytest.approx(0.0, abs=1e-9)
        assert np.linalg.norm(noise) == pytest.approx(1.0)
        assert float(alpha0.ravel() @ self.W.matvec(alpha0.ravel())) <= 1.0

    def test_small_rho_not_attained(self):
        """Test a signal budget too small for equality"""
        _, _, report = adversarial_instance(self.W, 0.5, 0.1, 1.0)
        assert not report.attained
        assert report.achieved < report.bound

    def test_random_instances_below_bound(self):
        """Test random admissible signals and noise stay under the bound"""
        rng = np.random.default_rng(4)
        nu, rho, eps = 0.3, 0.8, 0.6
        bound = stability_bound(self.W, nu, rho, eps).bound
        for _ in range(50):
            alpha0 = rng.normal(size=4)
            alpha0 *= rho * rng.uniform() / np.sqrt(alpha0 @ self.W.matvec(alpha0))
            noise = rng.normal(size=4)
            noise *= eps * rng.uniform() / np.linalg.norm(noise)
            estimate = solve_tikhonov(self.W, self.W.matvec(alpha0) + noise, nu).alpha.ravel()
            error = estimate - alpha0
            assert error @ self.W.matvec(error) <= bound * (1.0 + 1e-10)

    def test_invalid_budgets(self):
        """Test nonpositive nu and negative budgets"""
        with pytest.raises(InvalidArgumentError):
            stability_bound(self.W, 0.0, 1.0, 1.0)
        with pytest.raises(InvalidArgumentError):
            stability_bound(self.W, 1.0, -1.0, 1.0)

    def test_report_file(self, tmp_path):
        """Test the stability CSV columns"""
        reports = [stability_bound(self.W, 0.5, 1.0, eps) for eps in (0.5, 1.0)]
        path = save_stability_reports(reports, tmp_path / "stability.csv")
        table = pd.read_csv(path)
        assert list(table.columns) == ["config_hash", "rho", "eps", "nu", "d", "bound", "achieved"]
        assert len(table) == 2


class TestMse:
    """Test the bias-variance decomposition"""

    def setup_method(self):
        """Setup test fixtures"""
        self.lam = np.array([1.0, 2.0, 4.0, 8.0])
        self.W = GramMatrix.from_dense(np.diag(self.lam))
        self.alpha0 = np.ones(4)

    def test_closed_form_on_diagonal(self):
        """Test bias and variance sums against the eigenvalues"""
        nu, sigma = 0.5, 2.0
        report = mse_decomposition(self.W, nu, self.alpha0, sigma, projection_residual=0.25)
        damp = self.lam / (self.lam + nu) ** 2
        assert report.bias_term == pytest.approx(nu * nu * np.sum(damp))
        assert report.variance_term == pytest.approx(sigma * sigma * np.sum(damp))
        assert report.total == pytest.approx(report.bias_term + report.variance_term + 0.25)

    def test_noiseless_unpenalized(self):
        """Test zero error when sigma = 0 and nu = 0"""
        assert mse_decomposition(self.W, 0.0, self.alpha0, 0.0).total == 0.0

    def test_monte_carlo_agrees(self):
        """Test the sample mean lies within three standard errors"""
        nu, sigma = 0.5, 1.0
        expected = mse_decomposition(self.W, nu, self.alpha0, sigma).total
        mean, stderr = monte_carlo_mse(self.W, nu, self.alpha0, sigma, draws=400, seed=2, workers=2)
        assert abs(mean - expected) <= 3.0 * stderr

    def test_monte_carlo_reproducible(self):
        """Test identical seeds give identical estimates"""
        first = monte_carlo_mse(self.W, 0.5, self.alpha0, 1.0, draws=20, seed=6, workers=2)
        second = monte_carlo_mse(self.W, 0.5, self.alpha0, 1.0, draws=20, seed=6, workers=3)
        assert first == second

    def test_coefficient_moments(self):
        """Test mean shrinkage and covariance on a diagonal Gram"""
        nu, sigma = 0.5, 2.0
        mean, covariance = coefficient_moments(self.W, nu, self.alpha0, sigma)
        assert np.allclose(mean.ravel(), self.lam / (self.lam + nu))
        assert np.allclose(covariance, np.diag(sigma * sigma / (self.lam + nu) ** 2))

    def test_draw_count(self):
        """Test fewer than two draws"""
        with pytest.raises(InvalidArgumentError):
            monte_carlo_mse(self.W, 0.5, self.alpha0, 1.0, draws=1)


class TestHilbertNorm:
    """Test ||f||_H^2 = alpha^T W alpha across assembly orders"""

    def setup_method(self):
        """Setup test fixtures"""
        self.params = GaussianKernelParams(gamma=8.0, dim=2)
        self.grid = make_angle_grid("equiangular_full", 4)
        self.mesh = make_mesh(5)
        self.dense = assemble_dense(self.params, self.grid, self.mesh, workers=2)
        self.circulant = assemble_circulant(self.params, 4, self.mesh, workers=2)
        y = np.random.default_rng(12).normal(size=(4, 5))
        self.coeffs = solve_tikhonov(self.dense, y, 2.0 ** -3)

    def test_dense_and_circulant_agree(self):
        """Test the norm through the dense and the FFT products"""
        dense_norm = self.coeffs.hilbert_norm_sq(self.dense)
        assert dense_norm > 0.0
        assert self.coeffs.hilbert_norm_sq(self.circulant) == pytest.approx(dense_norm, rel=1e-10)

    def test_matches_pairwise_inner_products(self):
        """Test the norm against the double sum of generator inner products"""
        orientations = self.grid.orientations()
        points = self.mesh.points
        alpha = self.coeffs.alpha
        total = 0.0
        for i, k in itertools.product(range(4), repeat=2):
            for j, l in itertools.product(range(5), repeat=2):
                rad = relative_angle_data(orientations[i], orientations[k], points[j], points[l])
                total += alpha[i, j] * alpha[k, l] * cross_gram_entry(self.params, rad, points[j], points[l])
        assert total == pytest.approx(self.coeffs.hilbert_norm_sq(self.dense), rel=1e-10)


class TestRmse:
    """Test image error over the disk"""

    def test_constant_offset(self):
        """Test RMSE of a constant shift inside the mask"""
        truth = ImageRaster.blank(8).with_values(np.full((8, 8), 2.0))
        recon = ImageRaster.blank(8).with_values(np.full((8, 8), 2.5))
        assert rmse(recon, truth) == pytest.approx(0.5)
        assert rmse(truth, truth) == 0.0

    def test_size_mismatch(self):
        """Test rasters of different sizes"""
        with pytest.raises(InvalidArgumentError):
            rmse(ImageRaster.blank(8), ImageRaster.blank(9))
