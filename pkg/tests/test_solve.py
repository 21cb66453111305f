"""
Tests for Tikhonov, MLE and block-circulant solves and the factorization cache
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.append(str(Path(__file__).parent.parent / 'app'))

from data import make_angle_grid, make_mesh, shepp_logan, simulate_sinogram
from gram import GramMatrix, assemble_circulant, assemble_dense, save_gram
from kernels import GaussianKernelParams
from solve import (
    CirculantFactorization, EigenFactorization, Provenance, eigen_factorize, empirical_risk,
    factorize_circulant, load_factorization, minimum_empirical_risk, save_factorization, solve,
    solve_circulant, solve_mle, solve_tikhonov,
)
from utils import InvalidArgumentError, NumericalError


class TestTikhonov:
    """Test the penalized normal equations"""

    def setup_method(self):
        """Setup test fixtures"""
        params = GaussianKernelParams(gamma=32.0, dim=2)
        self.W = assemble_dense(params, make_angle_grid("random", 6, seed=4), make_mesh(8), workers=2)
        self.y = np.random.default_rng(5).standard_normal((6, 8))
        self.nu = 2.0 ** -7

    def test_normal_equations(self):
        """Test (W + nu I) alpha = y"""
        field = solve_tikhonov(self.W, self.y, self.nu)
        alpha = field.alpha.ravel()
        lhs = self.W.expand() @ alpha + self.nu * alpha
        assert np.allclose(lhs, self.y.ravel(), atol=1e-9)
        assert field.alpha.shape == (6, 8)
        assert field.provenance == Provenance.TIKHONOV
        assert field.residual <= 1e-8 * np.linalg.norm(self.y)

    def test_penalty_must_be_positive(self):
        """Test nu <= 0"""
        with pytest.raises(InvalidArgumentError):
            solve_tikhonov(self.W, self.y, 0.0)

    def test_observation_size(self):
        """Test mismatched observations"""
        with pytest.raises(InvalidArgumentError):
            solve_tikhonov(self.W, np.zeros(10), self.nu)

    def test_eigen_solve_matches(self):
        """Test the spectral solve against Cholesky"""
        spectrum = eigen_factorize(self.W)
        alpha = spectrum.solve(self.y.ravel(), self.nu)
        assert np.allclose(alpha, solve_tikhonov(self.W, self.y, self.nu).alpha.ravel(), rtol=1e-8, atol=1e-10)

    def test_minimum_empirical_risk(self):
        """Test min risk = nu Y^T (W + nu I)^-1 Y at the solution"""
        field = solve_tikhonov(self.W, self.y, self.nu)
        minimum = minimum_empirical_risk(self.W, self.y, self.nu)
        assert empirical_risk(self.W, self.y, field.alpha, self.nu) == pytest.approx(minimum, rel=1e-8)
        perturbed = field.alpha + 1e-3
        assert empirical_risk(self.W, self.y, perturbed, self.nu) > minimum

    def test_linearity(self):
        """Test alpha is linear in Y"""
        y2 = np.random.default_rng(6).standard_normal(self.y.shape)
        combined = solve_tikhonov(self.W, 2.0 * self.y - y2, self.nu).alpha
        separate = 2.0 * solve_tikhonov(self.W, self.y, self.nu).alpha - solve_tikhonov(self.W, y2, self.nu).alpha
        assert np.allclose(combined, separate, rtol=1e-8, atol=1e-8)

    def test_sinogram_unit_scale(self):
        """Test sinogram input carries its unit scale"""
        grid = make_angle_grid("random", 6, seed=4)
        sino = simulate_sinogram(shepp_logan(), grid, make_mesh(8), unit_scale=4.0)
        field = solve_tikhonov(self.W, sino, self.nu)
        assert field.unit_scale == 4.0

    def test_indefinite_matrix(self):
        """Test factorization failure reports a condition estimate"""
        W = GramMatrix.from_dense(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(NumericalError) as excinfo:
            solve_tikhonov(W, np.ones(2), 0.1)
        assert excinfo.value.condition is not None


class TestMle:
    """Test the unpenalized solve"""

    def test_full_rank_interpolates(self):
        """Test Y = W alpha^0 for a well-conditioned Gram"""
        params = GaussianKernelParams(gamma=2048.0, dim=2)
        W = assemble_dense(params, make_angle_grid("equiangular_half", 3), make_mesh(4))
        y = np.random.default_rng(1).standard_normal(W.size)
        field = solve_mle(W, y)
        assert field.provenance == Provenance.MLE
        assert field.residual <= 1e-8 * np.linalg.norm(y)

    def test_rank_deficient_minimum_norm(self):
        """Test W^+ Y drops the null space"""
        W = GramMatrix.from_dense(np.diag([2.0, 0.0, 4.0]))
        field = solve_mle(W, np.array([2.0, 5.0, 8.0]))
        assert np.allclose(field.alpha.ravel(), [1.0, 0.0, 2.0])

    def test_penalized_tends_to_mle(self):
        """Test ||alpha^nu - W^+ Y|| shrinks with nu"""
        W = GramMatrix.from_dense(np.diag([1.0, 0.5, 0.25]))
        y = np.array([1.0, -1.0, 2.0])
        spectrum = eigen_factorize(W)
        mle = spectrum.solve(y, 0.0)
        distances = [np.linalg.norm(spectrum.solve(y, 10.0 ** -k) - mle) for k in range(2, 9)]
        assert all(b < a for a, b in zip(distances, distances[1:]))

    def test_dispatcher(self):
        """Test solve() routes by penalty and layout"""
        params = GaussianKernelParams(gamma=32.0, dim=2)
        mesh = make_mesh(4)
        dense = assemble_dense(params, make_angle_grid("equiangular_full", 4), mesh)
        circulant = assemble_circulant(params, 4, mesh)
        y = np.ones((4, 4))
        assert solve(dense, y, 0.0).provenance == Provenance.MLE
        assert solve(dense, y, 0.1).provenance == Provenance.TIKHONOV
        assert solve(circulant, y, 0.1).provenance == Provenance.CIRCULANT
        with pytest.raises(InvalidArgumentError):
            solve(dense, y, -1.0)


class TestCirculantSolve:
    """Test the FFT block-diagonal solve"""

    def setup_method(self):
        """Setup test fixtures"""
        self.params = GaussianKernelParams(gamma=32.0, dim=2)
        self.nu = 2.0 ** -7

    @pytest.mark.parametrize("n_angles,n_mesh", [(4, 8), (16, 8), (5, 6)])
    def test_matches_dense(self, n_angles, n_mesh):
        """Test circulant coefficients equal dense coefficients to 1e-8"""
        mesh = make_mesh(n_mesh)
        y = np.random.default_rng(n_angles).standard_normal((n_angles, n_mesh))
        fast = solve_circulant(assemble_circulant(self.params, n_angles, mesh), y, self.nu)
        dense = assemble_dense(self.params, make_angle_grid("equiangular_full", n_angles), mesh)
        slow = solve_tikhonov(dense, y, self.nu)
        assert np.linalg.norm(fast.alpha - slow.alpha) <= 1e-8 * np.linalg.norm(slow.alpha)
        assert fast.provenance == Provenance.CIRCULANT

    def test_reuses_factorization(self):
        """Test a precomputed factorization gives the same answer"""
        W = assemble_circulant(self.params, 8, make_mesh(6))
        y = np.random.default_rng(3).standard_normal((8, 6))
        factorization = factorize_circulant(W, self.nu, workers=2)
        assert np.allclose(solve_circulant(W, y, self.nu, factorization).alpha,
                           solve_circulant(W, y, self.nu).alpha, atol=1e-12)

    def test_needs_circulant_layout(self):
        """Test dense Grams are rejected"""
        W = GramMatrix.from_dense(np.eye(4), n_angles=2)
        with pytest.raises(InvalidArgumentError):
            solve_circulant(W, np.ones(4), self.nu)
        with pytest.raises(InvalidArgumentError):
            factorize_circulant(W, self.nu)


class TestFactorizationCache:
    """Test the cache section that follows the Gram payload"""

    def test_eigen_roundtrip(self, tmp_path):
        """Test the eigendecomposition survives the cache"""
        params = GaussianKernelParams(gamma=16.0, dim=2)
        W = assemble_dense(params, make_angle_grid("random", 3, seed=2), make_mesh(4))
        path = save_factorization(W, eigen_factorize(W), tmp_path / "gram.bin")
        loaded, factorization = load_factorization(path)
        assert isinstance(factorization, EigenFactorization)
        y = np.arange(12, dtype=float)
        assert np.allclose(factorization.solve(y, 0.01), solve_tikhonov(W, y, 0.01).alpha.ravel(), atol=1e-8)
        assert np.array_equal(loaded.expand(), W.expand())

    def test_circulant_roundtrip(self, tmp_path):
        """Test per-frequency factors survive the cache"""
        params = GaussianKernelParams(gamma=16.0, dim=2)
        W = assemble_circulant(params, 4, make_mesh(5))
        path = save_factorization(W, factorize_circulant(W, 0.05), tmp_path / "gram.bin")
        loaded, factorization = load_factorization(path)
        assert isinstance(factorization, CirculantFactorization)
        assert factorization.nu == 0.05
        y = np.ones((4, 5))
        assert np.allclose(solve_circulant(loaded, y, 0.05, factorization).alpha,
                           solve_circulant(W, y, 0.05).alpha, atol=1e-12)

    def test_plain_cache_has_no_factorization(self, tmp_path):
        """Test caches without the extra section"""
        params = GaussianKernelParams(gamma=16.0, dim=2)
        W = assemble_dense(params, make_angle_grid("random", 2, seed=2), make_mesh(3))
        _, factorization = load_factorization(save_gram(W, tmp_path / "gram.bin"))
        assert factorization is None
