"""
Tests for Gram assembly, layouts, spectra and the binary cache
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.append(str(Path(__file__).parent.parent / 'app'))

from data import DetectorMesh, make_angle_grid, make_mesh
from geometry import Orientation
from gram import (
    GramLayout, GramMatrix, assemble_circulant, assemble_dense, grids_match, load_gram, save_gram,
    smallest_nonzero_eigenvalue,
)
from kernels import GaussianKernelParams, converged_gram_oracle, induced_kernel
from utils import DataFormatError, InvalidArgumentError, RankZeroError


class TestDenseAssembly:
    """Test the dense Gram matrix"""

    def setup_method(self):
        """Setup test fixtures"""
        self.params = GaussianKernelParams(gamma=32.0, dim=2)
        self.grid = make_angle_grid("random", 5, seed=3)
        self.mesh = make_mesh(6)
        self.W = assemble_dense(self.params, self.grid, self.mesh, workers=2)

    def test_shape_and_symmetry(self):
        """Test NM x NM shape and exact symmetry"""
        dense = self.W.expand()
        assert dense.shape == (30, 30)
        assert np.array_equal(dense, dense.T)

    def test_positive_semidefinite(self):
        """Test the spectrum is nonnegative up to roundoff"""
        values = np.linalg.eigvalsh(self.W.expand())
        assert values[0] >= -1e-10 * values[-1]

    def test_diagonal_block_is_induced_kernel(self):
        """Test same-angle blocks equal K~ on the mesh"""
        points = self.mesh.points
        expected = induced_kernel(self.params, points[:, None, :], points[None, :, :])
        assert np.allclose(self.W.expand()[:6, :6], expected, rtol=1e-13, atol=0.0)

    def test_global_shift_invariance(self):
        """Test entries depend only on angle differences"""
        shifted = [Orientation.from_angle(a + 0.77) for a in self.grid.angles]
        other = assemble_dense(self.params, shifted, self.mesh, workers=2)
        assert np.allclose(other.expand(), self.W.expand(), rtol=0.0, atol=1e-13)

    def test_boundary_mesh_rejected(self):
        """Test that boundary mesh points need allow_boundary"""
        mesh = DetectorMesh(points=np.array([[-1.0], [0.0], [1.0]]))
        with pytest.raises(InvalidArgumentError):
            assemble_dense(self.params, self.grid, mesh)
        W = assemble_dense(self.params, self.grid, mesh, allow_boundary=True)
        assert np.all(W.expand()[0, :] == 0.0)

    def test_matvec(self):
        """Test W alpha keeps the coefficient shape"""
        alpha = np.arange(30, dtype=float).reshape(5, 6)
        product = self.W.matvec(alpha)
        assert product.shape == (5, 6)
        assert np.allclose(product.ravel(), self.W.expand() @ alpha.ravel())


class TestQuadratureAgreement:
    """Test assembled entries against tensor Gauss-Legendre quadrature"""

    @pytest.mark.parametrize("gamma", [1.0, 2.0 ** 5])
    def test_entries_match_oracle(self, gamma):
        """Test every entry of a 3-angle, 4-point Gram within 1e-6"""
        params = GaussianKernelParams(gamma=gamma, dim=2)
        grid = make_angle_grid("random", 3, seed=6)
        mesh = make_mesh(4)
        dense = assemble_dense(params, grid, mesh, workers=2).expand()
        orientations = grid.orientations()
        for row in range(12):
            for col in range(row, 12):
                i, j = divmod(row, 4)
                k, l = divmod(col, 4)
                oracle, _ = converged_gram_oracle(params, orientations[i], orientations[k], mesh.points[j],
                                                  mesh.points[l], order=64, panels=2, max_order=512)
                assert dense[row, col] == pytest.approx(oracle, abs=1e-6)


class TestCirculantAssembly:
    """Test the block-circulant layout"""

    def setup_method(self):
        """Setup test fixtures"""
        self.params = GaussianKernelParams(gamma=32.0, dim=2)
        self.mesh = make_mesh(5)

    @pytest.mark.parametrize("n_angles", [4, 7])
    def test_matches_dense(self, n_angles):
        """Test expand() against dense assembly on the full-circle grid"""
        circulant = assemble_circulant(self.params, n_angles, self.mesh, workers=2)
        dense = assemble_dense(self.params, make_angle_grid("equiangular_full", n_angles), self.mesh, workers=2)
        assert circulant.layout == GramLayout.CIRCULANT
        assert np.allclose(circulant.expand(), dense.expand(), rtol=0.0, atol=1e-12)

    def test_fft_matvec(self):
        """Test the FFT product against the expanded matrix"""
        W = assemble_circulant(self.params, 6, self.mesh, workers=2)
        alpha = np.random.default_rng(2).standard_normal((6, 5))
        assert np.allclose(W.matvec(alpha).ravel(), W.expand() @ alpha.ravel(), atol=1e-12)

    def test_frequency_blocks_hermitian(self):
        """Test W^_k is Hermitian for every frequency"""
        W = assemble_circulant(self.params, 6, self.mesh, workers=2)
        for block in W.frequency_blocks():
            assert np.allclose(block, block.conj().T, atol=1e-12)

    def test_frequency_blocks_need_circulant(self):
        """Test dense Grams have no frequency blocks"""
        W = GramMatrix.from_dense(np.eye(4))
        with pytest.raises(InvalidArgumentError):
            W.frequency_blocks()


class TestSpectrum:
    """Test the stability constant d"""

    def test_smallest_nonzero(self):
        """Test d skips numerically zero eigenvalues"""
        W = GramMatrix.from_dense(np.diag([0.0, 1e-14, 0.5, 2.0]))
        d, spectrum = smallest_nonzero_eigenvalue(W)
        assert d == pytest.approx(0.5)
        assert spectrum.size == 4

    def test_boundary_rows_ignored(self):
        """Test zero rows from boundary mesh points leave d of the interior submatrix"""
        params = GaussianKernelParams(gamma=8.0, dim=2)
        grid = make_angle_grid("random", 3, seed=4)
        mesh = DetectorMesh(points=np.array([[-1.0], [-0.3], [0.4], [1.0]]))
        W = assemble_dense(params, grid, mesh, allow_boundary=True)
        interior = [i * 4 + j for i in range(3) for j in (1, 2)]
        dense = W.expand()
        d, spectrum = smallest_nonzero_eigenvalue(W)
        d_interior, _ = smallest_nonzero_eigenvalue(GramMatrix.from_dense(dense[np.ix_(interior, interior)]))
        assert np.count_nonzero(np.abs(spectrum) <= 1e-14 * spectrum[-1]) >= 6
        assert d == pytest.approx(d_interior, rel=1e-8)

    def test_rank_zero(self):
        """Test the all-zero Gram"""
        with pytest.raises(RankZeroError):
            smallest_nonzero_eigenvalue(GramMatrix.from_dense(np.zeros((3, 3))))

    def test_circulant_spectrum(self):
        """Test circulant and dense spectra agree"""
        params = GaussianKernelParams(gamma=8.0, dim=2)
        W = assemble_circulant(params, 4, make_mesh(3), workers=1)
        d_circ, spec_circ = smallest_nonzero_eigenvalue(W)
        d_dense, spec_dense = smallest_nonzero_eigenvalue(GramMatrix.from_dense(W.expand(), n_angles=4))
        assert np.allclose(spec_circ, spec_dense, atol=1e-12)
        assert d_circ == pytest.approx(d_dense, rel=1e-8)


class TestGramCache:
    """Test the binary cache format"""

    def setup_method(self):
        """Setup test fixtures"""
        self.params = GaussianKernelParams(gamma=16.0, dim=2)
        self.grid = make_angle_grid("random", 3, seed=1)
        self.mesh = make_mesh(4)

    def test_dense_roundtrip(self, tmp_path):
        """Test a dense cache restores matrix and grids"""
        W = assemble_dense(self.params, self.grid, self.mesh)
        path = save_gram(W, tmp_path / "gram.bin")
        loaded = load_gram(path)
        assert np.array_equal(loaded.expand(), W.expand())
        assert loaded.kernel_params == self.params
        assert grids_match(loaded, self.grid.orientations(), self.mesh)

    def test_circulant_roundtrip(self, tmp_path):
        """Test a circulant cache keeps its layout"""
        W = assemble_circulant(self.params, 4, self.mesh)
        loaded = load_gram(save_gram(W, tmp_path / "gram.bin"))
        assert loaded.is_circulant
        assert np.array_equal(loaded.blocks, W.blocks)

    def test_grids_mismatch(self):
        """Test grids_match rejects other angles"""
        W = assemble_dense(self.params, self.grid, self.mesh)
        other = make_angle_grid("random", 3, seed=2)
        assert not grids_match(W, other.orientations(), self.mesh)
        assert not grids_match(W, self.grid.orientations(), make_mesh(5))

    def test_truncated_cache(self, tmp_path):
        """Test truncated files"""
        path = save_gram(assemble_dense(self.params, self.grid, self.mesh), tmp_path / "gram.bin")
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(DataFormatError):
            load_gram(path)

    def test_bad_magic(self, tmp_path):
        """Test files that are not Gram caches"""
        path = tmp_path / "gram.bin"
        path.write_bytes(b"NOTAGRAM" + bytes(64))
        with pytest.raises(DataFormatError):
            load_gram(path)
