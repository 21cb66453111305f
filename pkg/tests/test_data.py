"""
Tests for phantoms, analytic sinograms, grids, noise and file formats
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

sys.path.append(str(Path(__file__).parent.parent / 'app'))

from data import (
    SHEPP_LOGAN_TABLE, AngleGrid, DataLoader, DetectorMesh, Ellipse, Phantom, Sinogram, chord_length, draw_noise,
    make_angle_grid, make_mesh, point_source_phantom, shepp_logan, simulate_sinogram, unit_disk_phantom,
)
from recon import rasterize_phantom, raster_line_integral
from utils import DataFormatError, InvalidArgumentError


class TestPhantoms:
    """Test ellipse phantoms and exact line integrals"""

    def test_unit_disk_chords(self):
        """Test chord length 2 sqrt(1 - x^2) through the unit disk"""
        phantom = unit_disk_phantom()
        for angle, offset in [(0.0, 0.0), (1.3, 0.6), (4.0, -0.9)]:
            assert chord_length(phantom, angle, offset) == pytest.approx(2.0 * np.sqrt(1.0 - offset ** 2), rel=1e-12)
        assert chord_length(phantom, 0.5, 1.0) == 0.0

    def test_off_center_circle(self):
        """Test chords of a shifted circle through the detector coordinate of its center"""
        phantom = Phantom(ellipses=[Ellipse(center=(0.3, -0.2), semi_axes=(0.4, 0.4))])
        angle, offset = 0.9, 0.1
        center_offset = 0.3 * np.cos(angle) + 0.2 * np.sin(angle)
        distance = offset - center_offset
        expected = 2.0 * np.sqrt(0.16 - distance ** 2)
        assert chord_length(phantom, angle, offset) == pytest.approx(expected, rel=1e-12)

    def test_rotated_ellipse_chord(self):
        """Test a rotated ellipse against ray sampling"""
        ellipse = Ellipse(center=(0.1, 0.2), semi_axes=(0.5, 0.2), rotation=0.6)
        angle, offset = 0.4, 0.15
        t = np.linspace(-1.0, 1.0, 200001)
        ray = np.stack([offset * np.cos(angle) + t * np.sin(angle), -offset * np.sin(angle) + t * np.cos(angle)], axis=1)
        sampled = np.count_nonzero(ellipse.contains(ray)) * (t[1] - t[0])
        exact = ellipse.chord_length(np.array([angle]), np.array([offset]))[0, 0]
        assert exact == pytest.approx(sampled, abs=5e-5)

    def test_shepp_logan_center_value(self):
        """Test the modified phantom value at the origin"""
        assert shepp_logan().evaluate(np.array([0.0, 0.0])) == pytest.approx(2.0)

    def test_symmetric_ellipses_give_symmetric_projection(self):
        """Test x -> -x symmetry of the centered, unrotated ellipses"""
        ellipses = [Ellipse(center=(x0, y0), semi_axes=(a, b), intensity=amp)
                    for amp, a, b, x0, y0, deg in SHEPP_LOGAN_TABLE if x0 == 0.0 and deg == 0.0]
        phantom = Phantom(ellipses=ellipses, scale=10.0)
        offsets = np.linspace(-0.95, 0.95, 39)
        values = phantom.line_integrals(np.array([0.0]), offsets)[0]
        assert np.allclose(values, values[::-1], atol=1e-12)

    def test_ellipse_outside_disk(self):
        """Test phantoms must stay inside the unit disk"""
        with pytest.raises(ValidationError):
            Phantom(ellipses=[Ellipse(center=(0.8, 0.0), semi_axes=(0.5, 0.5))])

    def test_point_source_sinusoid(self):
        """Test the peak detector tracks 0.5 cos(phi)"""
        phantom = point_source_phantom(center=(0.5, 0.0), radius=0.02)
        grid = make_angle_grid("equiangular_full", 12)
        mesh = make_mesh(200)
        sino = simulate_sinogram(phantom, grid, mesh)
        peaks = mesh.offsets()[np.argmax(sino.values, axis=1)]
        assert np.allclose(peaks, 0.5 * np.cos(grid.as_array()), atol=0.0051)


class TestGrids:
    """Test angle grids and detector meshes"""

    def test_equiangular(self):
        """Test half- and full-circle grids"""
        half = make_angle_grid("equi", 4)
        full = make_angle_grid("full", 4)
        assert np.allclose(half.as_array(), np.pi * np.arange(4) / 4)
        assert np.allclose(full.as_array(), 2.0 * np.pi * np.arange(4) / 4)
        assert full.is_full_circle()
        assert not half.is_full_circle()

    def test_random_grid(self):
        """Test random grids are sorted, in [0, pi) and reproducible"""
        grid = make_angle_grid("random", 40, seed=9)
        angles = grid.as_array()
        assert np.all(np.diff(angles) >= 0.0)
        assert angles.min() >= 0.0 and angles.max() < np.pi
        assert grid.angles == make_angle_grid("random", 40, seed=9).angles
        assert grid.angles != make_angle_grid("random", 40, seed=10).angles

    def test_lambda_endpoints(self):
        """Test lambda = 1 is equiangular and lambda = 0 is random"""
        assert np.allclose(make_angle_grid("lambda", 8, lam=1.0).as_array(), np.pi * np.arange(8) / 8)
        assert make_angle_grid("lambda", 8, lam=0.0, seed=3).angles == make_angle_grid("random", 8, seed=3).angles

    def test_lambda_validation(self):
        """Test lambda outside [0, 1] and unknown kinds"""
        with pytest.raises(InvalidArgumentError):
            make_angle_grid("lambda", 8, lam=1.5)
        with pytest.raises(InvalidArgumentError):
            make_angle_grid("lambda", 8)
        with pytest.raises(InvalidArgumentError):
            make_angle_grid("spiral", 8)

    def test_cell_centered_mesh(self):
        """Test x_j = -1 + (2j - 1)/M"""
        assert np.allclose(make_mesh(4).offsets(), [-0.75, -0.25, 0.25, 0.75])

    def test_spatial_mesh(self):
        """Test n = 3 meshes stay strictly inside the disk"""
        mesh = make_mesh(6, dim=3)
        assert mesh.dim == 3
        assert mesh.max_norm < 1.0
        with pytest.raises(InvalidArgumentError):
            mesh.offsets()

    def test_mesh_outside_ball(self):
        """Test mesh points beyond the ball"""
        with pytest.raises(InvalidArgumentError):
            DetectorMesh(points=np.array([0.0, 1.5]))


class TestSimulation:
    """Test sinogram simulation and seeded noise"""

    def setup_method(self):
        """Setup test fixtures"""
        self.grid = make_angle_grid("random", 5, seed=1)
        self.mesh = make_mesh(8)

    def test_noiseless_matches_raster_ray_integrals(self):
        """Test sigma = 0 against ray-marching a fine rasterization of the phantom"""
        phantom = shepp_logan(scale=1.0)
        raster = rasterize_phantom(phantom, 800)
        grid = AngleGrid(angles=[0.2, 1.1, 2.5, 4.0], kind="random")
        mesh = DetectorMesh(points=np.array([-0.45, 0.0, 0.3, 0.62]))
        sino = simulate_sinogram(phantom, grid, mesh)
        for i, angle in enumerate(grid.angles):
            for j, offset in enumerate(mesh.offsets()):
                assert sino.values[i, j] == pytest.approx(raster_line_integral(raster, angle, offset), abs=2e-2)

    def test_unit_scale(self):
        """Test the unit scale multiplies the projections"""
        unit = simulate_sinogram(shepp_logan(), self.grid, self.mesh)
        scaled = simulate_sinogram(shepp_logan(), self.grid, self.mesh, unit_scale=4.0)
        assert np.allclose(scaled.values, 4.0 * unit.values, rtol=1e-14, atol=0.0)

    def test_superposition(self):
        """Test the sinogram of a sum of phantoms is the sum of their sinograms"""
        first = shepp_logan(scale=1.0)
        second = Phantom(ellipses=[Ellipse(center=(0.3, -0.2), semi_axes=(0.4, 0.15), rotation=0.7,
                                           intensity=2.5)])
        both = Phantom(ellipses=first.ellipses + second.ellipses)
        total = simulate_sinogram(both, self.grid, self.mesh).values
        parts = simulate_sinogram(first, self.grid, self.mesh).values + \
            simulate_sinogram(second, self.grid, self.mesh).values
        assert np.allclose(total, parts, rtol=0.0, atol=1e-12)

    def test_noise_reproducible(self):
        """Test identical seeds replay and different seeds differ"""
        a = simulate_sinogram(shepp_logan(), self.grid, self.mesh, sigma=20.0, seed=3)
        b = simulate_sinogram(shepp_logan(), self.grid, self.mesh, sigma=20.0, seed=3)
        c = simulate_sinogram(shepp_logan(), self.grid, self.mesh, sigma=20.0, seed=4)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)

    def test_noise_rows_independent_of_angle_count(self):
        """Test row i of the noise is the same however many angles follow it"""
        short = draw_noise((3, 8), 1.0, seed=9)
        long = draw_noise((7, 8), 1.0, seed=9)
        assert np.array_equal(short, long[:3])
        assert not np.array_equal(long[0], long[1])

    def test_noise_statistics(self):
        """Test sample moments of the noise"""
        noise = draw_noise((40, 50), 2.0, seed=5)
        assert abs(noise.mean()) < 0.15
        assert noise.std() == pytest.approx(2.0, rel=0.05)

    def test_negative_sigma(self):
        """Test sigma < 0"""
        with pytest.raises(InvalidArgumentError):
            simulate_sinogram(shepp_logan(), self.grid, self.mesh, sigma=-1.0)

    def test_shape_mismatch(self):
        """Test values that do not match the grids"""
        with pytest.raises(DataFormatError):
            Sinogram(values=np.zeros((4, 8)), angle_grid=self.grid, mesh=self.mesh)


class TestDataLoader:
    """Test sinogram CSV and phantom JSON files"""

    def setup_method(self):
        """Setup test fixtures"""
        grid = make_angle_grid("lambda", 4, lam=0.5, seed=2)
        self.sino = simulate_sinogram(shepp_logan(), grid, make_mesh(6), sigma=1.0, seed=2, unit_scale=3.0,
                                      config_hash="0123456789abcdef")

    def test_sinogram_roundtrip(self, tmp_path):
        """Test values and header survive the CSV"""
        path = DataLoader.save_sinogram(self.sino, tmp_path / "sino.csv")
        loaded = DataLoader.load_sinogram(path)
        assert np.array_equal(loaded.values, self.sino.values)
        assert loaded.angle_grid.angles == self.sino.angle_grid.angles
        assert loaded.angle_grid.kind == "lambda_mix"
        assert loaded.angle_grid.lam == 0.5
        assert loaded.unit_scale == 3.0
        assert loaded.config_hash == "0123456789abcdef"

    def test_sinogram_bytes_deterministic(self, tmp_path):
        """Test identical sinograms give identical files"""
        first = DataLoader.save_sinogram(self.sino, tmp_path / "a.csv").read_bytes()
        second = DataLoader.save_sinogram(self.sino, tmp_path / "b.csv").read_bytes()
        assert first == second

    def test_missing_header(self, tmp_path):
        """Test files without grid headers"""
        path = tmp_path / "bad.csv"
        path.write_text("1,2,3\n4,5,6\n", encoding='utf-8')
        with pytest.raises(DataFormatError):
            DataLoader.load_sinogram(path)

    def test_malformed_rows(self, tmp_path):
        """Test non-numeric rows"""
        path = tmp_path / "bad.csv"
        path.write_text("# angles: 0,1\n# mesh: -0.5,0.5\n# sigma: 0\n# seed: 0\nx,y\n1,2\n", encoding='utf-8')
        with pytest.raises(DataFormatError):
            DataLoader.load_sinogram(path)

    def test_dimension_mismatch(self, tmp_path):
        """Test row counts that disagree with the header"""
        path = tmp_path / "bad.csv"
        path.write_text("# angles: 0,1\n# mesh: -0.5,0.5\n# sigma: 0\n# seed: 0\n1,2\n", encoding='utf-8')
        with pytest.raises(DataFormatError):
            DataLoader.load_sinogram(path)

    def test_phantom_roundtrip(self, tmp_path):
        """Test phantom JSON tables"""
        path = DataLoader.save_phantom(shepp_logan(), tmp_path / "phantom.json")
        loaded = DataLoader.load_phantom(path)
        assert loaded == shepp_logan()

    def test_invalid_phantom_file(self, tmp_path):
        """Test schema violations"""
        path = tmp_path / "phantom.json"
        path.write_text('{"ellipses": [{"center": [0, 0], "semi_axes": [-1, 1]}]}', encoding='utf-8')
        with pytest.raises(DataFormatError):
            DataLoader.load_phantom(path)
