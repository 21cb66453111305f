"""
Tests for hyperparameter tuning and the benchmark sweeps
"""

import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.append(str(Path(__file__).parent.parent / 'app'))

from benchmark import BenchmarkRunner, save_table, tune_hyperparameters
from data import make_angle_grid, make_mesh, shepp_logan, simulate_sinogram
from recon import rasterize_phantom
from utils import InvalidArgumentError


class TestTuning:
    """Test the (gamma, nu) grid search"""

    def setup_method(self):
        """Setup test fixtures"""
        self.sino = simulate_sinogram(shepp_logan(), make_angle_grid("random", 4, seed=1), make_mesh(10),
                                      sigma=1.0, seed=1, unit_scale=5.0)
        self.truth = rasterize_phantom(shepp_logan(), 12)

    def test_table_shapes(self):
        """Test one row per pair and one best row per gamma"""
        result = tune_hyperparameters(self.sino, self.truth, [4.0, 16.0], [0.01, 0.1, 1.0], workers=2)
        assert len(result.table) == 6
        assert list(result.best_per_gamma["gamma"]) == [4.0, 16.0]
        assert result.rmse_opt == pytest.approx(result.table["rmse"].min())
        assert result.gamma_opt in (4.0, 16.0)
        assert result.nu_opt in (0.01, 0.1, 1.0)

    def test_invalid_grids(self):
        """Test empty grids and nonpositive penalties"""
        with pytest.raises(InvalidArgumentError):
            tune_hyperparameters(self.sino, self.truth, [], [0.1])
        with pytest.raises(InvalidArgumentError):
            tune_hyperparameters(self.sino, self.truth, [4.0], [0.0])


class TestBenchmarkRunner:
    """Test the seeded sweeps"""

    def setup_method(self):
        """Setup test fixtures"""
        self.runner = BenchmarkRunner(n_angles=4, n_mesh=10, raster_side=12, workers=2)

    def test_mc_rows(self):
        """Test |sigma| * |lambda| * mc * (1 + |gamma|) rows"""
        table = self.runner.run_mc([0.0, 1.0], [0.5], [4.0, 16.0], [0.1, 1.0], mc=2, seed=3)
        assert len(table) == 12
        assert set(table["method"]) == {"fbp", "kr"}
        assert list(table.columns) == ["config_hash", "setup", "sigma", "lambda", "rep", "seed", "workers",
                                       "method", "gamma", "nu", "rmse", "seconds"]
        assert sorted(table["seed"].unique()) == [3, 4]
        assert table["config_hash"].nunique() == 1

    def test_mc_deterministic(self):
        """Test reruns with the same seed reproduce the errors"""
        first = self.runner.run_mc([1.0], [0.0], [8.0], [0.1], mc=2, seed=0)
        second = self.runner.run_mc([1.0], [0.0], [8.0], [0.1], mc=2, seed=0)
        assert np.array_equal(first["rmse"].to_numpy(), second["rmse"].to_numpy())

    def test_scenario_rows(self):
        """Test FBP, per-gamma and optimum rows for every grid"""
        table = self.runner.run_scenarios([1.0], ["random", "equiangular_half"], [4.0, 16.0], [0.1, 1.0])
        assert len(table) == 8
        optimum = table[table["method"] == "kr_opt"]
        assert list(optimum["grid"]) == ["random", "equiangular_half"]
        per_gamma = table[table["method"] == "kr"]
        for grid, best in zip(optimum["grid"], optimum["rmse"]):
            assert best == pytest.approx(per_gamma[per_gamma["grid"] == grid]["rmse"].min())

    def test_save_table(self, tmp_path):
        """Test the CSV keeps every row"""
        table = self.runner.run_scenarios([0.0], ["random"], [4.0], [0.1])
        path = save_table(table, tmp_path / "out" / "bench.csv")
        assert len(pd.read_csv(path)) == len(table)
