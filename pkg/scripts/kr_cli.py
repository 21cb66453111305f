"""
Command-line interface for Kernel CT Reconstruction
Phantoms, sinograms, Gram caches, reconstructions, benchmark sweeps and
the verification suite
"""

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

sys.path.append(str(Path(__file__).parent.parent / 'app'))

from baseline_fbp import FbpConfig, fbp_reconstruct
from benchmark import BenchmarkRunner, save_table
from data import DataLoader, Phantom, Sinogram, make_angle_grid, make_mesh, shepp_logan, simulate_sinogram
from gram import WORKERS, GramMatrix, assemble_circulant, assemble_dense, grids_match, save_gram
from kernels import GaussianKernelParams
from recon import evaluate_reconstruction, interpolate_sinogram_grid, rasterize_phantom, save_raster, \
    save_raster_csv
from analysis import rmse
from solve import CirculantFactorization, EigenFactorization, eigen_factorize, factorize_circulant, \
    load_factorization, save_factorization, solve_circulant, solve_mle, solve_tikhonov
from utils import DataFormatError, InvalidArgumentError, KernelCTError, NumericalError, RunConfig, \
    ValueParser, VerificationError, config
from verification import VerificationSuite

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    """Bad command line"""


class KernelCTArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; route it to the usage exit code instead"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _number(text: str) -> float:
    try:
        return ValueParser.parse_number(text)
    except InvalidArgumentError as e:
        raise argparse.ArgumentTypeError(str(e))


def _numbers(text: str) -> List[float]:
    try:
        return ValueParser.parse_list(text)
    except InvalidArgumentError as e:
        raise argparse.ArgumentTypeError(str(e))


class ReconstructionCLI:
    """Runs one command per invocation; each run_* method returns nothing and raises library errors"""

    def __init__(self, workers: Optional[int] = None):
        self.workers = workers or WORKERS

    @staticmethod
    def _load_phantom(path: Optional[str]) -> Phantom:
        return DataLoader.load_phantom(path) if path else shepp_logan()

    @staticmethod
    def _unit_scale(unit: str, n_mesh: int) -> float:
        return n_mesh / 2.0 if unit == "pixel" else 1.0

    def run_phantom(self, size: int, out: str, phantom_path: Optional[str] = None,
                    table_out: Optional[str] = None):
        """Rasterize a phantom and write it"""
        phantom = self._load_phantom(phantom_path)
        run = RunConfig(command="phantom", params={"size": size, "phantom": phantom.model_dump()})
        print(f"🔄 Rasterizing {phantom.name} at {size}x{size}")
        raster = rasterize_phantom(phantom, size)
        for path in save_raster(raster, out, run.config_hash):
            print(f"✅ Wrote {path}")
        if table_out:
            print(f"✅ Wrote {DataLoader.save_phantom(phantom, table_out)}")

    def run_sinogram(self, n_angles: int, n_mesh: int, grid: str, lam: Optional[float], sigma: float,
                     seed: int, unit: str, out: str, phantom_path: Optional[str] = None):
        """Simulate a noisy sinogram of a phantom"""
        phantom = self._load_phantom(phantom_path)
        unit_scale = self._unit_scale(unit, n_mesh)
        run = RunConfig(command="sinogram", params={
            "n": n_angles, "m": n_mesh, "grid": grid, "lambda": lam, "sigma": sigma, "seed": seed,
            "unit_scale": unit_scale, "phantom": phantom.model_dump(),
        })
        print(f"🔄 Simulating {n_angles}x{n_mesh} sinogram ({grid}, sigma={sigma:g}, seed={seed})")
        angle_grid = make_angle_grid(grid, n_angles, lam, seed)
        sino = simulate_sinogram(phantom, angle_grid, make_mesh(n_mesh), sigma=sigma, seed=seed,
                                 unit_scale=unit_scale, config_hash=run.config_hash)
        print(f"✅ Wrote {DataLoader.save_sinogram(sino, out)}")

    def _assemble(self, params: GaussianKernelParams, sino: Sinogram, circulant: bool) -> GramMatrix:
        if circulant:
            if not sino.angle_grid.is_full_circle():
                raise InvalidArgumentError("the circulant layout needs a full-circle equiangular grid")
            return assemble_circulant(params, sino.angle_grid.n_angles, sino.mesh, workers=self.workers)
        return assemble_dense(params, sino.angle_grid, sino.mesh, workers=self.workers)

    def run_gram(self, gamma: float, layout: str, out: str, sino_path: Optional[str] = None,
                 n_angles: int = 40, n_mesh: int = 100, grid: str = "random", lam: Optional[float] = None,
                 seed: int = 0, nu: Optional[float] = None):
        """Assemble W on a sinogram's grids (or fresh ones) and cache it, optionally with a factorization"""
        if sino_path:
            sino = DataLoader.load_sinogram(sino_path)
        else:
            angle_grid = make_angle_grid(grid, n_angles, lam, seed)
            mesh = make_mesh(n_mesh)
            sino = Sinogram(values=np.zeros((angle_grid.n_angles, mesh.n_mesh)), angle_grid=angle_grid, mesh=mesh)
        run = RunConfig(command="gram", params={
            "gamma": gamma, "layout": layout, "angles": sino.angle_grid.angles,
            "mesh": sino.mesh.offsets().tolist(), "nu": nu,
        })
        print(f"🔄 Assembling {layout} Gram (N={sino.shape[0]}, M={sino.shape[1]}, gamma={gamma:g})")
        W = self._assemble(GaussianKernelParams(gamma=gamma, dim=2), sino, layout == "circulant")
        W = dataclasses.replace(W, config_hash=run.config_hash)
        if nu is None:
            path = save_gram(W, out)
        elif W.is_circulant:
            path = save_factorization(W, factorize_circulant(W, nu, self.workers), out)
        else:
            path = save_factorization(W, eigen_factorize(W), out)
        print(f"✅ Wrote {path}")

    def _gram_for(self, sino: Sinogram, gamma: float, circulant: bool, cache: Optional[str]):
        """W and any cached factorization, reusing the cache when its grids match the sinogram"""
        if cache and Path(cache).exists():
            W, factorization = load_factorization(cache)
            if not grids_match(W, sino.orientations(), sino.mesh):
                raise DataFormatError(f"{cache}: cached grids do not match the sinogram")
            if W.kernel_params.gamma != gamma:
                logger.warning(f"Cached gamma {W.kernel_params.gamma:g} overrides requested {gamma:g}")
            if circulant and not W.is_circulant:
                raise DataFormatError(f"{cache}: cache holds a dense Gram, --circulant needs the circulant layout")
            print(f"📊 Loaded Gram cache {cache}")
            return W, factorization
        W = self._assemble(GaussianKernelParams(gamma=gamma, dim=2), sino, circulant)
        if cache:
            save_gram(W, cache)
            print(f"💾 Cached Gram to {cache}")
        return W, None

    def run_reconstruct(self, method: str, sino_path: str, size: int, out: str, gamma: float, nu: float,
                        circulant: bool = False, cache: Optional[str] = None, phantom_path: Optional[str] = None,
                        interp_angles: Optional[int] = None, interp_out: Optional[str] = None,
                        error_out: Optional[str] = None, padding: int = 2):
        """Reconstruct a sinogram by kernel regression or FBP and report RMSE against the phantom"""
        sino = DataLoader.load_sinogram(sino_path)
        print(f"🔄 Reconstructing {sino_path} with {method.upper()}")
        start = time.perf_counter()
        W = factorization = None
        if method != "fbp":
            W, factorization = self._gram_for(sino, gamma, circulant, cache)
            gamma = W.kernel_params.gamma
        run = RunConfig(command="reconstruct", params={
            "method": method, "sino": sino.config_hash, "size": size, "gamma": gamma, "nu": nu,
            "circulant": circulant, "padding": padding,
        })
        if method == "fbp":
            image = fbp_reconstruct(sino, size, FbpConfig(padding=padding))
            coeffs = None
        else:
            if nu == 0.0:
                coeffs = solve_mle(W, sino, factorization=factorization
                                   if isinstance(factorization, EigenFactorization) else None)
            elif W.is_circulant:
                coeffs = solve_circulant(W, sino, nu, factorization
                                         if isinstance(factorization, CirculantFactorization) else None)
            else:
                coeffs = solve_tikhonov(W, sino, nu)
            image = evaluate_reconstruction(coeffs, size, self.workers)
        image = image.scaled(1.0 / sino.unit_scale)
        elapsed = time.perf_counter() - start

        for path in save_raster(image, out, run.config_hash):
            print(f"✅ Wrote {path}")
        truth = rasterize_phantom(self._load_phantom(phantom_path), size)
        error = rmse(image, truth)
        print(f"📊 RMSE {error:.6f} in {elapsed:.2f}s on {self.workers} workers")
        if error_out:
            residual = image.with_values(image.values - truth.values)
            print(f"✅ Wrote {save_raster_csv(residual, error_out, run.config_hash)}")

        if interp_angles:
            if coeffs is None:
                raise InvalidArgumentError("sinogram interpolation needs a kernel reconstruction")
            grid = make_angle_grid("equiangular_full", interp_angles)
            values = interpolate_sinogram_grid(coeffs, grid.orientations(), sino.mesh.points, self.workers)
            completed = Sinogram(values=values, angle_grid=grid, mesh=sino.mesh, sigma=0.0, seed=sino.seed,
                                 unit_scale=sino.unit_scale, config_hash=run.config_hash)
            target = interp_out or str(Path(sino_path).with_suffix('.interp.csv'))
            print(f"✅ Wrote {DataLoader.save_sinogram(completed, target)}")

    def run_benchmark(self, setup: str, out: str, mc: int, sigmas: List[float], lambdas: List[float],
                      gammas: List[float], nus: List[float], n_angles: int, n_mesh: int, size: int, seed: int):
        """KR-versus-FBP sweep, written as one long table"""
        runner = BenchmarkRunner(n_angles=n_angles, n_mesh=n_mesh, raster_side=size, workers=self.workers)
        print(f"🔄 Benchmark ({setup}): {len(sigmas)} noise levels, {len(gammas)} gammas x {len(nus)} penalties")
        if setup == "scenarios":
            table = runner.run_scenarios(sigmas, ["equiangular_half", "random"], gammas, nus, seed=seed)
        else:
            table = runner.run_mc(sigmas, lambdas, gammas, nus, mc=mc, seed=seed)
        path = save_table(table, out)
        print(f"✅ Wrote {len(table)} rows to {path}")
        summary = table.groupby("method")["rmse"].mean()
        for method, value in summary.items():
            print(f"📊 mean RMSE {method}: {value:.6f}")

    def run_verify(self, full: bool = False, seed: int = 0):
        """Run the oracle suite; raise on any failed check"""
        print("🔍 Kernel CT verification suite" + (" (full)" if full else ""))
        print("=" * 50)
        suite = VerificationSuite(full=full, seed=seed, workers=self.workers)
        suite.run_all()
        suite.raise_on_failure()
        print("✅ All checks passed")


def build_parser() -> argparse.ArgumentParser:
    kernel = config.get("kernel_settings", {})
    grids = config.get("grid_settings", {})
    parser = KernelCTArgumentParser(description='Kernel CT Reconstruction CLI')
    parser.add_argument('--workers', type=int, default=None, help='Thread count (default: config numerics.workers)')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=KernelCTArgumentParser)

    phantom = sub.add_parser('phantom', help='Rasterize the phantom')
    phantom.add_argument('--size', type=int, default=256, help='Raster side in pixels (default: 256)')
    phantom.add_argument('--out', required=True, help='Output path(s), .pgm and/or .csv, comma-separated')
    phantom.add_argument('--phantom', help='Phantom JSON table (default: modified Shepp-Logan)')
    phantom.add_argument('--table-out', help='Also write the phantom table as JSON')

    sinogram = sub.add_parser('sinogram', help='Simulate a sinogram')
    sinogram.add_argument('--n', type=int, default=grids.get("n_angles", 40), help='Number of angles')
    sinogram.add_argument('--m', type=int, default=grids.get("n_mesh", 100), help='Number of detector points')
    sinogram.add_argument('--grid', default=grids.get("grid", "random"),
                          choices=['equi', 'full', 'random', 'lambda', 'equiangular_half', 'equiangular_full',
                                   'lambda_mix'])
    sinogram.add_argument('--lambda', dest='lam', type=float, default=None, help='Regularity for lambda grids')
    sinogram.add_argument('--sigma', type=_number, default=0.0, help='Noise standard deviation')
    sinogram.add_argument('--seed', type=int, default=grids.get("seed", 0))
    sinogram.add_argument('--unit', choices=['pixel', 'unit'], default=grids.get("unit", "pixel"),
                          help='Line integrals in detector pixels (M/2 scale) or unit-ball lengths')
    sinogram.add_argument('--phantom', help='Phantom JSON table (default: modified Shepp-Logan)')
    sinogram.add_argument('--out', required=True)

    gram = sub.add_parser('gram', help='Assemble and cache a Gram matrix')
    gram.add_argument('--gamma', type=_number, default=kernel.get("gamma", 2048.0))
    gram.add_argument('--layout', choices=['dense', 'circulant'], default='dense')
    gram.add_argument('--sino', help='Take angle and detector grids from this sinogram')
    gram.add_argument('--n', type=int, default=grids.get("n_angles", 40))
    gram.add_argument('--m', type=int, default=grids.get("n_mesh", 100))
    gram.add_argument('--grid', default=grids.get("grid", "random"))
    gram.add_argument('--lambda', dest='lam', type=float, default=None)
    gram.add_argument('--seed', type=int, default=grids.get("seed", 0))
    gram.add_argument('--nu', type=_number, default=None, help='Also cache the factorization for this penalty')
    gram.add_argument('--out', required=True)

    recon = sub.add_parser('reconstruct', help='Reconstruct an image from a sinogram')
    recon.add_argument('method', choices=['kr', 'fbp'])
    recon.add_argument('--sino', required=True)
    recon.add_argument('--size', type=int, default=100)
    recon.add_argument('--out', required=True, help='Output path(s), .pgm and/or .csv, comma-separated')
    recon.add_argument('--gamma', type=_number, default=kernel.get("gamma", 2048.0))
    recon.add_argument('--nu', type=_number, default=kernel.get("nu", 2.0 ** -7), help='Penalty; 0 solves the MLE')
    recon.add_argument('--circulant', action='store_true', help='FFT solve (full-circle equiangular grids)')
    recon.add_argument('--gram', dest='cache', help='Gram cache to reuse, or to create when missing')
    recon.add_argument('--phantom', help='Phantom JSON table for the RMSE (default: modified Shepp-Logan)')
    recon.add_argument('--interp-angles', type=int, help='Complete the sinogram on this many angles')
    recon.add_argument('--interp-out', help='Path of the completed sinogram')
    recon.add_argument('--error-out', help='Write the error map (reconstruction minus phantom) as CSV')
    recon.add_argument('--padding', type=int, default=config.setting("fbp_settings", "padding", 2))

    bench = sub.add_parser('benchmark', help='KR versus FBP RMSE sweep')
    bench.add_argument('--setup', choices=['mc', 'scenarios'], default='mc')
    bench.add_argument('--mc', type=int, default=21, help='Monte-Carlo repetitions (default: 21)')
    bench.add_argument('--sigmas', type=_numbers, default=None)
    bench.add_argument('--lambdas', type=_numbers, default=[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
    bench.add_argument('--gammas', type=_numbers, default=ValueParser.parse_range("2^5..2^15"))
    bench.add_argument('--nus', type=_numbers, default=ValueParser.parse_range("2^-20..2^-5"))
    bench.add_argument('--n', type=int, default=grids.get("n_angles", 40))
    bench.add_argument('--m', type=int, default=grids.get("n_mesh", 100))
    bench.add_argument('--size', type=int, default=100)
    bench.add_argument('--seed', type=int, default=grids.get("seed", 0))
    bench.add_argument('--out', required=True)

    verify = sub.add_parser('verify', help='Run the oracle suite')
    verify.add_argument('--full', action='store_true', help='Full-size checks, including timing')
    verify.add_argument('--seed', type=int, default=0)
    return parser


def dispatch(args: argparse.Namespace, cli: ReconstructionCLI) -> None:
    if args.command == 'phantom':
        cli.run_phantom(args.size, args.out, args.phantom, args.table_out)
    elif args.command == 'sinogram':
        cli.run_sinogram(args.n, args.m, args.grid, args.lam, args.sigma, args.seed, args.unit, args.out,
                         args.phantom)
    elif args.command == 'gram':
        cli.run_gram(args.gamma, args.layout, args.out, args.sino, args.n, args.m, args.grid, args.lam,
                     args.seed, args.nu)
    elif args.command == 'reconstruct':
        cli.run_reconstruct(args.method, args.sino, args.size, args.out, args.gamma, args.nu, args.circulant,
                            args.cache, args.phantom, args.interp_angles, args.interp_out, args.error_out,
                            args.padding)
    elif args.command == 'benchmark':
        sigmas = args.sigmas
        if sigmas is None:
            sigmas = [0.0, 20.0, 100.0] if args.setup == 'scenarios' else [0.0, 20.0, 50.0, 100.0]
        cli.run_benchmark(args.setup, args.out, args.mc, sigmas, args.lambdas, args.gammas, args.nus,
                          args.n, args.m, args.size, args.seed)
    elif args.command == 'verify':
        cli.run_verify(args.full, args.seed)


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    cli = ReconstructionCLI(workers=args.workers)
    try:
        dispatch(args, cli)
    except (DataFormatError, InvalidArgumentError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, VerificationError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as e:
        message = "; ".join(error['msg'] for error in e.errors())
        logger.error(f"{args.command} failed: {message}")
        print(f"❌ invalid {e.title}: {message}", file=sys.stderr)
        return EXIT_DATA
    except KernelCTError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
