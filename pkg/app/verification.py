"""
Verification Suite for Kernel CT Reconstruction
Oracle checks behind `kr_cli.py verify`: closed form against quadrature,
FFT solve against dense solve, stability sharpness, Tikhonov identities,
the MSE formula, moment consistency and structural properties
"""

import logging
import math
import time
from typing import Callable, List, Optional

import numpy as np
from pydantic import BaseModel

from analysis import adversarial_instance, monte_carlo_mse, mse_decomposition, rmse, stability_bound
from baseline_fbp import fbp_reconstruct
from data import DetectorMesh, make_angle_grid, make_mesh, shepp_logan, simulate_sinogram
from geometry import Orientation, euler_matrix, relative_angle_data
from gram import WORKERS, assemble_circulant, assemble_dense, smallest_nonzero_eigenvalue
from kernels import GaussianKernelParams, backprojected_generator, converged_gram_oracle, cross_gram_entry, \
    default_rule, induced_kernel
from recon import TOL_HLCC, evaluate_points, evaluate_reconstruction, hlcc_moment_check, interpolate_sinogram, \
    rasterize_phantom
from solve import eigen_factorize, empirical_risk, factorize_circulant, minimum_empirical_risk, solve_circulant, \
    solve_mle, solve_tikhonov
from utils import KernelCTError, VerificationError, seeded_stream

logger = logging.getLogger(__name__)

ORACLE_TOL = 1e-6
CIRCULANT_TOL = 1e-8
IDENTITY_TOL = 1e-8


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def _random_direction(rng: np.random.Generator, dim: int) -> np.ndarray:
    theta = rng.standard_normal(dim)
    return theta / np.linalg.norm(theta)


def _random_interior(rng: np.random.Generator, count: int, dim: int, radius: float = 0.9) -> np.ndarray:
    """Uniform points in the (dim)-ball of the given radius"""
    points = rng.standard_normal((count, dim))
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    return points * radius * rng.random((count, 1)) ** (1.0 / dim)


def _random_orientation(rng: np.random.Generator, dim: int) -> Orientation:
    if dim == 2:
        return Orientation.from_angle(rng.uniform(-np.pi, np.pi))
    return euler_matrix(_random_direction(rng, dim))


def _random_gram(rng: np.random.Generator, gamma: float, n_angles: int, n_mesh: int):
    params = GaussianKernelParams(gamma=gamma, dim=2)
    orientations = [Orientation.from_angle(a) for a in np.sort(rng.uniform(0.0, np.pi, n_angles))]
    mesh = DetectorMesh(points=np.sort(rng.uniform(-0.9, 0.9, n_mesh))[:, None])
    return assemble_dense(params, orientations, mesh, workers=1)


class VerificationSuite:
    """Runs every oracle check and keeps score, printing one line per check"""

    def __init__(self, full: bool = False, seed: int = 0, workers: Optional[int] = None):
        self.full = full
        self.seed = seed
        self.workers = workers or WORKERS
        self.results: List[CheckResult] = []

    @property
    def passed(self) -> int:
        return sum(1 for result in self.results if result.passed)

    @property
    def failed(self) -> int:
        return sum(1 for result in self.results if not result.passed)

    def check(self, name: str, condition: bool, detail: str = "", seconds: float = 0.0) -> CheckResult:
        result = CheckResult(name=name, passed=bool(condition), detail=detail, seconds=seconds)
        if result.passed:
            print(f"  ✅ {name}")
        else:
            print(f"  ❌ {name}: {detail}")
            logger.error(f"Check failed: {name}: {detail}")
        self.results.append(result)
        return result

    def _guarded(self, name: str, body: Callable[[], None]) -> None:
        """Run one group of checks; a library error inside counts as one failure"""
        start = time.perf_counter()
        try:
            body()
        except KernelCTError as e:
            self.check(name, False, f"{type(e).__name__}: {e}", time.perf_counter() - start)
        logger.info(f"{name} finished in {time.perf_counter() - start:.2f}s")

    def _rng(self, stream: int) -> np.random.Generator:
        return seeded_stream(self.seed, stream)

    # closed form

    def check_closed_form(self) -> None:
        rng = self._rng(101)
        tuples = 120 if self.full else 24
        worst = 0.0
        failures = []
        gammas = [1.0, 2.0 ** 5, 2.0 ** 11]
        for k in range(tuples):
            dim = 2 + k % 2
            gamma = gammas[(k // 2) % len(gammas)]
            params = GaussianKernelParams(gamma=gamma, dim=dim)
            R1 = _random_orientation(rng, dim)
            R2 = _random_orientation(rng, dim)
            x1, x2 = _random_interior(rng, 2, dim - 1)
            closed = cross_gram_entry(params, relative_angle_data(R1, R2, x1, x2), x1, x2)
            panels = max(1, math.ceil(math.sqrt(gamma) / 3.0))
            oracle, _ = converged_gram_oracle(params, R1, R2, x1, x2, order=32, panels=panels, max_order=512)
            error = abs(closed - oracle)
            worst = max(worst, error)
            if error > ORACLE_TOL:
                failures.append(f"n={dim} gamma={gamma:g}: {closed:.3e} vs {oracle:.3e}")
        self.check(f"closed-form entries match quadrature on {tuples} tuples", not failures,
                   "; ".join(failures[:3]))
        logger.info(f"Largest closed-form deviation {worst:.3e}")

    # block-circulant path

    def check_circulant(self) -> None:
        rng = self._rng(202)
        sizes = [(4, 8), (16, 8), (32, 8), (4, 24), (16, 24), (32, 24)] if self.full else [(4, 8), (16, 8)]
        params = GaussianKernelParams(gamma=2.0 ** 5, dim=2)
        nu = 2.0 ** -7
        worst = 0.0
        for n_angles, n_mesh in sizes:
            mesh = make_mesh(n_mesh)
            circulant = assemble_circulant(params, n_angles, mesh, workers=self.workers)
            dense = assemble_dense(params, make_angle_grid("equiangular_full", n_angles), mesh,
                                   workers=self.workers)
            y = rng.standard_normal((n_angles, n_mesh))
            fast = solve_circulant(circulant, y, nu).alpha
            slow = solve_tikhonov(dense, y, nu).alpha
            worst = max(worst, float(np.linalg.norm(fast - slow) / np.linalg.norm(slow)))
        self.check(f"circulant solve matches dense solve on {len(sizes)} grids", worst <= CIRCULANT_TOL,
                   f"relative difference {worst:.3e}")
        if self.full:
            self._circulant_scaling(params, nu)

    def _circulant_scaling(self, params: GaussianKernelParams, nu: float) -> None:
        mesh = make_mesh(24)
        counts = [64, 128, 256, 512]
        times = []
        for n_angles in counts:
            W = assemble_circulant(params, n_angles, mesh, workers=self.workers)
            y = self._rng(203).standard_normal((n_angles, mesh.n_mesh))
            best = np.inf
            for _ in range(3):
                start = time.perf_counter()
                factorization = factorize_circulant(W, nu, workers=1)
                solve_circulant(W, y, nu, factorization)
                best = min(best, time.perf_counter() - start)
            times.append(best)
        slope = float(np.polyfit(np.log(counts), np.log(times), 1)[0])
        self.check("circulant solve time grows near-linearly in N", 0.8 <= slope <= 1.3,
                   f"fitted exponent {slope:.2f}")

    # stability

    def check_stability(self) -> None:
        rng = self._rng(303)
        ratios = []
        exceeded = 0
        for _ in range(10):
            W = _random_gram(rng, 2.0 ** 9, int(rng.integers(2, 5)), int(rng.integers(3, 6)))
            d, _ = smallest_nonzero_eigenvalue(W)
            nu = d * 10.0 ** rng.uniform(-1.0, 1.0)
            eps = rng.uniform(0.1, 1.0)
            rho = max(1.0, 2.0 * eps * nu / (math.sqrt(d) * (d + 2.0 * nu)))
            _, _, report = adversarial_instance(W, nu, rho, eps)
            ratios.append(report.achieved / report.bound)

            spectrum = eigen_factorize(W)
            for _ in range(5):
                alpha0 = rng.standard_normal(W.size)
                alpha0 *= rho / math.sqrt(float(alpha0 @ W.matvec(alpha0)))
                noise = rng.standard_normal(W.size)
                noise *= eps / np.linalg.norm(noise)
                error = spectrum.solve(W.matvec(alpha0) + noise, nu) - alpha0
                if float(error @ W.matvec(error)) > stability_bound(W, nu, rho, eps, d=d).bound * (1.0 + 1e-10):
                    exceeded += 1
        low, high = min(ratios), max(ratios)
        self.check("adversarial instances attain the stability bound",
                   1.0 - 1e-6 <= low and high <= 1.0 + 1e-8, f"achieved/bound in [{low:.10f}, {high:.10f}]")
        self.check("random instances stay below the stability bound", exceeded == 0,
                   f"{exceeded} of 50 exceeded")

    # Tikhonov identities

    def check_tikhonov(self) -> None:
        rng = self._rng(404)
        W = _random_gram(rng, 2.0 ** 11, 4, 6)
        y = rng.standard_normal(W.size)
        nu = 1e-3
        fitted = solve_tikhonov(W, y, nu)
        risk = empirical_risk(W, y, fitted.alpha, nu)
        minimum = minimum_empirical_risk(W, y, nu)
        self.check("minimum empirical risk equals nu Y^T (W + nu I)^-1 Y",
                   abs(risk - minimum) <= IDENTITY_TOL * abs(minimum), f"{risk:.12e} vs {minimum:.12e}")

        spectrum = eigen_factorize(W)
        mle = spectrum.solve(y, 0.0)
        distances = [float(np.linalg.norm(spectrum.solve(y, 10.0 ** -k) - mle)) for k in range(2, 9)]
        monotone = all(b <= a * (1.0 + 1e-12) for a, b in zip(distances, distances[1:]))
        self.check("penalized coefficients approach the MLE as nu shrinks",
                   monotone and distances[-1] < distances[0], f"distances {distances}")

        field = solve_mle(W, y, factorization=spectrum)
        self.check("full-rank MLE interpolates the observations", field.residual <= 1e-8 * np.linalg.norm(y),
                   f"residual {field.residual:.3e}")

    # MSE

    def check_mse(self) -> None:
        rng = self._rng(505)
        params = GaussianKernelParams(gamma=2.0 ** 5, dim=2)
        W = assemble_dense(params, make_angle_grid("equiangular_half", 8), make_mesh(10), workers=self.workers)
        spectrum = eigen_factorize(W)
        alpha0 = rng.standard_normal(W.size)
        nu = 2.0 ** -7
        for sigma in (1.0, 20.0):
            closed = mse_decomposition(W, nu, alpha0, sigma, factorization=spectrum).total
            mean, stderr = monte_carlo_mse(W, nu, alpha0, sigma, draws=200, seed=self.seed,
                                           workers=self.workers, factorization=spectrum)
            self.check(f"MSE formula within 3 standard errors of Monte-Carlo (sigma={sigma:g})",
                       abs(mean - closed) <= 3.0 * stderr,
                       f"closed {closed:.6e}, Monte-Carlo {mean:.6e} +/- {stderr:.2e}")

    # moment consistency

    def check_hlcc(self) -> None:
        rng = self._rng(606)
        sino = simulate_sinogram(shepp_logan(), make_angle_grid("equiangular_half", 20), make_mesh(40))
        W = assemble_dense(GaussianKernelParams(gamma=2.0 ** 5, dim=2), sino.angle_grid, sino.mesh,
                           workers=self.workers)
        coeffs = solve_tikhonov(W, sino, 2.0 ** -7)
        probes = [Orientation.from_angle(a) for a in rng.uniform(0.0, 2.0 * np.pi, 5)]
        report = hlcc_moment_check(coeffs, 2, probes, default_rule(), tol=TOL_HLCC)
        self.check("sinogram moments agree with image moments at random angles", report.passed,
                   f"max relative deviation {report.max_deviation:.3e}")

    # structure

    def check_properties(self) -> None:
        rng = self._rng(707)
        params = GaussianKernelParams(gamma=2.0 ** 5, dim=2)
        mesh = make_mesh(12)
        grid = make_angle_grid("random", 6, seed=self.seed)
        W = assemble_dense(params, grid, mesh, workers=self.workers)
        dense = W.expand()
        self.check("Gram matrix is symmetric", np.array_equal(dense, dense.T))
        spectrum = np.linalg.eigvalsh(dense)
        self.check("Gram matrix is positive semidefinite", spectrum[0] >= -1e-10 * spectrum[-1],
                   f"smallest eigenvalue {spectrum[0]:.3e}")

        shift = rng.uniform(0.0, 2.0 * np.pi)
        shifted = assemble_dense(params, [Orientation.from_angle(a + shift) for a in grid.angles], mesh,
                                 workers=self.workers).expand()
        drift = float(np.max(np.abs(shifted - dense)))
        self.check("entries are invariant under a global angle shift", drift <= 1e-10 * np.max(dense),
                   f"max drift {drift:.3e}")

        edge = np.array([[1.0], [-1.0]])
        inner = _random_interior(rng, 2, 1)
        boundary = np.max(np.abs(induced_kernel(params, edge, inner)))
        self.check("induced kernel vanishes on the detector boundary", boundary == 0.0, f"{boundary:.3e}")

        y = rng.standard_normal((W.n_angles, W.n_mesh))
        coeffs = solve_tikhonov(W, y, 2.0 ** -7)
        R = _random_orientation(rng, 2)
        edge_values = [interpolate_sinogram(coeffs, R, np.array([x])) for x in (-1.0, 1.0)]
        self.check("interpolated sinogram vanishes on the detector boundary",
                   max(abs(v) for v in edge_values) == 0.0, f"{edge_values}")
        generator = backprojected_generator(params, R, edge, _random_interior(rng, 1, 2))
        self.check("backprojected generators vanish on boundary rays", np.max(np.abs(generator)) == 0.0)

        y2 = rng.standard_normal(y.shape)
        a, b = rng.uniform(-2.0, 2.0, 2)
        combined = solve_tikhonov(W, a * y + b * y2, 2.0 ** -7).alpha
        separate = a * coeffs.alpha + b * solve_tikhonov(W, y2, 2.0 ** -7).alpha
        self.check("Tikhonov solve is linear in the observations",
                   np.linalg.norm(combined - separate) <= 1e-8 * np.linalg.norm(separate))

        points = _random_interior(rng, 50, 2)
        base = evaluate_points(coeffs, points, workers=1)
        doubled = evaluate_points(coeffs.with_alpha(2.0 * coeffs.alpha), points, workers=1)
        self.check("evaluation is linear in the coefficients",
                   np.allclose(doubled, 2.0 * base, rtol=1e-12, atol=1e-12 * np.max(np.abs(base))))

    # desk-scale experiment

    def check_experiment(self) -> None:
        reps = 21 if self.full else 3
        needed = math.ceil(18 * reps / 21)
        params = GaussianKernelParams(gamma=2.0 ** 11, dim=2)
        mesh = make_mesh(100)
        phantom = shepp_logan()
        truth = rasterize_phantom(phantom, 100)
        wins = 0
        slowest = 0.0
        for rep in range(reps):
            sino = simulate_sinogram(phantom, make_angle_grid("random", 40, seed=self.seed + rep), mesh,
                                     sigma=20.0, seed=self.seed + rep, unit_scale=50.0)
            W = assemble_dense(params, sino.angle_grid, mesh, workers=self.workers)
            start = time.perf_counter()
            coeffs = solve_tikhonov(W, sino, 2.0 ** -7)
            kr = evaluate_reconstruction(coeffs, truth, self.workers)
            slowest = max(slowest, time.perf_counter() - start)
            kr_error = rmse(kr.scaled(1.0 / sino.unit_scale), truth)
            fbp_error = rmse(fbp_reconstruct(sino, truth).scaled(1.0 / sino.unit_scale), truth)
            wins += kr_error < fbp_error
            logger.info(f"Repetition {rep}: KR {kr_error:.4f} vs FBP {fbp_error:.4f}")
        self.check(f"KR beats FBP on at least {needed} of {reps} noisy random-grid sinograms", wins >= needed,
                   f"{wins} wins")
        if self.full:
            self.check("single KR run with a cached Gram finishes within 2 s", slowest <= 2.0,
                       f"slowest run {slowest:.2f}s on {self.workers} workers")

    def run_all(self) -> List[CheckResult]:
        groups = [
            ("closed-form Gram entries", self.check_closed_form),
            ("circulant solver", self.check_circulant),
            ("stability bound", self.check_stability),
            ("Tikhonov identities", self.check_tikhonov),
            ("MSE formula", self.check_mse),
            ("moment consistency", self.check_hlcc),
            ("structural properties", self.check_properties),
            ("desk-scale experiment", self.check_experiment),
        ]
        for title, body in groups:
            print(f"\n🔄 {title}")
            self._guarded(title, body)
        print(f"\n📊 {self.passed} passed, {self.failed} failed")
        return self.results

    def raise_on_failure(self) -> None:
        if self.failed:
            names = ", ".join(result.name for result in self.results if not result.passed)
            raise VerificationError(f"{self.failed} checks failed: {names}")
