"""
Analysis for Kernel CT Reconstruction
Worst-case stability, the adversarial instance that attains it, the MSE
decomposition with its Monte-Carlo check, and raster RMSE
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from sklearn.metrics import mean_squared_error

from gram import GramMatrix, TAU_RANK, WORKERS, smallest_nonzero_eigenvalue
from recon import ImageRaster
from solve import EigenFactorization, eigen_factorize, solve_tikhonov
from utils import InvalidArgumentError, ensure_parent, seeded_stream

logger = logging.getLogger(__name__)

MC_STREAM_BASE = 2 ** 62


class StabilityReport(BaseModel):
    rho: float
    eps: float
    nu: float
    d: float
    bound: float
    achieved: Optional[float] = None
    gap: Optional[float] = None
    attained: bool = True
    config_hash: str = ""


class MseReport(BaseModel):
    bias_term: float
    variance_term: float
    projection_term: float
    total: float


def _check_budgets(nu: float, rho: float, eps: float) -> None:
    if nu <= 0.0:
        raise InvalidArgumentError(f"Tikhonov penalty must be positive, got {nu}")
    if rho < 0.0 or eps < 0.0:
        raise InvalidArgumentError(f"budgets must be nonnegative, got rho={rho}, eps={eps}")


def stability_bound(W: GramMatrix, nu: float, rho: float, eps: float,
                    d: Optional[float] = None) -> StabilityReport:
    """err(rho, eps) = rho^2 + eps^2 / (d + 2 nu)"""
    _check_budgets(nu, rho, eps)
    if d is None:
        d, _ = smallest_nonzero_eigenvalue(W)
    bound = rho * rho + eps * eps / (d + 2.0 * nu)
    return StabilityReport(rho=rho, eps=eps, nu=nu, d=d, bound=bound, config_hash=W.config_hash)


def adversarial_instance(W: GramMatrix, nu: float, rho: float, eps: float,
                         tau_rank: float = TAU_RANK) -> Tuple[np.ndarray, np.ndarray, StabilityReport]:
    """Signal and noise along the eigenvector of d that attain the stability bound.

    alpha0 = c e with c = eps nu / (d (d + 2 nu)) and noise = -eps e; the
    rest of the rho budget sits in the orthogonal complement of the
    generators, where it adds its squared norm to the error unchanged.
    When rho^2 < d c^2 the budget cannot reach equality: c is capped at
    rho / sqrt(d) and the report is marked not attained.
    """
    _check_budgets(nu, rho, eps)
    factorization = eigen_factorize(W)
    d, _ = smallest_nonzero_eigenvalue(W, tau_rank)
    index = int(np.argmin(np.abs(factorization.values - d)))
    direction = factorization.vectors[:, index]

    c = eps * nu / (d * (d + 2.0 * nu))
    attained = rho * rho >= d * c * c
    if not attained:
        logger.warning(f"rho={rho:g} below eps*nu/(sqrt(d)(d+2nu)); equality is unattainable, capping c")
        c = rho / np.sqrt(d)
    orthogonal_sq = max(0.0, rho * rho - d * c * c)

    alpha0 = c * direction
    noise = -eps * direction
    observations = W.matvec(alpha0) + noise
    estimate = solve_tikhonov(W, observations, nu).alpha.ravel()
    error = estimate - alpha0
    achieved = float(error @ W.matvec(error)) + orthogonal_sq

    report = stability_bound(W, nu, rho, eps, d=d)
    report = report.model_copy(update={"achieved": achieved, "gap": report.bound - achieved,
                                       "attained": attained})
    logger.info(f"Adversarial instance: bound {report.bound:.6e}, achieved {achieved:.6e} (d={d:.3e}, nu={nu:g})")
    shape = (W.n_angles, W.n_mesh)
    return alpha0.reshape(shape), noise.reshape(shape), report


def _spectral(W: GramMatrix, factorization: Optional[EigenFactorization]) -> EigenFactorization:
    return factorization or eigen_factorize(W)


def mse_decomposition(W: GramMatrix, nu: float, alpha0: np.ndarray, sigma: float,
                      projection_residual: float = 0.0, tau_rank: float = TAU_RANK,
                      factorization: Optional[EigenFactorization] = None) -> MseReport:
    """E||f^nu - f0||_H^2 = nu^2 a0^T W (W + nu I)^-2 a0 + sigma^2 tr(W (W + nu I)^-2) + ||f0 - P f0||^2"""
    if nu < 0.0 or sigma < 0.0 or projection_residual < 0.0:
        raise InvalidArgumentError("nu, sigma and the projection residual must be nonnegative")
    spectrum = _spectral(W, factorization)
    values = spectrum.values
    top = float(values[-1]) if values.size else 0.0
    keep = values > tau_rank * top if top > 0.0 else np.zeros(values.shape, dtype=bool)
    lam = values[keep]
    coords = spectrum.vectors[:, keep].T @ np.asarray(alpha0, dtype=float).ravel()
    damp = lam / (lam + nu) ** 2
    bias = float(nu * nu * np.sum(damp * coords * coords))
    variance = float(sigma * sigma * np.sum(damp))
    return MseReport(bias_term=bias, variance_term=variance, projection_term=float(projection_residual),
                     total=bias + variance + float(projection_residual))


def coefficient_moments(W: GramMatrix, nu: float, alpha0: np.ndarray, sigma: float,
                        tau_rank: float = TAU_RANK,
                        factorization: Optional[EigenFactorization] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Mean W (W + nu I)^-1 a0 and covariance sigma^2 (W + nu I)^-2 of the solved coefficients"""
    if nu < 0.0 or sigma < 0.0:
        raise InvalidArgumentError("nu and sigma must be nonnegative")
    spectrum = _spectral(W, factorization)
    values, vectors = spectrum.values, spectrum.vectors
    top = float(values[-1]) if values.size else 0.0
    keep = values > tau_rank * top if top > 0.0 else np.zeros(values.shape, dtype=bool)
    gain = np.zeros_like(values)
    inverse = np.zeros_like(values)
    gain[keep] = values[keep] / (values[keep] + nu)
    inverse[keep] = 1.0 / (values[keep] + nu)
    alpha0 = np.asarray(alpha0, dtype=float).ravel()
    mean = vectors @ (gain * (vectors.T @ alpha0))
    covariance = sigma * sigma * (vectors * inverse ** 2) @ vectors.T
    return mean.reshape(W.n_angles, W.n_mesh), covariance


def monte_carlo_mse(W: GramMatrix, nu: float, alpha0: np.ndarray, sigma: float, draws: int = 200,
                    seed: int = 0, projection_residual: float = 0.0, workers: Optional[int] = None,
                    factorization: Optional[EigenFactorization] = None) -> Tuple[float, float]:
    """Mean and standard error of ||f^nu - f0||_H^2 over seeded noise draws"""
    if draws < 2:
        raise InvalidArgumentError(f"need at least two draws, got {draws}")
    spectrum = _spectral(W, factorization)
    alpha0 = np.asarray(alpha0, dtype=float).ravel()
    clean = W.matvec(alpha0)

    def one_draw(k: int) -> float:
        noise = sigma * seeded_stream(seed, MC_STREAM_BASE + k).standard_normal(W.size)
        error = spectrum.solve(clean + noise, nu) - alpha0
        return float(error @ W.matvec(error)) + projection_residual

    with ThreadPoolExecutor(max_workers=workers or WORKERS) as pool:
        errors = np.array(list(pool.map(one_draw, range(draws))))
    mean = float(np.mean(errors))
    stderr = float(np.std(errors, ddof=1) / np.sqrt(draws))
    logger.info(f"Monte-Carlo MSE over {draws} draws: {mean:.6e} +/- {stderr:.2e}")
    return mean, stderr


def rmse(recon: ImageRaster, truth: ImageRaster) -> float:
    """Root mean squared difference over the pixels inside the unit disk"""
    if recon.side != truth.side:
        raise InvalidArgumentError(f"raster sizes differ: {recon.side} vs {truth.side}")
    mask = recon.mask & truth.mask
    if not np.any(mask):
        return 0.0
    return float(np.sqrt(mean_squared_error(truth.values[mask], recon.values[mask])))


def stability_table(reports: Sequence[StabilityReport]) -> pd.DataFrame:
    columns = ["config_hash", "rho", "eps", "nu", "d", "bound", "achieved"]
    return pd.DataFrame([report.model_dump() for report in reports], columns=columns)


def save_stability_reports(reports: Sequence[StabilityReport], file_path: Union[str, Path]) -> Path:
    path = ensure_parent(file_path)
    stability_table(reports).to_csv(path, index=False, float_format='%.17g')
    logger.info(f"Wrote {len(reports)} stability rows to {path}")
    return path
