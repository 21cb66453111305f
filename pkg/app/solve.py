"""
Solvers for Kernel CT Reconstruction
Tikhonov normal equations (dense Cholesky), minimum-norm MLE, and the
FFT block-circulant fast path
"""

import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy import linalg

from data import DetectorMesh, Sinogram
from geometry import Orientation
from gram import GramMatrix, TAU_RANK, WORKERS, load_gram, save_gram
from kernels import GaussianKernelParams
from utils import DataFormatError, InvalidArgumentError, NumericalError

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8
IMAG_TOL = 1e-9

FACTOR_MAGIC = b'FACT'
FACTOR_VERSION = 1
_FACTOR_HEADER = struct.Struct('<4sIId')

Observations = Union[Sinogram, np.ndarray]


class Provenance(str, Enum):
    TIKHONOV = "tikhonov"
    MLE = "mle"
    CIRCULANT = "circulant"


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """alpha (N x M) defining f = sum_ij alpha_ij P*_{R_i} k~_{x_j}"""

    alpha: np.ndarray
    nu: float
    provenance: Provenance
    kernel_params: Optional[GaussianKernelParams] = None
    orientations: Tuple[Orientation, ...] = ()
    mesh: Optional[DetectorMesh] = None
    residual: float = 0.0
    unit_scale: float = 1.0
    elapsed: float = 0.0

    @property
    def n_angles(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_mesh(self) -> int:
        return self.alpha.shape[1]

    def hilbert_norm_sq(self, W: GramMatrix) -> float:
        """||f||_H^2 = alpha^T W alpha"""
        flat = self.alpha.ravel()
        return float(flat @ W.matvec(flat))

    def with_alpha(self, alpha: np.ndarray) -> "CoefficientField":
        return CoefficientField(alpha=np.asarray(alpha, dtype=float).reshape(self.alpha.shape), nu=self.nu,
                                provenance=self.provenance, kernel_params=self.kernel_params,
                                orientations=self.orientations, mesh=self.mesh, unit_scale=self.unit_scale)


@dataclass(frozen=True, eq=False)
class EigenFactorization:
    """W = V diag(values) V^T, reused across penalties"""

    values: np.ndarray
    vectors: np.ndarray

    def solve(self, y: np.ndarray, nu: float, tau_rank: float = TAU_RANK) -> np.ndarray:
        """(W + nu I)^-1 y, or W^+ y with the rank cutoff when nu = 0"""
        projected = self.vectors.T @ y
        if nu > 0.0:
            return self.vectors @ (projected / (self.values + nu))
        top = float(self.values[-1]) if self.values.size else 0.0
        keep = self.values > tau_rank * top if top > 0.0 else np.zeros(self.values.shape, dtype=bool)
        inverse = np.zeros_like(self.values)
        inverse[keep] = 1.0 / self.values[keep]
        return self.vectors @ (projected * inverse)


@dataclass(frozen=True, eq=False)
class CirculantFactorization:
    """Lower Cholesky factors of W^_k + nu I for every frequency k"""

    nu: float
    factors: np.ndarray

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """alpha with sum_i' W_{i-i'} alpha_i' + nu alpha_i = rhs_i, for an N x M right-hand side"""
        rhs_hat = np.fft.fft(rhs, axis=0)
        alpha_hat = np.empty_like(rhs_hat)
        for k, factor in enumerate(self.factors):
            alpha_hat[k] = linalg.cho_solve((factor, True), rhs_hat[k])
        alpha = np.fft.ifft(alpha_hat, axis=0)
        residue = float(np.linalg.norm(alpha.imag))
        scale = float(np.linalg.norm(alpha.real))
        if residue > IMAG_TOL * max(scale, np.finfo(float).tiny):
            logger.error(f"Circulant solve left imaginary residue {residue:.3e} (|alpha| = {scale:.3e})")
            raise NumericalError(f"imaginary residue {residue:.3e} exceeds {IMAG_TOL:g} * |alpha|")
        return alpha.real


def _observations(W: GramMatrix, Y: Observations) -> Tuple[np.ndarray, float]:
    """Flat y and its unit scale, checked against the Gram grids"""
    if isinstance(Y, Sinogram):
        values, unit_scale = Y.values, Y.unit_scale
        if values.shape != (W.n_angles, W.n_mesh):
            raise InvalidArgumentError(
                f"sinogram shape {values.shape} does not match Gram grids {(W.n_angles, W.n_mesh)}")
    else:
        values, unit_scale = np.asarray(Y, dtype=float), 1.0
        if values.size != W.size:
            raise InvalidArgumentError(f"expected {W.size} observations, got {values.size}")
    return values.reshape(-1).astype(float), unit_scale


def _field(W: GramMatrix, alpha: np.ndarray, nu: float, provenance: Provenance, residual: float,
           unit_scale: float, elapsed: float) -> CoefficientField:
    return CoefficientField(alpha=alpha.reshape(W.n_angles, W.n_mesh), nu=nu, provenance=provenance,
                            kernel_params=W.kernel_params, orientations=W.orientations, mesh=W.mesh,
                            residual=residual, unit_scale=unit_scale, elapsed=elapsed)


def solve_tikhonov(W: GramMatrix, Y: Observations, nu: float) -> CoefficientField:
    """alpha^nu = (W + nu I)^-1 Y through a Cholesky factorization"""
    if nu <= 0.0:
        raise InvalidArgumentError(f"Tikhonov penalty must be positive, got {nu}")
    y, unit_scale = _observations(W, Y)
    start = time.perf_counter()
    system = W.expand()
    system[np.diag_indices_from(system)] += nu
    try:
        factor = linalg.cho_factor(system, lower=True, check_finite=False)
    except linalg.LinAlgError:
        condition = float(np.linalg.cond(system))
        logger.error(f"Cholesky factorization of W + nu I failed (nu={nu:g})")
        raise NumericalError(f"factorization of W + {nu:g} I failed", condition=condition)

    alpha = linalg.cho_solve(factor, y)
    residual = float(np.linalg.norm(system @ alpha - y))
    target = RESIDUAL_TOL * max(float(np.linalg.norm(y)), np.finfo(float).tiny)
    if residual > target:
        logger.warning(f"Tikhonov residual {residual:.3e} above {target:.3e}; running one refinement pass")
        alpha = alpha + linalg.cho_solve(factor, y - system @ alpha)
        residual = float(np.linalg.norm(system @ alpha - y))
        if residual > target:
            raise NumericalError(f"Tikhonov residual {residual:.3e} after refinement",
                                 condition=float(np.linalg.cond(system)))
    elapsed = time.perf_counter() - start
    logger.info(f"Tikhonov solve (NM={W.size}, nu={nu:g}) residual {residual:.3e} in {elapsed:.3f}s")
    return _field(W, alpha, nu, Provenance.TIKHONOV, residual, unit_scale, elapsed)


def eigen_factorize(W: GramMatrix) -> EigenFactorization:
    values, vectors = linalg.eigh(W.expand())
    return EigenFactorization(values=values, vectors=vectors)


def solve_mle(W: GramMatrix, Y: Observations, tau_rank: float = TAU_RANK,
              factorization: Optional[EigenFactorization] = None) -> CoefficientField:
    """Minimum-norm least-squares alpha^0 = W^+ Y"""
    y, unit_scale = _observations(W, Y)
    start = time.perf_counter()
    factorization = factorization or eigen_factorize(W)
    if factorization.values.size == 0 or factorization.values[-1] <= 0.0:
        logger.warning("Gram matrix has no positive eigenvalue; MLE coefficients are zero")
    alpha = factorization.solve(y, 0.0, tau_rank)
    residual = float(np.linalg.norm(y - W.matvec(alpha)))
    elapsed = time.perf_counter() - start
    logger.info(f"MLE solve (NM={W.size}) residual {residual:.3e} in {elapsed:.3f}s")
    return _field(W, alpha, 0.0, Provenance.MLE, residual, unit_scale, elapsed)


def factorize_circulant(W: GramMatrix, nu: float, workers: Optional[int] = None) -> CirculantFactorization:
    """Per-frequency Hermitian Cholesky factors of W^_k + nu I"""
    if not W.is_circulant:
        raise InvalidArgumentError("circulant factorization needs the block-circulant layout")
    if nu <= 0.0:
        raise InvalidArgumentError(f"Tikhonov penalty must be positive, got {nu}")
    spectrum = W.frequency_blocks()
    identity = nu * np.eye(W.n_mesh)

    def factor(k: int) -> np.ndarray:
        block = 0.5 * (spectrum[k] + spectrum[k].conj().T) + identity
        try:
            lower, _ = linalg.cho_factor(block, lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise NumericalError(f"factorization of frequency block {k} failed",
                                 condition=float(np.linalg.cond(block)))
        return np.tril(lower)

    with ThreadPoolExecutor(max_workers=workers or WORKERS) as pool:
        factors = np.stack(list(pool.map(factor, range(W.n_angles))))
    return CirculantFactorization(nu=nu, factors=factors)


def solve_circulant(W: GramMatrix, Y: Observations, nu: float,
                    factorization: Optional[CirculantFactorization] = None) -> CoefficientField:
    """FFT over the block index, one Hermitian solve per frequency, inverse FFT"""
    if not W.is_circulant:
        raise InvalidArgumentError("solve_circulant needs a block-circulant Gram matrix")
    y, unit_scale = _observations(W, Y)
    start = time.perf_counter()
    if factorization is None or factorization.nu != nu:
        factorization = factorize_circulant(W, nu)
    rhs = y.reshape(W.n_angles, W.n_mesh)
    alpha = factorization.solve(rhs)

    def residual_of(coeffs: np.ndarray) -> np.ndarray:
        return W.matvec(coeffs) + nu * coeffs - rhs

    residual = float(np.linalg.norm(residual_of(alpha)))
    target = RESIDUAL_TOL * max(float(np.linalg.norm(y)), np.finfo(float).tiny)
    if residual > target:
        logger.warning(f"Circulant residual {residual:.3e} above {target:.3e}; running one refinement pass")
        alpha = alpha - factorization.solve(residual_of(alpha))
        residual = float(np.linalg.norm(residual_of(alpha)))
        if residual > target:
            raise NumericalError(f"circulant residual {residual:.3e} after refinement")
    elapsed = time.perf_counter() - start
    logger.info(f"Circulant solve (N={W.n_angles}, M={W.n_mesh}, nu={nu:g}) residual {residual:.3e} "
                f"in {elapsed:.3f}s")
    return _field(W, alpha, nu, Provenance.CIRCULANT, residual, unit_scale, elapsed)


def solve(W: GramMatrix, Y: Observations, nu: float) -> CoefficientField:
    """MLE for nu = 0, the FFT path for circulant Grams, dense Tikhonov otherwise"""
    if nu < 0.0:
        raise InvalidArgumentError(f"penalty must be nonnegative, got {nu}")
    if nu == 0.0:
        return solve_mle(W, Y)
    if W.is_circulant:
        return solve_circulant(W, Y, nu)
    return solve_tikhonov(W, Y, nu)


def empirical_risk(W: GramMatrix, Y: Observations, alpha: np.ndarray, nu: float) -> float:
    """||Y - W alpha||^2 + nu alpha^T W alpha"""
    y, _ = _observations(W, Y)
    alpha = np.asarray(alpha, dtype=float).ravel()
    fitted = W.matvec(alpha)
    misfit = y - fitted
    return float(misfit @ misfit + nu * alpha @ fitted)


def minimum_empirical_risk(W: GramMatrix, Y: Observations, nu: float) -> float:
    """nu Y^T (W + nu I)^-1 Y"""
    if nu <= 0.0:
        raise InvalidArgumentError(f"Tikhonov penalty must be positive, got {nu}")
    y, _ = _observations(W, Y)
    system = W.expand()
    system[np.diag_indices_from(system)] += nu
    return float(nu * y @ linalg.solve(system, y, assume_a='pos'))


def save_factorization(W: GramMatrix, factorization: Union[EigenFactorization, CirculantFactorization],
                       file_path: Union[str, Path]) -> Path:
    """Gram cache followed by a versioned factorization section"""
    path = save_gram(W, file_path)
    if isinstance(factorization, CirculantFactorization):
        header = _FACTOR_HEADER.pack(FACTOR_MAGIC, FACTOR_VERSION, 2, factorization.nu)
        payload = np.ascontiguousarray(factorization.factors, dtype='<c16').tobytes()
    else:
        header = _FACTOR_HEADER.pack(FACTOR_MAGIC, FACTOR_VERSION, 1, 0.0)
        payload = (np.ascontiguousarray(factorization.values, dtype='<f8').tobytes()
                   + np.ascontiguousarray(factorization.vectors, dtype='<f8').tobytes())
    with open(path, 'ab') as f:
        f.write(header)
        f.write(payload)
    logger.info(f"Appended {type(factorization).__name__} to {path}")
    return path


def load_factorization(file_path: Union[str, Path]):
    """(GramMatrix, factorization or None) from a Gram cache"""
    W, tail = load_gram(file_path, with_tail=True)
    if not tail:
        return W, None
    if len(tail) < _FACTOR_HEADER.size:
        raise DataFormatError(f"{file_path}: truncated factorization section")
    magic, version, kind, nu = _FACTOR_HEADER.unpack_from(tail, 0)
    if magic != FACTOR_MAGIC or version != FACTOR_VERSION:
        raise DataFormatError(f"{file_path}: unknown factorization section")
    body = tail[_FACTOR_HEADER.size:]
    if kind == 2:
        expected = 16 * W.n_angles * W.n_mesh * W.n_mesh
        if len(body) != expected:
            raise DataFormatError(f"{file_path}: factorization section has {len(body)} of {expected} bytes")
        factors = np.frombuffer(body, dtype='<c16').reshape(W.n_angles, W.n_mesh, W.n_mesh).copy()
        return W, CirculantFactorization(nu=nu, factors=factors)
    if kind == 1:
        size = W.size
        expected = 8 * (size + size * size)
        if len(body) != expected:
            raise DataFormatError(f"{file_path}: factorization section has {len(body)} of {expected} bytes")
        values = np.frombuffer(body, dtype='<f8', count=size).copy()
        vectors = np.frombuffer(body, dtype='<f8', offset=8 * size).reshape(size, size).copy()
        return W, EigenFactorization(values=values, vectors=vectors)
    raise DataFormatError(f"{file_path}: unknown factorization kind {kind}")
