"""
Reconstruction Evaluation for Kernel CT Reconstruction
Evaluate f on rasters and points, interpolate the sinogram at new
(R, x), check moment consistency of the interpolant, and export rasters
"""

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import ndimage

from data import Phantom
from geometry import Orientation, relative_rotation
from kernels import QuadratureRule, backprojected_generator, cross_gram_block
from solve import CoefficientField
from utils import DataFormatError, InvalidArgumentError, config, ensure_parent

logger = logging.getLogger(__name__)

TOL_HLCC = float(config.setting("numerics", "tol_hlcc", 1e-3))
WORKERS = int(config.setting("numerics", "workers", 4))
CHUNK = 4096


@dataclass(frozen=True, eq=False)
class ImageRaster:
    """P x P samples on [-1, 1]^2; row 0 is the top (+y), masked-out pixels hold 0"""

    side: int
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.side, self.side) or self.mask.shape != values.shape:
            raise InvalidArgumentError(f"raster arrays must be {self.side}x{self.side}")
        values = np.where(self.mask, values, 0.0)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @staticmethod
    def centers(side: int) -> np.ndarray:
        return -1.0 + (2.0 * np.arange(1, side + 1) - 1.0) / side

    @classmethod
    def blank(cls, side: int) -> "ImageRaster":
        if side < 1:
            raise InvalidArgumentError(f"raster side must be positive, got {side}")
        points = raster_grid(side)
        return cls(side=side, values=np.zeros((side, side)), mask=np.sum(points * points, axis=-1) <= 1.0)

    def points(self) -> np.ndarray:
        return raster_grid(self.side)

    def with_values(self, values: np.ndarray) -> "ImageRaster":
        return ImageRaster(side=self.side, values=values, mask=self.mask)

    def scaled(self, factor: float) -> "ImageRaster":
        return self.with_values(self.values * factor)


def raster_grid(side: int) -> np.ndarray:
    """(P, P, 2) pixel centers: column k at x = c_k, row r at y = -c_r"""
    c = ImageRaster.centers(side)
    xx, yy = np.meshgrid(c, c[::-1])
    return np.stack([xx, yy], axis=-1)


def rasterize_phantom(phantom: Phantom, side: int) -> ImageRaster:
    raster = ImageRaster.blank(side)
    return raster.with_values(phantom.evaluate(raster.points()))


def _check_field(coeffs: CoefficientField) -> None:
    if coeffs.kernel_params is None or coeffs.mesh is None or len(coeffs.orientations) != coeffs.n_angles:
        raise InvalidArgumentError("coefficient field lacks the kernel or grids it was solved on")
    if coeffs.mesh.n_mesh != coeffs.n_mesh:
        raise InvalidArgumentError(f"coefficients have {coeffs.n_mesh} columns for {coeffs.mesh.n_mesh} mesh points")


def _evaluate_chunk(coeffs: CoefficientField, points: np.ndarray) -> np.ndarray:
    mesh = coeffs.mesh.points[:, None, :]
    total = np.zeros(points.shape[0])
    for R, row in zip(coeffs.orientations, coeffs.alpha):
        if not np.any(row):
            continue
        total += row @ backprojected_generator(coeffs.kernel_params, R, mesh, points[None, :, :])
    return total


def evaluate_points(coeffs: CoefficientField, points: np.ndarray, workers: Optional[int] = None) -> np.ndarray:
    """f(z) = sum_ij alpha_ij (P*_{R_i} k~_{x_j})(z) at the rows of a K x n array"""
    _check_field(coeffs)
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != coeffs.kernel_params.dim:
        raise InvalidArgumentError(f"expected a K x {coeffs.kernel_params.dim} point array, got {points.shape}")
    chunks = [points[k:k + CHUNK] for k in range(0, points.shape[0], CHUNK)]
    if not chunks:
        return np.zeros(0)
    with ThreadPoolExecutor(max_workers=workers or WORKERS) as pool:
        parts = list(pool.map(lambda chunk: _evaluate_chunk(coeffs, chunk), chunks))
    return np.concatenate(parts)


def evaluate_reconstruction(coeffs: CoefficientField, raster: Union[ImageRaster, int],
                            workers: Optional[int] = None) -> ImageRaster:
    """f sampled at the unmasked pixel centers of the raster"""
    if isinstance(raster, int):
        raster = ImageRaster.blank(raster)
    if coeffs.kernel_params is not None and coeffs.kernel_params.dim != 2:
        raise InvalidArgumentError("raster evaluation is planar; use evaluate_points for n > 2")
    values = np.zeros((raster.side, raster.side))
    values[raster.mask] = evaluate_points(coeffs, raster.points()[raster.mask], workers)
    logger.info(f"Evaluated reconstruction on a {raster.side}x{raster.side} raster")
    return raster.with_values(values)


def evaluate_fields(fields: Sequence[CoefficientField], raster: Union[ImageRaster, int],
                    workers: Optional[int] = None) -> List[ImageRaster]:
    """Evaluate several coefficient fields sharing kernel and grids in one pass over the pixels"""
    if not fields:
        return []
    if isinstance(raster, int):
        raster = ImageRaster.blank(raster)
    head = fields[0]
    _check_field(head)
    for other in fields[1:]:
        if other.kernel_params != head.kernel_params or other.mesh is not head.mesh \
                or other.alpha.shape != head.alpha.shape:
            raise InvalidArgumentError("batched evaluation needs fields solved on the same kernel and grids")
    stacked = np.stack([field.alpha.ravel() for field in fields], axis=1)
    mesh = head.mesh.points[:, None, :]
    points = raster.points()[raster.mask]
    chunk_size = max(1, CHUNK // 4)

    def chunk_values(start: int) -> np.ndarray:
        chunk = points[start:start + chunk_size]
        generators = np.concatenate([
            backprojected_generator(head.kernel_params, R, mesh, chunk[None, :, :])
            for R in head.orientations
        ], axis=0)
        return generators.T @ stacked

    with ThreadPoolExecutor(max_workers=workers or WORKERS) as pool:
        parts = list(pool.map(chunk_values, range(0, points.shape[0], chunk_size)))
    values = np.concatenate(parts, axis=0) if parts else np.zeros((0, len(fields)))
    rasters = []
    for column in range(len(fields)):
        image = np.zeros((raster.side, raster.side))
        image[raster.mask] = values[:, column]
        rasters.append(raster.with_values(image))
    return rasters


def interpolate_sinogram_grid(coeffs: CoefficientField, orientations: Sequence[Orientation],
                              points: np.ndarray, workers: Optional[int] = None) -> np.ndarray:
    """(P f)(R, x) for every orientation and detector point, as a len(orientations) x K array"""
    _check_field(coeffs)
    n = coeffs.kernel_params.dim
    points = np.asarray(points, dtype=float).reshape(-1, n - 1)

    def row(R: Orientation) -> np.ndarray:
        total = np.zeros(points.shape[0])
        for R_i, alpha_i in zip(coeffs.orientations, coeffs.alpha):
            block = cross_gram_block(coeffs.kernel_params, relative_rotation(R, R_i), points, coeffs.mesh.points)
            total += block @ alpha_i
        return total

    with ThreadPoolExecutor(max_workers=workers or WORKERS) as pool:
        rows = list(pool.map(row, orientations))
    return np.array(rows).reshape(len(orientations), points.shape[0])


def interpolate_sinogram(coeffs: CoefficientField, R: Orientation, x: np.ndarray) -> float:
    """(P f)(R, x) = sum_ij alpha_ij w((R, x), (R_i, x_j))"""
    return float(interpolate_sinogram_grid(coeffs, [R], np.atleast_1d(x), workers=1)[0, 0])


class HlccReport(BaseModel):
    degrees: List[int]
    probe_angles: List[float]
    moments: List[List[float]]
    reference: List[List[float]]
    deviations: List[List[float]]
    max_deviation: float
    tol: float
    passed: bool


def _polar_rule(radial: QuadratureRule, n_theta: int):
    """Points and weights of a product rule on the unit disk"""
    rho, rho_weights = radial.mapped(0.0, 1.0)
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    rr, tt = np.meshgrid(rho, theta, indexing='ij')
    points = np.stack([rr * np.cos(tt), rr * np.sin(tt)], axis=-1).reshape(-1, 2)
    weights = (rho_weights[:, None] * rho[:, None] * np.full(n_theta, 2.0 * np.pi / n_theta)[None, :]).ravel()
    return points, weights


def hlcc_moment_check(coeffs: CoefficientField, degree_max: int, probe_angles: Sequence[Orientation],
                      rule: QuadratureRule, n_theta: int = 256, tol: float = TOL_HLCC) -> HlccReport:
    """Compare detector moments of the interpolated sinogram with the same moments of f.

    m_l(R) = int x^l (P f)(R, x) dx is taken with x = sin(theta) on the
    rule's nodes; q_l(R) = int (z . v_R)^l f(z) dz with v_R = R^T e_1 comes
    from one polar sampling of f. Deviations are relative to int |z|^l |f|.
    """
    if degree_max < 0 or degree_max > 4:
        raise InvalidArgumentError(f"degree_max must lie in [0, 4], got {degree_max}")
    _check_field(coeffs)
    if coeffs.kernel_params.dim != 2:
        raise InvalidArgumentError("the moment check is implemented for planar reconstructions")
    degrees = list(range(degree_max + 1))

    theta, theta_weights = rule.mapped(-0.5 * np.pi, 0.5 * np.pi)
    detector = np.sin(theta)
    detector_weights = theta_weights * np.cos(theta)
    sinogram = interpolate_sinogram_grid(coeffs, probe_angles, detector)

    disk_points, disk_weights = _polar_rule(rule, n_theta)
    f_values = evaluate_points(coeffs, disk_points)
    radius = np.linalg.norm(disk_points, axis=1)

    moments, reference, deviations = [], [], []
    for R, row in zip(probe_angles, sinogram):
        axis = R.matrix[0, :]
        along = disk_points @ axis
        m_row, q_row, d_row = [], [], []
        for l in degrees:
            m_l = float(np.sum(detector_weights * detector ** l * row))
            q_l = float(np.sum(disk_weights * along ** l * f_values))
            scale = float(np.sum(disk_weights * radius ** l * np.abs(f_values)))
            m_row.append(m_l)
            q_row.append(q_l)
            d_row.append(abs(m_l - q_l) / scale if scale > 0.0 else abs(m_l - q_l))
        moments.append(m_row)
        reference.append(q_row)
        deviations.append(d_row)

    max_deviation = max((max(row) for row in deviations), default=0.0)
    passed = max_deviation <= tol
    log = logger.info if passed else logger.warning
    log(f"Moment check over {len(probe_angles)} probes, degrees 0..{degree_max}: max deviation {max_deviation:.3e}")
    return HlccReport(degrees=degrees, probe_angles=[float(R.angle or 0.0) for R in probe_angles],
                      moments=moments, reference=reference, deviations=deviations,
                      max_deviation=max_deviation, tol=tol, passed=passed)


def raster_line_integral(raster: ImageRaster, angle: float, offset: float, step: Optional[float] = None) -> float:
    """Ray-march the line x(cos phi, -sin phi) + t(sin phi, cos phi) through the raster with bilinear sampling"""
    half = float(np.sqrt(max(0.0, 1.0 - offset * offset)))
    if half == 0.0:
        return 0.0
    step = step or 0.5 / raster.side
    count = max(2, int(np.ceil(2.0 * half / step)))
    t = -half + (np.arange(count) + 0.5) * (2.0 * half / count)
    x = offset * np.cos(angle) + t * np.sin(angle)
    y = -offset * np.sin(angle) + t * np.cos(angle)
    cols = (x + 1.0) * raster.side / 2.0 - 0.5
    rows = (1.0 - y) * raster.side / 2.0 - 0.5
    samples = ndimage.map_coordinates(raster.values, [rows, cols], order=1, mode='nearest')
    return float(np.sum(samples) * 2.0 * half / count)


def save_raster_pgm(raster: ImageRaster, file_path: Union[str, Path], config_hash: str = "") -> Path:
    """8-bit P5 image, min-max scaled; the scale is kept in comment lines"""
    path = ensure_parent(file_path)
    low, high = float(np.min(raster.values)), float(np.max(raster.values))
    span = high - low
    scaled = np.zeros_like(raster.values) if span == 0.0 else (raster.values - low) / span
    pixels = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    header = (f"P5\n# min: {low:.17g}\n# max: {high:.17g}\n# config_hash: {config_hash}\n"
              f"{raster.side} {raster.side}\n255\n").encode('ascii')
    with open(path, 'wb') as f:
        f.write(header)
        f.write(pixels.tobytes())
    logger.info(f"Wrote {raster.side}x{raster.side} PGM to {path}")
    return path


def save_raster_csv(raster: ImageRaster, file_path: Union[str, Path], config_hash: str = "") -> Path:
    """Lossless P rows of P float64 values"""
    path = ensure_parent(file_path)
    body = pd.DataFrame(raster.values).to_csv(header=False, index=False, float_format='%.17g',
                                               lineterminator='\n')
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(f"# side: {raster.side}\n# config_hash: {config_hash}\n")
        f.write(body)
    logger.info(f"Wrote {raster.side}x{raster.side} CSV raster to {path}")
    return path


def load_raster_csv(file_path: Union[str, Path]) -> ImageRaster:
    path = Path(file_path)
    text = path.read_text(encoding='utf-8')
    try:
        values = pd.read_csv(io.StringIO(text), comment='#', header=None, dtype=float,
                             float_precision='round_trip').to_numpy()
    except (ValueError, pd.errors.ParserError) as e:
        raise DataFormatError(f"{path}: {e}")
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise DataFormatError(f"{path}: raster must be square, got {values.shape}")
    return ImageRaster.blank(values.shape[0]).with_values(values)


def save_raster(raster: ImageRaster, outputs: str, config_hash: str = "") -> List[Path]:
    """Write to every comma-separated path, by extension (.pgm or .csv)"""
    written = []
    for target in (part.strip() for part in outputs.split(',') if part.strip()):
        suffix = Path(target).suffix.lower()
        if suffix == '.pgm':
            written.append(save_raster_pgm(raster, target, config_hash))
        elif suffix == '.csv':
            written.append(save_raster_csv(raster, target, config_hash))
        else:
            raise InvalidArgumentError(f"unsupported raster output {target!r} (use .pgm or .csv)")
    return written
