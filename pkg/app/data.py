"""
Data for Kernel CT Reconstruction
Phantoms, analytic sinogram simulation, seeded noise, angle grids,
detector meshes and their file formats
"""

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator

from geometry import Orientation
from utils import (
    DataFormatError, InvalidArgumentError, ValidationUtils,
    ensure_parent, seeded_stream,
)

logger = logging.getLogger(__name__)

AngleKind = Literal["equiangular_full", "equiangular_half", "random", "lambda_mix"]

# Modified (Toft) Shepp-Logan table: intensity, semi-axes a/b, center, rotation in degrees
SHEPP_LOGAN_TABLE = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
]


class Ellipse(BaseModel):
    center: Tuple[float, float]
    semi_axes: Tuple[float, float]
    rotation: float = 0.0
    intensity: float = 1.0

    @field_validator('semi_axes')
    @classmethod
    def positive_axes(cls, axes: Tuple[float, float]) -> Tuple[float, float]:
        if axes[0] <= 0.0 or axes[1] <= 0.0:
            raise ValueError(f"semi-axes must be positive, got {axes}")
        return axes

    def frame(self) -> Tuple[np.ndarray, np.ndarray]:
        """Map p -> D^-1 Rot(-rotation)(p - center) as (matrix, center)"""
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        unrotate = np.array([[c, s], [-s, c]])
        matrix = np.diag(1.0 / np.asarray(self.semi_axes)) @ unrotate
        return matrix, np.asarray(self.center, dtype=float)

    def reach(self, samples: int = 3600) -> float:
        """Largest distance from the origin to the ellipse boundary"""
        t = np.linspace(0.0, 2.0 * np.pi, samples, endpoint=False)
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        a, b = self.semi_axes
        px = self.center[0] + a * np.cos(t) * c - b * np.sin(t) * s
        py = self.center[1] + a * np.cos(t) * s + b * np.sin(t) * c
        return float(np.max(np.hypot(px, py)))

    def contains(self, points: np.ndarray) -> np.ndarray:
        matrix, center = self.frame()
        local = (np.asarray(points, dtype=float) - center) @ matrix.T
        return np.sum(local * local, axis=-1) <= 1.0

    def chord_length(self, angles: np.ndarray, offsets: np.ndarray) -> np.ndarray:
        """Length of the ray x(cos phi, -sin phi) + t(sin phi, cos phi) inside the ellipse"""
        angles = np.asarray(angles, dtype=float)[:, None]
        offsets = np.asarray(offsets, dtype=float)[None, :]
        matrix, center = self.frame()
        c, s = np.cos(angles), np.sin(angles)
        base_x = offsets * c - center[0]
        base_y = -offsets * s - center[1]
        u0x = matrix[0, 0] * base_x + matrix[0, 1] * base_y
        u0y = matrix[1, 0] * base_x + matrix[1, 1] * base_y
        ex = matrix[0, 0] * s + matrix[0, 1] * c
        ey = matrix[1, 0] * s + matrix[1, 1] * c
        e_sq = ex * ex + ey * ey
        proj = u0x * ex + u0y * ey
        disc = proj * proj - e_sq * (u0x * u0x + u0y * u0y - 1.0)
        return 2.0 * np.sqrt(np.maximum(disc, 0.0)) / e_sq


class Phantom(BaseModel):
    """Superposition of constant-intensity ellipses inside the unit disk"""

    name: str = "custom"
    ellipses: List[Ellipse]
    scale: float = 1.0

    @field_validator('ellipses')
    @classmethod
    def inside_unit_disk(cls, ellipses: List[Ellipse]) -> List[Ellipse]:
        for index, ellipse in enumerate(ellipses):
            if ellipse.reach() > 1.0 + 1e-9:
                raise ValueError(f"ellipse {index} leaves the unit disk (reach {ellipse.reach():.6f})")
        return ellipses

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """f0 at the rows of an (..., 2) array of points"""
        points = np.asarray(points, dtype=float)
        values = np.zeros(points.shape[:-1])
        for ellipse in self.ellipses:
            values += ellipse.intensity * ellipse.contains(points)
        return self.scale * values

    def line_integrals(self, angles: np.ndarray, offsets: np.ndarray) -> np.ndarray:
        """N x M exact X-ray transform samples"""
        total = np.zeros((np.size(angles), np.size(offsets)))
        for ellipse in self.ellipses:
            total += ellipse.intensity * ellipse.chord_length(angles, offsets)
        return self.scale * total


class AngleGrid(BaseModel):
    angles: List[float]
    kind: AngleKind = "random"
    lam: Optional[float] = None
    seed: int = 0

    @field_validator('angles')
    @classmethod
    def angles_in_range(cls, angles: List[float]) -> List[float]:
        if not angles:
            raise ValueError("an angle grid needs at least one angle")
        if any(a < 0.0 or a >= 2.0 * np.pi for a in angles):
            raise ValueError("angles must lie in [0, 2*pi)")
        return angles

    @property
    def n_angles(self) -> int:
        return len(self.angles)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.angles, dtype=float)

    def orientations(self) -> List[Orientation]:
        return [Orientation.from_angle(a) for a in self.angles]

    def is_full_circle(self, tol: float = 1e-12) -> bool:
        """True for the grid i*2*pi/N, the block-circulant case"""
        n = self.n_angles
        expected = 2.0 * np.pi * np.arange(n) / n
        return bool(np.max(np.abs(self.as_array() - expected)) <= tol)


@dataclass(frozen=True, eq=False)
class DetectorMesh:
    """M detector points in the closed unit ball of R^(n-1)"""

    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] < 1:
            raise InvalidArgumentError(f"mesh points must form an M x (n-1) array, got {points.shape}")
        ValidationUtils.check_in_ball(points, "mesh point")
        points.setflags(write=False)
        object.__setattr__(self, 'points', points)

    @property
    def n_mesh(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1] + 1

    @property
    def max_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    def offsets(self) -> np.ndarray:
        """Scalar detector positions (n = 2 only)"""
        if self.dim != 2:
            raise InvalidArgumentError("scalar offsets exist only for planar meshes")
        return self.points[:, 0]


@dataclass(frozen=True, eq=False)
class Sinogram:
    """N x M observations y_ij with their grids and noise metadata"""

    values: np.ndarray
    angle_grid: AngleGrid
    mesh: DetectorMesh
    sigma: float = 0.0
    seed: int = 0
    unit_scale: float = 1.0
    config_hash: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        expected = (self.angle_grid.n_angles, self.mesh.n_mesh)
        if values.shape != expected:
            raise DataFormatError(f"sinogram shape {values.shape} does not match grids {expected}")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def orientations(self) -> List[Orientation]:
        return self.angle_grid.orientations()

    def with_values(self, values: np.ndarray) -> "Sinogram":
        return Sinogram(values=values, angle_grid=self.angle_grid, mesh=self.mesh, sigma=self.sigma,
                        seed=self.seed, unit_scale=self.unit_scale, config_hash=self.config_hash)


def shepp_logan(scale: float = 10.0) -> Phantom:
    ellipses = [
        Ellipse(center=(x0, y0), semi_axes=(a, b), rotation=np.deg2rad(deg), intensity=amp)
        for amp, a, b, x0, y0, deg in SHEPP_LOGAN_TABLE
    ]
    return Phantom(name="shepp_logan", ellipses=ellipses, scale=scale)


def unit_disk_phantom(intensity: float = 1.0) -> Phantom:
    return Phantom(name="unit_disk",
                   ellipses=[Ellipse(center=(0.0, 0.0), semi_axes=(1.0, 1.0), intensity=intensity)])


def point_source_phantom(center: Sequence[float] = (0.5, 0.0), radius: float = 0.02,
                         intensity: float = 1.0) -> Phantom:
    """Small disk standing in for a point source"""
    return Phantom(name="point_source",
                   ellipses=[Ellipse(center=tuple(center), semi_axes=(radius, radius), intensity=intensity)])


def chord_length(phantom: Phantom, angle: float, offset: float) -> float:
    """Intensity-weighted length of one ray through the phantom"""
    return float(phantom.line_integrals(np.array([angle]), np.array([offset]))[0, 0])


def make_angle_grid(kind: str, n_angles: int, lam: Optional[float] = None, seed: int = 0) -> AngleGrid:
    """Angle grid of the requested kind.

    lambda_mix blends sorted uniform draws on [0, pi) with the half-circle
    equiangular grid: phi_j = (1 - lam) pi U_(j) + lam pi (j - 1) / N.
    random is the lam = 0 case and equiangular_half the lam = 1 case.
    """
    aliases = {"equi": "equiangular_half", "full": "equiangular_full", "lambda": "lambda_mix"}
    kind = aliases.get(kind, kind)
    if n_angles < 1:
        raise InvalidArgumentError(f"need at least one angle, got {n_angles}")
    index = np.arange(n_angles)

    if kind == "equiangular_full":
        angles = 2.0 * np.pi * index / n_angles
        lam = None
    elif kind == "equiangular_half":
        angles = np.pi * index / n_angles
        lam = None
    elif kind in ("random", "lambda_mix"):
        if kind == "random":
            lam = 0.0
        if lam is None:
            raise InvalidArgumentError("lambda_mix grids need a lambda value")
        lam = ValidationUtils.check_probability(float(lam), "lambda")
        draws = np.sort(seeded_stream(seed, 0).random(n_angles))
        angles = (1.0 - lam) * np.pi * draws + lam * np.pi * index / n_angles
    else:
        raise InvalidArgumentError(f"Unknown angle grid kind: {kind}")

    return AngleGrid(angles=[float(a) for a in angles], kind=kind, lam=lam, seed=seed)


def make_mesh(n_mesh: int, dim: int = 2) -> DetectorMesh:
    """Cell-centered mesh x_j = -1 + (2j - 1)/M; tensor grid clipped to the ball when dim > 2"""
    if n_mesh < 1:
        raise InvalidArgumentError(f"need at least one mesh point, got {n_mesh}")
    centers = -1.0 + (2.0 * np.arange(1, n_mesh + 1) - 1.0) / n_mesh
    if dim == 2:
        return DetectorMesh(points=centers[:, None])
    grids = np.meshgrid(*([centers] * (dim - 1)), indexing='ij')
    points = np.stack([g.ravel() for g in grids], axis=1)
    inside = np.linalg.norm(points, axis=1) < 1.0
    return DetectorMesh(points=points[inside])


def draw_noise(shape: Tuple[int, int], sigma: float, seed: int) -> np.ndarray:
    """eps_ij ~ N(0, sigma^2), row i drawn as one block from stream 1 + i"""
    n_angles, n_mesh = shape
    noise = np.zeros(shape)
    if sigma == 0.0:
        return noise
    for i in range(n_angles):
        noise[i] = seeded_stream(seed, 1 + i).standard_normal(n_mesh)
    return sigma * noise


def simulate_sinogram(phantom: Phantom, angle_grid: AngleGrid, mesh: DetectorMesh, sigma: float = 0.0,
                      seed: int = 0, unit_scale: float = 1.0, config_hash: str = "") -> Sinogram:
    if mesh.dim != 2:
        raise InvalidArgumentError("sinogram simulation is planar only")
    if sigma < 0.0:
        raise InvalidArgumentError(f"sigma must be nonnegative, got {sigma}")
    clean = unit_scale * phantom.line_integrals(angle_grid.as_array(), mesh.offsets())
    values = clean + draw_noise(clean.shape, sigma, seed)
    logger.info(f"Simulated {values.shape[0]}x{values.shape[1]} sinogram of {phantom.name} (sigma={sigma}, seed={seed})")
    return Sinogram(values=values, angle_grid=angle_grid, mesh=mesh, sigma=sigma, seed=seed,
                    unit_scale=unit_scale, config_hash=config_hash)


def _format_list(values: Sequence[float]) -> str:
    return ",".join(format(float(v), '.17g') for v in values)


class DataLoader:
    """Load and save sinograms and phantoms"""

    HEADER_KEYS = ("angles", "mesh", "sigma", "seed", "kind", "lambda", "unit_scale", "config_hash")

    @staticmethod
    def save_sinogram(sino: Sinogram, file_path: Union[str, Path]) -> Path:
        """Write header comment lines and N rows of M values"""
        if sino.mesh.dim != 2:
            raise InvalidArgumentError("the sinogram CSV format stores planar meshes only")
        path = ensure_parent(file_path)
        grid = sino.angle_grid
        lines = [
            f"# angles: {_format_list(grid.angles)}",
            f"# mesh: {_format_list(sino.mesh.offsets())}",
            f"# sigma: {format(float(sino.sigma), '.17g')}",
            f"# seed: {int(sino.seed)}",
            f"# kind: {grid.kind}",
            f"# lambda: {'' if grid.lam is None else format(float(grid.lam), '.17g')}",
            f"# unit_scale: {format(float(sino.unit_scale), '.17g')}",
            f"# config_hash: {sino.config_hash}",
        ]
        body = pd.DataFrame(sino.values).to_csv(header=False, index=False, float_format='%.17g',
                                                 lineterminator='\n')
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write("\n".join(lines) + "\n")
            f.write(body)
        logger.info(f"Saved sinogram {sino.shape} to {path}")
        return path

    @staticmethod
    def load_sinogram(file_path: Union[str, Path]) -> Sinogram:
        path = Path(file_path)
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()

        header = {}
        for line in text.splitlines():
            if not line.startswith('#'):
                continue
            key, _, value = line[1:].partition(':')
            header[key.strip()] = value.strip()
        missing = [key for key in ("angles", "mesh", "sigma", "seed") if key not in header]
        if missing:
            raise DataFormatError(f"{path}: missing header lines {missing}")

        try:
            angles = [float(v) for v in header["angles"].split(',')]
            offsets = np.array([float(v) for v in header["mesh"].split(',')])
            values = pd.read_csv(io.StringIO(text), comment='#', header=None, dtype=float,
                                 float_precision='round_trip').to_numpy()
            lam_text = header.get("lambda", "")
            grid = AngleGrid(angles=angles, kind=header.get("kind", "random"),
                             lam=float(lam_text) if lam_text else None, seed=int(header["seed"]))
            return Sinogram(
                values=values,
                angle_grid=grid,
                mesh=DetectorMesh(points=offsets[:, None]),
                sigma=float(header["sigma"]),
                seed=int(header["seed"]),
                unit_scale=float(header.get("unit_scale", "1") or 1.0),
                config_hash=header.get("config_hash", ""),
            )
        except (ValueError, ValidationError, pd.errors.ParserError, InvalidArgumentError) as e:
            logger.error(f"Malformed sinogram file {path}: {e}")
            raise DataFormatError(f"{path}: {e}")

    @staticmethod
    def save_phantom(phantom: Phantom, file_path: Union[str, Path]) -> Path:
        path = ensure_parent(file_path)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(phantom.model_dump_json(indent=2))
        logger.info(f"Saved phantom {phantom.name} ({len(phantom.ellipses)} ellipses) to {path}")
        return path

    @staticmethod
    def load_phantom(file_path: Union[str, Path]) -> Phantom:
        path = Path(file_path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return Phantom.model_validate_json(f.read())
        except ValidationError as e:
            logger.error(f"Invalid phantom table {path}: {e}")
            raise DataFormatError(f"{path}: {e}")
