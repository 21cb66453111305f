"""
Gram Matrix Assembly for Kernel CT Reconstruction
Dense and block-circulant assembly of W, its spectrum, and the binary
Gram cache
"""

import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from data import AngleGrid, DetectorMesh
from geometry import Orientation, relative_rotation
from kernels import GaussianKernelParams, cross_gram_block
from utils import (
    DataFormatError, InvalidArgumentError, RankZeroError, config, ensure_parent,
)

logger = logging.getLogger(__name__)

DELTA_BOUNDARY = float(config.setting("numerics", "delta_boundary", 1e-6))
TAU_RANK = float(config.setting("numerics", "tau_rank", 1e-10))
WORKERS = int(config.setting("numerics", "workers", 4))

CACHE_MAGIC = b'KRGRAM\x00\x00'
CACHE_VERSION = 1
_HEADER = struct.Struct('<8sIIIIdI16s')


class GramLayout(str, Enum):
    DENSE = "dense"
    CIRCULANT = "block_circulant"


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """NM x NM Gram matrix, stored dense or as the N circulant blocks W_0..W_{N-1}.

    Entry ((i, j), (i', j')) sits at row i*M + j; in the circulant layout it
    equals blocks[(i - i') mod N][j, j'].
    """

    layout: GramLayout
    n_angles: int
    n_mesh: int
    kernel_params: Optional[GaussianKernelParams] = None
    orientations: Tuple[Orientation, ...] = ()
    mesh: Optional[DetectorMesh] = None
    dense_data: Optional[np.ndarray] = None
    blocks: Optional[np.ndarray] = None
    config_hash: str = ""

    def __post_init__(self):
        size = self.n_angles * self.n_mesh
        if self.layout == GramLayout.DENSE:
            if self.dense_data is None or self.dense_data.shape != (size, size):
                raise InvalidArgumentError(f"dense Gram data must be {size}x{size}")
            self.dense_data.setflags(write=False)
        else:
            expected = (self.n_angles, self.n_mesh, self.n_mesh)
            if self.blocks is None or self.blocks.shape != expected:
                raise InvalidArgumentError(f"circulant blocks must have shape {expected}")
            self.blocks.setflags(write=False)

    @classmethod
    def from_dense(cls, matrix: np.ndarray, n_angles: int = 1, **kwargs) -> "GramMatrix":
        """Wrap an explicit symmetric matrix (synthetic Grams, cached data)"""
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise InvalidArgumentError(f"Gram matrix must be square, got {matrix.shape}")
        if matrix.shape[0] % n_angles:
            raise InvalidArgumentError(f"size {matrix.shape[0]} is not a multiple of N = {n_angles}")
        return cls(layout=GramLayout.DENSE, n_angles=n_angles, n_mesh=matrix.shape[0] // n_angles,
                   dense_data=matrix, **kwargs)

    @property
    def size(self) -> int:
        return self.n_angles * self.n_mesh

    @property
    def is_circulant(self) -> bool:
        return self.layout == GramLayout.CIRCULANT

    def expand(self) -> np.ndarray:
        """The full NM x NM matrix"""
        if not self.is_circulant:
            return np.array(self.dense_data)
        n, m = self.n_angles, self.n_mesh
        index = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
        full = self.blocks[index]  # (N, N, M, M)
        return full.transpose(0, 2, 1, 3).reshape(n * m, n * m)

    def matvec(self, alpha: np.ndarray) -> np.ndarray:
        """W alpha for a flat NM vector or an N x M coefficient array (shape preserved)"""
        alpha = np.asarray(alpha, dtype=float)
        shape = alpha.shape
        if alpha.size != self.size:
            raise InvalidArgumentError(f"expected {self.size} coefficients, got {alpha.size}")
        if not self.is_circulant:
            return (self.dense_data @ alpha.ravel()).reshape(shape)
        coeffs = alpha.reshape(self.n_angles, self.n_mesh)
        spectrum = np.fft.fft(self.blocks, axis=0) @ np.fft.fft(coeffs, axis=0)[:, :, None]
        return np.fft.ifft(spectrum[:, :, 0], axis=0).real.reshape(shape)

    def frequency_blocks(self) -> np.ndarray:
        """Hermitian blocks W^_k = sum_d W_d exp(-2 pi i k d / N)"""
        if not self.is_circulant:
            raise InvalidArgumentError("frequency blocks exist only for the circulant layout")
        return np.fft.fft(self.blocks, axis=0)


def _orientations_of(angles: Union[AngleGrid, Sequence[Orientation]]) -> List[Orientation]:
    if isinstance(angles, AngleGrid):
        return angles.orientations()
    return list(angles)


def check_mesh_interior(mesh: DetectorMesh, delta: float = DELTA_BOUNDARY) -> None:
    if mesh.max_norm > 1.0 - delta:
        logger.error(f"Mesh point at norm {mesh.max_norm:.9f} is within {delta:g} of the boundary")
        raise InvalidArgumentError(
            f"mesh point at norm {mesh.max_norm:.9f} lies within {delta:g} of the unit sphere; "
            "boundary generators vanish and leave zero rows in W")


def _check_dims(params: GaussianKernelParams, orientations: Sequence[Orientation], mesh: DetectorMesh) -> None:
    dims = {params.dim, mesh.dim} | {R.dim for R in orientations}
    if len(dims) != 1:
        raise InvalidArgumentError(f"kernel, orientations and mesh disagree on dimension: {sorted(dims)}")


def _symmetric_diagonal_block(block: np.ndarray) -> np.ndarray:
    upper = np.triu(block)
    return upper + np.triu(block, 1).T


def assemble_dense(params: GaussianKernelParams, angles: Union[AngleGrid, Sequence[Orientation]],
                   mesh: DetectorMesh, allow_boundary: bool = False,
                   workers: Optional[int] = None) -> GramMatrix:
    """W with w_{ij,i'j'} from the closed form at the relative rotation R_i R_i'^T.

    Only blocks with i <= i' are evaluated; the lower triangle is mirrored.
    """
    orientations = _orientations_of(angles)
    _check_dims(params, orientations, mesh)
    if not allow_boundary:
        check_mesh_interior(mesh)
    n, m = len(orientations), mesh.n_mesh
    points = mesh.points
    data = np.zeros((n * m, n * m))
    pairs = [(i, k) for i in range(n) for k in range(i, n)]

    def fill(pair: Tuple[int, int]) -> None:
        i, k = pair
        block = cross_gram_block(params, relative_rotation(orientations[i], orientations[k]), points, points)
        if i == k:
            block = _symmetric_diagonal_block(block)
        data[i * m:(i + 1) * m, k * m:(k + 1) * m] = block
        if i != k:
            data[k * m:(k + 1) * m, i * m:(i + 1) * m] = block.T

    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers or WORKERS) as pool:
        list(pool.map(fill, pairs))
    logger.info(f"Assembled dense Gram {n * m}x{n * m} (N={n}, M={m}, gamma={params.gamma:g}) "
                f"in {time.perf_counter() - start:.2f}s")
    return GramMatrix(layout=GramLayout.DENSE, n_angles=n, n_mesh=m, kernel_params=params,
                      orientations=tuple(orientations), mesh=mesh, dense_data=data)


def assemble_circulant(params: GaussianKernelParams, n_angles: int, mesh: DetectorMesh,
                       allow_boundary: bool = False, workers: Optional[int] = None) -> GramMatrix:
    """Blocks W_d at relative angle 2 pi d / N for the full-circle equiangular grid"""
    if params.dim != 2 or mesh.dim != 2:
        raise InvalidArgumentError("the block-circulant layout is planar only")
    if n_angles < 1:
        raise InvalidArgumentError(f"need at least one angle, got {n_angles}")
    if not allow_boundary:
        check_mesh_interior(mesh)
    n, m = n_angles, mesh.n_mesh
    points = mesh.points
    blocks = np.zeros((n, m, m))

    def fill(d: int) -> None:
        rotation = Orientation.from_angle(2.0 * np.pi * d / n).matrix
        block = cross_gram_block(params, rotation, points, points)
        if d == 0:
            block = _symmetric_diagonal_block(block)
        blocks[d] = block
        if 0 < d and n - d != d:
            blocks[n - d] = block.T

    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers or WORKERS) as pool:
        list(pool.map(fill, range(n // 2 + 1)))
    logger.info(f"Assembled circulant Gram blocks (N={n}, M={m}, gamma={params.gamma:g}) "
                f"in {time.perf_counter() - start:.2f}s")
    orientations = tuple(Orientation.from_angle(2.0 * np.pi * i / n) for i in range(n))
    return GramMatrix(layout=GramLayout.CIRCULANT, n_angles=n, n_mesh=m, kernel_params=params,
                      orientations=orientations, mesh=mesh, blocks=blocks)


def gram_spectrum(W: GramMatrix) -> np.ndarray:
    """All eigenvalues of W in ascending order"""
    if W.is_circulant:
        values = np.concatenate([linalg.eigvalsh(block) for block in W.frequency_blocks()])
        return np.sort(values)
    return linalg.eigh(W.dense_data, eigvals_only=True)


def smallest_nonzero_eigenvalue(W: GramMatrix, tau_rank: float = TAU_RANK) -> Tuple[float, np.ndarray]:
    """d = min{lambda_k > tau_rank * lambda_max}, with the full spectrum"""
    spectrum = gram_spectrum(W)
    top = float(spectrum[-1]) if spectrum.size else 0.0
    if top <= 0.0:
        logger.error("Gram matrix has no positive eigenvalue")
        raise RankZeroError("rank zero: the Gram matrix has no nonzero eigenvalue")
    nonzero = spectrum[spectrum > tau_rank * top]
    return float(nonzero[0]), spectrum


def _orientation_payload(W: GramMatrix) -> np.ndarray:
    if W.kernel_params is not None and W.kernel_params.dim == 2:
        return np.array([R.angle for R in W.orientations], dtype='<f8')
    return np.concatenate([R.matrix.ravel() for R in W.orientations]).astype('<f8')


def save_gram(W: GramMatrix, file_path: Union[str, Path]) -> Path:
    """Header, orientations, mesh, then the matrix or blocks as little-endian float64"""
    if W.kernel_params is None or W.mesh is None or len(W.orientations) != W.n_angles:
        raise InvalidArgumentError("only assembled Gram matrices (with grids) can be cached")
    path = ensure_parent(file_path)
    layout_code = 0 if W.layout == GramLayout.DENSE else 1
    header = _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, W.kernel_params.dim, W.n_angles, W.n_mesh,
                          W.kernel_params.gamma, layout_code, W.config_hash.encode('ascii')[:16].ljust(16, b'\0'))
    payload = W.dense_data if W.layout == GramLayout.DENSE else W.blocks
    with open(path, 'wb') as f:
        f.write(header)
        f.write(_orientation_payload(W).tobytes())
        f.write(W.mesh.points.astype('<f8').tobytes())
        f.write(np.ascontiguousarray(payload, dtype='<f8').tobytes())
    logger.info(f"Cached {W.layout.value} Gram (N={W.n_angles}, M={W.n_mesh}) to {path}")
    return path


def load_gram(file_path: Union[str, Path], with_tail: bool = False):
    """Read a Gram cache; with_tail also returns any bytes after the matrix section"""
    path = Path(file_path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: too short for a Gram cache header")
    magic, version, n, n_angles, n_mesh, gamma, layout_code, digest = _HEADER.unpack_from(raw, 0)
    if magic != CACHE_MAGIC:
        raise DataFormatError(f"{path}: not a Gram cache (bad magic)")
    if version != CACHE_VERSION:
        raise DataFormatError(f"{path}: unsupported Gram cache version {version}")
    if layout_code not in (0, 1):
        raise DataFormatError(f"{path}: unknown layout code {layout_code}")

    orient_count = n_angles if n == 2 else n_angles * n * n
    mesh_count = n_mesh * (n - 1)
    size = n_angles * n_mesh
    data_count = size * size if layout_code == 0 else n_angles * n_mesh * n_mesh
    needed = _HEADER.size + 8 * (orient_count + mesh_count + data_count)
    if len(raw) < needed:
        raise DataFormatError(f"{path}: truncated Gram cache ({len(raw)} of {needed} bytes)")

    offset = _HEADER.size
    values = np.frombuffer(raw, dtype='<f8', count=orient_count + mesh_count + data_count, offset=offset)
    orient = values[:orient_count]
    mesh_points = values[orient_count:orient_count + mesh_count].reshape(n_mesh, n - 1)
    payload = values[orient_count + mesh_count:].astype(float)
    if n == 2:
        orientations = tuple(Orientation.from_angle(a) for a in orient)
    else:
        orientations = tuple(Orientation(dim=n, matrix=mat) for mat in orient.reshape(n_angles, n, n))

    params = GaussianKernelParams(gamma=gamma, dim=n)
    common = dict(n_angles=n_angles, n_mesh=n_mesh, kernel_params=params, orientations=orientations,
                  mesh=DetectorMesh(points=mesh_points), config_hash=digest.rstrip(b'\0').decode('ascii'))
    if layout_code == 0:
        W = GramMatrix(layout=GramLayout.DENSE, dense_data=payload.reshape(size, size), **common)
    else:
        W = GramMatrix(layout=GramLayout.CIRCULANT, blocks=payload.reshape(n_angles, n_mesh, n_mesh), **common)
    logger.info(f"Loaded {W.layout.value} Gram (N={n_angles}, M={n_mesh}, gamma={gamma:g}) from {path}")
    if with_tail:
        return W, raw[needed:]
    return W


def grids_match(W: GramMatrix, orientations: Sequence[Orientation], mesh: DetectorMesh,
                tol: float = 1e-12) -> bool:
    """True when W was assembled on the given orientations and mesh"""
    if W.mesh is None or len(W.orientations) != len(orientations) or W.mesh.points.shape != mesh.points.shape:
        return False
    if np.max(np.abs(W.mesh.points - mesh.points)) > tol:
        return False
    return all(np.max(np.abs(a.matrix - b.matrix)) <= tol for a, b in zip(W.orientations, orientations))
