"""
Geometry for Kernel CT Reconstruction
Orientations in SO(n), Euler matrices, Euclidean projections and the
relative-angle quantities behind the closed-form Gram entries
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from utils import InvalidArgumentError, ValidationUtils, config

logger = logging.getLogger(__name__)

TAU_PARALLEL = float(config.setting("numerics", "tau_parallel", 1e-8))
ORTHO_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Orientation:
    """A rotation R in SO(n); for n = 2 also its angle, R = E(angle)"""

    dim: int
    matrix: np.ndarray
    angle: Optional[float] = None

    def __post_init__(self):
        if self.dim < 2:
            raise InvalidArgumentError(f"Orientation dimension must be at least 2, got {self.dim}")
        matrix = np.array(self.matrix, dtype=float)
        if matrix.shape != (self.dim, self.dim):
            raise InvalidArgumentError(f"Expected a {self.dim}x{self.dim} matrix, got {matrix.shape}")
        if np.max(np.abs(matrix @ matrix.T - np.eye(self.dim))) > ORTHO_TOL * self.dim:
            raise InvalidArgumentError("Orientation matrix is not orthogonal")
        if abs(np.linalg.det(matrix) - 1.0) > ORTHO_TOL * self.dim:
            raise InvalidArgumentError("Orientation matrix must have determinant 1")
        matrix.setflags(write=False)
        object.__setattr__(self, 'matrix', matrix)

    @classmethod
    def from_angle(cls, angle: float) -> "Orientation":
        """E(angle) = [[cos, -sin], [sin, cos]]"""
        c, s = np.cos(angle), np.sin(angle)
        return cls(dim=2, matrix=np.array([[c, -s], [s, c]]), angle=float(angle))

    @classmethod
    def identity(cls, dim: int) -> "Orientation":
        return cls(dim=dim, matrix=np.eye(dim), angle=0.0 if dim == 2 else None)

    @property
    def axis(self) -> np.ndarray:
        """Viewing axis r = R^T e_n"""
        return np.array(self.matrix[-1, :])

    def project(self, z: np.ndarray) -> np.ndarray:
        return euclidean_project(self, z)

    def embed(self, x: np.ndarray, t: Union[float, np.ndarray] = 0.0) -> np.ndarray:
        return euclidean_embed(self, x, t)


@dataclass(frozen=True, eq=False)
class RelativeAngleData:
    """Euler-reduced coordinates of a pair of generators at orientations R1, R2.

    In the parallel branch the reduced vectors are the (n-1)-dimensional
    points x1 and (R[x2:0])[:n-1]; otherwise they are (n-2)-vectors.
    """

    r: float
    w_r: float
    reduced_x1: np.ndarray
    reduced_x2: np.ndarray
    x1r: float
    x2R: float
    mu1: float
    mu2: float
    parallel: bool
    reduced_sq: float

    def distance_sq(self, z1: float, z2: float) -> float:
        """||[x1:z1] - R[x2:z2]||^2 through the reduced decomposition"""
        if self.parallel:
            return self.reduced_sq + (z1 - self.r * z2) ** 2
        m1, m2 = self.mu1 / self.w_r, self.mu2 / self.w_r
        d1, d2 = z1 - m1, z2 - m2
        return self.reduced_sq + d1 * d1 - 2.0 * self.r * d1 * d2 + d2 * d2


@dataclass(frozen=True, eq=False)
class RelativeTerms:
    """Vectorized relative-angle quantities for one relative rotation and many point pairs"""

    r: float
    w: float
    parallel: bool
    x1r: np.ndarray
    x2R: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    reduced_sq: np.ndarray


def planar_rotation(dim: int, plane: int, angle: float) -> np.ndarray:
    """R^plane_angle: rotation in coordinates (plane-1, plane), 1 <= plane <= dim-1"""
    if not 1 <= plane <= dim - 1:
        raise InvalidArgumentError(f"plane index must lie in [1, {dim - 1}], got {plane}")
    rot = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    i, j = plane - 1, plane
    rot[i, i], rot[i, j] = c, s
    rot[j, i], rot[j, j] = -s, c
    return rot


def spherical_angles(theta: np.ndarray) -> np.ndarray:
    """Angles (phi_1, ..., phi_{n-1}) with phi_1 in [-pi, pi) and the rest in [0, pi]"""
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    angles = np.zeros(n - 1)
    for k in range(n - 1, 1, -1):
        head = float(np.linalg.norm(theta[:k]))
        if head == 0.0 and theta[k] == 0.0:
            continue
        angles[k - 1] = np.arctan2(head, theta[k])
    phi1 = np.arctan2(theta[0], theta[1]) if (theta[0] or theta[1]) else 0.0
    if phi1 >= np.pi:
        phi1 -= 2.0 * np.pi
    angles[0] = phi1
    return angles


def euler_matrix(theta: np.ndarray) -> Orientation:
    """E(theta) = R^{n-1}_{-phi_{n-1}} ... R^1_{-phi_1}, so that E(theta)^T e_n = theta"""
    theta = ValidationUtils.check_unit_vector(theta)
    n = theta.size
    if n < 2:
        raise InvalidArgumentError("theta must have at least two coordinates")
    angles = spherical_angles(theta)
    matrix = np.eye(n)
    for plane in range(1, n):
        matrix = planar_rotation(n, plane, -angles[plane - 1]) @ matrix
    return Orientation(dim=n, matrix=matrix, angle=float(angles[0]) if n == 2 else None)


def euclidean_project(R: Orientation, z: np.ndarray) -> np.ndarray:
    """P_R z: the first n-1 coordinates of R z (rows of z for a stack of points)"""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != R.dim:
        raise InvalidArgumentError(f"Expected points of dimension {R.dim}, got {z.shape}")
    return (z @ R.matrix.T)[..., :R.dim - 1]


def euclidean_embed(R: Orientation, x: np.ndarray, t: Union[float, np.ndarray] = 0.0) -> np.ndarray:
    """R^T [x : t], the point on the ray through detector position x at depth t"""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != R.dim - 1:
        raise InvalidArgumentError(f"Expected detector points of dimension {R.dim - 1}, got {x.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
    full = np.concatenate([x, t[..., None]], axis=-1)
    return full @ R.matrix


def relative_rotation(R1: Orientation, R2: Orientation) -> np.ndarray:
    """R1 R2^T; planar angles are differenced first so equal angles give the identity exactly"""
    if R1.dim != R2.dim:
        raise InvalidArgumentError(f"Orientation dimensions differ: {R1.dim} vs {R2.dim}")
    if R1.dim == 2 and R1.angle is not None and R2.angle is not None:
        return Orientation.from_angle(R1.angle - R2.angle).matrix
    return R1.matrix @ R2.matrix.T


def relative_terms(rotation: np.ndarray, X1: np.ndarray, X2: np.ndarray,
                   tau_parallel: float = TAU_PARALLEL) -> RelativeTerms:
    """Relative-angle quantities for the rows of X1, X2 under one relative rotation R"""
    n = rotation.shape[0]
    X1 = np.asarray(X1, dtype=float).reshape(-1, n - 1)
    X2 = np.asarray(X2, dtype=float).reshape(-1, n - 1)
    r = float(np.clip(rotation[-1, -1], -1.0, 1.0))
    # ||(R e_n)[:n-1]|| equals sqrt(1 - r^2) but stays exact near |r| = 1
    w = float(min(1.0, np.linalg.norm(rotation[:n - 1, -1])))

    # R [x2 : 0] for every row
    RX2 = X2 @ rotation[:, :n - 1].T
    diff = X1 - RX2[:, :n - 1]
    a_sq = np.sum(diff * diff, axis=1) + RX2[:, n - 1] ** 2

    if w < tau_parallel:
        zeros = np.zeros(X1.shape[0])
        return RelativeTerms(r=r, w=w, parallel=True, x1r=zeros, x2R=zeros.copy(),
                             mu1=zeros.copy(), mu2=zeros.copy(), reduced_sq=a_sq)

    u_head = rotation[:n - 1, -1]
    v_head = rotation[-1, :n - 1]
    t_axis = u_head / np.linalg.norm(u_head)
    s_axis = v_head / np.linalg.norm(v_head)
    x1r = X1 @ t_axis
    x2R = -(X2 @ s_axis)
    mu1 = r * x1r - x2R
    mu2 = x1r - r * x2R
    reduced_sq = np.maximum(0.0, a_sq - x1r ** 2 - x2R ** 2 + 2.0 * r * x1r * x2R)
    return RelativeTerms(r=r, w=w, parallel=False, x1r=x1r, x2R=x2R,
                         mu1=mu1, mu2=mu2, reduced_sq=reduced_sq)


def relative_angle_data(R1: Orientation, R2: Orientation, x1: np.ndarray, x2: np.ndarray,
                        tau_parallel: float = TAU_PARALLEL) -> RelativeAngleData:
    """Closed-form terms of R = R1 R2^T at mesh points x1, x2"""
    n = R1.dim
    x1 = ValidationUtils.check_in_ball(np.asarray(x1, dtype=float).reshape(n - 1), "x1")
    x2 = ValidationUtils.check_in_ball(np.asarray(x2, dtype=float).reshape(n - 1), "x2")
    rotation = relative_rotation(R1, R2)
    terms = relative_terms(rotation, x1, x2, tau_parallel)

    if terms.parallel:
        reduced_x1 = x1.copy()
        reduced_x2 = (rotation[:, :n - 1] @ x2)[:n - 1]
    elif n == 2:
        reduced_x1 = np.zeros(0)
        reduced_x2 = np.zeros(0)
    else:
        u_head = rotation[:n - 1, -1]
        v_head = rotation[-1, :n - 1]
        t_axis = u_head / np.linalg.norm(u_head)
        s_axis = v_head / np.linalg.norm(v_head)
        x1_perp = x1 - terms.x1r[0] * t_axis
        x2_perp = x2 + terms.x2R[0] * s_axis
        image = (rotation[:, :n - 1] @ x2_perp)[:n - 1]
        frame = euler_matrix(t_axis / np.linalg.norm(t_axis)).matrix
        reduced_x1 = (frame @ x1_perp)[:n - 2]
        reduced_x2 = (frame @ image)[:n - 2]

    return RelativeAngleData(
        r=terms.r,
        w_r=terms.w,
        reduced_x1=reduced_x1,
        reduced_x2=reduced_x2,
        x1r=float(terms.x1r[0]),
        x2R=float(terms.x2R[0]),
        mu1=float(terms.mu1[0]),
        mu2=float(terms.mu2[0]),
        parallel=terms.parallel,
        reduced_sq=float(terms.reduced_sq[0]),
    )
