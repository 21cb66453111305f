"""
Kernels for Kernel CT Reconstruction
Special functions, Gaussian closed forms for the induced kernel, the
backprojected generator and the cross-angle Gram integrals, plus a
tensor Gauss-Legendre oracle for arbitrary kernels
"""

import logging
from typing import Callable, List, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import special

from geometry import (
    Orientation, RelativeAngleData, RelativeTerms, TAU_PARALLEL, euclidean_embed,
    euclidean_project, relative_terms,
)
from utils import InvalidArgumentError, NumericalError, ValidationUtils, config

logger = logging.getLogger(__name__)

SQRT_PI = np.sqrt(np.pi)
TWO_PI = 2.0 * np.pi

# Half of the 20-point Gauss-Legendre rule (negative nodes) used by the
# bivariate normal integrator
_BVN_NODES = np.array([
    -0.9931285991850949, -0.9639719272779138, -0.9122344282513259,
    -0.8391169718222188, -0.7463319064601508, -0.6360536807265150,
    -0.5108670019508271, -0.3737060887154196, -0.2277858511416451,
    -0.07652652113349733,
])
_BVN_WEIGHTS = np.array([
    0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
    0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
    0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
    0.1527533871307259,
])

KernelFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


class GaussianKernelParams(BaseModel):
    """K(z1, z2) = exp(-gamma ||z1 - z2||^2) on the unit ball of R^dim"""

    model_config = ConfigDict(frozen=True)

    gamma: float = Field(gt=0.0)
    dim: int = Field(default=2, ge=2)

    def evaluate(self, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
        diff = np.asarray(z1, dtype=float) - np.asarray(z2, dtype=float)
        return np.exp(-self.gamma * np.sum(diff * diff, axis=-1))

    def __call__(self, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
        return self.evaluate(z1, z2)


class QuadratureRule(BaseModel):
    """Gauss-Legendre rule on [-1, 1], optionally composite over equal panels"""

    nodes: List[float]
    weights: List[float]
    order: int = Field(ge=1)
    panels: int = Field(default=1, ge=1)

    @field_validator('nodes')
    @classmethod
    def nodes_in_interval(cls, nodes: List[float]) -> List[float]:
        if any(abs(x) > 1.0 for x in nodes):
            raise ValueError("quadrature nodes must lie in [-1, 1]")
        return nodes

    @model_validator(mode='after')
    def weights_integrate_constants(self) -> "QuadratureRule":
        if len(self.nodes) != len(self.weights):
            raise ValueError("nodes and weights differ in length")
        if any(w <= 0.0 for w in self.weights):
            raise ValueError("quadrature weights must be positive")
        if abs(sum(self.weights) - 2.0) > 1e-12:
            raise ValueError(f"weights sum to {sum(self.weights)!r}, expected 2")
        return self

    @classmethod
    def gauss_legendre(cls, order: int, panels: int = 1) -> "QuadratureRule":
        base_nodes, base_weights = leggauss(order)
        edges = np.linspace(-1.0, 1.0, panels + 1)
        half = 0.5 * (edges[1:] - edges[:-1])
        mid = 0.5 * (edges[1:] + edges[:-1])
        nodes = (mid[:, None] + half[:, None] * base_nodes[None, :]).ravel()
        weights = (half[:, None] * base_weights[None, :]).ravel()
        return cls(nodes=nodes.tolist(), weights=weights.tolist(), order=order, panels=panels)

    def mapped(self, lower: float, upper: float) -> Tuple[np.ndarray, np.ndarray]:
        """Nodes and weights affinely mapped to [lower, upper]"""
        nodes = np.asarray(self.nodes)
        weights = np.asarray(self.weights)
        half = 0.5 * (upper - lower)
        return 0.5 * (upper + lower) + half * nodes, half * weights


def default_rule() -> QuadratureRule:
    return QuadratureRule.gauss_legendre(
        int(config.setting("numerics", "oracle_order", 64)),
        int(config.setting("numerics", "oracle_panels", 1)),
    )


def erf(z):
    return special.erf(z)


def normal_cdf(z):
    return special.ndtr(z)


def erf_diff(upper, lower):
    """erf(upper) - erf(lower) without cancellation in the tails"""
    upper = np.asarray(upper, dtype=float)
    lower = np.asarray(lower, dtype=float)
    both_pos = lower > 0.0
    both_neg = upper < 0.0
    plain = special.erf(upper) - special.erf(lower)
    right = special.erfc(lower) - special.erfc(upper)
    left = special.erfc(-upper) - special.erfc(-lower)
    return np.where(both_pos, right, np.where(both_neg, left, plain))


def phi_antiderivative(z):
    """Phi(z) = sqrt(pi) z erf(z) + exp(-z^2) - 1, the even antiderivative pair of erf"""
    z = np.asarray(z, dtype=float)
    return SQRT_PI * z * special.erf(z) + np.expm1(-z * z)


def half_chord(x: np.ndarray) -> np.ndarray:
    """W(x) = sqrt(max(0, 1 - ||x||^2)) over the last axis"""
    x = np.asarray(x, dtype=float)
    sq = np.sum(x * x, axis=-1) if x.ndim else x * x
    return np.sqrt(np.maximum(0.0, 1.0 - sq))


def _bvn_cdf(a: np.ndarray, b: np.ndarray, rho: float, w_rho: float) -> np.ndarray:
    """P(Z1 <= a, Z2 <= b) for correlation rho, vectorized over a and b.

    Drezner-Wesolowsky/Genz quadrature with the 20-point rule throughout.
    w_rho is sqrt(1 - rho^2), passed in so it keeps full precision near |rho| = 1.
    """
    h = -np.asarray(a, dtype=float)
    k = -np.asarray(b, dtype=float)
    h, k = np.broadcast_arrays(h, k)
    shape = h.shape
    h = h.ravel()
    k = k.ravel()
    hk = h * k

    if abs(rho) < 0.925:
        hs = 0.5 * (h * h + k * k)
        asr = np.arcsin(rho)
        sn = np.concatenate([np.sin(asr * (_BVN_NODES + 1.0) / 2.0),
                             np.sin(asr * (-_BVN_NODES + 1.0) / 2.0)])
        weights = np.concatenate([_BVN_WEIGHTS, _BVN_WEIGHTS])
        expo = (sn[:, None] * hk[None, :] - hs[None, :]) / (1.0 - sn * sn)[:, None]
        bvn = weights @ np.exp(expo)
        bvn = bvn * asr / (2.0 * TWO_PI) + normal_cdf(-h) * normal_cdf(-k)
        return bvn.reshape(shape)

    if rho < 0.0:
        k = -k
        hk = -hk
    bvn = np.zeros_like(h)
    if w_rho > 0.0:
        as_ = w_rho * w_rho
        a_ = w_rho
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        bvn = a_ * np.exp(-0.5 * (bs / as_ + hk)) * (
            1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0)
        tail = hk > -160.0
        bb = np.sqrt(bs)
        bvn = bvn - np.where(
            tail,
            np.exp(-0.5 * np.maximum(hk, -160.0)) * np.sqrt(TWO_PI) * normal_cdf(-bb / a_)
            * bb * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0),
            0.0,
        )
        a_ = a_ / 2.0
        for node, weight in zip(_BVN_NODES, _BVN_WEIGHTS):
            xs = (a_ * (node + 1.0)) ** 2
            rs = np.sqrt(1.0 - xs)
            bvn = bvn + a_ * weight * (
                np.exp(-bs / (2.0 * xs) - hk / (1.0 + rs)) / rs
                - np.exp(-0.5 * (bs / xs + hk)) * (1.0 + c * xs * (1.0 + d * xs)))
            xs = as_ * (1.0 - node) ** 2 / 4.0
            rs = np.sqrt(1.0 - xs)
            # exponents merged so very negative hk cannot overflow
            bvn = bvn + a_ * weight * (
                np.exp(-bs / (2.0 * xs) - hk / (1.0 + rs)) / rs
                - np.exp(-0.5 * (bs / xs + hk)) * (1.0 + c * xs * (1.0 + d * xs)))
        bvn = -bvn / TWO_PI
    if rho > 0.0:
        bvn = bvn + normal_cdf(-np.maximum(h, k))
    else:
        bvn = -bvn + np.maximum(0.0, normal_cdf(-h) - normal_cdf(-k))
    return bvn.reshape(shape)


def bivariate_normal_cdf(a, b, rho: float, tau_parallel: float = TAU_PARALLEL):
    """Standard bivariate normal CDF with correlation rho"""
    if not np.isfinite(rho) or abs(rho) > 1.0:
        raise InvalidArgumentError(f"correlation must lie in [-1, 1], got {rho!r}")
    w_rho = float(np.sqrt(max(0.0, (1.0 - rho) * (1.0 + rho))))
    if w_rho < tau_parallel:
        raise InvalidArgumentError(
            f"correlation {rho!r} is within the parallel threshold; use the parallel branch")
    # +-40 standard deviations already saturate the univariate CDF
    a = np.clip(np.asarray(a, dtype=float), -40.0, 40.0)
    b = np.clip(np.asarray(b, dtype=float), -40.0, 40.0)
    value = _bvn_cdf(a, b, float(rho), w_rho)
    return float(value) if value.ndim == 0 else value


def _phi_sum(gamma: float, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Sum over sign pairs of (-1)^(i+j) Phi(sqrt(gamma)((-1)^i W1 + (-1)^j W2))"""
    g = np.sqrt(gamma)
    # grouped so a zero half-chord cancels exactly
    outer = phi_antiderivative(g * (w1 + w2)) + phi_antiderivative(-g * (w1 + w2))
    inner = phi_antiderivative(g * (w1 - w2)) + phi_antiderivative(g * (w2 - w1))
    return outer - inner


def _check_mesh_points(x: np.ndarray, dim_minus_one: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != dim_minus_one:
        raise InvalidArgumentError(f"{name} must have {dim_minus_one} coordinates, got shape {x.shape}")
    return ValidationUtils.check_in_ball(x, name)


def induced_kernel(params: GaussianKernelParams, x1: np.ndarray, x2: np.ndarray):
    """K~(x1, x2), the Gaussian kernel pushed through the X-ray transform in both arguments"""
    x1 = _check_mesh_points(x1, params.dim - 1, "x1")
    x2 = _check_mesh_points(x2, params.dim - 1, "x2")
    diff = x1 - x2
    dist_sq = np.sum(diff * diff, axis=-1)
    value = np.exp(-params.gamma * dist_sq) / (2.0 * params.gamma) * _phi_sum(
        params.gamma, half_chord(x1), half_chord(x2))
    return float(value) if np.ndim(value) == 0 else value


def backprojected_generator(params: GaussianKernelParams, R: Orientation, x: np.ndarray, z: np.ndarray):
    """(P_R k_z)(x): the line integral of K(z, .) along the ray of (R, x).

    Vectorized over leading axes of x and z (broadcast against each other).
    """
    x = _check_mesh_points(x, R.dim - 1, "x")
    z = ValidationUtils.check_in_ball(np.asarray(z, dtype=float), "z")
    g = np.sqrt(params.gamma)
    proj = euclidean_project(R, z)
    depth = z @ R.axis
    diff = x - proj
    lateral = np.exp(-params.gamma * np.sum(diff * diff, axis=-1))
    w = half_chord(x)
    value = SQRT_PI / (2.0 * g) * lateral * erf_diff(g * (w - depth), g * (-w - depth))
    return float(value) if np.ndim(value) == 0 else value


def _entries_from_terms(gamma: float, terms, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Closed-form cross-angle integrals for paired rows sharing one relative rotation"""
    scale = np.exp(-gamma * terms.reduced_sq)
    if terms.parallel:
        return scale / (2.0 * gamma) * _phi_sum(gamma, w1, w2)
    root = np.sqrt(2.0 * gamma)
    w = terms.w
    upper1 = root * (w * w1 - terms.mu1)
    lower1 = root * (-w * w1 - terms.mu1)
    upper2 = root * (w * w2 - terms.mu2)
    lower2 = root * (-w * w2 - terms.mu2)
    a = np.concatenate([upper1, lower1, upper1, lower1])
    b = np.concatenate([upper2, upper2, lower2, lower2])
    a = np.clip(a, -40.0, 40.0)
    b = np.clip(b, -40.0, 40.0)
    cdf = _bvn_cdf(a, b, terms.r, w).reshape(4, -1)
    box = cdf[0] - cdf[1] - cdf[2] + cdf[3]
    return np.pi / (gamma * w) * scale * np.maximum(box, 0.0)


def cross_gram_entry(params: GaussianKernelParams, rad: RelativeAngleData,
                     x1: np.ndarray, x2: np.ndarray) -> float:
    """<P*_{R1} k~_{x1}, P*_{R2} k~_{x2}> for the relative data of R1 R2^T"""
    n = params.dim
    x1 = _check_mesh_points(x1, n - 1, "x1").reshape(1, n - 1)
    x2 = _check_mesh_points(x2, n - 1, "x2").reshape(1, n - 1)
    terms = RelativeTerms(
        r=rad.r, w=rad.w_r, parallel=rad.parallel,
        x1r=np.array([rad.x1r]), x2R=np.array([rad.x2R]),
        mu1=np.array([rad.mu1]), mu2=np.array([rad.mu2]),
        reduced_sq=np.array([rad.reduced_sq]),
    )
    return float(_entries_from_terms(params.gamma, terms, half_chord(x1), half_chord(x2))[0])


def cross_gram_block(params: GaussianKernelParams, rotation: np.ndarray, X1: np.ndarray,
                     X2: np.ndarray, tau_parallel: float = TAU_PARALLEL) -> np.ndarray:
    """P x Q matrix of cross-angle integrals for all pairs of rows of X1 and X2"""
    n = params.dim
    X1 = np.asarray(X1, dtype=float).reshape(-1, n - 1)
    X2 = np.asarray(X2, dtype=float).reshape(-1, n - 1)
    p, q = X1.shape[0], X2.shape[0]
    left = np.repeat(X1, q, axis=0)
    right = np.tile(X2, (p, 1))
    terms = relative_terms(rotation, left, right, tau_parallel)
    values = _entries_from_terms(params.gamma, terms, half_chord(left), half_chord(right))
    return values.reshape(p, q)


def quadrature_gram_oracle(kernel: KernelFunction, R1: Orientation, R2: Orientation,
                           x1: np.ndarray, x2: np.ndarray, rule: QuadratureRule) -> float:
    """Tensor-product quadrature of the double line integral of K between two rays"""
    n = R1.dim
    x1 = _check_mesh_points(x1, n - 1, "x1").reshape(n - 1)
    x2 = _check_mesh_points(x2, n - 1, "x2").reshape(n - 1)
    w1 = float(half_chord(x1))
    w2 = float(half_chord(x2))
    t1, c1 = rule.mapped(-w1, w1)
    t2, c2 = rule.mapped(-w2, w2)
    ray1 = euclidean_embed(R1, np.broadcast_to(x1, (t1.size, n - 1)), t1)
    ray2 = euclidean_embed(R2, np.broadcast_to(x2, (t2.size, n - 1)), t2)
    values = np.asarray(kernel(ray1[:, None, :], ray2[None, :, :]), dtype=float)
    values = np.broadcast_to(values, (t1.size, t2.size))
    return float(c1 @ values @ c2)


def converged_gram_oracle(kernel: KernelFunction, R1: Orientation, R2: Orientation,
                          x1: np.ndarray, x2: np.ndarray, order: int = 64, panels: int = 1,
                          tol: float = 1e-10, max_order: int = 1024) -> Tuple[float, int]:
    """Double the rule order until two successive oracle values agree within tol.

    Returns the finer value and the order that reached it.
    """
    previous = quadrature_gram_oracle(kernel, R1, R2, x1, x2, QuadratureRule.gauss_legendre(order, panels))
    while order < max_order:
        order *= 2
        current = quadrature_gram_oracle(kernel, R1, R2, x1, x2,
                                         QuadratureRule.gauss_legendre(order, panels))
        if abs(current - previous) <= tol:
            return current, order
        previous = current
    logger.error(f"Quadrature oracle did not converge by order {max_order} with {panels} panels")
    raise NumericalError(f"quadrature oracle did not reach tolerance {tol:g} by order {max_order}")
