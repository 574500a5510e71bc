import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import brentq

logger = logging.getLogger(__name__)


class TikhonovError(Exception):
    pass


class DimensionMismatch(TikhonovError, ValueError):
    pass


class NonFiniteError(TikhonovError, ValueError):
    pass


class DomainError(TikhonovError, ValueError):
    """A parameter lies outside the range where the operation is defined"""
    pass


@dataclass(frozen=True)
class Tolerances:
    """Scalar tolerances shared by the membership and identity checks"""
    abs_tol: float = 1e-10
    rel_tol: float = 1e-8

    @classmethod
    def from_env(cls) -> "Tolerances":
        return cls(
            abs_tol=float(os.environ.get('TIKRATES_ABS_TOL', 1e-10)),
            rel_tol=float(os.environ.get('TIKRATES_REL_TOL', 1e-8)),
        )

    def close(self, a: float, b: float) -> bool:
        return abs(a - b) <= self.abs_tol + self.rel_tol * max(abs(a), abs(b))


DEFAULT_TOLERANCES = Tolerances.from_env()


def conjugate_exponent(r: float) -> float:
    """r* with 1/r + 1/r* = 1"""
    if not r > 1 or not np.isfinite(r):
        raise DomainError(f"exponent must satisfy 1 < r < inf, got {r}")
    return r / (r - 1.0)


@dataclass(frozen=True)
class SpaceSpec:
    """The finite-dimensional sequence space l^r of dimension dim"""
    dim: int
    r: float

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise DomainError(f"dimension must be a positive integer, got {self.dim}")
        # rejects r <= 1 and r = inf: the duality mapping would be multivalued there
        conjugate_exponent(self.r)

    @property
    def r_star(self) -> float:
        return conjugate_exponent(self.r)

    @property
    def dual(self) -> "SpaceSpec":
        return SpaceSpec(self.dim, self.r_star)

    @property
    def is_hilbert(self) -> bool:
        return self.r == 2.0

    @property
    def convexity_power(self) -> float:
        return max(self.r, 2.0)

    @property
    def smoothness_power(self) -> float:
        return min(self.r, 2.0)


@dataclass(frozen=True)
class SmoothnessProfile:
    """Power-type convexity/smoothness data of an l^r space.

    The constants are sampled estimates, not sharp values: K comes from the
    convexity modulus probe and C from the sampled Bregman lower bound.
    """
    convexity_power: float
    convexity_constant: float
    smoothness_power: float
    qconvexity_constant: float
    gauge: float
    estimated: bool = field(default=True)


def as_vec(v, dim: Optional[int] = None, name: str = 'v') -> np.ndarray:
    """Coerce to a 1-D float vector, checking finiteness and dimension"""
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise DimensionMismatch(f"{name} is empty")
    if dim is not None and arr.size != dim:
        raise DimensionMismatch(f"{name} has dimension {arr.size}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite coordinates")
    return arr


def _check_gauge(q: float, name: str = 'q'):
    if not q > 1 or not np.isfinite(q):
        raise DomainError(f"gauge {name} must be > 1, got {q}")


def pairing(omega, v) -> float:
    """Dual pairing <omega, v>"""
    w = as_vec(omega, name='omega')
    x = as_vec(v, dim=w.size, name='v')
    return float(np.dot(w, x))


def _lr_norm(x: np.ndarray, r: float) -> float:
    if r == 2.0:
        return float(np.linalg.norm(x))
    # scale first so that |x_i|^r neither overflows nor underflows
    m = np.max(np.abs(x))
    if m == 0.0:
        return 0.0
    return float(m * np.sum(np.abs(x / m) ** r) ** (1.0 / r))


def norm(v, space: SpaceSpec) -> float:
    """l^r norm (sum |v_i|^r)^(1/r)"""
    x = as_vec(v, space.dim)
    return _lr_norm(x, space.r)


def _duality_map(x: np.ndarray, r: float, q: float) -> np.ndarray:
    nrm = _lr_norm(x, r)
    if nrm == 0.0:
        return np.zeros_like(x)
    # |0|^(r-1) := 0 for r < 2 (continuous extension)
    u = x / nrm
    return nrm ** (q - 1.0) * np.sign(u) * np.abs(u) ** (r - 1.0)


def duality_map(v, space: SpaceSpec, q: float) -> np.ndarray:
    """J_q on l^r: the gradient of (1/q)||.||_r^q.

    omega_i = ||v||^(q-r) sgn(v_i) |v_i|^(r-1), and J_q(0) = 0.
    """
    _check_gauge(q)
    x = as_vec(v, space.dim)
    return _duality_map(x, space.r, q)


def adjoint_duality_map(omega, dual_space: SpaceSpec, q_star: float) -> np.ndarray:
    """J*_{q*} from the dual space back to the primal space.

    On l^r spaces this is the duality mapping of the dual space l^{r*} with
    gauge q*, and it inverts duality_map(., space, q).
    """
    _check_gauge(q_star, 'q*')
    w = as_vec(omega, dual_space.dim, name='omega')
    return _duality_map(w, dual_space.r, q_star)


def bregman_power(y_tilde, y, space: SpaceSpec, q: float) -> float:
    """D_q(y_tilde; y) for S_q = (1/q)||.||^q"""
    _check_gauge(q)
    yt = as_vec(y_tilde, space.dim, name='y_tilde')
    y0 = as_vec(y, space.dim, name='y')
    if space.is_hilbert and q == 2.0:
        # exact form, free of cancellation
        return 0.5 * float(np.dot(yt - y0, yt - y0))
    value = (_lr_norm(yt, space.r) ** q - _lr_norm(y0, space.r) ** q) / q \
        - float(np.dot(_duality_map(y0, space.r, q), yt - y0))
    return max(value, 0.0)


def sym_bregman_power(y_tilde, y, space: SpaceSpec, q: float) -> float:
    """<J_q(y_tilde) - J_q(y), y_tilde - y>"""
    _check_gauge(q)
    yt = as_vec(y_tilde, space.dim, name='y_tilde')
    y0 = as_vec(y, space.dim, name='y')
    diff = _duality_map(yt, space.r, q) - _duality_map(y0, space.r, q)
    return max(float(np.dot(diff, yt - y0)), 0.0)


def _random_pairs(dim: int, nsamples: int, seed) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((nsamples, dim)), rng.standard_normal((nsamples, dim))


def qconvexity_ratios(space: SpaceSpec, q: float, nsamples: int, seed=0) -> np.ndarray:
    """Sampled ratios D_q(y_tilde; y) / ||y_tilde - y||^q over random pairs"""
    _check_gauge(q)
    if nsamples < 1:
        raise DomainError("nsamples must be positive")
    if q < space.convexity_power:
        raise DomainError(
            f"q={q} is below the convexity power {space.convexity_power} of l^{space.r}; "
            f"no positive constant exists")
    ys, yts = _random_pairs(space.dim, nsamples, seed)
    ratios = np.empty(nsamples)
    for k in range(nsamples):
        dist = _lr_norm(yts[k] - ys[k], space.r)
        ratios[k] = bregman_power(yts[k], ys[k], space, q) / dist ** q
    return ratios


def qconvexity_constant(space: SpaceSpec, q: float, nsamples: int, seed=0) -> float:
    """Sampled infimum of D_q(y_tilde; y)/||y_tilde - y||^q; an upper estimate of C"""
    ratios = qconvexity_ratios(space, q, nsamples, seed)
    value = float(np.min(ratios))
    logger.debug(f"[qconvexity_constant] r={space.r} q={q} n={nsamples}: C <= {value:.6g}")
    return value


def _unit(x: np.ndarray, r: float) -> np.ndarray:
    return x / _lr_norm(x, r)


# resolution of the arc used by the modulus probes
_ARC_POINTS = 513


def _convexity_arc(y: np.ndarray, d: np.ndarray, r: float):
    """Unit-sphere arc from y (s=0) to -y (s=1) through the direction d"""
    def gap(s):
        z = _unit(np.cos(np.pi * s) * y + np.sin(np.pi * s) * d, r)
        return _lr_norm(y - z, r), 1.0 - 0.5 * _lr_norm(y + z, r)

    return gap


def convexity_modulus_curve(space: SpaceSpec, eps_grid, nsamples: int, seed=0) -> np.ndarray:
    """Sampled estimates of the modulus of convexity on a grid of eps values.

    delta(eps) = inf{1 - ||y + y_tilde||/2 : ||y|| = ||y_tilde|| = 1, ||y - y_tilde|| >= eps}.
    Each sample walks a unit-sphere arc from y to -y; points at distance
    exactly eps are located with brentq and arc points farther away are
    admitted as well. Values are upper estimates of the infimum and are
    nondecreasing along the grid.
    """
    eps_values = np.atleast_1d(np.asarray(eps_grid, dtype=float))
    if np.any(eps_values <= 0) or np.any(eps_values > 2):
        raise DomainError(f"eps must lie in (0, 2], got {eps_values}")
    if nsamples < 1:
        raise DomainError("nsamples must be positive")
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, _ARC_POINTS)
    raw = np.ones(eps_values.size)
    for _ in range(nsamples):
        y = _unit(rng.standard_normal(space.dim), space.r)
        d = _unit(rng.standard_normal(space.dim), space.r)
        gap = _convexity_arc(y, d, space.r)
        values = np.array([gap(s) for s in grid])
        dist, modulus = values[:, 0], values[:, 1]
        for i, eps in enumerate(eps_values):
            if eps == 2.0:
                # strictly convex: distance 2 forces y_tilde = -y
                continue
            admitted = dist >= eps
            raw[i] = min(raw[i], float(np.min(modulus[admitted])))
            upper = int(np.argmax(admitted))
            if upper > 0:
                s_eps = brentq(lambda s: gap(s)[0] - eps, grid[upper - 1], grid[upper], xtol=1e-15)
                raw[i] = min(raw[i], gap(s_eps)[1])
    # inf over ||y - y_tilde|| >= eps also covers every larger grid value
    order = np.argsort(eps_values)
    curve = np.minimum.accumulate(raw[order][::-1])[::-1]
    out = np.empty_like(curve)
    out[order] = np.clip(curve, 0.0, 1.0)
    return out


def convexity_modulus_probe(space: SpaceSpec, eps: float, nsamples: int, seed=0) -> float:
    """Sampled estimate of delta(eps), an upper estimate of the infimum"""
    if not 0 < eps <= 2:
        raise DomainError(f"eps must lie in (0, 2], got {eps}")
    return float(convexity_modulus_curve(space, [eps], nsamples, seed)[0])


def smoothness_modulus_probe(space: SpaceSpec, tau: float, nsamples: int, seed=0) -> float:
    """Sampled lower estimate of the modulus of smoothness rho(tau)"""
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    if nsamples < 1:
        raise DomainError("nsamples must be positive")
    ys, yts = _random_pairs(space.dim, nsamples, seed)
    best = 0.0
    for y, yt in zip(ys, yts):
        y = _unit(y, space.r)
        yt = tau * _unit(yt, space.r)
        value = 0.5 * (_lr_norm(y + yt, space.r) + _lr_norm(y - yt, space.r)) - 1.0
        best = max(best, value)
    return float(best)


def smoothness_profile(space: SpaceSpec, q: Optional[float] = None, nsamples: int = 200,
                       seed=0) -> SmoothnessProfile:
    """Assemble the power-type profile of l^r with sampled constants"""
    q = space.convexity_power if q is None else q
    eps_grid = np.linspace(0.25, 2.0, 8)
    power = space.convexity_power
    k_est = np.min(convexity_modulus_curve(space, eps_grid, nsamples, seed) / eps_grid ** power)
    c_est = qconvexity_constant(space, q, nsamples, seed)
    logger.info(f"[smoothness_profile] l^{space.r}: K~{k_est:.4g}, C~{c_est:.4g} (sampled)")
    return SmoothnessProfile(
        convexity_power=power,
        convexity_constant=float(k_est),
        smoothness_power=space.smoothness_power,
        qconvexity_constant=c_est,
        gauge=q,
    )
