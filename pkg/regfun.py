import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.special import xlogy

from banach import (
    DEFAULT_TOLERANCES,
    DomainError,
    SpaceSpec,
    TikhonovError,
    Tolerances,
    adjoint_duality_map,
    as_vec,
    bregman_power,
    conjugate_exponent,
    duality_map,
    norm,
)

if TYPE_CHECKING:
    from linop import OperatorSpec

logger = logging.getLogger(__name__)

POWER_NORM = 'power_norm'
NEG_ENTROPY = 'neg_entropy'


class SubgradientError(TikhonovError):
    """No (valid) subgradient at the requested point"""
    pass


class SourceConditionError(TikhonovError):
    """x_true is not in the subdifferential of R* at A*omega_true"""
    pass


@dataclass(frozen=True)
class RegSpec:
    """A convex regularizer on X: (1/q)||x||_r^q or the normalized negative entropy"""
    kind: str
    space: SpaceSpec
    q: Optional[float] = None

    def __post_init__(self):
        if self.kind == POWER_NORM:
            if self.q is None or not self.q > 1:
                raise DomainError(f"power-norm regularizer needs q > 1, got {self.q}")
        elif self.kind == NEG_ENTROPY:
            if self.q is not None:
                raise DomainError("negative entropy takes no exponent")
        else:
            raise DomainError(f"unknown regularizer kind '{self.kind}'")

    @classmethod
    def power_norm(cls, space: SpaceSpec, q: float) -> "RegSpec":
        return cls(POWER_NORM, space, float(q))

    @classmethod
    def neg_entropy(cls, space: SpaceSpec) -> "RegSpec":
        return cls(NEG_ENTROPY, space)

    @property
    def q_star(self) -> float:
        return conjugate_exponent(self.q)

    @property
    def is_quadratic(self) -> bool:
        return self.kind == POWER_NORM and self.q == 2.0 and self.space.is_hilbert

    def minimizer(self) -> np.ndarray:
        if self.kind == POWER_NORM:
            return np.zeros(self.space.dim)
        return np.ones(self.space.dim)

    def describe(self) -> str:
        if self.kind == POWER_NORM:
            return f"(1/{self.q:g})||x||_{self.space.r:g}^{self.q:g}"
        return "sum x ln x - x + 1"


@dataclass(frozen=True, eq=False)
class SubgradientChoice:
    """A point x together with a designated element xi of dR(x)

    Construction fails with SubgradientError when xi is not in dR(x).
    """
    x: np.ndarray
    xi: np.ndarray
    regspec: RegSpec
    label: str = 'subgradient choice'

    def __post_init__(self):
        if not is_subgradient(self.regspec, self.x, self.xi):
            gap = fenchel_young_gap(self.regspec, self.x, self.xi)
            raise SubgradientError(f"{self.label} fails the Fenchel-Young check (gap {gap:.3e})")

    @classmethod
    def designated(cls, R: RegSpec, x) -> "SubgradientChoice":
        v = as_vec(x, R.space.dim, name='x')
        return cls(v, subgradient(R, v), R)


def reg_eval(R: RegSpec, x) -> float:
    """R(x); +inf outside dom R"""
    v = as_vec(x, R.space.dim, name='x')
    if R.kind == POWER_NORM:
        return norm(v, R.space) ** R.q / R.q
    if np.any(v < 0):
        return np.inf
    # xlogy(0, 0) = 0
    return float(np.sum(xlogy(v, v) - v + 1.0))


def reg_conjugate_eval(R: RegSpec, xi) -> float:
    """R*(xi)"""
    w = as_vec(xi, R.space.dim, name='xi')
    if R.kind == POWER_NORM:
        return norm(w, R.space.dual) ** R.q_star / R.q_star
    return float(np.sum(np.expm1(w)))


def subgradient(R: RegSpec, x) -> np.ndarray:
    """The designated element of dR(x)"""
    v = as_vec(x, R.space.dim, name='x')
    if R.kind == POWER_NORM:
        return duality_map(v, R.space, R.q)
    if np.any(v <= 0):
        raise SubgradientError("negative entropy has no subgradient off the open positive orthant")
    return np.log(v)


def conjugate_subgradient(R: RegSpec, xi) -> np.ndarray:
    """The canonical element of dR*(xi)"""
    w = as_vec(xi, R.space.dim, name='xi')
    if R.kind == POWER_NORM:
        return adjoint_duality_map(w, R.space.dual, R.q_star)
    return np.exp(w)


def fenchel_young_gap(R: RegSpec, x, xi) -> float:
    """R(x) + R*(xi) - <xi, x>, nonnegative and zero iff xi is in dR(x)"""
    v = as_vec(x, R.space.dim, name='x')
    w = as_vec(xi, R.space.dim, name='xi')
    r_val = reg_eval(R, v)
    if not np.isfinite(r_val):
        return np.inf
    return r_val + reg_conjugate_eval(R, w) - float(np.dot(w, v))


def is_subgradient(R: RegSpec, x, xi, tolerances: Optional[Tolerances] = None) -> bool:
    """Fenchel-Young membership test: gap <= abs_tol + rel_tol * (|R(x)| + |R*(xi)|)"""
    tol = tolerances or DEFAULT_TOLERANCES
    v = as_vec(x, R.space.dim, name='x')
    w = as_vec(xi, R.space.dim, name='xi')
    gap = fenchel_young_gap(R, v, w)
    if not np.isfinite(gap):
        return False
    scale = abs(reg_eval(R, v)) + abs(reg_conjugate_eval(R, w))
    return bool(gap <= tol.abs_tol + tol.rel_tol * scale)


def _require_subgradient(R: RegSpec, x, xi, label: str):
    SubgradientChoice(as_vec(x, R.space.dim, name='x'), as_vec(xi, R.space.dim, name='xi'), R, label=label)


def primal_bregman(R: RegSpec, x_tilde, x, xi, check: bool = True) -> float:
    """D_xi(x_tilde; x) = R(x_tilde) - R(x) - <xi, x_tilde - x>"""
    xt = as_vec(x_tilde, R.space.dim, name='x_tilde')
    x0 = as_vec(x, R.space.dim, name='x')
    w = as_vec(xi, R.space.dim, name='xi')
    if check:
        _require_subgradient(R, x0, w, 'Bregman base point')
    if R.is_quadratic:
        return 0.5 * float(np.dot(xt - x0, xt - x0))
    r_tilde = reg_eval(R, xt)
    if not np.isfinite(r_tilde):
        return np.inf
    value = r_tilde - reg_eval(R, x0) - float(np.dot(w, xt - x0))
    return max(value, 0.0)


def sym_bregman(R: RegSpec, x, x_tilde, xi, xi_tilde, check: bool = True) -> float:
    """<xi - xi_tilde, x - x_tilde> = D_xi(x_tilde; x) + D_xi_tilde(x; x_tilde)"""
    x0 = as_vec(x, R.space.dim, name='x')
    xt = as_vec(x_tilde, R.space.dim, name='x_tilde')
    w0 = as_vec(xi, R.space.dim, name='xi')
    wt = as_vec(xi_tilde, R.space.dim, name='xi_tilde')
    if check:
        _require_subgradient(R, x0, w0, 'first base point')
        _require_subgradient(R, xt, wt, 'second base point')
    return max(float(np.dot(w0 - wt, x0 - xt)), 0.0)


def check_source_condition(R: RegSpec, A: "OperatorSpec", omega_true, x_true):
    """Raise unless A*omega_true is in dR(x_true)"""
    xi_true = A.adjoint(omega_true)
    if not is_subgradient(R, x_true, xi_true):
        gap = fenchel_young_gap(R, x_true, xi_true)
        raise SourceConditionError(f"A*omega_true is not a subgradient at x_true (gap {gap:.3e})")
    return xi_true


def dual_bregman(R: RegSpec, A: "OperatorSpec", omega, omega_true, x_true, check: bool = True) -> float:
    """D*_{x_true}(A*omega; A*omega_true), the Bregman distance of R*"""
    if check:
        xi_true = check_source_condition(R, A, omega_true, x_true)
    else:
        xi_true = A.adjoint(omega_true)
    xi = A.adjoint(omega)
    if R.kind == POWER_NORM:
        # R* = (1/q*)||.||_{r*}^{q*} and x_true = J*_{q*}(xi_true)
        return bregman_power(xi, xi_true, R.space.dual, R.q_star)
    x0 = as_vec(x_true, R.space.dim, name='x_true')
    value = reg_conjugate_eval(R, xi) - reg_conjugate_eval(R, xi_true) - float(np.dot(xi - xi_true, x0))
    return max(value, 0.0)
