import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import wrightomega

from banach import (
    DimensionMismatch,
    DomainError,
    TikhonovError,
    as_vec,
    conjugate_exponent,
    duality_map,
    norm,
)
from linop import OperatorSpec, ProblemInstance
from regfun import (
    NEG_ENTROPY,
    POWER_NORM,
    RegSpec,
    dual_bregman,
    fenchel_young_gap,
    primal_bregman,
    reg_eval,
    subgradient,
)

logger = logging.getLogger(__name__)

# rounding allowance in the descent tests, relative to the compared values
_SLACK = 64 * np.finfo(float).eps
_MAX_BACKTRACKS = 80
_RELAX = 0.9
_L_FLOOR = 1e-12
_LOG_EVERY = 1000


class ConvergenceError(TikhonovError):
    """A solve whose result is required to be converged was not"""
    pass


@dataclass(frozen=True)
class SolveOptions:
    kkt_tol: float = 1e-8
    max_iters: int = 50000
    step_backtrack: float = 0.5
    restart_period: Optional[int] = None

    def __post_init__(self):
        if not self.kkt_tol > 0:
            raise DomainError(f"kkt_tol must be > 0, got {self.kkt_tol}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise DomainError(f"max_iters must be a positive integer, got {self.max_iters}")
        if not 0 < self.step_backtrack < 1:
            raise DomainError(f"step_backtrack must lie in (0, 1), got {self.step_backtrack}")
        if self.restart_period is not None and (int(self.restart_period) != self.restart_period
                                                or self.restart_period < 1):
            raise DomainError(f"restart_period must be a positive integer, got {self.restart_period}")


@dataclass(frozen=True, eq=False)
class PrimalDualSolution:
    """Minimizer x of T_alpha with its KKT dual omega"""
    x: np.ndarray
    omega: np.ndarray
    objective: float
    kkt_r1: float
    kkt_r2: float
    iters: int
    converged: bool
    scale: float
    fenchel_young: float
    objective_trace: np.ndarray


def _check_alpha(alpha: float):
    if not alpha > 0 or not np.isfinite(alpha):
        raise DomainError(f"regularization parameter must be > 0, got {alpha}")


def _check_p(p: float):
    if not p > 1 or not np.isfinite(p):
        raise DomainError(f"data-fit exponent p must be > 1, got {p}")


def tikhonov_functional(x, A: OperatorSpec, R: RegSpec, y, alpha: float, p: float) -> float:
    """T_alpha(x; y) = (1/p)||Ax - y||^p + alpha R(x)"""
    _check_alpha(alpha)
    _check_p(p)
    residual = A.apply(x) - as_vec(y, A.range_space.dim, name='y')
    return norm(residual, A.range_space) ** p / p + alpha * reg_eval(R, x)


def closed_form_quadratic(A: OperatorSpec, y, alpha: float) -> np.ndarray:
    """(A*A + alpha I)^{-1} A*y"""
    _check_alpha(alpha)
    m = A.to_dense()
    rhs = m.T @ as_vec(y, A.range_space.dim, name='y')
    return np.linalg.solve(m.T @ m + alpha * np.eye(A.domain.dim), rhs)


def recover_dual(x, A: OperatorSpec, y, alpha: float, p: float) -> np.ndarray:
    """omega = -(1/alpha) J_p(Ax - y) in the geometry of Y"""
    _check_alpha(alpha)
    _check_p(p)
    residual = A.apply(x) - as_vec(y, A.range_space.dim, name='y')
    return -duality_map(residual, A.range_space, p) / alpha


def kkt_residual(x, omega, A: OperatorSpec, R: RegSpec, y, alpha: float, p: float) -> Tuple[float, float]:
    """(r1, r2) = (||A*omega - dR(x)||, ||alpha omega + J_p(Ax - y)||), both in dual norms.

    For the entropy regularizer off the open orthant r1 is the Fenchel-Young
    gap of (x, A*omega) instead.
    """
    _check_p(p)
    v = as_vec(x, A.domain.dim, name='x')
    w = as_vec(omega, A.range_space.dim, name='omega')
    xi = A.adjoint(w)
    if R.kind == NEG_ENTROPY and np.any(v <= 0):
        r1 = fenchel_young_gap(R, v, xi)
    else:
        r1 = norm(xi - subgradient(R, v), R.space.dual)
    residual = A.apply(v) - as_vec(y, A.range_space.dim, name='y')
    r2 = norm(alpha * w + duality_map(residual, A.range_space, p), A.range_space.dual)
    return float(r1), float(r2)


class _SmoothPart:
    """Differentiable part of T_alpha: the data fit, plus alpha R for power norms"""

    def __init__(self, A: OperatorSpec, y: np.ndarray, alpha: float, p: float, R: RegSpec):
        self.A = A
        self.y = y
        self.alpha = alpha
        self.p = p
        self.R = R
        self.with_reg = R.kind == POWER_NORM

    def value(self, x: np.ndarray) -> float:
        f = norm(self.A.apply(x) - self.y, self.A.range_space) ** self.p / self.p
        if self.with_reg:
            f += self.alpha * reg_eval(self.R, x)
        return f

    def value_and_grad(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        residual = self.A.apply(x) - self.y
        f = norm(residual, self.A.range_space) ** self.p / self.p
        g = self.A.adjoint(duality_map(residual, self.A.range_space, self.p))
        if self.with_reg:
            f += self.alpha * reg_eval(self.R, x)
            g = g + self.alpha * subgradient(self.R, x)
        return f, g


class _IdentityProx:
    def value(self, x: np.ndarray) -> float:
        return 0.0

    def __call__(self, u: np.ndarray, tau: float) -> np.ndarray:
        return u


class _EntropyProx:
    """prox of tau*alpha*R for the negative entropy.

    The minimizer w of c(w ln w - w + 1) + (w - u)^2/2 solves c ln w + w = u,
    so w = c * omega(u/c - ln c) with the Wright omega function.
    """

    def __init__(self, R: RegSpec, alpha: float):
        self.R = R
        self.alpha = alpha

    def value(self, x: np.ndarray) -> float:
        return self.alpha * reg_eval(self.R, x)

    def __call__(self, u: np.ndarray, tau: float) -> np.ndarray:
        c = tau * self.alpha
        return c * np.real(wrightomega(u / c - np.log(c)))


def _kkt_state(x, A, R, y, alpha, p):
    omega = recover_dual(x, A, y, alpha, p)
    r1, r2 = kkt_residual(x, omega, A, R, y, alpha, p)
    scale = 1.0 + norm(A.adjoint(omega), R.space.dual)
    return omega, r1, r2, scale


def solve_primal(A: OperatorSpec, y, alpha: float, p: float, R: RegSpec,
                 opts: Optional[SolveOptions] = None) -> PrimalDualSolution:
    """Minimize T_alpha(.; y) by monotone accelerated proximal gradient with backtracking.

    Stops once the KKT residuals drop below kkt_tol * (1 + ||A*omega||).
    Without convergence the last accepted iterate, which has the lowest
    objective seen, is returned with converged=False.
    """
    opts = opts or SolveOptions()
    _check_alpha(alpha)
    _check_p(p)
    if R.space != A.domain:
        raise DimensionMismatch("regularizer and operator live on different spaces")
    y = as_vec(y, A.range_space.dim, name='y')

    smooth = _SmoothPart(A, y, alpha, p, R)
    prox = _EntropyProx(R, alpha) if R.kind == NEG_ENTROPY else _IdentityProx()

    x = R.minimizer()
    x_prev = x.copy()
    z = x.copy()
    F_x = tikhonov_functional(x, A, R, y, alpha, p)
    trace = [F_x]
    omega, r1, r2, scale = _kkt_state(x, A, R, y, alpha, p)

    L = 1.0
    t = 1.0
    iters = 0
    since_restart = 0
    stalls = 0
    while max(r1, r2) > opts.kkt_tol * scale and iters < opts.max_iters:
        iters += 1
        f_z, g_z = smooth.value_and_grad(z)

        for _ in range(_MAX_BACKTRACKS):
            x_new = prox(z - g_z / L, 1.0 / L)
            f_new = smooth.value(x_new)
            d = x_new - z
            model = f_z + float(np.dot(g_z, d)) + 0.5 * L * float(np.dot(d, d))
            if f_new <= model + _SLACK * (abs(f_z) + abs(f_new)):
                break
            L /= opts.step_backtrack
        else:
            logger.warning(f"[solve_primal] backtracking failed at iteration {iters} (L={L:.3e})")
            break

        F_new = f_new + prox.value(x_new)
        since_restart += 1
        if F_new <= F_x + _SLACK * (abs(F_x) + abs(F_new)):
            restart = float(np.dot(z - x_new, x_new - x)) > 0
            x_prev, x, F_x = x, x_new, F_new
            trace.append(F_x)
            stalls = 0
            omega, r1, r2, scale = _kkt_state(x, A, R, y, alpha, p)
        else:
            # monotone safeguard: keep x and restart the momentum
            restart = True
            stalls += 1
            if stalls >= 2:
                logger.debug(f"[solve_primal] no further descent at iteration {iters}")
                break

        if opts.restart_period is not None and since_restart >= opts.restart_period:
            restart = True
        if restart:
            t = 1.0
            z = x.copy()
            x_prev = x.copy()
            since_restart = 0
        else:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            z = x + ((t - 1.0) / t_next) * (x - x_prev)
            t = t_next
        L = max(L * _RELAX, _L_FLOOR)

        if iters % _LOG_EVERY == 0:
            logger.debug(f"[solve_primal] iter {iters}: T={F_x:.12e} r1={r1:.3e} L={L:.3e}")

    converged = bool(max(r1, r2) <= opts.kkt_tol * scale)
    xi = A.adjoint(omega)
    fy_gap = fenchel_young_gap(R, x, xi)
    if converged:
        logger.debug(f"[solve_primal] alpha={alpha:.3e} converged in {iters} iterations")
    else:
        logger.warning(f"[solve_primal] alpha={alpha:.3e} not converged after {iters} iterations "
                       f"(r1={r1:.3e}, tol={opts.kkt_tol * scale:.3e})")
    return PrimalDualSolution(
        x=x,
        omega=omega,
        objective=float(F_x),
        kkt_r1=float(r1),
        kkt_r2=float(r2),
        iters=iters,
        converged=converged,
        scale=float(scale),
        fenchel_young=float(fy_gap),
        objective_trace=np.array(trace),
    )


def dual_functional(omega, A: OperatorSpec, R: RegSpec, x_true, omega_true, alpha: float, p: float,
                    y_obs, y_true) -> float:
    """T*_alpha(omega; y_obs) = D*(A*omega; A*omega_true) + alpha^{p*-1}(1/p*)||omega||^{p*}
    - <omega - omega_true, y_obs - y_true>"""
    _check_alpha(alpha)
    p_star = conjugate_exponent(p)
    w = as_vec(omega, A.range_space.dim, name='omega')
    w_true = as_vec(omega_true, A.range_space.dim, name='omega_true')
    e = as_vec(y_obs, A.range_space.dim, name='y_obs') - as_vec(y_true, A.range_space.dim, name='y_true')
    breg = dual_bregman(R, A, w, w_true, x_true)
    penalty = alpha ** (p_star - 1.0) * norm(w, A.range_space.dual) ** p_star / p_star
    return breg + penalty - float(np.dot(w - w_true, e))


@dataclass(frozen=True)
class AlmostMinGap:
    """How far the noisy dual solution is from minimizing the exact-data dual functional"""
    gap: float
    bound: float
    pairing_bound: float
    tolerance: float


def almost_min_gap(instance: ProblemInstance, alpha: float,
                   opts: Optional[SolveOptions] = None) -> AlmostMinGap:
    """gap = T*(omega_noisy; y_true) - T*(omega_exact; y_true) with two upper bounds.

    bound is delta * ||omega_noisy - omega_true||; pairing_bound is
    <omega_noisy - omega_exact, y_delta - y_true>, which the optimality of
    omega_noisy always guarantees.
    """
    if instance.delta < 0:
        raise DomainError(f"noise level must be >= 0, got {instance.delta}")
    opts = opts or SolveOptions()
    A, R, p = instance.A, instance.R, instance.p
    noisy = solve_primal(A, instance.y_delta, alpha, p, R, opts)
    exact = solve_primal(A, instance.y_true, alpha, p, R, opts)
    for label, sol in (('noisy', noisy), ('exact', exact)):
        if not sol.converged:
            raise ConvergenceError(f"{label}-data solve did not converge (r1={sol.kkt_r1:.3e})")

    def t_star(w):
        return dual_functional(w, A, R, instance.x_true, instance.omega_true, alpha, p,
                               instance.y_true, instance.y_true)

    value_noisy = t_star(noisy.omega)
    value_exact = t_star(exact.omega)
    gap = value_noisy - value_exact
    bound = instance.delta * norm(noisy.omega - instance.omega_true, A.range_space.dual)
    pairing_bound = float(np.dot(noisy.omega - exact.omega, instance.y_delta - instance.y_true))
    tolerance = opts.kkt_tol * max(1.0, abs(value_exact), abs(value_noisy))
    logger.debug(f"[almost_min_gap] alpha={alpha:.3e} gap={gap:.3e} bound={bound:.3e} "
                 f"pairing={pairing_bound:.3e}")
    return AlmostMinGap(gap=float(gap), bound=float(bound), pairing_bound=pairing_bound,
                        tolerance=float(tolerance))


@dataclass(frozen=True)
class BregmanSplit:
    """<A*omega - A*omega_true, x - x_true> = primal + dual"""
    primal: float
    dual: float
    symmetric: float

    @property
    def residual(self) -> float:
        return self.symmetric - self.primal - self.dual


def bregman_split(instance: ProblemInstance, solution: PrimalDualSolution) -> BregmanSplit:
    A, R = instance.A, instance.R
    xi = A.adjoint(solution.omega)
    symmetric = float(np.dot(xi - instance.xi_true, solution.x - instance.x_true))
    primal = primal_bregman(R, solution.x, instance.x_true, instance.xi_true, check=False)
    dual = dual_bregman(R, A, solution.omega, instance.omega_true, instance.x_true, check=False)
    return BregmanSplit(primal=primal, dual=dual, symmetric=symmetric)
