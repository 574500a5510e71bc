import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar
from scipy.stats import linregress

from banach import (
    DEFAULT_TOLERANCES,
    DomainError,
    adjoint_duality_map,
    as_vec,
    conjugate_exponent,
    norm,
)
from linop import ProblemInstance
from regfun import POWER_NORM, dual_bregman

logger = logging.getLogger(__name__)

POWER = 'power'
TABULATED = 'tabulated'

PASS = 'pass'
FAIL = 'fail'
TWO_SIDED = 'two_sided'
AT_LEAST = 'at_least'

# relative slack of the discrete concavity check
_CONCAVITY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class IndexFn:
    """An index function Phi: strictly increasing, concave, Phi(0) = 0.

    Either Phi(t) = c t^mu with 0 < mu <= 1, or a table of (t, Phi(t)) pairs
    interpolated linearly and continued with the last slope.
    """
    kind: str
    c: float = 1.0
    mu: float = 1.0
    t: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    @classmethod
    def power(cls, c: float, mu: float) -> "IndexFn":
        if not c > 0 or not np.isfinite(c):
            raise DomainError(f"index function constant must be > 0, got {c}")
        if not 0 < mu <= 1:
            raise DomainError(f"index function exponent must lie in (0, 1], got {mu}")
        return cls(POWER, c=float(c), mu=float(mu))

    @classmethod
    def tabulated(cls, t, values) -> "IndexFn":
        grid = as_vec(t, name='t').copy()
        vals = as_vec(values, grid.size, name='values').copy()
        if grid[0] < 0:
            raise DomainError("index function table must start at t >= 0")
        if grid[0] > 0:
            grid = np.concatenate([[0.0], grid])
            vals = np.concatenate([[0.0], vals])
        elif vals[0] != 0:
            raise DomainError(f"index function must vanish at 0, got {vals[0]}")
        if grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise DomainError("index function grid must be strictly increasing")
        if np.any(np.diff(vals) <= 0):
            raise DomainError("index function must be strictly increasing")
        slopes = np.diff(vals) / np.diff(grid)
        if np.any(np.diff(slopes) > _CONCAVITY_TOL * slopes[:-1]):
            raise DomainError("index function table is not concave")
        grid.setflags(write=False)
        vals.setflags(write=False)
        return cls(TABULATED, t=grid, values=vals)

    @property
    def last_slope(self) -> float:
        return float((self.values[-1] - self.values[-2]) / (self.t[-1] - self.t[-2]))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise DomainError("index functions are defined on t >= 0")
        if self.kind == POWER:
            return self.c * t ** self.mu
        inside = np.interp(t, self.t, self.values)
        beyond = self.values[-1] + self.last_slope * (t - self.t[-1])
        return np.where(t > self.t[-1], beyond, inside)

    def inverse(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise DomainError("the inverse index function is defined on s >= 0")
        if self.kind == POWER:
            return (s / self.c) ** (1.0 / self.mu)
        inside = np.interp(s, self.values, self.t)
        beyond = self.t[-1] + (s - self.values[-1]) / self.last_slope
        return np.where(s > self.values[-1], beyond, inside)

    def describe(self) -> str:
        if self.kind == POWER:
            return f"{self.c:g} t^{self.mu:g}"
        return f"table of {self.t.size} points on [0, {self.t[-1]:g}]"


def index_inverse(phi: IndexFn) -> Callable:
    return phi.inverse


def psi_conjugate(phi: IndexFn) -> Callable:
    """Psi(s) = sup_{t >= 0} (s t - Phi^{-1}(t))"""
    if phi.kind == POWER:
        if phi.mu == 1.0:
            # Phi^{-1} is linear: the conjugate is the indicator of [0, 1/c]
            def psi(s):
                s = np.asarray(s, dtype=float)
                return np.where(s <= 1.0 / phi.c, 0.0, np.inf)
            return psi
        q_star = 1.0 / phi.mu
        q = conjugate_exponent(q_star)
        const = phi.c ** q * q_star ** (1.0 - q) / q

        def psi(s):
            s = np.asarray(s, dtype=float)
            # sup over t >= 0 is attained at t = 0 for s <= 0
            return const * np.maximum(s, 0.0) ** q
        return psi

    t, values = phi.t, phi.values

    def psi(s):
        s = np.asarray(s, dtype=float)
        flat = np.atleast_1d(s).reshape(-1)
        out = np.max(np.outer(flat, values) - t[None, :], axis=1)
        return out.reshape(s.shape) if s.ndim else float(out[0])
    return psi


def young_gap(phi: IndexFn, s, t) -> np.ndarray:
    """Phi^{-1}(t) + Psi(s) - s t, nonnegative by Young's inequality"""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    return phi.inverse(t) + psi_conjugate(phi)(s) - s * t


def _check_exponents(p: float, q: float):
    if not p > 1 or not q > 1:
        raise DomainError(f"exponents must satisfy p > 1 and q > 1, got p={p}, q={q}")


def theoretical_bound(alpha: float, delta: float, phi: IndexFn, p: float, C: float) -> float:
    """Psi(alpha^{p*-1}) + delta^p / (p p*^{1/p*} C^{p/p*} alpha)"""
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    if not C > 0:
        raise DomainError(f"convexity constant must be > 0, got {C}")
    if delta < 0:
        raise DomainError(f"delta must be >= 0, got {delta}")
    p_star = conjugate_exponent(p)
    approx = float(psi_conjugate(phi)(alpha ** (p_star - 1.0)))
    d_const = 1.0 / (p * p_star ** (1.0 / p_star) * C ** (p / p_star))
    return approx + d_const * delta ** p / alpha


def alpha_exponent(p: float, q: float) -> float:
    """e in alpha ~ delta^e"""
    _check_exponents(p, q)
    p_star = conjugate_exponent(p)
    return p / ((p_star - 1.0) * q + 1.0)


def choose_alpha(delta: float, p: float, q: float, c0: float) -> float:
    if not delta > 0:
        raise DomainError(f"a-priori choice needs delta > 0, got {delta}")
    if not c0 > 0:
        raise DomainError(f"c0 must be > 0, got {c0}")
    return c0 * delta ** alpha_exponent(p, q)


def predicted_exponent(p: float, q: float) -> float:
    """p* q / ((p*-1) q + 1)"""
    _check_exponents(p, q)
    p_star = conjugate_exponent(p)
    return p_star * q / ((p_star - 1.0) * q + 1.0)


def exact_data_exponent(p: float, q: float) -> float:
    """(p*-1) q, the alpha-exponent of the exact-data error"""
    _check_exponents(p, q)
    return (conjugate_exponent(p) - 1.0) * q


def calibrate_c0(delta_max: float, p: float, q: float, phi: IndexFn, C: float) -> float:
    """c0 minimizing theoretical_bound at delta_max under alpha = c0 delta^e"""
    if not delta_max > 0:
        raise DomainError(f"delta_max must be > 0, got {delta_max}")
    e = alpha_exponent(p, q)
    scale = delta_max ** e

    def objective(log_c0):
        value = theoretical_bound(np.exp(log_c0) * scale, delta_max, phi, p, C)
        return value if np.isfinite(value) else 1e300

    res = minimize_scalar(objective, bounds=(np.log(1e-8), np.log(1e8)), method='bounded',
                          options={'xatol': 1e-10})
    c0 = float(np.exp(res.x))
    logger.info(f"[calibrate_c0] delta_max={delta_max:.3e}: c0={c0:.6g} (bound {res.fun:.4e})")
    return c0


def fit_loglog(points: Iterable[Tuple[float, float]]) -> Tuple[float, float]:
    """Least-squares slope of ln(error) against ln(delta) and its standard error"""
    arr = np.asarray(list(points), dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 3 or arr.shape[1] != 2:
        raise DomainError(f"log-log fit needs at least 3 (delta, error) pairs, got {arr.shape[0]}")
    if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise DomainError("log-log fit needs finite positive values")
    fit = linregress(np.log(arr[:, 0]), np.log(arr[:, 1]))
    return float(fit.slope), float(fit.stderr)


def rate_verdict(slope: float, predicted: Optional[float], tolerance: float,
                 check: str = TWO_SIDED) -> Optional[str]:
    if predicted is None or not np.isfinite(slope):
        return None
    if check == AT_LEAST:
        return PASS if slope >= predicted - tolerance else FAIL
    if check == TWO_SIDED:
        return PASS if abs(slope - predicted) <= tolerance else FAIL
    raise DomainError(f"unknown rate check '{check}'")


@dataclass(eq=False)
class RateReport:
    """Result rows of a sweep together with the fitted and predicted rates"""
    rows: pd.DataFrame
    fitted_slope: float
    slope_stderr: float
    predicted_exponent: Optional[float]
    tolerance: float
    verdict: Optional[str]
    mode: str = 'noisy'
    exploratory: bool = False
    n_failed: int = 0
    median_errors: Dict[float, float] = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return int(len(self.rows))

    @property
    def n_points(self) -> int:
        return len(self.median_errors)

    @property
    def failed_fraction(self) -> float:
        return self.n_failed / self.n_rows if self.n_rows else 0.0

    def summary(self) -> dict:
        return {
            'slope': self.fitted_slope,
            'stderr': self.slope_stderr,
            'predicted': self.predicted_exponent,
            'tolerance': self.tolerance,
            'verdict': self.verdict,
            'n_rows': self.n_rows,
            'n_failed': self.n_failed,
            'mode': self.mode,
            'exploratory': self.exploratory,
            'n_points': self.n_points,
            'median_errors': {f"{k:.6e}": v for k, v in self.median_errors.items()},
        }


@dataclass(frozen=True)
class ProbeReport:
    """Sampled check of <omega - omega_true, J_{p*}(omega_true)> <= Phi(D*)"""
    max_ratio: float
    fitted_mu: float
    n_samples_used: int
    degenerate: bool
    regime: str
    holds: bool


def default_radius_grid(count: int = 12) -> np.ndarray:
    """Relative radii, logarithmic over [1e-4, 1]"""
    return np.geomspace(1e-4, 1.0, count)


def var_ineq_probe(instance: ProblemInstance, phi: IndexFn, nsamples: int,
                   radius_grid: Optional[Sequence[float]] = None, seed=0) -> ProbeReport:
    """Falsification probe of the variational source inequality.

    Samples omega = omega_true + t v for unit directions v (one derived seed
    per direction) and every t in radius_grid * ||omega_true||. This can
    expose violations but never certify the inequality for all omega.
    """
    if nsamples < 1:
        raise DomainError(f"nsamples must be >= 1, got {nsamples}")
    A, R = instance.A, instance.R
    Y_dual = A.range_space.dual
    p_star = instance.p_star
    omega_true = instance.omega_true
    radii = default_radius_grid() if radius_grid is None else as_vec(radius_grid, name='radius_grid')

    omega_norm = norm(omega_true, Y_dual)
    if omega_norm == 0.0:
        regime = "x_true minimises R (x_true = 0)" if R.kind == POWER_NORM else "x_true minimises R"
        logger.info(f"[var_ineq_probe] omega_true = 0: {regime}")
        return ProbeReport(max_ratio=0.0, fitted_mu=float('nan'), n_samples_used=0,
                           degenerate=True, regime=regime, holds=True)

    j_true = adjoint_duality_map(omega_true, Y_dual, p_star)
    children = np.random.SeedSequence(seed).spawn(nsamples)
    lhs_all = []
    dstar_all = []
    max_ratio = -np.inf
    used = 0
    for child in children:
        rng = np.random.default_rng(child)
        v = rng.standard_normal(A.range_space.dim)
        v /= norm(v, Y_dual)
        for t in radii * omega_norm:
            omega = omega_true + t * v
            lhs = float(np.dot(omega - omega_true, j_true))
            d_star = dual_bregman(R, A, omega, omega_true, instance.x_true, check=False)
            rhs = float(phi(d_star))
            if rhs == 0.0:
                if lhs <= 0.0:
                    continue
                ratio = np.inf
            else:
                ratio = lhs / rhs
            used += 1
            max_ratio = max(max_ratio, ratio)
            lhs_all.append(lhs)
            dstar_all.append(d_star)

    lhs_arr = np.array(lhs_all)
    d_arr = np.array(dstar_all)
    mask = (lhs_arr > 0) & (d_arr > 0)
    fitted_mu = float('nan')
    if np.count_nonzero(mask) >= 3:
        fitted_mu = float(linregress(np.log(d_arr[mask]), np.log(lhs_arr[mask])).slope)

    if used == 0:
        max_ratio = 0.0
    holds = bool(max_ratio <= 1.0 + DEFAULT_TOLERANCES.rel_tol)
    regime = "inequality holds on sample" if holds else "inequality violated"
    logger.info(f"[var_ineq_probe] Phi={phi.describe()}: max_ratio={max_ratio:.6g}, "
                f"fitted_mu={fitted_mu:.4g}, samples={used}")
    return ProbeReport(max_ratio=float(max_ratio), fitted_mu=fitted_mu, n_samples_used=used,
                       degenerate=False, regime=regime, holds=holds)
