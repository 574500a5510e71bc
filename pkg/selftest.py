#!/usr/bin/env python3
import logging
from typing import Callable, List, Optional, Tuple

import numpy as np

from banach import SpaceSpec, adjoint_duality_map, duality_map, norm
from linop import build_source_problem, dense, diagonal
from rates import IndexFn, fit_loglog, psi_conjugate
from regfun import RegSpec
from solver import (
    SolveOptions,
    bregman_split,
    closed_form_quadratic,
    kkt_residual,
    recover_dual,
    solve_primal,
)

logger = logging.getLogger(__name__)


def _well_conditioned(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(rng.standard_normal((n, n)))
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return u @ np.diag(np.linspace(0.1, 1.0, n)) @ v.T


def check_quadratic_oracle() -> float:
    A = diagonal([1.0, 0.5])
    R = RegSpec.power_norm(A.domain, 2.0)
    sol = solve_primal(A, [1.0, 1.0], 0.5, 2.0, R, SolveOptions(kkt_tol=1e-12))
    return float(np.max(np.abs(sol.x - 2.0 / 3.0)))


def check_dense_oracle() -> float:
    A = dense(_well_conditioned(20, seed=1))
    y = np.random.default_rng(2).standard_normal(20)
    R = RegSpec.power_norm(A.domain, 2.0)
    sol = solve_primal(A, y, 0.1, 2.0, R, SolveOptions(kkt_tol=1e-11))
    exact = closed_form_quadratic(A, y, 0.1)
    return float(np.linalg.norm(sol.x - exact) / np.linalg.norm(exact))


DUALITY_R = (1.5, 2.0, 3.0, 4.0)
DUALITY_Q = (1.5, 2.0, 3.0)
DUALITY_SAMPLES = 1000


def _duality_grid(check: Callable[[np.ndarray, SpaceSpec, float], float], dim: int = 12,
                  samples: int = DUALITY_SAMPLES, seed: int = 3) -> float:
    """Worst error of check over every (r, q) pair and samples random vectors"""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for r in DUALITY_R:
        space = SpaceSpec(dim, r)
        for q in DUALITY_Q:
            for v in rng.standard_normal((samples, dim)):
                worst = max(worst, check(v, space, q))
    return worst


def _identity_error(v: np.ndarray, space: SpaceSpec, q: float) -> float:
    j = duality_map(v, space, q)
    nv = norm(v, space)
    return max(abs(float(np.dot(j, v)) - nv ** q) / nv ** q,
               abs(norm(j, space.dual) - nv ** (q - 1)) / nv ** (q - 1))


def _inverse_error(v: np.ndarray, space: SpaceSpec, q: float) -> float:
    back = adjoint_duality_map(duality_map(v, space, q), space.dual, q / (q - 1))
    return float(np.max(np.abs(back - v)) / np.max(np.abs(v)))


def check_duality_identity() -> float:
    return _duality_grid(_identity_error)


def check_duality_inverse() -> float:
    return _duality_grid(_inverse_error)


def check_kkt() -> float:
    A = dense(_well_conditioned(10, seed=5))
    R = RegSpec.power_norm(A.domain, 2.0)
    y = np.random.default_rng(6).standard_normal(10)
    x = closed_form_quadratic(A, y, 0.3)
    r1, r2 = kkt_residual(x, recover_dual(x, A, y, 0.3, 2.0), A, R, y, 0.3, 2.0)
    return max(r1, r2)


def check_bregman_split() -> float:
    A = dense(_well_conditioned(10, seed=7))
    R = RegSpec.power_norm(A.domain, 2.0)
    instance = build_source_problem(A, R, 2.0, np.random.default_rng(8).standard_normal(10))
    noisy = instance.with_noise(1e-2, seed=9)
    sol = solve_primal(A, noisy.y_delta, 0.1, 2.0, R, SolveOptions(kkt_tol=1e-11))
    split = bregman_split(noisy, sol)
    return abs(split.residual) / max(split.symmetric, 1e-300)


def check_psi_tabulated() -> float:
    t = np.concatenate([[0.0], np.geomspace(1e-12, 10.0, 4000)])
    table = psi_conjugate(IndexFn.tabulated(t, np.sqrt(t)))
    s = np.geomspace(1e-4, 1.0, 25)
    exact = s ** 2 / 4
    return float(np.max(np.abs(table(s) - exact) / exact))


def check_loglog_fit() -> float:
    delta = np.geomspace(1e-6, 1e-2, 9)
    slope, _ = fit_loglog(zip(delta, 3.0 * delta ** (4.0 / 3.0)))
    return abs(slope - 4.0 / 3.0)


CHECKS: List[Tuple[str, Callable[[], float], float]] = [
    ("quadratic oracle x = (2/3, 2/3)", check_quadratic_oracle, 1e-9),
    ("solver matches (A*A + aI)^-1 A*y", check_dense_oracle, 1e-8),
    ("<J_q(v), v> = ||v||^q, r in {1.5,2,3,4}, q in {1.5,2,3}", check_duality_identity, 1e-11),
    ("J*_{q*} inverts J_q, r in {1.5,2,3,4}, q in {1.5,2,3}", check_duality_inverse, 1e-10),
    ("KKT residuals vanish at the closed form", check_kkt, 1e-10),
    ("symmetric Bregman = primal + dual", check_bregman_split, 1e-6),
    ("tabulated Psi matches s^2/4", check_psi_tabulated, 1e-4),
    ("log-log fit is exact on power laws", check_loglog_fit, 1e-10),
]


def run_selftest(tolerance: Optional[float] = None) -> bool:
    """Run every check; tolerance overrides the per-check defaults"""
    logger.info("=" * 50)
    logger.info("SELFTEST STARTING")
    logger.info("=" * 50)
    failures = 0
    for label, check, default_tol in CHECKS:
        tol = default_tol if tolerance is None else tolerance
        try:
            err = check()
        except Exception as e:
            failures += 1
            logger.error(f"✗ {label}: {e}")
            continue
        if err < tol:
            logger.info(f"✓ {label} (error {err:.2e} < {tol:.0e})")
        else:
            failures += 1
            logger.error(f"✗ {label} (error {err:.2e}, tolerance {tol:.0e})")
    logger.info("=" * 50)
    logger.info(f"SELFTEST COMPLETE: {len(CHECKS) - failures}/{len(CHECKS)} passed")
    logger.info("=" * 50)
    return failures == 0
