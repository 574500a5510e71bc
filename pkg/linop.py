import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.linalg import circulant

from banach import (
    DEFAULT_TOLERANCES,
    DimensionMismatch,
    DomainError,
    SpaceSpec,
    TikhonovError,
    Tolerances,
    adjoint_duality_map,
    as_vec,
    conjugate_exponent,
    norm,
)
from regfun import (
    NEG_ENTROPY,
    RegSpec,
    SourceConditionError,
    conjugate_subgradient,
    is_subgradient,
)

logger = logging.getLogger(__name__)

DENSE = 'dense'
DIAGONAL = 'diagonal'
CONVOLUTION = 'convolution'

# relative singular-value cutoff of the numerical range
DEFAULT_RANGE_RCOND = 1e-6


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    """A bounded linear operator A: l^{r_x} -> l^{r_y} given by its matrix data"""
    kind: str
    data: np.ndarray
    domain: SpaceSpec
    range_space: SpaceSpec

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)
        if not np.all(np.isfinite(data)):
            raise DomainError("operator data has non-finite entries")
        if self.kind == DENSE:
            if data.shape != (self.range_space.dim, self.domain.dim):
                raise DimensionMismatch(
                    f"dense matrix has shape {data.shape}, expected "
                    f"({self.range_space.dim}, {self.domain.dim})")
        elif self.kind in (DIAGONAL, CONVOLUTION):
            if self.domain.dim != self.range_space.dim or data.shape != (self.domain.dim,):
                raise DimensionMismatch(f"{self.kind} operator needs a square shape matching its data")
        else:
            raise DomainError(f"unknown operator kind '{self.kind}'")

    def apply(self, x) -> np.ndarray:
        v = as_vec(x, self.domain.dim, name='x')
        if self.kind == DENSE:
            return self.data @ v
        if self.kind == DIAGONAL:
            return self.data * v
        # circular convolution (Ax)_i = sum_j k_{(i-j) mod n} x_j
        return np.fft.irfft(np.fft.rfft(self.data) * np.fft.rfft(v), n=v.size)

    def adjoint(self, omega) -> np.ndarray:
        w = as_vec(omega, self.range_space.dim, name='omega')
        if self.kind == DENSE:
            return self.data.T @ w
        if self.kind == DIAGONAL:
            return self.data * w
        # correlation with the kernel
        return np.fft.irfft(np.conj(np.fft.rfft(self.data)) * np.fft.rfft(w), n=w.size)

    def to_dense(self) -> np.ndarray:
        if self.kind == DENSE:
            return np.array(self.data)
        if self.kind == DIAGONAL:
            return np.diag(self.data)
        return circulant(self.data)


def dense(matrix, r_x: float = 2.0, r_y: float = 2.0) -> OperatorSpec:
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    rows, cols = m.shape
    return OperatorSpec(DENSE, m, SpaceSpec(cols, r_x), SpaceSpec(rows, r_y))


def diagonal(sigma, r_x: float = 2.0, r_y: float = 2.0) -> OperatorSpec:
    s = as_vec(sigma, name='sigma')
    return OperatorSpec(DIAGONAL, s, SpaceSpec(s.size, r_x), SpaceSpec(s.size, r_y))


def convolution(kernel, dim: Optional[int] = None, r_x: float = 2.0, r_y: float = 2.0) -> OperatorSpec:
    k = as_vec(kernel, name='kernel')
    n = k.size if dim is None else int(dim)
    if k.size > n:
        raise DimensionMismatch(f"kernel of length {k.size} exceeds dimension {n}")
    padded = np.zeros(n)
    padded[:k.size] = k
    return OperatorSpec(CONVOLUTION, padded, SpaceSpec(n, r_x), SpaceSpec(n, r_y))


def load_matrix(path: str) -> np.ndarray:
    """Read 'rows cols' followed by row-major whitespace-separated scalars"""
    with open(path) as f:
        tokens = f.read().split()
    if len(tokens) < 2:
        raise DomainError(f"{path}: missing 'rows cols' header")
    try:
        rows, cols = int(tokens[0]), int(tokens[1])
        values = np.array([float(t) for t in tokens[2:]])
    except ValueError as e:
        raise DomainError(f"{path}: malformed matrix file ({e})") from e
    if rows < 1 or cols < 1 or values.size != rows * cols:
        raise DimensionMismatch(f"{path}: expected {rows}x{cols} values, found {values.size}")
    return values.reshape(rows, cols)


def apply(A: OperatorSpec, x) -> np.ndarray:
    """Ax"""
    return A.apply(x)


def adjoint_apply(A: OperatorSpec, omega) -> np.ndarray:
    """A*omega, with <omega, Ax> = <A*omega, x>"""
    return A.adjoint(omega)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """A test problem consistent with the range condition xi_true = A*omega_true in dR(x_true)"""
    A: OperatorSpec
    R: RegSpec
    p: float
    x_true: np.ndarray
    omega_true: np.ndarray
    xi_true: np.ndarray
    y_true: np.ndarray
    delta: float
    y_delta: np.ndarray
    seed: int = 0

    @property
    def p_star(self) -> float:
        return conjugate_exponent(self.p)

    def with_noise(self, delta: float, seed: int) -> "ProblemInstance":
        y_delta = make_noise(self.y_true, delta, self.A.range_space, seed)
        return replace(self, delta=float(delta), y_delta=y_delta, seed=int(seed))

    def check(self, tolerances: Optional[Tolerances] = None):
        """Raise unless the instance invariants hold"""
        tol = tolerances or DEFAULT_TOLERANCES
        xi = self.A.adjoint(self.omega_true)
        scale = float(np.max(np.abs(xi), initial=0.0))
        if np.max(np.abs(xi - self.xi_true), initial=0.0) > tol.abs_tol + tol.rel_tol * scale:
            raise SourceConditionError("xi_true differs from A*omega_true")
        if not is_subgradient(self.R, self.x_true, self.xi_true, tol):
            raise SourceConditionError("xi_true is not a subgradient of R at x_true")
        if not np.array_equal(self.A.apply(self.x_true), self.y_true):
            raise TikhonovError("y_true differs from A x_true")
        noise = norm(self.y_delta - self.y_true, self.A.range_space)
        if not tol.close(noise, self.delta):
            raise TikhonovError(f"noise norm {noise:.3e} differs from delta {self.delta:.3e}")
        return self


def build_source_problem(A: OperatorSpec, R: RegSpec, p: float, omega_true) -> ProblemInstance:
    """Construct x_true from omega_true through x_true in dR*(A*omega_true)"""
    if not p > 1:
        raise DomainError(f"p must be > 1, got {p}")
    if R.space != A.domain:
        raise DimensionMismatch("regularizer and operator live on different spaces")
    w = as_vec(omega_true, A.range_space.dim, name='omega_true')
    xi_true = A.adjoint(w)
    x_true = conjugate_subgradient(R, xi_true)
    if not np.all(np.isfinite(x_true)) or (R.kind == NEG_ENTROPY and np.any(x_true <= 0)):
        raise SourceConditionError("dR*(A*omega_true) is empty; cannot build a consistent instance")
    y_true = A.apply(x_true)
    instance = ProblemInstance(
        A=A, R=R, p=float(p), x_true=x_true, omega_true=w, xi_true=xi_true,
        y_true=y_true, delta=0.0, y_delta=y_true.copy(), seed=0,
    )
    logger.debug(f"[build_source_problem] R={R.describe()} |x_true|={np.linalg.norm(x_true):.4g}")
    return instance.check()


def make_noise(y_true, delta: float, range_space: SpaceSpec, seed) -> np.ndarray:
    """y_delta with ||y_delta - y_true|| = delta exactly, along a seeded Gaussian direction"""
    y = as_vec(y_true, range_space.dim, name='y_true')
    if delta < 0 or not np.isfinite(delta):
        raise DomainError(f"noise level must be >= 0, got {delta}")
    if delta == 0:
        return y.copy()
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(range_space.dim)
    while not np.any(direction):
        direction = rng.standard_normal(range_space.dim)
    direction /= norm(direction, range_space)
    return y + delta * direction


@dataclass(frozen=True)
class RangeDiagnostic:
    residual: float
    degenerate: bool
    rank: int


def range_diagnostic(A: OperatorSpec, omega_true, p: float,
                     rcond: float = DEFAULT_RANGE_RCOND) -> RangeDiagnostic:
    """Relative least-squares residual of J_{p*}(omega_true) against range A.

    Singular values below rcond * sigma_max are treated as zero, so a small
    residual means J_{p*}(omega_true) lies in the numerically resolved range.
    """
    w = as_vec(omega_true, A.range_space.dim, name='omega_true')
    if not np.any(w):
        return RangeDiagnostic(residual=0.0, degenerate=True, rank=0)
    u = adjoint_duality_map(w, A.range_space.dual, conjugate_exponent(p))
    matrix = A.to_dense()
    solution, _, rank, _ = np.linalg.lstsq(matrix, u, rcond=rcond)
    residual = np.linalg.norm(matrix @ solution - u) / max(np.linalg.norm(u), 1e-300)
    logger.debug(f"[range_diagnostic] rank={rank} residual={residual:.3e}")
    return RangeDiagnostic(residual=float(residual), degenerate=False, rank=int(rank))
