import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from banach import (
    DomainError,
    SpaceSpec,
    TikhonovError,
    duality_map,
    norm,
    qconvexity_constant,
)
from linop import (
    DEFAULT_RANGE_RCOND,
    OperatorSpec,
    ProblemInstance,
    build_source_problem,
    convolution,
    dense,
    diagonal,
    load_matrix,
    range_diagnostic,
)
from rates import (
    AT_LEAST,
    FAIL,
    TWO_SIDED,
    IndexFn,
    RateReport,
    calibrate_c0,
    choose_alpha,
    default_radius_grid,
    exact_data_exponent,
    fit_loglog,
    predicted_exponent,
    rate_verdict,
    var_ineq_probe,
)
from regfun import NEG_ENTROPY, POWER_NORM, RegSpec, primal_bregman
from solver import SolveOptions, solve_primal

logger = logging.getLogger(__name__)

CSV_COLUMNS = ['delta', 'seed', 'alpha', 'bregman_error', 'norm_error',
               'kkt_r1', 'kkt_r2', 'iters', 'converged']

NOISY = 'noisy'
EXACT = 'exact'

# runs with a larger share of non-converged solves are reported as failed
MAX_FAILED_FRACTION = 0.2
_PROGRESS_EVERY = 10


class ConfigError(TikhonovError):
    pass


@dataclass(frozen=True)
class RateSettings:
    q: float
    predicted: Optional[float] = None
    tolerance: float = 0.1
    check: str = TWO_SIDED
    trim: float = 0.1
    exploratory: bool = False


@dataclass(frozen=True)
class ProbeSettings:
    phi: dict
    nsamples: int = 1000
    radius: Optional[dict] = None
    range_rcond: float = DEFAULT_RANGE_RCOND


@dataclass(frozen=True)
class ExperimentConfig:
    """A parsed experiment file; relative paths resolve against base_dir"""
    name: str
    mode: str
    master_seed: int
    operator: dict
    r_x: float
    r_y: float
    p: float
    regularizer: dict
    source: dict
    delta: Optional[dict]
    seeds: int
    alpha: dict
    solver: SolveOptions
    rate: RateSettings
    probe: Optional[ProbeSettings]
    base_dir: str = '.'

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str = '.') -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        try:
            mode = raw.get('mode', NOISY)
            if mode not in (NOISY, EXACT):
                raise ConfigError(f"mode must be '{NOISY}' or '{EXACT}', got '{mode}'")
            for key in ('operator', 'regularizer', 'source', 'alpha'):
                if not isinstance(raw.get(key), dict):
                    raise ConfigError(f"missing or malformed '{key}' section")
            regularizer = raw['regularizer']
            default_q = regularizer.get('q', 2.0) if regularizer.get('kind') == POWER_NORM else 2.0
            rate_raw = dict(raw.get('rate', {}))
            rate = RateSettings(
                q=float(rate_raw.get('q', default_q)),
                predicted=None if rate_raw.get('predicted') is None else float(rate_raw['predicted']),
                tolerance=float(rate_raw.get('tolerance', 0.1)),
                check=rate_raw.get('check', TWO_SIDED),
                trim=float(rate_raw.get('trim', 0.1)),
                exploratory=bool(rate_raw.get('exploratory', False)),
            )
            if rate.check not in (TWO_SIDED, AT_LEAST):
                raise ConfigError(f"rate.check must be '{TWO_SIDED}' or '{AT_LEAST}'")
            if not 0 <= rate.trim < 0.5:
                raise ConfigError(f"rate.trim must lie in [0, 0.5), got {rate.trim}")
            probe = None
            if raw.get('probe') is not None:
                probe_raw = raw['probe']
                probe = ProbeSettings(
                    phi=dict(probe_raw.get('phi', {'kind': 'power', 'c': 'source', 'mu': 0.5})),
                    nsamples=int(probe_raw.get('nsamples', 1000)),
                    radius=probe_raw.get('radius'),
                    range_rcond=float(probe_raw.get('range_rcond', DEFAULT_RANGE_RCOND)),
                )
            cfg = cls(
                name=str(raw.get('name', 'experiment')),
                mode=mode,
                master_seed=int(raw.get('master_seed', 0)),
                operator=dict(raw['operator']),
                r_x=float(raw.get('r_x', 2.0)),
                r_y=float(raw.get('r_y', 2.0)),
                p=float(raw.get('p', 2.0)),
                regularizer=dict(regularizer),
                source=dict(raw['source']),
                delta=raw.get('delta'),
                seeds=int(raw.get('seeds', 1)),
                alpha=dict(raw['alpha']),
                solver=SolveOptions(**raw.get('solver', {})),
                rate=rate,
                probe=probe,
                base_dir=base_dir,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"invalid config: {e}") from e
        cfg.validate()
        return cfg

    def validate(self):
        if not self.p > 1 or not self.r_x > 1 or not self.r_y > 1:
            raise ConfigError("p, r_x and r_y must all be > 1")
        if self.seeds < 1:
            raise ConfigError(f"seeds must be >= 1, got {self.seeds}")
        rule = self.alpha.get('rule')
        if self.mode == NOISY:
            if not isinstance(self.delta, dict):
                raise ConfigError("noisy mode needs a 'delta' grid")
            _geometric_grid(self.delta, 'delta')
            if rule not in ('choice', 'power'):
                raise ConfigError(f"noisy mode needs alpha rule 'choice' or 'power', got '{rule}'")
            if rule == 'power':
                exponent = self.alpha.get('exponent')
                if isinstance(exponent, bool) or not isinstance(exponent, (int, float)) or not exponent > 0:
                    raise ConfigError(f"alpha rule 'power' needs a positive numeric 'exponent', got {exponent!r}")
        else:
            if rule != 'grid':
                raise ConfigError(f"exact mode needs alpha rule 'grid', got '{rule}'")
            _geometric_grid(self.alpha, 'alpha')

    def resolve_path(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


def load_config(path: str) -> ExperimentConfig:
    logger.info(f"Loading experiment config from {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return ExperimentConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def _geometric_grid(spec: dict, label: str) -> np.ndarray:
    try:
        lo, hi, count = float(spec['min']), float(spec['max']), int(spec['count'])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{label} grid needs numeric min, max and count") from e
    if not 0 < lo < hi or count < 3:
        raise ConfigError(f"{label} grid must satisfy 0 < min < max and count >= 3")
    return np.geomspace(lo, hi, count)


def resolve_vector(spec, dim: Optional[int], cfg: ExperimentConfig, rng: np.random.Generator,
                   label: str) -> np.ndarray:
    """Expand a vector spec: a literal list or one of the generator kinds"""
    if isinstance(spec, list):
        vec = np.asarray(spec, dtype=float)
    elif isinstance(spec, dict):
        kind = spec.get('kind')
        if kind == 'file':
            try:
                vec = np.atleast_1d(np.loadtxt(cfg.resolve_path(spec['path']), dtype=float)).reshape(-1)
            except (OSError, ValueError, KeyError) as e:
                raise ConfigError(f"{label}: cannot read vector file ({e})") from e
        else:
            n = int(spec.get('length', dim or 0))
            if n < 1:
                raise ConfigError(f"{label}: '{kind}' vectors need a dimension")
            if kind == 'power_decay':
                vec = float(spec.get('scale', 1.0)) * np.arange(1, n + 1) ** (-float(spec['exponent']))
            elif kind == 'constant':
                vec = np.full(n, float(spec['value']))
            elif kind == 'random':
                vec = float(spec.get('scale', 1.0)) * rng.standard_normal(n)
            elif kind == 'zeros':
                vec = np.zeros(n)
            else:
                raise ConfigError(f"{label}: unknown vector kind '{kind}'")
    else:
        raise ConfigError(f"{label}: expected a list or a vector spec object")
    if dim is not None and vec.size != dim:
        raise ConfigError(f"{label} has length {vec.size}, expected {dim}")
    return vec


def build_operator(cfg: ExperimentConfig, rng: np.random.Generator) -> OperatorSpec:
    spec = cfg.operator
    kind = spec.get('kind')
    if kind == 'diagonal':
        dim = spec.get('dim')
        sigma = resolve_vector(spec['sigma'], None if dim is None else int(dim), cfg, rng, 'operator.sigma')
        return diagonal(sigma, cfg.r_x, cfg.r_y)
    if kind == 'dense':
        if 'matrix_file' in spec:
            path = cfg.resolve_path(spec['matrix_file'])
            try:
                matrix = load_matrix(path)
            except (OSError, ValueError) as e:
                raise ConfigError(f"cannot load operator matrix {path}: {e}") from e
        elif 'matrix' in spec:
            matrix = np.asarray(spec['matrix'], dtype=float)
        else:
            raise ConfigError("dense operator needs 'matrix' or 'matrix_file'")
        return dense(matrix, cfg.r_x, cfg.r_y)
    if kind == 'convolution':
        dim = int(spec['dim'])
        kernel_spec = spec['kernel']
        if isinstance(kernel_spec, dict) and kernel_spec.get('kind') != 'file' and 'length' not in kernel_spec:
            kernel_spec = dict(kernel_spec, length=dim)
        kernel = resolve_vector(kernel_spec, None, cfg, rng, 'operator.kernel')
        return convolution(kernel, dim, cfg.r_x, cfg.r_y)
    raise ConfigError(f"unknown operator kind '{kind}'")


def build_regularizer(cfg: ExperimentConfig, A: OperatorSpec) -> RegSpec:
    kind = cfg.regularizer.get('kind')
    if kind == POWER_NORM:
        return RegSpec.power_norm(A.domain, float(cfg.regularizer.get('q', 2.0)))
    if kind == NEG_ENTROPY:
        return RegSpec.neg_entropy(A.domain)
    raise ConfigError(f"unknown regularizer kind '{kind}'")


@dataclass(frozen=True, eq=False)
class BuiltExperiment:
    """The exact-data instance of a config and the smooth-source vector, if any"""
    instance: ProblemInstance
    v: Optional[np.ndarray] = None


def build_instance(cfg: ExperimentConfig) -> BuiltExperiment:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.master_seed))
    try:
        A = build_operator(cfg, rng)
        R = build_regularizer(cfg, A)
        mode = cfg.source.get('mode')
        v = None
        if mode == 'smooth':
            v = resolve_vector(cfg.source['v'], A.domain.dim, cfg, rng, 'source.v')
            omega_true = duality_map(A.apply(v), A.range_space, cfg.p)
        elif mode == 'generic':
            omega_true = float(cfg.source.get('scale', 1.0)) * rng.standard_normal(A.range_space.dim)
        elif mode == 'explicit':
            omega_true = resolve_vector(cfg.source['omega'], A.range_space.dim, cfg, rng, 'source.omega')
        elif mode == 'zero':
            omega_true = np.zeros(A.range_space.dim)
        else:
            raise ConfigError(f"unknown source mode '{mode}'")
        instance = build_source_problem(A, R, cfg.p, omega_true)
    except KeyError as e:
        raise ConfigError(f"missing config key {e}") from e
    logger.info(f"[build_instance] {cfg.name}: n={A.domain.dim}, R={R.describe()}, "
                f"|omega_true|={norm(instance.omega_true, A.range_space.dual):.4g}")
    return BuiltExperiment(instance=instance, v=v)


def probe_index_function(cfg: ExperimentConfig, built: BuiltExperiment) -> IndexFn:
    """Phi from the probe section; c = "source" means sqrt(2)||v||"""
    phi = cfg.probe.phi if cfg.probe is not None else {'kind': 'power', 'c': 'source', 'mu': 0.5}
    if phi.get('kind', 'power') != 'power':
        raise ConfigError(f"unknown index function kind '{phi.get('kind')}'")
    c = phi.get('c', 'source')
    if c == 'source':
        if built.v is None:
            raise ConfigError("phi.c = 'source' needs a smooth source with a vector v")
        c = math.sqrt(2.0) * norm(built.v, built.instance.A.domain)
    return IndexFn.power(float(c), float(phi.get('mu', 0.5)))


def data_convexity_constant(cfg: ExperimentConfig, range_space: SpaceSpec) -> float:
    if range_space.is_hilbert and cfg.p == 2.0:
        return 0.5
    return qconvexity_constant(range_space, cfg.p, nsamples=500, seed=cfg.master_seed)


def alpha_rule(cfg: ExperimentConfig, built: BuiltExperiment, deltas: np.ndarray):
    """Map delta to alpha according to the config's a-priori rule"""
    rule = cfg.alpha['rule']
    if rule == 'power':
        c0 = float(cfg.alpha.get('c0', 1.0))
        exponent = float(cfg.alpha['exponent'])
        return lambda delta: c0 * delta ** exponent
    q = float(cfg.alpha.get('q', cfg.rate.q))
    c0 = cfg.alpha.get('c0', 1.0)
    if c0 == 'calibrate':
        phi = probe_index_function(cfg, built)
        C = data_convexity_constant(cfg, built.instance.A.range_space)
        c0 = calibrate_c0(float(deltas[-1]), cfg.p, q, phi, C)
    c0 = float(c0)
    return lambda delta: choose_alpha(delta, cfg.p, q, c0)


@dataclass(frozen=True, eq=False)
class CellTask:
    instance: ProblemInstance
    delta: float
    delta_index: int
    seed_index: int
    alpha: float
    master_seed: int
    opts: SolveOptions


def cell_seed(master_seed: int, delta_index: int, seed_index: int) -> int:
    """Integer noise seed of one (delta, seed) cell, independent of scheduling order"""
    return int(np.random.SeedSequence([master_seed, delta_index, seed_index]).generate_state(1)[0])


def run_cell(task: CellTask) -> dict:
    """Solve one (delta, seed, alpha) cell and measure its errors"""
    row = {'delta': task.delta, 'seed': task.seed_index, 'alpha': task.alpha,
           'bregman_error': float('nan'), 'norm_error': float('nan'),
           'kkt_r1': float('nan'), 'kkt_r2': float('nan'), 'iters': 0, 'converged': False}
    try:
        instance = task.instance
        if task.delta > 0:
            noise_seed = cell_seed(task.master_seed, task.delta_index, task.seed_index)
            instance = instance.with_noise(task.delta, noise_seed)
        sol = solve_primal(instance.A, instance.y_delta, task.alpha, instance.p, instance.R, task.opts)
        row.update(
            bregman_error=primal_bregman(instance.R, sol.x, instance.x_true, instance.xi_true, check=False),
            norm_error=norm(sol.x - instance.x_true, instance.A.domain),
            kkt_r1=sol.kkt_r1,
            kkt_r2=sol.kkt_r2,
            iters=sol.iters,
            converged=sol.converged,
        )
    except TikhonovError as e:
        logger.error(f"✗ cell delta={task.delta:.3e} seed={task.seed_index} alpha={task.alpha:.3e}: {e}")
    return row


def single_threaded() -> bool:
    return os.environ.get('TIKRATES_SINGLE_THREAD', '').lower() in ('1', 'true', 'yes')


def make_tasks(cfg: ExperimentConfig, built: BuiltExperiment) -> List[CellTask]:
    tasks = []
    if cfg.mode == EXACT:
        for i, alpha in enumerate(_geometric_grid(cfg.alpha, 'alpha')):
            tasks.append(CellTask(built.instance, 0.0, i, 0, float(alpha), cfg.master_seed, cfg.solver))
        return tasks
    deltas = _geometric_grid(cfg.delta, 'delta')
    rule = alpha_rule(cfg, built, deltas)
    for i, delta in enumerate(deltas):
        alpha = float(rule(float(delta)))
        for s in range(cfg.seeds):
            tasks.append(CellTask(built.instance, float(delta), i, s, alpha, cfg.master_seed, cfg.solver))
    return tasks


def execute(tasks: List[CellTask], jobs: int = 1) -> List[dict]:
    """Run all cells, in a process pool when jobs > 1; output follows task order"""
    total = len(tasks)
    start_time = datetime.now()
    if jobs > 1 and not single_threaded():
        logger.info(f"Running {total} cells on {jobs} worker processes")
        rows = []
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, row in enumerate(pool.map(run_cell, tasks), 1):
                rows.append(row)
                _log_progress(i, total, rows, start_time)
        return rows
    logger.info(f"Running {total} cells serially")
    rows = []
    for i, task in enumerate(tasks, 1):
        rows.append(run_cell(task))
        _log_progress(i, total, rows, start_time)
    return rows


def _log_progress(i: int, total: int, rows: List[dict], start_time: datetime):
    if i % _PROGRESS_EVERY and i != total:
        return
    elapsed = (datetime.now() - start_time).total_seconds()
    rate = i / elapsed * 60 if elapsed > 0 else 0.0
    failed = sum(1 for r in rows if not r['converged'])
    logger.info(f"Progress: {i}/{total} ({i / total * 100:.1f}%) - Rate: {rate:.1f} cells/min - "
                f"Not converged: {failed}")


def median_series(df: pd.DataFrame, key: str) -> pd.Series:
    """Median bregman_error per grid value over converged rows, positive values only"""
    ok = df[df['converged'].astype(bool)]
    medians = ok.groupby(key)['bregman_error'].median().sort_index()
    return medians[medians > 0]


def trim_series(medians: pd.Series, trim: float) -> pd.Series:
    k = int(math.floor(trim * len(medians)))
    if k > 0 and len(medians) - 2 * k >= 3:
        return medians.iloc[k:len(medians) - k]
    return medians


def fit_report(cfg: ExperimentConfig, df: pd.DataFrame) -> RateReport:
    key = 'alpha' if cfg.mode == EXACT else 'delta'
    medians = median_series(df, key)
    fitted = trim_series(medians, cfg.rate.trim)
    predicted = cfg.rate.predicted
    if predicted is None:
        predicted = exact_data_exponent(cfg.p, cfg.rate.q) if cfg.mode == EXACT \
            else predicted_exponent(cfg.p, cfg.rate.q)
    slope, stderr = float('nan'), float('nan')
    try:
        slope, stderr = fit_loglog(zip(fitted.index, fitted.values))
    except DomainError as e:
        logger.warning(f"[fit_report] cannot fit a rate: {e}")
    verdict = rate_verdict(slope, predicted, cfg.rate.tolerance, cfg.rate.check) or FAIL
    return RateReport(
        rows=df,
        fitted_slope=slope,
        slope_stderr=stderr,
        predicted_exponent=predicted,
        tolerance=cfg.rate.tolerance,
        verdict=verdict,
        mode=cfg.mode,
        exploratory=cfg.rate.exploratory,
        n_failed=int((~df['converged'].astype(bool)).sum()),
        median_errors={float(k): float(v) for k, v in fitted.items()},
    )


def run(cfg: ExperimentConfig, jobs: int = 1) -> RateReport:
    """Sweep the config's grid and fit the observed rate"""
    logger.info("=" * 80)
    logger.info(f"RATE EXPERIMENT '{cfg.name}' STARTING ({cfg.mode} data)")
    logger.info("=" * 80)
    start_time = datetime.now()

    built = build_instance(cfg)
    tasks = make_tasks(cfg, built)
    rows = execute(tasks, jobs)
    df = pd.DataFrame(rows, columns=CSV_COLUMNS).sort_values(['delta', 'seed', 'alpha'], kind='stable')
    df = df.reset_index(drop=True)
    report = fit_report(cfg, df)

    logger.info("=" * 80)
    logger.info("RATE EXPERIMENT COMPLETE")
    logger.info("=" * 80)
    logger.info(f"Total cells: {report.n_rows}")
    logger.info(f"Not converged: {report.n_failed}")
    logger.info(f"Fitted slope: {report.fitted_slope:.4f} ± {report.slope_stderr:.4f} "
                f"(predicted {report.predicted_exponent:.4f}, tolerance {report.tolerance})")
    logger.info(f"Verdict: {report.verdict}{' (exploratory)' if report.exploratory else ''}")
    logger.info(f"Duration: {datetime.now() - start_time}")
    return report


def write_rows(report: RateReport, path: str):
    report.rows.to_csv(path, index=False, columns=CSV_COLUMNS)
    logger.info(f"Rows exported to {path}")


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return _json_safe(value.item())
    return value


def summary_json(cfg: ExperimentConfig, report: RateReport) -> str:
    summary = {'name': cfg.name}
    summary.update(report.summary())
    return json.dumps(_json_safe(summary), indent=2)


def probe(cfg: ExperimentConfig) -> Dict[str, object]:
    """Range diagnostic and variational-inequality probe of the config's instance"""
    built = build_instance(cfg)
    instance = built.instance
    settings = cfg.probe or ProbeSettings(phi={'kind': 'power', 'c': 'source', 'mu': 0.5})
    diag = range_diagnostic(instance.A, instance.omega_true, instance.p, rcond=settings.range_rcond)
    radii = _geometric_grid(settings.radius, 'probe.radius') if settings.radius else default_radius_grid()
    if diag.degenerate:
        phi = IndexFn.power(1.0, 0.5)
    else:
        phi = probe_index_function(cfg, built)
    report = var_ineq_probe(instance, phi, settings.nsamples, radii, seed=cfg.master_seed)
    result = {
        'name': cfg.name,
        'range_residual': diag.residual,
        'range_rank': diag.rank,
        'range_degenerate': diag.degenerate,
        'max_ratio': report.max_ratio,
        'fitted_mu': report.fitted_mu,
        'n_samples_used': report.n_samples_used,
        'holds': report.holds,
        'degenerate': report.degenerate,
        'regime': report.regime,
    }
    logger.info(f"[probe] {cfg.name}: range residual {diag.residual:.3e}, max_ratio {report.max_ratio:.4g}, "
                f"fitted_mu {report.fitted_mu:.4g}")
    return _json_safe(result)
