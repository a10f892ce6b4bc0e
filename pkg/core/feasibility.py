"""
Admissible time windows.

Worst-case searches over scenario boxes use Bayesian optimization with a
Gaussian-process surrogate and expected improvement. The grasp window start
is found by enlarging the window until it is feasible and then bisecting down
to the smallest feasible start. Placement windows open at t = 0 and close at
the worst-case drop-off time.
"""
import logging
import warnings
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm, qmc
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF, ConstantKernel, WhiteKernel

from .config import GraspSearchSettings, HookcarryConfig, PlacementSearchSettings, SearchSettings
from .phases import Phase, TimeWindows, placement_windows
from .scenario import Scenario
from .sim import SimResult, run_closed_loop

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Optional[float]]

# acquisition candidates drawn per proposal before the local polish
_ACQ_CANDIDATES = 512


class GpSurrogate:
    """Squared-exponential GP with per-dimension length scales and a fitted noise level."""

    def __init__(self, dim: int, seed: int = 0, noise: float = 1e-4):
        self.kernel = (ConstantKernel(1.0, (1e-3, 1e3)) * RBF(np.ones(dim), (1e-2, 1e2))
                       + WhiteKernel(noise, (1e-10, 1e-1)))
        self.dim = dim
        self.seed = seed
        self.gp = self._regressor(self.kernel, optimize=True)

    def _regressor(self, kernel, optimize: bool) -> GaussianProcessRegressor:
        if optimize:
            return GaussianProcessRegressor(kernel=kernel, normalize_y=True, n_restarts_optimizer=2,
                                            random_state=self.seed)
        return GaussianProcessRegressor(kernel=kernel, normalize_y=True, optimizer=None)

    def fit(self, X: np.ndarray, y: np.ndarray, optimize: bool = True) -> "GpSurrogate":
        """Fit hyperparameters by maximum likelihood, or keep the last ones when optimize is False."""
        keep = not optimize and hasattr(self.gp, "kernel_")
        self.gp = self._regressor(self.gp.kernel_ if keep else self.kernel, optimize=not keep)
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', ConvergenceWarning)
            self.gp.fit(np.atleast_2d(X), np.asarray(y, dtype=float))
        return self

    def predict(self, X: np.ndarray):
        mu, std = self.gp.predict(np.atleast_2d(X), return_std=True)
        return mu, np.maximum(std, 0.0)

    @property
    def noise_std(self) -> float:
        """Observation noise in objective units."""
        white = [k for k in (self.gp.kernel_.k1, self.gp.kernel_.k2) if isinstance(k, WhiteKernel)]
        level = white[0].noise_level if white else 0.0
        return float(np.sqrt(level) * np.atleast_1d(self.gp._y_train_std)[0])


def expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float, xi: float = 0.0) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    improvement = mu - best - xi
    with np.errstate(divide='ignore', invalid='ignore'):
        z = improvement / sigma
        ei = improvement * norm.cdf(z) + sigma * norm.pdf(z)
    return np.where(sigma > 1e-12, np.maximum(ei, 0.0), np.maximum(improvement, 0.0))


@dataclass
class BoResult:
    """All evaluations of one search; y is NaN where the objective reported infeasibility."""
    X: np.ndarray
    y: np.ndarray
    x_best: Optional[np.ndarray]
    y_best: Optional[float]

    @property
    def feasible(self) -> np.ndarray:
        return np.isfinite(self.y)

    @property
    def infeasible(self) -> np.ndarray:
        return self.X[~self.feasible]

    @property
    def all_infeasible(self) -> bool:
        return not self.feasible.any()

    @property
    def n_evaluations(self) -> int:
        return len(self.y)


def _evaluate(objective: Objective, xs: Sequence[np.ndarray], executor: Optional[Executor]) -> List[float]:
    values = list(executor.map(objective, xs)) if executor is not None else [objective(x) for x in xs]
    out = []
    for v in values:
        out.append(float('nan') if v is None or not np.isfinite(v) else float(v))
    return out


def _propose(gp: GpSurrogate, U: np.ndarray, y: np.ndarray, q: int, restarts: int,
             rng: np.random.Generator, avoid: np.ndarray) -> np.ndarray:
    """q points in the unit cube; later points condition on a constant liar at the incumbent."""
    d = U.shape[1]
    points = []
    U_aug, y_aug = U.copy(), y.copy()
    for j in range(q):
        if j:
            gp.fit(U_aug, y_aug, optimize=False)
        best = float(np.max(y_aug))

        def neg_ei(u):
            mu, s = gp.predict(u[None])
            return -float(expected_improvement(mu, s, best)[0])

        cand = rng.random((_ACQ_CANDIDATES, d))
        mu, s = gp.predict(cand)
        ei = expected_improvement(mu, s, best)
        starts = cand[np.argsort(-ei)[:restarts]]
        best_u, best_val = starts[0], float(np.max(ei))
        for u0 in starts:
            res = minimize(neg_ei, u0, method='L-BFGS-B', bounds=[(0.0, 1.0)] * d)
            if -res.fun > best_val:
                best_u, best_val = np.clip(res.x, 0.0, 1.0), -res.fun
        if np.min(np.linalg.norm(np.vstack([avoid, U_aug]) - best_u, axis=1)) < 1e-6:
            best_u = rng.random(d)
        points.append(best_u)
        U_aug = np.vstack([U_aug, best_u])
        y_aug = np.append(y_aug, best)
    return np.array(points)


def bo_maximize(objective: Objective, bounds: Any, budget: int = 40, seed: int = 0, n_init: int = 5,
                batch_size: int = 1, restarts: int = 10, executor: Optional[Executor] = None) -> BoResult:
    """
    Maximize a black-box objective over a box; the objective returns None for infeasible points.

    Degenerate dimensions (lo == hi) are held fixed; with no free dimension the
    single point is evaluated once. Infeasible points are kept in the result
    but never enter the surrogate.
    """
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    if bounds.ndim != 2 or bounds.shape[1] != 2 or not np.all(np.isfinite(bounds)):
        raise ValueError("bounds must be a finite (d, 2) array")
    if np.any(bounds[:, 0] > bounds[:, 1]):
        raise ValueError("bounds must satisfy lo <= hi")
    lo, hi = bounds[:, 0], bounds[:, 1]
    free = hi > lo
    d = int(free.sum())

    def to_x(u: np.ndarray) -> np.ndarray:
        x = lo.copy()
        x[free] = lo[free] + u * (hi[free] - lo[free])
        return x

    if d == 0:
        X = lo[None].copy()
        y = np.array(_evaluate(objective, [lo.copy()], executor))
    else:
        if budget < d + 2:
            raise ValueError(f"budget {budget} is below dim + 2 = {d + 2}")
        rng = np.random.default_rng(seed)
        gp = GpSurrogate(d, seed)
        U = qmc.LatinHypercube(d=d, seed=seed).random(min(n_init, budget))
        y = np.array(_evaluate(objective, [to_x(u) for u in U], executor))
        while len(y) < budget:
            q = min(batch_size, budget - len(y))
            ok = np.isfinite(y)
            if ok.sum() < 2:
                new = rng.random((q, d))
            else:
                gp.fit(U[ok], y[ok])
                new = _propose(gp, U[ok], y[ok], q, restarts, rng, avoid=U)
            U = np.vstack([U, new])
            y = np.append(y, _evaluate(objective, [to_x(u) for u in new], executor))
            logger.debug("BO %d/%d: best %s", len(y), budget, np.nanmax(y) if np.isfinite(y).any() else None)
        X = np.array([to_x(u) for u in U])

    ok = np.isfinite(y)
    if not ok.any():
        logger.warning("all %d evaluations were infeasible", len(y))
        return BoResult(X, y, None, None)
    i = int(np.nanargmax(np.where(ok, y, -np.inf)))
    return BoResult(X, y, X[i].copy(), float(y[i]))


def random_search(objective: Objective, bounds: Any, budget: int, seed: int = 0) -> BoResult:
    """Uniform random baseline with the same bookkeeping as bo_maximize."""
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    rng = np.random.default_rng(seed)
    X = bounds[:, 0] + rng.random((budget, len(bounds))) * (bounds[:, 1] - bounds[:, 0])
    y = np.array(_evaluate(objective, list(X), None))
    ok = np.isfinite(y)
    if not ok.any():
        return BoResult(X, y, None, None)
    i = int(np.nanargmax(np.where(ok, y, -np.inf)))
    return BoResult(X, y, X[i].copy(), float(y[i]))


@dataclass(frozen=True, eq=False)
class GraspProblem:
    """Closed loop up to the grasp for eta = (p_xy, s_g, v_g) and window [T_lo, T_hi]."""
    settings: GraspSearchSettings
    cfg: HookcarryConfig
    T_lo: float
    T_hi: float
    controller: str = 'ramp'
    seed: int = 0

    def scenario(self, eta: Any) -> Scenario:
        p_xy, s_g, v_g = (float(v) for v in eta)
        windows = TimeWindows(self.T_lo, self.T_hi, self.T_hi, self.T_hi + 1.0, self.cfg.dt)
        return Scenario(m_L=self.settings.m_L, windows=windows, p_xy=p_xy, s_g=s_g, v_g=v_g,
                        seed=self.seed, name='grasp_search')

    def simulate(self, eta: Any) -> SimResult:
        return run_closed_loop(self.scenario(eta), self.controller, self.cfg,
                               stop_after_phase=Phase.PICK_UP, stop_on_deadline=True)


@dataclass(frozen=True, eq=False)
class PlacementProblem:
    """Closed loop from an attached payload for mu = (p_xy, s_p, v_p, m_L) and window [0, T_hi]."""
    settings: PlacementSearchSettings
    cfg: HookcarryConfig
    T_hi: float
    controller: str = 'ramp'
    seed: int = 0

    def scenario(self, mu: Any) -> Scenario:
        p_xy, s_p, v_p, m_L = (float(v) for v in mu)
        return Scenario(m_L=m_L, windows=placement_windows(self.T_hi, self.cfg.dt), p_xy=p_xy, s_p=s_p,
                        v_g=v_p, v_p=v_p, m_L_prior=self.settings.m_L_prior, seed=self.seed,
                        name='placement_search')

    def simulate(self, mu: Any) -> SimResult:
        return run_closed_loop(self.scenario(mu), self.controller, self.cfg, start_attached=True,
                               stop_on_deadline=True)


@dataclass(frozen=True, eq=False)
class EventTime:
    """Grasp or drop-off time of a successful run, None otherwise."""
    problem: Any

    def __call__(self, x: np.ndarray) -> Optional[float]:
        result = self.problem.simulate(x)
        if not result.success:
            return None
        return result.T_g if isinstance(self.problem, GraspProblem) else result.T_p


@dataclass(frozen=True, eq=False)
class WorstViolation:
    problem: Any
    until_step: Optional[int] = None

    def __call__(self, x: np.ndarray) -> float:
        return self.problem.simulate(x).max_violation(self.until_step)


@dataclass
class ViolationResult:
    nu_star: float
    witness: np.ndarray
    tolerance: float
    search: BoResult

    @property
    def admissible(self) -> bool:
        return self.nu_star <= self.tolerance


@dataclass
class WindowSearchResult:
    kind: str
    feasible: bool
    T_hi_max: float
    T_lo_star: Optional[float] = None
    T_hi_star: Optional[float] = None
    worst_scenario: Optional[np.ndarray] = None
    nu_star: Optional[float] = None
    infeasible_witness: Optional[np.ndarray] = None
    violation_witness: Optional[np.ndarray] = None
    evaluations: int = 0
    trace: List[Dict] = field(default_factory=list)
    advice: str = ''

    @property
    def width_lower_bound(self) -> Optional[float]:
        if self.T_lo_star is None or self.T_hi_star is None:
            return None
        return self.T_hi_star - self.T_lo_star

    def as_dict(self) -> Dict:
        prefix, vector = ('T_g', 'eta') if self.kind == 'grasp' else ('T_p', 'mu')
        nu = 'nu_g_star' if self.kind == 'grasp' else 'nu_p_star'

        def listed(v):
            return None if v is None else [float(x) for x in v]

        return {
            'kind': self.kind,
            'feasible': self.feasible,
            f'{prefix}_lo_star': self.T_lo_star,
            f'{prefix}_hi_star': self.T_hi_star,
            f'{prefix}_hi_max': self.T_hi_max,
            'width_lower_bound': self.width_lower_bound,
            f'{vector}_star': listed(self.worst_scenario),
            nu: self.nu_star,
            'infeasible_witness': listed(self.infeasible_witness),
            'violation_witness': listed(self.violation_witness),
            'evaluations': self.evaluations,
            'advice': self.advice,
            'trace': self.trace,
        }


def _sample_box(bounds: np.ndarray, n: int, seed: int, stream: int) -> np.ndarray:
    rng = np.random.default_rng([seed, stream])
    return bounds[:, 0] + rng.random((n, len(bounds))) * (bounds[:, 1] - bounds[:, 0])


def _record(trace: List[Dict], stage: str, candidate: float, X: np.ndarray, y: Sequence[float]) -> None:
    for x, v in zip(X, y):
        trace.append({'stage': stage, 'candidate': candidate, 'x': [float(c) for c in x],
                      'value': None if not np.isfinite(v) else float(v)})


class _Certifier:
    """Feasibility of one window over a scenario box: validation samples first, then the BO worst case."""

    def __init__(self, bounds: np.ndarray, search: SearchSettings, executor: Optional[Executor]):
        self.bounds = bounds
        self.search = search
        self.executor = executor
        self.trace: List[Dict] = []
        self.evaluations = 0
        self._stream = 0

    def __call__(self, problem: Any, candidate: float):
        """(feasible, BoResult or None, witness of infeasibility or None)."""
        self._stream += 1
        objective = EventTime(problem)
        samples = _sample_box(self.bounds, self.search.validation_samples, self.search.seed, self._stream)
        values = _evaluate(objective, list(samples), self.executor)
        self.evaluations += len(values)
        _record(self.trace, 'validation', candidate, samples, values)
        bad = [x for x, v in zip(samples, values) if not np.isfinite(v)]
        if bad:
            logger.info("window start %.2f s: infeasible validation scenario %s", candidate, np.round(bad[0], 3))
            return False, None, bad[0]

        bo = self.search.bo
        result = bo_maximize(objective, self.bounds, bo.budget, self.search.seed + self._stream, bo.n_init,
                             bo.batch_size, bo.restarts, self.executor)
        self.evaluations += result.n_evaluations
        _record(self.trace, 'bo', candidate, result.X, result.y)
        if len(result.infeasible):
            logger.info("window start %.2f s: BO found %d infeasible scenarios", candidate, len(result.infeasible))
            return False, result, result.infeasible[0]
        return True, result, None


def _executor(jobs: int) -> Optional[Executor]:
    return ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None


def violation_search(problem: Any, bounds: Any, search: SearchSettings, until_step: Optional[int] = None,
                     tolerance: float = 0.0, executor: Optional[Executor] = None) -> ViolationResult:
    """Worst-case max_k max_j g over the scenario box for a fixed window."""
    bo = search.bo
    result = bo_maximize(WorstViolation(problem, until_step), bounds, bo.budget, search.seed, bo.n_init,
                         bo.batch_size, bo.restarts, executor)
    if result.x_best is None:
        raise RuntimeError("violation search produced no finite evaluation")
    return ViolationResult(nu_star=result.y_best, witness=result.x_best, tolerance=tolerance, search=result)


def _apply_violation(out: WindowSearchResult, nu: ViolationResult) -> None:
    """The window is only admissible when the worst-case violation stays within tolerance."""
    out.nu_star = nu.nu_star
    out.feasible = nu.admissible
    if not nu.admissible:
        out.violation_witness = nu.witness
        out.advice = (f"worst-case constraint violation nu* = {nu.nu_star:.4g} exceeds {nu.tolerance:.1e}: "
                      f"tighten the controller or restrict the scenario set")
        logger.warning("%s window rejected: %s", out.kind, out.advice)


def grasp_window_search(search: SearchSettings, cfg: Optional[HookcarryConfig] = None,
                        controller: str = 'ramp', jobs: int = 1) -> WindowSearchResult:
    cfg = cfg or HookcarryConfig()
    settings = search.grasp
    T_max, eps = settings.T_g_hi_max, search.eps_T
    bounds = settings.bounds
    executor = _executor(jobs)
    certify = _Certifier(bounds, search, executor)
    out = WindowSearchResult(kind='grasp', feasible=False, T_hi_max=T_max)
    try:
        def check(T_lo: float):
            problem = GraspProblem(settings, cfg, T_lo, T_max, controller, search.seed)
            return certify(problem, T_lo)

        # enlarge the window until every scenario grasps in time
        feasible_at, feasible_bo, witness = None, None, None
        j = 0
        while True:
            T_lo = max(T_max - eps * 2 ** j, 0.0)
            ok, bo, bad = check(T_lo)
            if ok:
                feasible_at, feasible_bo = T_lo, bo
                break
            witness = bad
            if T_lo <= 0.0:
                break
            j += 1

        if feasible_at is None:
            out.advice = "no admissible grasp window: increase T_g_hi_max or restrict the scenario set"
            logger.warning(out.advice)
        else:
            # smallest feasible start: bisect between an infeasible lower start and the feasible one
            lo_bad = None
            if feasible_at > 0.0:
                ok, bo, bad = check(0.0)
                if ok:
                    feasible_at, feasible_bo = 0.0, bo
                else:
                    lo_bad, witness = 0.0, bad
            while lo_bad is not None and feasible_at - lo_bad > eps:
                mid = 0.5 * (lo_bad + feasible_at)
                ok, bo, bad = check(mid)
                if ok:
                    feasible_at, feasible_bo = mid, bo
                else:
                    lo_bad, witness = mid, bad
            out.T_lo_star = feasible_at
            out.T_hi_star = feasible_bo.y_best
            out.worst_scenario = feasible_bo.x_best
            out.infeasible_witness = witness if lo_bad is not None else None
            nu = violation_search(GraspProblem(settings, cfg, feasible_at, T_max, controller, search.seed),
                                  bounds, search, tolerance=cfg.sim.constraint_tol, executor=executor)
            certify.evaluations += nu.search.n_evaluations
            _apply_violation(out, nu)
            logger.info("grasp window: T_lo* = %.2f s, worst-case T_g* = %.2f s, nu* = %.4g",
                        out.T_lo_star, out.T_hi_star, out.nu_star)
    finally:
        if executor is not None:
            executor.shutdown()
    out.evaluations = certify.evaluations
    out.trace = certify.trace
    return out


def placement_window_search(search: SearchSettings, cfg: Optional[HookcarryConfig] = None,
                            controller: str = 'ramp', jobs: int = 1) -> WindowSearchResult:
    """Window [0, T_p_hi*] with T_p_hi* the worst-case drop-off time over the scenario box."""
    cfg = cfg or HookcarryConfig()
    settings = search.placement
    bounds = settings.bounds
    executor = _executor(jobs)
    certify = _Certifier(bounds, search, executor)
    out = WindowSearchResult(kind='placement', feasible=False, T_hi_max=settings.T_p_hi_max, T_lo_star=0.0)
    try:
        problem = PlacementProblem(settings, cfg, settings.T_p_hi_max, controller, search.seed)
        ok, bo, bad = certify(problem, 0.0)
        if not ok:
            out.infeasible_witness = bad
            out.advice = "no admissible placement window: increase T_p_hi_max or restrict the scenario set"
            logger.warning(out.advice)
        else:
            out.T_hi_star = bo.y_best
            out.worst_scenario = bo.x_best
            nu = violation_search(problem, bounds, search, tolerance=cfg.sim.constraint_tol, executor=executor)
            certify.evaluations += nu.search.n_evaluations
            _apply_violation(out, nu)
            logger.info("placement window: [0, %.2f] s, nu* = %.4g", out.T_hi_star, out.nu_star)
    finally:
        if executor is not None:
            executor.shutdown()
    out.evaluations = certify.evaluations
    out.trace = certify.trace
    return out
