"""
Closed-loop simulation: true plant with a grasp latch and bounded disturbances,
one MPC controller per run, per-step logs, and seeded batch studies.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import HookcarryConfig
from .controller import MpcController, StepDiagnostics
from .dynamics import NX, GeneralizedState, hanging_payload_position, hook_position, step
from .ocp import ReferenceProvider, detach_constraint, pregrasp_constraint
from .phases import Phase, PayloadPose, PhaseState, advance, grasp_condition
from .scenario import Scenario, with_deviation
from .solver import QpStatus

logger = logging.getLogger(__name__)

STATE_COLUMNS = ['x', 'y', 'z', 'roll', 'pitch', 'yaw', 'alpha', 'beta',
                 'vx', 'vy', 'vz', 'roll_rate', 'pitch_rate', 'yaw_rate', 'alpha_rate', 'beta_rate']
INPUT_COLUMNS = ['F', 'tau_x', 'tau_y', 'tau_z']


class RunStatus(str, Enum):
    SUCCESS = 'SUCCESS'
    DEADLINE_MISS = 'DEADLINE_MISS'
    SOLVER_FAIL = 'SOLVER_FAIL'
    CONSTRAINT_VIOLATION = 'CONSTRAINT_VIOLATION'


class EllipsoidSampler:
    """
    Draws w with w' W^-1 w <= 1: on the boundary with probability p_boundary,
    uniformly inside otherwise. Every draw consumes the same number of variates.
    """

    def __init__(self, W: np.ndarray, p_boundary: float = 0.1):
        w, V = np.linalg.eigh(0.5 * (W + W.T))
        self.root = V * np.sqrt(np.clip(w, 0.0, None))
        self.n = W.shape[0]
        self.p_boundary = p_boundary

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.n)
        norm = np.linalg.norm(z)
        direction = z / norm if norm > 0 else np.eye(self.n)[0]
        on_boundary = rng.random() < self.p_boundary
        radius_draw = rng.random()
        radius = 1.0 if on_boundary else radius_draw ** (1.0 / self.n)
        return self.root @ (radius * direction)


@dataclass
class SimResult:
    scenario: Scenario
    controller: str
    status: RunStatus
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    phases: np.ndarray
    g_box: np.ndarray
    g_sphere: np.ndarray
    hook: np.ndarray
    payload: np.ndarray
    diagnostics: List[StepDiagnostics]
    T_g: Optional[float]
    T_p: Optional[float]
    cost: float
    constraint_tol: float = 0.0
    grasp_deadline_missed: bool = False
    dropoff_deadline_missed: bool = False
    disturbances: np.ndarray = field(default_factory=lambda: np.zeros((0, NX)))

    @property
    def success(self) -> bool:
        return self.status == RunStatus.SUCCESS

    @property
    def n_steps(self) -> int:
        return len(self.times)

    @property
    def solver_failures(self) -> int:
        return sum(d.qp_status != QpStatus.SOLVED.value for d in self.diagnostics)

    @property
    def theta_hat(self) -> np.ndarray:
        if not self.diagnostics:
            return np.zeros((0, 1))
        return np.array([d.theta_hat for d in self.diagnostics])

    @property
    def theta_std(self) -> np.ndarray:
        if not self.diagnostics:
            return np.zeros((0, 1))
        return np.sqrt(np.clip(np.array([np.diag(d.P) for d in self.diagnostics]), 0.0, None))

    @property
    def solve_times(self) -> np.ndarray:
        return np.array([d.solve_time for d in self.diagnostics])

    def max_violation(self, until_step: Optional[int] = None) -> float:
        """max_k max_j g_j over steps 0..until_step (all steps when None)."""
        stop = self.n_steps if until_step is None else min(self.n_steps, until_step + 1)
        if stop <= 0:
            return -np.inf
        g = np.concatenate([self.g_box[:stop], self.g_sphere[:stop]])
        return float(np.nanmax(g)) if np.any(np.isfinite(g)) else -np.inf

    def to_frame(self) -> pd.DataFrame:
        """Per-step log in a fixed column order; wall-clock timings are kept out for reproducibility."""
        frame = pd.DataFrame(self.states, columns=STATE_COLUMNS)
        frame.insert(0, 't', self.times)
        for j, name in enumerate(INPUT_COLUMNS):
            frame[name] = self.inputs[:, j]
        frame['phase'] = self.phases
        frame['g_box'] = self.g_box
        frame['g_sphere'] = self.g_sphere
        frame['backoff_max'] = [d.max_backoff for d in self.diagnostics]
        frame['m_L_hat'] = self.theta_hat[:, 0]
        frame['m_L_std'] = self.theta_std[:, 0]
        frame['stage_cost'] = [d.stage_cost for d in self.diagnostics]
        frame['qp_status'] = [d.qp_status for d in self.diagnostics]
        frame['qp_iterations'] = [d.qp_iterations for d in self.diagnostics]
        frame['kkt_residual'] = [d.kkt_residual for d in self.diagnostics]
        for j, axis in enumerate('xyz'):
            frame[f'hook_{axis}'] = self.hook[:, j]
        for j, axis in enumerate('xyz'):
            frame[f'payload_{axis}'] = self.payload[:, j]
        return frame

    def timing_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'k': np.arange(self.n_steps), 't': self.times, 'solve_time': self.solve_times})

    def summary(self) -> Dict:
        times = self.solve_times
        return {
            'status': self.status.value,
            'controller': self.controller,
            'T_g': self.T_g,
            'T_p': self.T_p,
            'cost': self.cost,
            'max_violation': self.max_violation(),
            'solver_failures': self.solver_failures,
            'steps': self.n_steps,
            'true_mass': self.scenario.true_mass,
            'final_m_L_hat': float(self.theta_hat[-1, 0]) if self.n_steps else None,
            'solve_time_mean': float(np.mean(times)) if times.size else None,
            'solve_time_p95': float(np.percentile(times, 95)) if times.size else None,
            'solve_time_max': float(np.max(times)) if times.size else None,
        }


def _status(T_g: Optional[float], T_p: Optional[float], failures: int, violation: float, windows,
            tol: float, need_grasp: bool, need_place: bool) -> RunStatus:
    if violation > tol:
        return RunStatus.CONSTRAINT_VIOLATION
    if failures:
        return RunStatus.SOLVER_FAIL
    grasp_ok = not need_grasp or (T_g is not None and windows.T_g_lo <= T_g + 1e-9 and T_g <= windows.T_g_hi + 1e-9)
    place_ok = not need_place or (T_p is not None and windows.T_p_lo <= T_p + 1e-9 and T_p <= windows.T_p_hi + 1e-9)
    return RunStatus.SUCCESS if grasp_ok and place_ok else RunStatus.DEADLINE_MISS


def run_closed_loop(scn: Scenario, controller: str = 'ramp', cfg: Optional[HookcarryConfig] = None,
                    start_attached: bool = False, stop_after_phase: Optional[int] = None,
                    stop_on_deadline: bool = False) -> SimResult:
    """
    Simulate one scenario at the controller's sampling time.

    The phase machine and the grasp latch see the true plant state, the
    controller sees the (optionally noise-corrupted) measurement. With
    start_attached the run begins in phase 3 with the payload already
    hanging from the hook. stop_after_phase ends the run as soon as the
    phase machine moves past that phase; stop_on_deadline ends it at the
    first missed deadline.
    """
    cfg = cfg or HookcarryConfig()
    params, ctrl_cfg, sim = cfg.model, cfg.controller, cfg.sim
    dt = ctrl_cfg.ocp.dt
    windows = scn.windows
    if not math.isclose(windows.dt, dt, rel_tol=0.0, abs_tol=1e-12):
        raise ValueError(f"scenario windows use dt={windows.dt}, controller runs at dt={dt}")

    rng = np.random.default_rng(scn.seed)
    pickup, dropoff = scn.platforms(sim.path)
    refs = ReferenceProvider(pickup, dropoff, dt, sim.payload_height, params.d_LH)
    disturbance = EllipsoidSampler(scn.disturbance_level * ctrl_cfg.uncertainty.W_w, sim.boundary_probability)
    noise = EllipsoidSampler(ctrl_cfg.uncertainty.Sigma_bar, sim.boundary_probability) \
        if sim.measurement_noise else None

    phase = PhaseState(p=Phase.TRANSPORT) if start_attached else PhaseState()
    attached, placed = start_attached, False
    T_g: Optional[float] = 0.0 if start_attached else None
    T_p: Optional[float] = None

    xi = GeneralizedState.at_rest(scn.start_position()).vector
    mpc = MpcController(controller, ctrl_cfg, [scn.nominal_mass], params)
    mpc.reset(xi, phase.p)
    settle_steps = int(math.ceil(sim.settle_time / dt - 1e-9))
    n_max = int(math.floor(sim.t_max / dt + 1e-9))

    log: Dict[str, list] = {name: [] for name in ('t', 'x', 'u', 'p', 'g_box', 'g_sphere', 'hook', 'payload', 'w')}
    diagnostics: List[StepDiagnostics] = []

    for k in range(n_max + 1):
        t = k * dt
        r_H = hook_position(xi, params)
        if attached:
            payload = PayloadPose(hanging_payload_position(xi, params), np.eye(3))
        elif placed:
            r_rest, _, R_rest = refs.dropoff_pose(k)
            payload = PayloadPose(r_rest, R_rest)
        else:
            r_L, _, R_L = refs.pickup_pose(k)
            payload = PayloadPose(r_L, R_L)

        if phase.p == Phase.PICK_UP and not attached and grasp_condition(r_H, payload, params.rho_H, params.d_LH):
            attached = True
            logger.debug("grasp latch at step %d", k)
        r_p, _, _ = refs.dropoff_pose(k)
        previous = phase
        phase = advance(phase, k, xi, payload, r_p, windows, params, sim.eps_p)
        if previous.p == Phase.PICK_UP and phase.p == Phase.TRANSPORT:
            T_g = t
        if previous.p == Phase.PLACE and phase.p == Phase.UNHOOK:
            T_p = t
            attached, placed = False, True
        if stop_after_phase is not None and phase.p > stop_after_phase:
            break
        if stop_on_deadline and phase.deadline_missed:
            break

        if phase.p == Phase.APPROACH:
            r_LH, _, R_L_ref = refs.pickup_hook(k)
            g_sphere = float(pregrasp_constraint(r_H, r_LH, R_L_ref, ctrl_cfg.ocp.r_con, ctrl_cfg.ocp.rho_con))
        elif phase.p == Phase.TRANSPORT:
            g_sphere = float(detach_constraint(hanging_payload_position(xi, params), r_p,
                                               ctrl_cfg.ocp.rho_con_tilde))
        else:
            g_sphere = np.nan

        measured = xi + noise.sample(rng) if noise is not None else xi
        u, diag = mpc.compute(k, measured, phase, refs)
        diagnostics.append(diag)
        if diag.qp_status != QpStatus.SOLVED.value:
            logger.warning("QP failed at step %d (phase %d), holding previous input", k, int(phase.p))

        log['t'].append(t)
        log['x'].append(xi)
        log['u'].append(u)
        log['p'].append(int(phase.p))
        log['g_box'].append(float(ctrl_cfg.bounds.violation(xi)))
        log['g_sphere'].append(g_sphere)
        log['hook'].append(r_H)
        log['payload'].append(payload.position)

        if phase.p == Phase.UNHOOK and k - phase.entered_at_step >= settle_steps:
            break
        w = disturbance.sample(rng)
        log['w'].append(w)
        xi = step(xi, u, scn.true_mass if attached else 0.0, dt, params) + w

    n = len(log['t'])
    result = SimResult(
        scenario=scn, controller=controller, status=RunStatus.SUCCESS,
        times=np.asarray(log['t'], dtype=float),
        states=np.asarray(log['x'], dtype=float).reshape(n, NX),
        inputs=np.asarray(log['u'], dtype=float).reshape(n, 4),
        phases=np.asarray(log['p'], dtype=int),
        g_box=np.asarray(log['g_box'], dtype=float),
        g_sphere=np.asarray(log['g_sphere'], dtype=float),
        hook=np.asarray(log['hook'], dtype=float).reshape(n, 3),
        payload=np.asarray(log['payload'], dtype=float).reshape(n, 3),
        diagnostics=diagnostics, T_g=T_g, T_p=T_p,
        cost=float(sum(d.stage_cost for d in diagnostics)),
        constraint_tol=sim.constraint_tol,
        grasp_deadline_missed=phase.grasp_deadline_missed,
        dropoff_deadline_missed=phase.dropoff_deadline_missed,
        disturbances=np.asarray(log['w'], dtype=float).reshape(-1, NX),
    )
    need_place = stop_after_phase is None or stop_after_phase >= Phase.PLACE
    result.status = _status(T_g, T_p, result.solver_failures, result.max_violation(), windows,
                            sim.constraint_tol, not start_attached, need_place)
    logger.info("%s [%s]: %s, T_g=%s, T_p=%s, cost=%.2f", scn.name or 'scenario', controller,
                result.status.value, T_g, T_p, result.cost)
    return result


def _run_row(job: Tuple[int, Scenario, str, HookcarryConfig]) -> Dict:
    index, scn, controller, cfg = job
    row: Dict = {'index': index}
    row.update(scn.as_dict())
    try:
        row.update(run_closed_loop(scn, controller, cfg).summary())
        row['error'] = ''
    except Exception as exc:
        logger.error("scenario %d (%s) failed: %s", index, scn.name, exc)
        row.update({'status': 'ERROR', 'controller': controller, 'error': str(exc)})
    return row


def iter_batch(scenarios: Sequence[Scenario], controller: str, cfg: Optional[HookcarryConfig] = None,
               jobs: int = 1) -> Iterator[Dict]:
    """Summary rows in scenario order; a failing scenario yields an ERROR row instead of raising."""
    cfg = cfg or HookcarryConfig()
    work = [(i, scn, controller, cfg) for i, scn in enumerate(scenarios)]
    if jobs <= 1:
        for job in work:
            yield _run_row(job)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield from pool.map(_run_row, work)


@dataclass
class BatchSummary:
    rows: pd.DataFrame
    success_rate: float
    mean_cost: Optional[float]
    timing: Dict[str, Optional[float]]

    def as_dict(self) -> Dict:
        return {'n': len(self.rows), 'success_rate': self.success_rate, 'mean_cost': self.mean_cost,
                **self.timing}


def summarize(rows: Sequence[Dict]) -> BatchSummary:
    frame = pd.DataFrame(list(rows))
    if frame.empty:
        return BatchSummary(frame, 0.0, None, {})
    frame = frame.sort_values('index').reset_index(drop=True)
    ok = frame['status'] == RunStatus.SUCCESS.value
    mean_cost = float(frame.loc[ok, 'cost'].mean()) if ok.any() else None
    timing = {}
    for col in ('solve_time_mean', 'solve_time_p95', 'solve_time_max'):
        values = pd.to_numeric(frame[col], errors="coerce") if col in frame else pd.Series(dtype=float)
        timing[col] = float(values.mean()) if values.notna().any() else None
    return BatchSummary(frame, float(100.0 * ok.mean()), mean_cost, timing)


def batch_run(scenarios: Sequence[Scenario], controller: str = 'ramp', cfg: Optional[HookcarryConfig] = None,
              jobs: int = 1) -> BatchSummary:
    if len(scenarios) < 1:
        raise ValueError("batch needs at least one scenario")
    return summarize(iter_batch(scenarios, controller, cfg, jobs))


def deviation_table(rows: pd.DataFrame) -> pd.DataFrame:
    """
    Success rate [%] and average cost per controller and |mass deviation|.

    Average cost is taken over the runs both controllers completed
    successfully, so the two columns compare the same scenarios.
    """
    frame = rows.copy()
    frame['deviation'] = (100.0 * frame['mass_deviation'].abs()).round(6)
    frame['ok'] = frame['status'] == RunStatus.SUCCESS.value
    key = ['deviation', 'mass_deviation', 'index']
    both = frame.pivot_table(index=key, columns='controller', values='ok', aggfunc='first').fillna(False)
    common = both.all(axis=1)
    frame = frame.merge(common.rename('common').reset_index(), on=key, how='left')

    records = []
    for (deviation, controller), group in frame.groupby(['deviation', 'controller'], sort=True):
        shared = group[group['common'].fillna(False).astype(bool)]
        records.append({
            'deviation_pct': deviation,
            'controller': controller,
            'runs': len(group),
            'success_rate': float(100.0 * group['ok'].mean()),
            'avg_cost': float(shared['cost'].mean()) if len(shared) else None,
            'solve_time_mean': float(pd.to_numeric(group['solve_time_mean'], errors='coerce').mean()),
        })
    return pd.DataFrame.from_records(records)


def deviation_study(scenarios: Sequence[Scenario], deviations: Sequence[float],
                    cfg: Optional[HookcarryConfig] = None, jobs: int = 1,
                    controllers: Sequence[str] = ('nominal', 'ramp')) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Every scenario at every deviation level with every controller; returns (rows, table)."""
    if not scenarios:
        raise ValueError("deviation study needs at least one scenario")
    parts = []
    for deviation in deviations:
        batch = with_deviation(scenarios, deviation)
        for controller in controllers:
            logger.info("mass deviation %+.0f%%, %s controller", 100 * deviation, controller)
            parts.append(batch_run(batch, controller, cfg, jobs).rows)
    rows = pd.concat(parts, ignore_index=True)
    return rows, deviation_table(rows)


def timing_overhead(table: pd.DataFrame) -> Optional[float]:
    """Mean robust-minus-nominal controller wall time per step [s]."""
    by = table.groupby('controller')['solve_time_mean'].mean()
    if 'ramp' not in by or 'nominal' not in by:
        return None
    return float(by['ramp'] - by['nominal'])

