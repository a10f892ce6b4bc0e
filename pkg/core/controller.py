"""
MPC controllers run by the simulator: a nominal RTI controller and the
robust-adaptive variant (EKF mass estimate + zero-order robust backoffs).
"""
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Tuple

import numpy as np

from .dynamics import (DEFAULT_PARAMS, NX, ModelParams, effective_mass, hanging_payload_position)
from .estimator import EkfState, bound_to_cov, ekf_step, sync_to_zoro
from .ocp import OcpSettings, ReferenceAux, ReferenceProvider, StageCostParams, StateBounds, assemble
from .solver import QpStatus, SolverSettings, SolverState, rti_step, shift_warmstart
from .zoro import UncertaintyConfig, compute_backoffs

logger = logging.getLogger(__name__)

VARIANTS = ('nominal', 'ramp')


def default_disturbance_bound() -> np.ndarray:
    """Per-step additive disturbance bound: positions, angles, pole angles, then their rates."""
    return np.diag([1e-8] * 3 + [1e-8] * 3 + [1e-7] * 2 + [4e-6] * 3 + [1e-5] * 3 + [1e-5] * 2)


def _default_uncertainty() -> UncertaintyConfig:
    return UncertaintyConfig(W_theta=np.array([[3.8415e-3]]), W_w=default_disturbance_bound(),
                             Sigma_bar=1e-4 * np.eye(NX), alpha=0.95)


@dataclass(frozen=True, eq=False)
class EkfSettings:
    P0: np.ndarray = field(default_factory=lambda: np.array([[1e-3]]))
    Q: np.ndarray = field(default_factory=lambda: np.array([[1e-6]]))
    R: np.ndarray = field(default_factory=lambda: 1e-4 * np.eye(NX))
    include_disturbance: bool = True


@dataclass(frozen=True, eq=False)
class ControllerConfig:
    ocp: OcpSettings = field(default_factory=OcpSettings)
    cost: StageCostParams = field(default_factory=StageCostParams)
    bounds: StateBounds = field(default_factory=StateBounds.arena)
    solver: SolverSettings = field(default_factory=SolverSettings)
    uncertainty: UncertaintyConfig = field(default_factory=_default_uncertainty)
    ekf: EkfSettings = field(default_factory=EkfSettings)

    def zero_uncertainty(self) -> "ControllerConfig":
        """Same controller with every uncertainty matrix (and the EKF prior/process noise) zeroed."""
        n_th = self.uncertainty.n_theta
        zero_th = np.zeros((n_th, n_th))
        return replace(self,
                       uncertainty=UncertaintyConfig(zero_th, np.zeros((NX, NX)), np.zeros((NX, NX)),
                                                     self.uncertainty.alpha),
                       ekf=replace(self.ekf, P0=zero_th, Q=zero_th))


@dataclass
class StepDiagnostics:
    k: int
    phase: int
    solve_time: float
    qp_status: str
    qp_iterations: int
    kkt_residual: float
    max_backoff: float
    theta_hat: np.ndarray
    P: np.ndarray
    stage_cost: float
    slack_sum: float


class MpcController:
    """Stateful RTI controller; one instance per closed-loop run."""

    def __init__(self, variant: str, config: ControllerConfig, theta0: Any,
                 params: ModelParams = DEFAULT_PARAMS):
        if variant not in VARIANTS:
            raise ValueError(f"unknown controller variant '{variant}', expected one of {VARIANTS}")
        self.variant = variant
        self.config = config
        self.params = params
        self.theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
        self.warm: Optional[SolverState] = None
        self.ekf: Optional[EkfState] = None
        self.uncertainty: Optional[UncertaintyConfig] = None
        self._previous: Optional[Tuple[np.ndarray, np.ndarray, int]] = None

    @property
    def robust(self) -> bool:
        return self.variant == 'ramp'

    def reset(self, x0: Any, phase: Any = 1) -> None:
        cfg = self.config
        x0 = np.asarray(getattr(x0, 'vector', x0), dtype=float)
        sigma_w = None
        if cfg.ekf.include_disturbance:
            sigma_w = bound_to_cov(cfg.uncertainty.W_w, NX, cfg.uncertainty.alpha)
        self.ekf = EkfState(theta_hat=self.theta0.copy(), P=cfg.ekf.P0, Q=cfg.ekf.Q, R=cfg.ekf.R,
                            sigma_w=sigma_w)
        self.uncertainty = replace(cfg.uncertainty, theta_bar=self.theta0.copy())
        m_eff = float(effective_mass(self.theta0, phase))
        u_hover = np.array([self.params.hover_thrust(m_eff), 0.0, 0.0, 0.0])
        self.warm = SolverState.hover_hold(x0, u_hover, cfg.ocp.N)
        self._previous = None

    @property
    def theta(self) -> np.ndarray:
        return self.uncertainty.theta_bar if self.robust else self.theta0

    def compute(self, k: int, xi: Any, phase: Any, refs: ReferenceProvider) -> Tuple[np.ndarray, StepDiagnostics]:
        """Control input for step k from the measured state xi."""
        if self.warm is None:
            self.reset(xi, phase)
        started = time.perf_counter()
        cfg = self.config
        p = int(getattr(phase, 'p', phase))
        xi = np.asarray(getattr(xi, 'vector', xi), dtype=float)

        if self.robust and self._previous is not None:
            xi_prev, u_prev, p_prev = self._previous
            self.ekf = ekf_step(self.ekf, xi_prev, u_prev, xi, p_prev, cfg.ocp.dt, params=self.params)
            self.uncertainty = sync_to_zoro(self.ekf, self.uncertainty)

        aux = ReferenceAux(r_L=hanging_payload_position(xi, self.params), yaw=float(xi[5]))
        problem = assemble(p, k, cfg.ocp.N, refs, cfg.bounds, cfg.cost, aux, self.theta, cfg.ocp, self.params)
        max_backoff = 0.0
        if self.robust:
            backoffs = compute_backoffs(self.warm, problem, self.uncertainty, p)
            problem = problem.with_backoffs(backoffs.state, backoffs.nonlinear)
            max_backoff = backoffs.max

        u0, state = rti_step(problem, xi, self.warm, cfg.solver)
        if state.status == QpStatus.SOLVED:
            self.warm = shift_warmstart(state)
            slack_sum = float(np.sum(state.slacks))
        else:
            self.warm = state
            slack_sum = float('nan')
        self._previous = (xi, u0, p)

        stage_cost = float(problem.cost.value(xi[None], u0[None])[0])
        diag = StepDiagnostics(k=k, phase=p, solve_time=time.perf_counter() - started,
                               qp_status=state.status.value, qp_iterations=state.qp_iterations,
                               kkt_residual=state.kkt_residual, max_backoff=max_backoff,
                               theta_hat=self.ekf.theta_hat.copy(), P=self.ekf.P.copy(),
                               stage_cost=stage_cost, slack_sum=slack_sum)
        return u0, diag
