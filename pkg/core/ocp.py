"""
Phase-dependent optimal control problem: outputs, references, smooth-L1
stage cost, state/input bounds and the two sphere constraints.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Tuple

import numpy as np

from .dynamics import (DEFAULT_PARAMS, E3, NQ, NU, NX, ModelParams, PredictiveModel,
                       hook_jacobian, hook_position, payload_hook_position)
from .phases import Phase
from .platforms import PlatformTrajectory
from .solver import OcpProblem

logger = logging.getLogger(__name__)

N_Y = 4
YAW = 5


@dataclass(frozen=True, eq=False)
class StageCostParams:
    """Smooth-L1 output weights per phase (row p-1), smoothing gamma, velocity and input penalties."""
    w: np.ndarray = field(default_factory=lambda: np.tile([10.0, 10.0, 10.0, 1.0], (5, 1)))
    gamma: float = 0.01
    W_v: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(NQ))
    W_u: np.ndarray = field(default_factory=lambda: np.diag([0.1, 2.0, 2.0, 2.0]))

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.shape != (5, N_Y) or np.any(w < 0):
            raise ValueError(f"w must be a non-negative 5x{N_Y} array, got shape {w.shape}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        for name, M, n in (('W_v', self.W_v, NQ), ('W_u', self.W_u, NU)):
            M = np.asarray(M, dtype=float)
            if M.shape != (n, n) or not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError(f"{name} must be a symmetric positive definite {n}x{n} matrix")
            object.__setattr__(self, name, M)
        object.__setattr__(self, 'w', w)

    def weights(self, p: int) -> np.ndarray:
        return self.w[int(p) - 1]


@dataclass(frozen=True, eq=False)
class StateBounds:
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        lb = np.asarray(self.lb, dtype=float)
        ub = np.asarray(self.ub, dtype=float)
        if lb.shape != (NX,) or ub.shape != (NX,):
            raise ValueError("state bounds must be 16-vectors")
        if np.any(lb > ub):
            raise ValueError("state lower bound exceeds upper bound")
        object.__setattr__(self, 'lb', lb)
        object.__setattr__(self, 'ub', ub)

    @classmethod
    def arena(cls, half_x: float = 3.5, half_y: float = 2.5, z_max: float = 3.0,
              tilt: float = 1.2, speed: float = 3.0) -> "StateBounds":
        """Flight-space box, roll/pitch limit and linear velocity limit."""
        lb = np.full(NX, -np.inf)
        ub = np.full(NX, np.inf)
        lb[0:3], ub[0:3] = (-half_x, -half_y, 0.0), (half_x, half_y, z_max)
        lb[3:5], ub[3:5] = -tilt, tilt
        lb[NQ:NQ + 3], ub[NQ:NQ + 3] = -speed, speed
        return cls(lb=lb, ub=ub)

    def violation(self, xi: np.ndarray) -> np.ndarray:
        """max_j g_j over the box rows, g <= 0 inside."""
        xi = np.asarray(xi, dtype=float)
        with np.errstate(invalid='ignore'):
            g = np.maximum(xi - self.ub, self.lb - xi)
        return np.max(np.where(np.isfinite(g), g, -np.inf), axis=-1)


@dataclass(frozen=True)
class OcpSettings:
    N: int = 25
    dt: float = 0.05
    r_con: Tuple[float, float, float] = (0.0, 0.0, 0.1)
    rho_con: float = 0.25
    rho_con_tilde: float = 0.25
    z_bar: float = 0.3
    a1: float = 10.0
    a2: float = 3.0
    x_bar: float = 0.3

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"horizon N must be >= 1, got {self.N}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.rho_con <= 0 or self.rho_con_tilde <= 0:
            raise ValueError("constraint radii must be positive")
        if self.z_bar <= 0 or self.a1 <= 0:
            raise ValueError("z_bar and a1 must be positive")


@dataclass(frozen=True)
class ReferenceProvider:
    """Known future motion of the pick-up and drop-off platforms, indexed by absolute step."""
    pickup: PlatformTrajectory
    dropoff: PlatformTrajectory
    dt: float
    payload_height: float = 0.05
    d_LH: float = DEFAULT_PARAMS.d_LH

    def _times(self, j) -> np.ndarray:
        return np.asarray(j, dtype=float) * self.dt

    def pickup_pose(self, j):
        """Payload center, yaw and rotation on the pick-up platform."""
        r, yaw, R = self.pickup.pose(self._times(j))
        return r + self.payload_height * E3, yaw, R

    def pickup_hook(self, j):
        r_L, yaw, R = self.pickup_pose(j)
        return payload_hook_position(r_L, R, self.d_LH), yaw, R

    def dropoff_pose(self, j):
        """Payload rest point, yaw and rotation on the drop-off platform."""
        r, yaw, R = self.dropoff.pose(self._times(j))
        return r + self.payload_height * E3, yaw, R


@dataclass(frozen=True)
class ReferenceAux:
    """Current measured quantities the references depend on."""
    r_L: np.ndarray
    yaw: float = 0.0


def smooth_l1(y: Any, y_ref: Any, w: Any, gamma: float) -> float:
    """sum_j w_j (sqrt((y_j - y_ref_j)^2 + gamma^2) - gamma)."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    e = np.asarray(y, dtype=float) - np.asarray(y_ref, dtype=float)
    return float(np.sum(w * (np.sqrt(e ** 2 + gamma ** 2) - gamma)))


def smooth_l1_derivatives(e: np.ndarray, w: np.ndarray, gamma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise gradient and second derivative of the smooth-L1 penalty."""
    root = np.sqrt(e ** 2 + gamma ** 2)
    return w * e / root, w * gamma ** 2 / root ** 3


def _check_phase(p: int) -> Phase:
    try:
        return Phase(int(p))
    except ValueError:
        raise ValueError(f"unknown phase {p}") from None


def phase_output(p: int, xi: Any, params: ModelParams = DEFAULT_PARAMS) -> np.ndarray:
    """[hook position, yaw] in phases 1, 2, 5; [payload position, yaw] in phases 3, 4."""
    p = _check_phase(p)
    xi = np.asarray(xi.vector if hasattr(xi, 'vector') else xi, dtype=float)
    pos = hook_position(xi, params)
    if p in (Phase.TRANSPORT, Phase.PLACE):
        pos = pos - params.d_LH * E3
    return np.concatenate([pos, xi[..., YAW:YAW + 1]], axis=-1)


def output_jacobian(p: int, xi: np.ndarray, params: ModelParams = DEFAULT_PARAMS) -> np.ndarray:
    """d(phase_output)/d(xi), shape (..., 4, 16); the payload offset is constant."""
    _check_phase(p)
    C = np.zeros(np.shape(xi)[:-1] + (N_Y, NX))
    C[..., :3, :] = hook_jacobian(xi, params)
    C[..., 3, YAW] = 1.0
    return C


def z_safe(r_L: Any, r_p_ref: Any, z_bar: float, a1: float, a2: float) -> float:
    """Transport height above the drop point, rising with horizontal distance."""
    if z_bar <= 0 or a1 <= 0:
        raise ValueError("z_bar and a1 must be positive")
    d = np.linalg.norm(np.asarray(r_L, dtype=float)[..., :2] - np.asarray(r_p_ref, dtype=float)[..., :2], axis=-1)
    return 0.5 * z_bar * (np.tanh(a1 * d - a2) + 1.0)


def _unwrap_near(angle: np.ndarray, target: float) -> np.ndarray:
    return angle + 2.0 * np.pi * np.round((target - angle) / (2.0 * np.pi))


def phase_reference(p: int, k: int, refs: ReferenceProvider, aux: ReferenceAux,
                    settings: OcpSettings = OcpSettings(), i: Any = 0) -> np.ndarray:
    """Output reference for stage k + i; yaw unwrapped to the branch nearest aux.yaw."""
    p = _check_phase(p)
    i = np.asarray(i)
    j = k + i
    if p == Phase.APPROACH:
        r, yaw, _ = refs.pickup_hook(np.full(i.shape, k))
    elif p == Phase.PICK_UP:
        r, yaw, _ = refs.pickup_hook(j)
    elif p in (Phase.TRANSPORT, Phase.PLACE):
        r_p, yaw, _ = refs.dropoff_pose(j)
        r_now, _, _ = refs.dropoff_pose(k)
        r = r_p + z_safe(aux.r_L, r_now, settings.z_bar, settings.a1, settings.a2) * E3
    else:
        r_p, yaw, R_p = refs.dropoff_pose(j)
        r = r_p + settings.x_bar * R_p[..., :, 0]
    yaw = _unwrap_near(yaw, aux.yaw)
    return np.concatenate([r, yaw[..., None]], axis=-1)


def _outside_sphere(point: np.ndarray, center: np.ndarray, radius: float):
    """g = radius - |point - center| and dg/dpoint."""
    diff = np.asarray(point, dtype=float) - np.asarray(center, dtype=float)
    dist = np.linalg.norm(diff, axis=-1)
    safe = np.where(dist > 1e-12, dist, 1.0)
    grad = np.where((dist > 1e-12)[..., None], -diff / safe[..., None], -E3)
    return radius - dist, grad


def pregrasp_constraint(r_H: Any, r_LH_ref: Any, R_L_ref: Any, r_con: Any, rho_con: float) -> np.ndarray:
    """Hook stays outside a sphere of radius rho_con above the payload hook."""
    if rho_con <= 0:
        raise ValueError("rho_con must be positive")
    center = np.asarray(r_LH_ref, dtype=float) + np.einsum('...ij,j->...i', np.asarray(R_L_ref, dtype=float),
                                                            np.asarray(r_con, dtype=float))
    return _outside_sphere(r_H, center, rho_con)[0]


def detach_constraint(r_L: Any, r_p_ref: Any, rho_con_tilde: float) -> np.ndarray:
    """Payload stays outside a sphere of radius rho_con_tilde around the drop point."""
    if rho_con_tilde <= 0:
        raise ValueError("rho_con_tilde must be positive")
    return _outside_sphere(r_L, r_p_ref, rho_con_tilde)[0]


class SphereConstraint:
    """One 'outside the sphere' row per stage 0..N on the hook (or payload) point."""
    n_g = 1

    def __init__(self, centers: np.ndarray, radius: float, offset: np.ndarray, params: ModelParams):
        if radius <= 0:
            raise ValueError("sphere radius must be positive")
        self.centers = np.asarray(centers, dtype=float)
        self.radius = radius
        self.offset = np.asarray(offset, dtype=float)
        self.params = params

    def evaluate(self, xs: np.ndarray):
        point = hook_position(xs, self.params) + self.offset
        g, grad = _outside_sphere(point, self.centers, self.radius)
        jac = np.einsum('ni,nij->nj', grad, hook_jacobian(xs, self.params))
        return g[:, None], jac[:, None, :]


class NoConstraints:
    n_g = 0

    def evaluate(self, xs: np.ndarray):
        n = len(xs)
        return np.zeros((n, 0)), np.zeros((n, 0, np.shape(xs)[-1]))


class PhaseCost:
    """
    Stage cost l(h_p(xi), y_ref_i) + |v|^2_Wv + |u - u_ref|^2_Wu over stages 0..N-1.

    gauss_newton returns the per-stage blocks of the Gauss-Newton model;
    the smooth-L1 curvature enters through its exact second derivative.
    """

    def __init__(self, p: int, y_ref: np.ndarray, cost: StageCostParams, u_ref: np.ndarray,
                 params: ModelParams = DEFAULT_PARAMS):
        self.p = _check_phase(p)
        self.y_ref = np.asarray(y_ref, dtype=float)
        self.w = cost.weights(self.p)
        self.gamma = cost.gamma
        self.W_v = cost.W_v
        self.W_u = cost.W_u
        self.u_ref = np.asarray(u_ref, dtype=float)
        self.params = params

    def value(self, xs: np.ndarray, us: np.ndarray, y_ref: Optional[np.ndarray] = None) -> np.ndarray:
        y_ref = self.y_ref[:len(xs)] if y_ref is None else y_ref
        e = phase_output(self.p, xs, self.params) - y_ref
        track = np.sum(self.w * (np.sqrt(e ** 2 + self.gamma ** 2) - self.gamma), axis=-1)
        v = xs[..., NQ:]
        du = us - self.u_ref
        return (track + np.einsum('...i,ij,...j->...', v, self.W_v, v)
                + np.einsum('...i,ij,...j->...', du, self.W_u, du))

    def gauss_newton(self, xs: np.ndarray, us: np.ndarray):
        n = len(xs)
        e = phase_output(self.p, xs, self.params) - self.y_ref[:n]
        grad, curv = smooth_l1_derivatives(e, self.w, self.gamma)
        C = output_jacobian(self.p, xs, self.params)
        Hxx = np.einsum('nki,nk,nkj->nij', C, curv, C)
        Hxx[:, NQ:, NQ:] += 2.0 * self.W_v
        gx = np.einsum('nki,nk->ni', C, grad)
        gx[:, NQ:] += 2.0 * xs[:, NQ:] @ self.W_v
        Huu = np.broadcast_to(2.0 * self.W_u, (n, NU, NU)).copy()
        gu = 2.0 * (us - self.u_ref) @ self.W_u
        return Hxx, Huu, gx, gu


def input_bounds(params: ModelParams = DEFAULT_PARAMS) -> Tuple[np.ndarray, np.ndarray]:
    lb = np.array([0.0, -params.tau_max, -params.tau_max, -params.tau_max])
    ub = np.array([params.F_max, params.tau_max, params.tau_max, params.tau_max])
    return lb, ub


def assemble(p: int, k: int, N: int, refs: ReferenceProvider, bounds: StateBounds,
             cost: StageCostParams, aux: ReferenceAux, theta: Any,
             settings: OcpSettings = OcpSettings(),
             params: ModelParams = DEFAULT_PARAMS) -> OcpProblem:
    """Build the OCP for phase p at step k; the phase is held fixed over the horizon."""
    p = _check_phase(p)
    if N < 1:
        raise ValueError(f"horizon N must be >= 1, got {N}")
    model = PredictiveModel(theta, p, settings.dt, params)
    stages = np.arange(N + 1)
    y_ref = phase_reference(p, k, refs, aux, settings, stages[:-1])
    u_ref = np.array([params.hover_thrust(model.m_eff), 0.0, 0.0, 0.0])
    stage_cost = PhaseCost(p, y_ref, cost, u_ref, params)

    if p == Phase.APPROACH:
        r_LH, _, R_L = refs.pickup_hook(np.full(N + 1, k) + stages)
        centers = r_LH + np.einsum('nij,j->ni', R_L, np.asarray(settings.r_con, dtype=float))
        constraints = SphereConstraint(centers, settings.rho_con, np.zeros(3), params)
    elif p == Phase.TRANSPORT:
        r_p, _, _ = refs.dropoff_pose(k + stages)
        constraints = SphereConstraint(r_p, settings.rho_con_tilde, -params.d_LH * E3, params)
    else:
        constraints = NoConstraints()

    u_lb, u_ub = input_bounds(params)
    problem = OcpProblem(N=N, dynamics=model, cost=stage_cost, x_lb=bounds.lb, x_ub=bounds.ub,
                         u_lb=u_lb, u_ub=u_ub, constraints=constraints)
    problem.validate()
    return problem
