"""
Quadrotor with a passive two-joint pole and a lumped tip mass.

State vector xi = [q, v], q = [x, y, z, roll, pitch, yaw, alpha, beta], v = dq/dt.
Input u = [F, tau_x, tau_y, tau_z]. The pole hangs below the quad center;
alpha rotates it about the body x axis, beta about the body y axis. The tip
carries the hook mass plus, when attached, the payload mass m_L.

Every function accepts a single state (16,) or a batch (B, 16) and returns
arrays of the matching shape.
"""
import logging
from dataclasses import dataclass
from typing import Any, Tuple, Union

import numpy as np

from .errors import DynamicsError

logger = logging.getLogger(__name__)

NQ = 8
NX = 16
NU = 4
E3 = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class ModelParams:
    """Physical constants of the surrogate plant (SI units)."""
    m_q: float = 0.605
    J: Tuple[float, float, float] = (2.5e-3, 2.5e-3, 4.5e-3)
    m_hook: float = 0.1
    L: float = 0.4
    hook_offset: float = 0.02
    d_LH: float = 0.05
    rho_H: float = 0.03
    g: float = 9.81
    damping: Tuple[float, float] = (0.01, 0.01)
    F_max: float = 15.0
    tau_max: float = 0.1

    def __post_init__(self):
        positive = {
            'm_q': self.m_q, 'm_hook': self.m_hook, 'L': self.L, 'd_LH': self.d_LH,
            'rho_H': self.rho_H, 'g': self.g, 'F_max': self.F_max, 'tau_max': self.tau_max,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if len(self.J) != 3 or min(self.J) <= 0:
            raise ValueError(f"J must hold three positive inertias, got {self.J}")
        if len(self.damping) != 2 or min(self.damping) < 0:
            raise ValueError(f"damping must hold two non-negative values, got {self.damping}")
        if self.hook_offset < 0:
            raise ValueError("hook_offset must be non-negative")

    @property
    def inertia(self) -> np.ndarray:
        return np.asarray(self.J, dtype=float)

    def hover_thrust(self, m_L: float = 0.0) -> float:
        return (self.m_q + self.m_hook + m_L) * self.g


DEFAULT_PARAMS = ModelParams()


@dataclass(frozen=True)
class GeneralizedState:
    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(NQ)
        v = np.asarray(self.v, dtype=float).reshape(NQ)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            raise DynamicsError("state has non-finite entries")
        object.__setattr__(self, 'q', q)
        object.__setattr__(self, 'v', v)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.v])

    @classmethod
    def from_vector(cls, xi: np.ndarray) -> "GeneralizedState":
        xi = np.asarray(xi, dtype=float).reshape(NX)
        return cls(q=xi[:NQ], v=xi[NQ:])

    @classmethod
    def at_rest(cls, position, yaw: float = 0.0) -> "GeneralizedState":
        q = np.zeros(NQ)
        q[:3] = position
        q[5] = yaw
        return cls(q=q, v=np.zeros(NQ))


@dataclass(frozen=True)
class ControlInput:
    F: float
    tau: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float).reshape(3)
        if not (np.isfinite(self.F) and np.all(np.isfinite(tau))):
            raise DynamicsError("input has non-finite entries")
        object.__setattr__(self, 'F', float(self.F))
        object.__setattr__(self, 'tau', tau)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([[self.F], self.tau])

    @classmethod
    def from_vector(cls, u: np.ndarray) -> "ControlInput":
        u = np.asarray(u, dtype=float).reshape(NU)
        return cls(F=u[0], tau=u[1:])

    @classmethod
    def hover(cls, params: ModelParams = DEFAULT_PARAMS, m_L: float = 0.0) -> "ControlInput":
        return cls(F=params.hover_thrust(m_L), tau=np.zeros(3))

    def within_limits(self, params: ModelParams = DEFAULT_PARAMS) -> bool:
        return 0.0 <= self.F <= params.F_max and bool(np.all(np.abs(self.tau) <= params.tau_max))


@dataclass(frozen=True)
class UncertainParams:
    """Uncertain parameter vector theta; theta[0] is the payload mass m_L."""
    theta: np.ndarray

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        if theta.ndim != 1 or theta.size < 1:
            raise ValueError("theta must be a non-empty vector")
        if not np.all(np.isfinite(theta)):
            raise DynamicsError("theta has non-finite entries")
        if theta[0] < 0:
            raise ValueError(f"payload mass must be non-negative, got {theta[0]}")
        object.__setattr__(self, 'theta', theta)

    @property
    def m_L(self) -> float:
        return float(self.theta[0])

    @property
    def vector(self) -> np.ndarray:
        return self.theta


def _as_array(x: Any, n: int, what: str) -> np.ndarray:
    if hasattr(x, 'vector'):
        x = x.vector
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1:] != (n,):
        raise DynamicsError(f"{what} must have trailing dimension {n}, got shape {arr.shape}")
    return arr


def payload_mass(theta: Any) -> np.ndarray:
    """m_L from an UncertainParams, a scalar mass or a theta array (..., n_theta)."""
    if isinstance(theta, UncertainParams):
        return np.asarray(theta.m_L)
    arr = np.asarray(theta, dtype=float)
    if arr.ndim == 0:
        return arr
    return arr[..., 0]


def effective_mass(theta: Any, phase: Any) -> np.ndarray:
    """Payload mass seen by the predictive model: zero outside transport/place."""
    p = int(getattr(phase, 'p', phase))
    if p not in (1, 2, 3, 4, 5):
        raise ValueError(f"unknown phase {p}")
    m = payload_mass(theta)
    if p in (3, 4):
        return m
    return np.zeros_like(m)


def _batch(xi: Any, u: Any, m_L: Any):
    xi = _as_array(xi, NX, 'state')
    u = _as_array(u, NU, 'input')
    m_L = np.asarray(m_L, dtype=float)
    single = xi.ndim == 1 and u.ndim == 1 and m_L.ndim == 0
    shape = np.broadcast_shapes(xi.shape[:-1], u.shape[:-1], m_L.shape)
    xi_b = np.broadcast_to(xi, shape + (NX,)).reshape(-1, NX)
    u_b = np.broadcast_to(u, shape + (NU,)).reshape(-1, NU)
    m_b = np.broadcast_to(m_L, shape).reshape(-1)
    if not (np.all(np.isfinite(xi_b)) and np.all(np.isfinite(u_b)) and np.all(np.isfinite(m_b))):
        raise DynamicsError("non-finite state, input or mass")
    return xi_b, u_b, m_b, shape, single


def rotation_matrix(roll, pitch, yaw) -> np.ndarray:
    """Z-Y-X Euler rotation body -> world, broadcast over the angle arrays."""
    roll, pitch, yaw = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (roll, pitch, yaw)))
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    R = np.empty(roll.shape + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def _rate_map(roll, pitch, roll_dot, pitch_dot):
    """E with omega_body = E @ d(euler)/dt, and its time derivative."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    E = np.zeros(roll.shape + (3, 3))
    E[..., 0, 0] = 1.0
    E[..., 0, 2] = -sp
    E[..., 1, 1] = cr
    E[..., 1, 2] = sr * cp
    E[..., 2, 1] = -sr
    E[..., 2, 2] = cr * cp
    E_dot = np.zeros_like(E)
    E_dot[..., 0, 2] = -cp * pitch_dot
    E_dot[..., 1, 1] = -sr * roll_dot
    E_dot[..., 1, 2] = cr * cp * roll_dot - sr * sp * pitch_dot
    E_dot[..., 2, 1] = -cr * roll_dot
    E_dot[..., 2, 2] = -sr * cp * roll_dot - cr * sp * pitch_dot
    return E, E_dot


def _pole(alpha, beta, length):
    """Body-frame pole vector and its partial derivatives in (alpha, beta)."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    zero = np.zeros_like(alpha)
    ell = length * np.stack([-sb, sa * cb, -ca * cb], axis=-1)
    ell_a = length * np.stack([zero, ca * cb, sa * cb], axis=-1)
    ell_b = length * np.stack([-cb, -sa * sb, ca * sb], axis=-1)
    ell_aa = length * np.stack([zero, -sa * cb, ca * cb], axis=-1)
    ell_ab = length * np.stack([zero, -ca * sb, -sa * sb], axis=-1)
    ell_bb = length * np.stack([sb, -sa * cb, ca * cb], axis=-1)
    return ell, ell_a, ell_b, ell_aa, ell_ab, ell_bb


def _skew(w: np.ndarray) -> np.ndarray:
    S = np.zeros(w.shape[:-1] + (3, 3))
    S[..., 0, 1] = -w[..., 2]
    S[..., 0, 2] = w[..., 1]
    S[..., 1, 0] = w[..., 2]
    S[..., 1, 2] = -w[..., 0]
    S[..., 2, 0] = -w[..., 1]
    S[..., 2, 1] = w[..., 0]
    return S


def _point_jacobian(R, E, ell, ell_a, ell_b) -> np.ndarray:
    """d(world point r + R ell)/dq for a point on the pole, shape (B, 3, 8)."""
    B = R.shape[0]
    Jp = np.zeros((B, 3, NQ))
    Jp[:, :, 0:3] = np.eye(3)
    Jp[:, :, 3:6] = -R @ _skew(ell) @ E
    Jp[:, :, 6] = np.einsum('bij,bj->bi', R, ell_a)
    Jp[:, :, 7] = np.einsum('bij,bj->bi', R, ell_b)
    return Jp


def _accelerations(q: np.ndarray, v: np.ndarray, u: np.ndarray, m_tip: np.ndarray,
                   params: ModelParams) -> np.ndarray:
    B = q.shape[0]
    R = rotation_matrix(q[:, 3], q[:, 4], q[:, 5])
    E, E_dot = _rate_map(q[:, 3], q[:, 4], v[:, 3], v[:, 4])
    euler_dot = v[:, 3:6]
    omega = np.einsum('bij,bj->bi', E, euler_dot)
    e_dot_term = np.einsum('bij,bj->bi', E_dot, euler_dot)

    ell, ell_a, ell_b, ell_aa, ell_ab, ell_bb = _pole(q[:, 6], q[:, 7], params.L)
    a_dot = v[:, 6:7]
    b_dot = v[:, 7:8]
    ell_dot = ell_a * a_dot + ell_b * b_dot
    ell_vp = ell_aa * a_dot ** 2 + 2.0 * ell_ab * a_dot * b_dot + ell_bb * b_dot ** 2
    # tip acceleration terms that do not multiply q_ddot
    body_vp = (np.cross(omega, np.cross(omega, ell)) + np.cross(e_dot_term, ell)
               + 2.0 * np.cross(omega, ell_dot) + ell_vp)
    a_vp = np.einsum('bij,bj->bi', R, body_vp)

    Jt = _point_jacobian(R, E, ell, ell_a, ell_b)
    J = params.inertia
    M = np.zeros((B, NQ, NQ))
    M[:, 0:3, 0:3] = params.m_q * np.eye(3)
    M[:, 3:6, 3:6] = np.einsum('bki,k,bkj->bij', E, J, E)
    M += m_tip[:, None, None] * np.einsum('bki,bkj->bij', Jt, Jt)

    rhs = np.zeros((B, NQ))
    rhs[:, 0:3] = u[:, 0:1] * R[:, :, 2]
    rhs[:, 2] -= params.m_q * params.g
    gyro = u[:, 1:4] - np.cross(omega, J * omega) - J * e_dot_term
    rhs[:, 3:6] = np.einsum('bki,bk->bi', E, gyro)
    rhs[:, 6:8] = -np.asarray(params.damping) * v[:, 6:8]
    tip_force = -m_tip[:, None] * (a_vp + params.g * E3)
    rhs += np.einsum('bki,bk->bi', Jt, tip_force)

    try:
        return np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as e:
        raise DynamicsError(f"singular mass matrix: {e}") from e


def _derivative(xi: np.ndarray, u: np.ndarray, m_tip: np.ndarray, params: ModelParams) -> np.ndarray:
    q, v = xi[:, :NQ], xi[:, NQ:]
    return np.concatenate([v, _accelerations(q, v, u, m_tip, params)], axis=1)


def _shape_like(out: np.ndarray, shape, single: bool, template: Any):
    out = out.reshape(shape + (NX,))
    if single and isinstance(template, GeneralizedState):
        return GeneralizedState.from_vector(out)
    return out


def continuous_dynamics(xi: Any, u: Any, theta: Any, params: ModelParams = DEFAULT_PARAMS) -> np.ndarray:
    """State derivative [v; q_ddot] of the Lagrangian model."""
    xi_b, u_b, m_b, shape, _ = _batch(xi, u, payload_mass(theta))
    if np.any(m_b < 0):
        raise DynamicsError("payload mass must be non-negative")
    out = _derivative(xi_b, u_b, params.m_hook + m_b, params)
    if not np.all(np.isfinite(out)):
        raise DynamicsError("dynamics produced non-finite values")
    return out.reshape(shape + (NX,))


def step(xi: Any, u: Any, theta: Any, dt: float, params: ModelParams = DEFAULT_PARAMS):
    """One classical RK4 step of length dt with payload mass theta[0] at the tip."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    xi_b, u_b, m_b, shape, single = _batch(xi, u, payload_mass(theta))
    m_tip = params.m_hook + m_b
    k1 = _derivative(xi_b, u_b, m_tip, params)
    k2 = _derivative(xi_b + 0.5 * dt * k1, u_b, m_tip, params)
    k3 = _derivative(xi_b + 0.5 * dt * k2, u_b, m_tip, params)
    k4 = _derivative(xi_b + dt * k3, u_b, m_tip, params)
    out = xi_b + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise DynamicsError("integration produced non-finite values")
    return _shape_like(out, shape, single, xi)


def predictive_step(xi: Any, u: Any, theta: Any, phase: Any, dt: float,
                    params: ModelParams = DEFAULT_PARAMS):
    """step() with the payload mass switched off in phases 1, 2 and 5."""
    return step(xi, u, effective_mass(theta, phase), dt, params)


def fd_steps(z: np.ndarray) -> np.ndarray:
    return np.maximum(1e-6, 1e-6 * np.abs(z))


def linearize(xs: np.ndarray, us: np.ndarray, theta: Any, phase: Any, dt: float,
              params: ModelParams = DEFAULT_PARAMS):
    """
    Central-difference linearization of predictive_step along a trajectory.

    Returns f (N, 16), A (N, 16, 16), B (N, 16, 4) and G_theta (N, 16, n_theta),
    all perturbations evaluated in one batched integration.
    """
    xs = np.atleast_2d(_as_array(xs, NX, 'state'))
    us = np.atleast_2d(_as_array(us, NU, 'input'))
    th = np.atleast_1d(np.asarray(theta.vector if hasattr(theta, 'vector') else theta, dtype=float))
    if xs.shape[0] != us.shape[0]:
        raise DynamicsError(f"{xs.shape[0]} states but {us.shape[0]} inputs")
    N = xs.shape[0]
    n_th = th.size
    nz = NX + NU + n_th
    z = np.concatenate([xs, us, np.broadcast_to(th, (N, n_th))], axis=1)
    h = fd_steps(z)
    idx = np.arange(nz)
    pert = np.repeat(z[:, None, :], 2 * nz + 1, axis=1)
    pert[:, 1 + idx, idx] += h
    pert[:, 1 + nz + idx, idx] -= h
    flat = pert.reshape(-1, nz)
    out = predictive_step(flat[:, :NX], flat[:, NX:NX + NU], flat[:, NX + NU:], phase, dt, params)
    out = out.reshape(N, 2 * nz + 1, NX)
    width = pert[:, 1 + idx, idx] - pert[:, 1 + nz + idx, idx]
    jac = (out[:, 1:1 + nz] - out[:, 1 + nz:]) / width[:, :, None]
    jac = np.transpose(jac, (0, 2, 1))
    return out[:, 0], jac[:, :, :NX], jac[:, :, NX:NX + NU], jac[:, :, NX + NU:]


def jacobians(xi: Any, u: Any, theta: Any, phase: Any, dt: float,
              params: ModelParams = DEFAULT_PARAMS) -> Tuple[np.ndarray, np.ndarray]:
    """A = d(phi_p)/d(xi) and G = [d(phi_p)/d(theta), I] for one stage."""
    _, A, _, G_theta = linearize(_as_array(xi, NX, 'state')[None], _as_array(u, NU, 'input')[None],
                                 theta, phase, dt, params)
    return A[0], np.concatenate([G_theta[0], np.eye(NX)], axis=1)


def hook_position(xi: Any, params: ModelParams = DEFAULT_PARAMS) -> np.ndarray:
    """World position of the hook at the pole tip (plus hook offset)."""
    xi = _as_array(xi, NX, 'state')
    R = rotation_matrix(xi[..., 3], xi[..., 4], xi[..., 5])
    ell = _pole(xi[..., 6], xi[..., 7], params.L + params.hook_offset)[0]
    return xi[..., 0:3] + np.einsum('...ij,...j->...i', R, ell)


def hook_jacobian(xi: Any, params: ModelParams = DEFAULT_PARAMS) -> np.ndarray:
    """d(hook_position)/d(xi), shape (..., 3, 16); velocity columns are zero."""
    xi = _as_array(xi, NX, 'state')
    flat = xi.reshape(-1, NX)
    R = rotation_matrix(flat[:, 3], flat[:, 4], flat[:, 5])
    E, _ = _rate_map(flat[:, 3], flat[:, 4], np.zeros(len(flat)), np.zeros(len(flat)))
    ell, ell_a, ell_b = _pole(flat[:, 6], flat[:, 7], params.L + params.hook_offset)[:3]
    out = np.zeros((len(flat), 3, NX))
    out[:, :, :NQ] = _point_jacobian(R, E, ell, ell_a, ell_b)
    return out.reshape(xi.shape[:-1] + (3, NX))


def payload_hook_position(r_L: Any, R_L: Any, d_LH: float) -> np.ndarray:
    """Hook point on the payload: r_L + R_L e3 d_LH."""
    r_L = np.asarray(r_L, dtype=float)
    R_L = np.asarray(R_L, dtype=float)
    if not (np.all(np.isfinite(r_L)) and np.all(np.isfinite(R_L))):
        raise DynamicsError("non-finite payload pose")
    return r_L + R_L[..., :, 2] * d_LH


def hanging_payload_position(xi: Any, params: ModelParams = DEFAULT_PARAMS) -> np.ndarray:
    """Payload center when it hangs upright from the hook."""
    return hook_position(xi, params) - params.d_LH * E3


def mechanical_energy(xi: Any, m_L: float = 0.0, params: ModelParams = DEFAULT_PARAMS) -> np.ndarray:
    """Kinetic plus potential energy of quad and tip mass."""
    xi_b = np.atleast_2d(_as_array(xi, NX, 'state'))
    q, v = xi_b[:, :NQ], xi_b[:, NQ:]
    m_tip = params.m_hook + m_L
    R = rotation_matrix(q[:, 3], q[:, 4], q[:, 5])
    E, _ = _rate_map(q[:, 3], q[:, 4], v[:, 3], v[:, 4])
    omega = np.einsum('bij,bj->bi', E, v[:, 3:6])
    ell, ell_a, ell_b = _pole(q[:, 6], q[:, 7], params.L)[:3]
    tip_vel = np.einsum('bij,bj->bi', _point_jacobian(R, E, ell, ell_a, ell_b), v)
    tip_z = q[:, 2] + np.einsum('bj,bj->b', R[:, 2, :], ell)
    kinetic = (0.5 * params.m_q * np.sum(v[:, :3] ** 2, axis=1)
               + 0.5 * np.sum(params.inertia * omega ** 2, axis=1)
               + 0.5 * m_tip * np.sum(tip_vel ** 2, axis=1))
    potential = params.m_q * params.g * q[:, 2] + m_tip * params.g * tip_z
    energy = kinetic + potential
    return energy[0] if np.ndim(xi.vector if hasattr(xi, "vector") else xi) == 1 else energy


class PredictiveModel:
    """
    phi_p for a fixed phase and parameter estimate, as seen by the solver.

    The last linearization is cached so the backoff computation and the RTI
    step share one batched finite-difference sweep.
    """

    def __init__(self, theta: Any, phase: Any, dt: float, params: ModelParams = DEFAULT_PARAMS):
        self.theta = np.atleast_1d(np.asarray(theta.vector if hasattr(theta, 'vector') else theta, dtype=float))
        self.phase = int(getattr(phase, 'p', phase))
        self.dt = dt
        self.params = params
        self._key = None
        self._cached = None

    @property
    def m_eff(self) -> float:
        return float(effective_mass(self.theta, self.phase))

    def step(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        return predictive_step(xs, us, self.theta, self.phase, self.dt, self.params)

    def _linearize(self, xs: np.ndarray, us: np.ndarray):
        xs = np.ascontiguousarray(xs, dtype=float)
        us = np.ascontiguousarray(us, dtype=float)
        key = (xs.shape, xs.tobytes(), us.tobytes())
        if key != self._key:
            self._cached = linearize(xs, us, self.theta, self.phase, self.dt, self.params)
            self._key = key
        return self._cached

    def linearize(self, xs: np.ndarray, us: np.ndarray):
        """(f, A, B) along the trajectory."""
        return self._linearize(xs, us)[:3]

    def sensitivities(self, xs: np.ndarray, us: np.ndarray):
        """(A, G) with G = [d(phi_p)/d(theta), I] per stage."""
        _, A, _, G_theta = self._linearize(xs, us)
        N = A.shape[0]
        G = np.concatenate([G_theta, np.broadcast_to(np.eye(NX), (N, NX, NX))], axis=2)
        return A, G
