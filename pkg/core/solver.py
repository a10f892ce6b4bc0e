"""
Condensed Gauss-Newton SQP with real-time iterations.

One rti_step linearizes the dynamics along the warm-start trajectory,
condenses the states out, adds L1/L2-penalized slacks on the state bounds
and nonlinear constraints (input bounds stay hard), solves the dense QP and
takes the full step.
"""
import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional, Tuple

import numpy as np
from qpsolvers import Problem, solve_problem
from scipy.linalg import cho_factor, cho_solve, lstsq

from .errors import SolverError

logger = logging.getLogger(__name__)


class QpStatus(str, Enum):
    SOLVED = 'solved'
    FAILED = 'failed'


@dataclass(frozen=True)
class SolverSettings:
    l1_penalty: float = 1e4
    l2_penalty: float = 1.0
    regularization: float = 1e-8
    kkt_tol: float = 1e-7
    qp_backend: str = 'quadprog'

    def __post_init__(self):
        if self.l1_penalty < 0 or self.l2_penalty < 0:
            raise ValueError("slack penalties must be non-negative")
        if self.regularization < 0 or self.kkt_tol <= 0:
            raise ValueError("regularization must be >= 0 and kkt_tol > 0")


@dataclass
class QpResult:
    x: Optional[np.ndarray]
    z: np.ndarray
    status: QpStatus
    kkt_residual: float = float('inf')
    iterations: int = -1


def kkt_residual(P: np.ndarray, q: np.ndarray, G: np.ndarray, h: np.ndarray,
                 x: np.ndarray, z: np.ndarray) -> float:
    """Max of stationarity, primal/dual infeasibility and complementarity, in absolute terms."""
    stationarity = P @ x + q + G.T @ z
    slack = G @ x - h
    parts = [np.max(np.abs(stationarity), initial=0.0),
             np.max(slack, initial=0.0),
             np.max(-z, initial=0.0),
             np.max(np.abs(z * slack), initial=0.0)]
    return float(max(parts))


def _data_scale(q: np.ndarray, h: np.ndarray) -> float:
    return max(1.0, np.max(np.abs(q), initial=0.0), np.max(np.abs(h), initial=0.0))


def _polish(P: np.ndarray, q: np.ndarray, G: np.ndarray, h: np.ndarray,
            x: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Re-solve the equality KKT system on the active set the backend reported."""
    n = len(q)
    active = z > -(G @ x - h)
    Ga = G[active]
    m = len(Ga)
    K = np.block([[P, Ga.T], [Ga, np.zeros((m, m))]])
    sol = lstsq(K, np.concatenate([-q, h[active]]))[0]
    z_polished = np.zeros_like(z)
    z_polished[active] = sol[n:]
    return sol[:n], z_polished


def solve_qp(P: np.ndarray, q: np.ndarray, G: Optional[np.ndarray] = None, h: Optional[np.ndarray] = None,
             settings: SolverSettings = SolverSettings()) -> QpResult:
    """min 1/2 x'Px + q'x  s.t.  Gx <= h, with lambda*I added to P."""
    n = len(q)
    P = 0.5 * (P + P.T) + settings.regularization * np.eye(n)
    if G is None or len(G) == 0:
        G = np.zeros((0, n))
        h = np.zeros(0)
    try:
        if len(G) == 0:
            x = cho_solve(cho_factor(P), -q)
            z = np.zeros(0)
            iterations = 0
        else:
            solution = solve_problem(Problem(P, q, G, h), solver=settings.qp_backend)
            if not solution.found or solution.x is None:
                return QpResult(x=None, z=np.zeros(len(G)), status=QpStatus.FAILED)
            x = solution.x
            z = solution.z if solution.z is not None else np.zeros(len(G))
            iterations = int(np.ravel(solution.extras.get('iterations', [-1]))[0])
    except Exception as e:
        logger.warning("QP backend failed: %s", e)
        return QpResult(x=None, z=np.zeros(len(G)), status=QpStatus.FAILED)

    residual = kkt_residual(P, q, G, h, x, z)
    if not residual <= settings.kkt_tol and np.all(np.isfinite(x)):
        try:
            x_p, z_p = _polish(P, q, G, h, x, z)
            polished = kkt_residual(P, q, G, h, x_p, z_p)
        except (np.linalg.LinAlgError, ValueError):
            polished = float('inf')
        logger.debug("QP KKT residual %.3e, after polishing %.3e", residual, polished)
        if polished < residual:
            x, z, residual = x_p, z_p, polished
    if not np.isfinite(residual) or residual > settings.kkt_tol:
        logger.warning("QP KKT residual %.3e above tolerance %.1e (%.3e relative to the data scale)",
                       residual, settings.kkt_tol, residual / _data_scale(q, h))
        return QpResult(x=x, z=z, status=QpStatus.FAILED, kkt_residual=residual, iterations=iterations)
    return QpResult(x=x, z=z, status=QpStatus.SOLVED, kkt_residual=residual, iterations=iterations)


@dataclass(frozen=True, eq=False)
class OcpProblem:
    """
    Horizon-N problem handed to rti_step.

    dynamics.linearize(xs, us) -> (f, A, B); cost.gauss_newton(xs, us) ->
    (Hxx, Huu, gx, gu) per stage 0..N-1; constraints.evaluate(xs) -> (g, dg/dxi)
    per stage 0..N with n_g rows, g <= 0 feasible. Backoffs tighten the state
    bounds (stages 1..N) and the nonlinear rows (stages 0..N).
    """
    N: int
    dynamics: Any
    cost: Any
    x_lb: np.ndarray
    x_ub: np.ndarray
    u_lb: np.ndarray
    u_ub: np.ndarray
    constraints: Any
    backoff_x: Optional[np.ndarray] = None
    backoff_g: Optional[np.ndarray] = None

    def __post_init__(self):
        nx, ng = len(self.x_lb), self.constraints.n_g
        if self.backoff_x is None:
            object.__setattr__(self, 'backoff_x', np.zeros((self.N + 1, nx)))
        if self.backoff_g is None:
            object.__setattr__(self, 'backoff_g', np.zeros((self.N + 1, ng)))

    @property
    def nx(self) -> int:
        return len(self.x_lb)

    @property
    def nu(self) -> int:
        return len(self.u_lb)

    @property
    def bounded(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.x_lb) | np.isfinite(self.x_ub))

    def validate(self) -> None:
        if self.N < 1:
            raise SolverError(f"horizon must be >= 1, got {self.N}")
        if len(self.x_ub) != self.nx or len(self.u_ub) != self.nu:
            raise SolverError("bound vectors have inconsistent lengths")
        if np.any(self.u_lb > self.u_ub):
            raise SolverError("infeasible input bounds: lower bound exceeds upper bound")
        if np.any(self.x_lb > self.x_ub):
            raise SolverError("infeasible state bounds: lower bound exceeds upper bound")
        if not (np.all(np.isfinite(self.u_lb)) and np.all(np.isfinite(self.u_ub))):
            raise SolverError("input bounds must be finite")
        if self.backoff_x.shape != (self.N + 1, self.nx):
            raise SolverError(f"state backoffs must have shape {(self.N + 1, self.nx)}")
        if self.backoff_g.shape != (self.N + 1, self.constraints.n_g):
            raise SolverError(f"constraint backoffs must have shape {(self.N + 1, self.constraints.n_g)}")
        if np.any(self.backoff_x < 0) or np.any(self.backoff_g < 0):
            raise SolverError("backoffs must be non-negative")

    def with_backoffs(self, backoff_x: np.ndarray, backoff_g: np.ndarray) -> "OcpProblem":
        return replace(self, backoff_x=np.asarray(backoff_x, dtype=float),
                       backoff_g=np.asarray(backoff_g, dtype=float))


@dataclass(frozen=True, eq=False)
class SolverState:
    xs: np.ndarray
    us: np.ndarray
    duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    slacks: np.ndarray = field(default_factory=lambda: np.zeros(0))
    status: QpStatus = QpStatus.SOLVED
    last_input: Optional[np.ndarray] = None
    rti_iterations: int = 0
    qp_iterations: int = 0
    kkt_residual: float = 0.0
    step_norm: float = 0.0
    solve_time: float = 0.0

    @classmethod
    def hover_hold(cls, x0: Any, u_hover: Any, N: int) -> "SolverState":
        """Cold start: the current state held over the horizon at the hover input."""
        x0 = _vector(x0)
        u_hover = _vector(u_hover)
        return cls(xs=np.tile(x0, (N + 1, 1)), us=np.tile(u_hover, (N, 1)), last_input=u_hover.copy())

    @property
    def N(self) -> int:
        return len(self.us)


def _vector(x: Any) -> np.ndarray:
    return np.asarray(x.vector if hasattr(x, 'vector') else x, dtype=float)


def shift_warmstart(state: SolverState) -> SolverState:
    """Drop the first stage and repeat the last one."""
    xs = np.concatenate([state.xs[1:], state.xs[-1:]], axis=0)
    us = np.concatenate([state.us[1:], state.us[-1:]], axis=0)
    return replace(state, xs=xs, us=us)


def _condense(A: np.ndarray, B: np.ndarray, d: np.ndarray, dx0: np.ndarray):
    """dX_i = M_i + S_i dU for i = 0..N."""
    N, nx, nu = B.shape
    M = np.zeros((N + 1, nx))
    S = np.zeros((N + 1, nx, N * nu))
    M[0] = dx0
    for i in range(N):
        M[i + 1] = A[i] @ M[i] + d[i]
        S[i + 1] = A[i] @ S[i]
        S[i + 1, :, i * nu:(i + 1) * nu] = B[i]
    return M, S


def _build_qp(problem: OcpProblem, X: np.ndarray, U: np.ndarray, M: np.ndarray, S: np.ndarray,
              settings: SolverSettings):
    N, nx, nu = problem.N, problem.nx, problem.nu
    nv = N * nu

    Hxx, Huu, gx, gu = problem.cost.gauss_newton(X[:-1], U)
    HS = Hxx @ S[:N]
    H = np.einsum('iak,ial->kl', S[:N], HS)
    g = np.einsum('iak,ia->k', S[:N], np.einsum('iab,ib->ia', Hxx, M[:N]) + gx)
    for i in range(N):
        sl = slice(i * nu, (i + 1) * nu)
        H[sl, sl] += Huu[i]
    g += gu.reshape(-1)

    rows, rhs, slack_cols = [], [], []
    n_slack = 0

    # state bounds on stages 1..N, one slack per (stage, coordinate)
    bounded = problem.bounded
    if len(bounded):
        Sb = S[1:, bounded, :].reshape(-1, nv)
        Xb = (X[1:, bounded] + M[1:, bounded]).reshape(-1)
        beta = problem.backoff_x[1:, bounded].reshape(-1)
        lb = np.tile(problem.x_lb[bounded], N)
        ub = np.tile(problem.x_ub[bounded], N)
        cols = np.arange(len(Xb))
        upper = np.isfinite(ub)
        lower = np.isfinite(lb)
        rows += [Sb[upper], -Sb[lower]]
        rhs += [(ub - beta - Xb)[upper], (Xb - lb - beta)[lower]]
        slack_cols += [cols[upper], cols[lower]]
        n_slack = len(Xb)

    # nonlinear rows on stages 0..N
    n_g = problem.constraints.n_g
    if n_g:
        gval, jac = problem.constraints.evaluate(X)
        Sg = np.einsum('igx,ixk->igk', jac, S).reshape(-1, nv)
        lin = gval + problem.backoff_g + np.einsum('igx,ix->ig', jac, M)
        rows.append(Sg)
        rhs.append(-lin.reshape(-1))
        slack_cols.append(n_slack + np.arange(Sg.shape[0]))
        n_slack += Sg.shape[0]

    n_var = nv + n_slack
    blocks = []
    for block, cols in zip(rows, slack_cols):
        G = np.zeros((len(block), n_var))
        G[:, :nv] = block
        G[np.arange(len(block)), nv + cols] = -1.0
        blocks.append(G)

    # hard input bounds
    eye = np.zeros((nv, n_var))
    eye[:, :nv] = np.eye(nv)
    du_lb = (np.tile(problem.u_lb, N) - U.reshape(-1))
    du_ub = (np.tile(problem.u_ub, N) - U.reshape(-1))
    blocks += [eye, -eye]
    rhs += [du_ub, -du_lb]

    # slacks non-negative
    if n_slack:
        neg = np.zeros((n_slack, n_var))
        neg[:, nv:] = -np.eye(n_slack)
        blocks.append(neg)
        rhs.append(np.zeros(n_slack))

    P = np.zeros((n_var, n_var))
    P[:nv, :nv] = H
    P[nv:, nv:] = settings.l2_penalty * np.eye(n_slack)
    q = np.concatenate([g, settings.l1_penalty * np.ones(n_slack)])
    return P, q, np.vstack(blocks), np.concatenate(rhs), n_slack


def rti_step(problem: OcpProblem, x0: Any, warm: SolverState,
             settings: SolverSettings = SolverSettings()) -> Tuple[np.ndarray, SolverState]:
    """
    One Gauss-Newton SQP iteration from the warm start.

    Returns the first input of the updated trajectory. On QP failure the
    warm start is returned unchanged with status FAILED together with the
    previously applied input.
    """
    problem.validate()
    x0 = _vector(x0)
    N, nx, nu = problem.N, problem.nx, problem.nu
    if warm.xs.shape != (N + 1, nx) or warm.us.shape != (N, nu) or x0.shape != (nx,):
        raise SolverError(f"warm start {warm.xs.shape}/{warm.us.shape} does not match "
                          f"horizon {N} with nx={nx}, nu={nu}")
    started = time.perf_counter()
    X, U = warm.xs, warm.us

    f, A, B = problem.dynamics.linearize(X[:-1], U)
    M, S = _condense(A, B, f - X[1:], x0 - X[0])
    P, q, G, h, n_slack = _build_qp(problem, X, U, M, S, settings)
    result = solve_qp(P, q, G, h, settings)
    elapsed = time.perf_counter() - started

    previous = warm.last_input if warm.last_input is not None else U[0]
    if result.status != QpStatus.SOLVED:
        logger.warning("RTI step failed (KKT residual %.3e); holding previous input", result.kkt_residual)
        return previous.copy(), replace(warm, status=QpStatus.FAILED, kkt_residual=result.kkt_residual,
                                        qp_iterations=result.iterations, solve_time=elapsed)

    nv = N * nu
    dU = result.x[:nv]
    dX = M + S @ dU
    us = U + dU.reshape(N, nu)
    xs = X + dX
    u0 = us[0].copy()
    logger.debug("RTI step |du|=%.3e slack=%.3e kkt=%.2e in %.1f ms", np.linalg.norm(dU),
                 np.sum(result.x[nv:]), result.kkt_residual, 1e3 * elapsed)
    state = SolverState(xs=xs, us=us, duals=result.z, slacks=result.x[nv:], status=QpStatus.SOLVED,
                        last_input=u0, rti_iterations=warm.rti_iterations + 1,
                        qp_iterations=result.iterations, kkt_residual=result.kkt_residual,
                        step_norm=float(np.linalg.norm(result.x[:nv])), solve_time=elapsed)
    return u0, state
