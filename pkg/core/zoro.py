"""
Zero-order robust optimization: ellipsoidal uncertainty propagation along the
nominal trajectory and the resulting constraint backoffs.
"""
import logging
from dataclasses import dataclass
from typing import Any, List, Optional

import numpy as np
from scipy.linalg import block_diag

from .solver import OcpProblem, SolverState

logger = logging.getLogger(__name__)

SYM_TOL = 1e-12
PSD_TOL = 1e-12


def _psd(M: Any, name: str, n: Optional[int] = None) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or (n is not None and M.shape[0] != n):
        raise ValueError(f"{name} must be square{f' of size {n}' if n else ''}, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    if np.max(np.abs(M - M.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(M), initial=0.0)):
        raise ValueError(f"{name} is not symmetric")
    M = 0.5 * (M + M.T)
    if M.size and np.linalg.eigvalsh(M).min() < -PSD_TOL * max(1.0, np.max(np.abs(M))):
        raise ValueError(f"{name} is not positive semidefinite")
    return M


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """Shape matrix of {x : (x - c)' shape^-1 (x - c) <= 1}; the center lives on the nominal trajectory."""
    shape: np.ndarray

    def __post_init__(self):
        S = _psd(self.shape, 'ellipsoid shape')
        w, V = np.linalg.eigh(S)
        if w.min(initial=0.0) < 0:
            S = (V * np.clip(w, 0.0, None)) @ V.T
            S = 0.5 * (S + S.T)
        object.__setattr__(self, 'shape', S)

    @property
    def dim(self) -> int:
        return self.shape.shape[0]

    def contains(self, x: np.ndarray, center: Optional[np.ndarray] = None) -> np.ndarray:
        """Membership for points (..., n); requires a non-singular shape."""
        d = np.atleast_2d(np.asarray(x, dtype=float) - (0.0 if center is None else center))
        q = np.einsum('mi,mi->m', d, np.linalg.solve(self.shape, d.T).T)
        return q <= 1.0


@dataclass(frozen=True, eq=False)
class UncertaintyConfig:
    """Parameter bound W_theta around theta_bar, disturbance bound W_w, initial bound Sigma_bar."""
    W_theta: np.ndarray
    W_w: np.ndarray
    Sigma_bar: np.ndarray
    alpha: float = 0.95
    theta_bar: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        object.__setattr__(self, 'W_theta', _psd(self.W_theta, 'W_theta'))
        object.__setattr__(self, 'W_w', _psd(self.W_w, 'W_w'))
        object.__setattr__(self, 'Sigma_bar', _psd(self.Sigma_bar, 'Sigma_bar'))
        if self.W_w.shape != self.Sigma_bar.shape:
            raise ValueError("W_w and Sigma_bar must both be n_x by n_x")
        if self.theta_bar is not None:
            theta = np.atleast_1d(np.asarray(self.theta_bar, dtype=float))
            if theta.shape != (self.n_theta,):
                raise ValueError(f"theta_bar must have {self.n_theta} entries")
            object.__setattr__(self, 'theta_bar', theta)

    @property
    def n_theta(self) -> int:
        return self.W_theta.shape[0]

    @property
    def W(self) -> np.ndarray:
        return block_diag(self.W_theta, self.W_w)

    @classmethod
    def zero(cls, n_theta: int = 1, nx: int = 16, alpha: float = 0.95) -> "UncertaintyConfig":
        return cls(np.zeros((n_theta, n_theta)), np.zeros((nx, nx)), np.zeros((nx, nx)), alpha)


@dataclass(frozen=True, eq=False)
class Backoffs:
    state: np.ndarray
    nonlinear: np.ndarray
    sigmas: np.ndarray

    @property
    def max(self) -> float:
        return float(max(np.max(self.state, initial=0.0), np.max(self.nonlinear, initial=0.0)))


def propagate(sigma: Ellipsoid, W: np.ndarray, A: np.ndarray, G: np.ndarray) -> Ellipsoid:
    """A sigma A' + G W G'."""
    S = sigma.shape
    if A.shape != (S.shape[0], S.shape[0]) or G.shape != (S.shape[0], W.shape[0]):
        raise ValueError(f"propagation dimensions A{A.shape} G{G.shape} sigma{S.shape} W{W.shape} mismatch")
    out = A @ S @ A.T + G @ W @ G.T
    return Ellipsoid(0.5 * (out + out.T))


def backoff(grad_g: Any, sigma: Ellipsoid) -> float:
    """sqrt(grad' sigma grad)."""
    grad = np.asarray(grad_g, dtype=float)
    radicand = float(grad @ sigma.shape @ grad)
    if radicand < -PSD_TOL:
        raise ValueError(f"negative backoff radicand {radicand:.3e}: shape not PSD")
    return float(np.sqrt(max(radicand, 0.0)))


def propagate_along(A: np.ndarray, G: np.ndarray, W: np.ndarray, Sigma_bar: np.ndarray) -> List[Ellipsoid]:
    """Sigma_0 = Sigma_bar, Sigma_{i+1} = propagate(Sigma_i); N + 1 ellipsoids."""
    sigmas = [Ellipsoid(Sigma_bar)]
    for i in range(len(A)):
        sigmas.append(propagate(sigmas[-1], W, A[i], G[i]))
    return sigmas


def compute_backoffs(traj: SolverState, problem: OcpProblem, cfg: UncertaintyConfig,
                     phase: Any = None) -> Backoffs:
    """
    Backoffs for every stage 0..N from the uncertainty propagated along traj.

    State-bound rows have gradient +-e_m, so their backoff is sqrt(Sigma_mm)
    for both the upper and the lower row.
    """
    A, G = problem.dynamics.sensitivities(traj.xs[:-1], traj.us)
    W = cfg.W
    if G.shape[2] != W.shape[0]:
        raise ValueError(f"G has {G.shape[2]} columns but W is {W.shape[0]} wide")
    sigmas = np.stack([s.shape for s in propagate_along(A, G, W, cfg.Sigma_bar)])
    state = np.sqrt(np.clip(np.einsum('imm->im', sigmas), 0.0, None))
    n_g = problem.constraints.n_g
    if n_g:
        _, jac = problem.constraints.evaluate(traj.xs)
        radicand = np.einsum('igx,ixy,igy->ig', jac, sigmas, jac)
        if np.any(radicand < -PSD_TOL):
            raise ValueError("negative backoff radicand")
        nonlinear = np.sqrt(np.clip(radicand, 0.0, None))
    else:
        nonlinear = np.zeros((len(sigmas), 0))
    if phase is not None:
        logger.debug("phase %s backoffs: state max %.4f, nonlinear max %.4f", getattr(phase, 'p', phase),
                     state.max(), np.max(nonlinear, initial=0.0))
    return Backoffs(state=state, nonlinear=nonlinear, sigmas=sigmas)
