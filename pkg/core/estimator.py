"""
EKF for the uncertain parameters (payload mass) with random-walk parameter
dynamics, plus the chi-squared conversions between ellipsoidal bounds and
Gaussian covariances.
"""
import logging
from dataclasses import dataclass, replace
from typing import Any, Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import gammainc, gammaincinv, gammaln

from .dynamics import DEFAULT_PARAMS, ModelParams, fd_steps, predictive_step
from .zoro import UncertaintyConfig, _psd

logger = logging.getLogger(__name__)

Model = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def chi2_inv(n: int, alpha: float) -> float:
    """Quantile of the chi-squared distribution with n degrees of freedom."""
    if int(n) != n or n < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {n}")
    _check_alpha(alpha)
    a = 0.5 * n
    x = 2.0 * float(gammaincinv(a, alpha))
    # Newton polish on the regularized lower incomplete gamma
    for _ in range(3):
        residual = gammainc(a, 0.5 * x) - alpha
        if residual == 0.0 or x <= 0.0:
            break
        pdf = np.exp((a - 1.0) * np.log(x) - 0.5 * x - a * np.log(2.0) - gammaln(a))
        if not pdf > 0:
            break
        x -= residual / pdf
    return float(x)


def bound_to_cov(W: Any, n: int, alpha: float) -> np.ndarray:
    """Covariance whose alpha-confidence ellipsoid is the bound W."""
    _check_alpha(alpha)
    return _psd(W, 'W') / chi2_inv(n, alpha)


def cov_to_bound(P: Any, n: int, alpha: float) -> np.ndarray:
    _check_alpha(alpha)
    return _psd(P, 'P') * chi2_inv(n, alpha)


@dataclass(frozen=True, eq=False)
class EkfState:
    theta_hat: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    sigma_w: Optional[np.ndarray] = None
    active: bool = False
    n_updates: int = 0

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta_hat, dtype=float))
        n = theta.size
        object.__setattr__(self, 'theta_hat', theta)
        object.__setattr__(self, 'P', _psd(self.P, 'P', n))
        object.__setattr__(self, 'Q', _psd(self.Q, 'Q', n))
        object.__setattr__(self, 'R', _psd(self.R, 'R'))
        if self.sigma_w is not None:
            object.__setattr__(self, 'sigma_w', _psd(self.sigma_w, 'sigma_w', self.R.shape[0]))

    @property
    def R_eff(self) -> np.ndarray:
        return self.R if self.sigma_w is None else self.R + self.sigma_w

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.P), 0.0, None))


def _theta_jacobian(model: Model, xi_prev: np.ndarray, u_prev: np.ndarray, theta: np.ndarray) -> np.ndarray:
    h = fd_steps(theta)
    cols = []
    for j in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[j] += h[j]
        down[j] -= h[j]
        cols.append((model(xi_prev, u_prev, up) - model(xi_prev, u_prev, down)) / (up[j] - down[j]))
    return np.stack(cols, axis=-1)


def ekf_step(ekf: EkfState, xi_prev: Any, u_prev: Any, xi_meas: Any, phase: Any, dt: float,
             model: Optional[Model] = None, params: ModelParams = DEFAULT_PARAMS) -> EkfState:
    """
    One predict/update cycle with the measured state as output.

    Runs only in phases 3 and 4; otherwise the state is returned as is.
    """
    p = int(getattr(phase, 'p', phase))
    if p not in (3, 4):
        return ekf
    if model is None:
        def model(x, u, th):
            return predictive_step(x, u, th, p, dt, params)

    xi_prev = np.asarray(getattr(xi_prev, 'vector', xi_prev), dtype=float)
    u_prev = np.asarray(getattr(u_prev, 'vector', u_prev), dtype=float)
    xi_meas = np.asarray(getattr(xi_meas, 'vector', xi_meas), dtype=float)

    theta_m = ekf.theta_hat.copy()
    P_m = ekf.P + ekf.Q
    innovation = xi_meas - model(xi_prev, u_prev, theta_m)
    C = _theta_jacobian(model, xi_prev, u_prev, theta_m)
    R_eff = ekf.R_eff
    S = C @ P_m @ C.T + R_eff
    try:
        factor = cho_factor(S)
    except LinAlgError:
        logger.warning("EKF innovation covariance not invertible; skipping update")
        return replace(ekf, P=P_m, active=True)

    K = cho_solve(factor, C @ P_m).T
    theta = theta_m + K @ innovation
    theta[0] = max(theta[0], 0.0)
    I_KC = np.eye(theta.size) - K @ C
    P = I_KC @ P_m @ I_KC.T + K @ R_eff @ K.T
    P = 0.5 * (P + P.T)
    if np.linalg.eigvalsh(P).min() < 0:
        logger.warning("EKF covariance lost definiteness after update %d", ekf.n_updates + 1)
    return replace(ekf, theta_hat=theta, P=P, active=True, n_updates=ekf.n_updates + 1)


def sync_to_zoro(ekf: EkfState, cfg: UncertaintyConfig, alpha: Optional[float] = None) -> UncertaintyConfig:
    """theta_bar := theta_hat and W_theta := chi2 * P; W_w untouched."""
    if not ekf.active:
        return cfg
    alpha = cfg.alpha if alpha is None else alpha
    return replace(cfg, W_theta=cov_to_bound(ekf.P, ekf.theta_hat.size, alpha), theta_bar=ekf.theta_hat.copy())
