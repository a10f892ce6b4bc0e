#!/usr/bin/env python3
"""
Test script for ellipsoidal uncertainty propagation and constraint backoffs
"""

import numpy as np
import pytest

from core.controller import ControllerConfig, default_disturbance_bound
from core.dynamics import ControlInput, GeneralizedState
from core.estimator import bound_to_cov
from core.ocp import ReferenceAux, ReferenceProvider, assemble
from core.platforms import PaperclipPath, PlatformTrajectory
from core.solver import SolverState
from core.zoro import (Ellipsoid, UncertaintyConfig, backoff, compute_backoffs, propagate,
                       propagate_along)


def test_backoff_is_the_support_function_radius():
    assert backoff([1.0, 2.0], Ellipsoid(np.eye(2))) == pytest.approx(np.sqrt(5.0))
    assert backoff([0.0, 0.0], Ellipsoid(np.eye(2))) == 0.0
    assert backoff([3.0, 0.0], Ellipsoid(np.diag([4.0, 1.0]))) == pytest.approx(6.0)


def test_propagation_formula():
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    G = np.array([[0.0], [1.0]])
    W = np.array([[0.5]])
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    out = propagate(Ellipsoid(S), W, A, G)
    np.testing.assert_allclose(out.shape, A @ S @ A.T + G @ W @ G.T)
    with pytest.raises(ValueError):
        propagate(Ellipsoid(S), W, np.eye(3), G)


def test_zero_uncertainty_propagates_to_zero():
    A = np.tile(np.eye(3), (4, 1, 1))
    G = np.tile(np.eye(3), (4, 1, 1))
    sigmas = propagate_along(A, G, np.zeros((3, 3)), np.zeros((3, 3)))
    assert len(sigmas) == 5
    assert all(np.all(s.shape == 0.0) for s in sigmas)


def test_propagated_shape_matches_monte_carlo_covariance():
    rng = np.random.default_rng(11)
    A = np.array([[1.0, 0.2, 0.0], [0.0, 0.9, 0.1], [0.1, 0.0, 0.8]])
    G = np.array([[0.5, 0.0], [0.0, 1.0], [0.2, 0.3]])
    S0 = np.diag([0.3, 0.2, 0.1])
    W = np.array([[0.4, 0.1], [0.1, 0.2]])
    predicted = propagate_along(np.stack([A, A]), np.stack([G, G]), W, S0)[-1].shape

    n = 400_000
    x = rng.multivariate_normal(np.zeros(3), S0, size=n)
    for _ in range(2):
        w = rng.multivariate_normal(np.zeros(2), W, size=n)
        x = x @ A.T + w @ G.T
    np.testing.assert_allclose(np.cov(x.T), predicted, rtol=0.03, atol=5e-3)


@pytest.mark.parametrize("alpha", [0.9, 0.95, 0.99])
def test_propagated_ellipsoids_contain_the_confidence_mass_at_every_stage(alpha):
    rng = np.random.default_rng(int(100 * alpha))
    A = np.array([[1.0, 0.1, 0.0], [0.0, 0.95, 0.1], [-0.05, 0.0, 0.9]])
    G = np.array([[0.1, 0.0], [1.0, 0.0], [0.0, 0.5]])
    S0 = np.array([[0.2, 0.05, 0.0], [0.05, 0.1, 0.0], [0.0, 0.0, 0.05]])
    W = np.array([[0.3, 0.05], [0.05, 0.1]])
    N = 6
    sigmas = propagate_along(np.stack([A] * N), np.stack([G] * N), W, S0)

    # samples whose alpha-confidence ellipsoids in the state space are S0 and the propagated shapes
    n = 100_000
    x = rng.multivariate_normal(np.zeros(3), bound_to_cov(S0, 3, alpha), size=n)
    w_cov = bound_to_cov(W, 3, alpha)
    for i in range(N + 1):
        assert sigmas[i].contains(x).mean() >= alpha - 0.02
        if i < N:
            x = x @ A.T + rng.multivariate_normal(np.zeros(2), w_cov, size=n) @ G.T


@pytest.mark.parametrize("seed", range(5))
def test_propagated_shape_is_monotone_in_the_disturbance_bound(seed):
    rng = np.random.default_rng(seed)
    N, nx, nw = 5, 4, 3
    A = 0.5 * rng.standard_normal((N, nx, nx)) + np.eye(nx)
    G = rng.standard_normal((N, nx, nw))
    M = rng.standard_normal((nw, nw))
    W_small = M @ M.T
    D = rng.standard_normal((nw, 2))
    W_large = W_small + D @ D.T
    S0 = np.diag(rng.uniform(0.0, 0.5, nx))
    small = propagate_along(A, G, W_small, S0)
    large = propagate_along(A, G, W_large, S0)
    for s, l in zip(small, large):
        gap = np.linalg.eigvalsh(l.shape - s.shape)
        assert gap.min() >= -1e-9 * max(1.0, np.abs(l.shape).max())


def test_invalid_shape_matrices_raise():
    with pytest.raises(ValueError):
        Ellipsoid(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        Ellipsoid(np.diag([1.0, -0.5]))
    with pytest.raises(ValueError):
        UncertaintyConfig(np.eye(1), np.eye(16), np.eye(16), alpha=1.0)
    with pytest.raises(ValueError):
        UncertaintyConfig(np.eye(1), np.eye(16), np.eye(3))


def test_ellipsoid_membership():
    E = Ellipsoid(np.diag([4.0, 1.0]))
    np.testing.assert_array_equal(E.contains(np.array([[2.0, 0.0], [0.0, 1.01], [1.0, 0.5]])),
                                  [True, False, True])


def _transport_problem():
    path = PaperclipPath()
    refs = ReferenceProvider(PlatformTrajectory(path, 0.0, 0.5), PlatformTrajectory(path, 0.5, 0.5), 0.05)
    cfg = ControllerConfig()
    xi = GeneralizedState.at_rest([0.0, 0.0, 1.5]).vector
    aux = ReferenceAux(r_L=np.array([0.0, 0.0, 1.0]))
    problem = assemble(3, 0, cfg.ocp.N, refs, cfg.bounds, cfg.cost, aux, [0.1], cfg.ocp)
    warm = SolverState.hover_hold(xi, ControlInput.hover(m_L=0.1).vector, cfg.ocp.N)
    return problem, warm, cfg


def test_backoffs_along_a_horizon():
    problem, warm, cfg = _transport_problem()
    uncertainty = UncertaintyConfig(W_theta=np.array([[3.8415e-3]]), W_w=default_disturbance_bound(),
                                    Sigma_bar=1e-4 * np.eye(16), theta_bar=np.array([0.1]))
    backoffs = compute_backoffs(warm, problem, uncertainty, phase=3)
    N = cfg.ocp.N
    assert backoffs.state.shape == (N + 1, 16)
    assert backoffs.nonlinear.shape == (N + 1, 1)
    np.testing.assert_allclose(backoffs.state[0], 1e-2)
    assert np.all(backoffs.state >= 0.0) and np.all(backoffs.nonlinear >= 0.0)
    # mass uncertainty keeps widening the vertical spread
    assert backoffs.state[-1, 2] > backoffs.state[1, 2]
    assert backoffs.max == pytest.approx(max(backoffs.state.max(), backoffs.nonlinear.max()))


def test_zero_uncertainty_gives_zero_backoffs():
    problem, warm, _ = _transport_problem()
    backoffs = compute_backoffs(warm, problem, UncertaintyConfig.zero())
    assert backoffs.max == 0.0
