#!/usr/bin/env python3
"""
Test script for the condensed RTI solver
"""

import itertools

import numpy as np
import pytest

from core.errors import SolverError
from core.ocp import NoConstraints
from core.solver import (OcpProblem, QpStatus, SolverSettings, SolverState, kkt_residual, rti_step,
                         shift_warmstart, solve_qp)


class LinearDynamics:
    def __init__(self, A, B):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)

    def linearize(self, xs, us):
        n = len(xs)
        f = xs @ self.A.T + us @ self.B.T
        return f, np.tile(self.A, (n, 1, 1)), np.tile(self.B, (n, 1, 1))


class QuadraticCost:
    """sum_i x_i'Qx_i + u_i'Ru_i over stages 0..N-1."""

    def __init__(self, Q, R):
        self.Q = np.asarray(Q, dtype=float)
        self.R = np.asarray(R, dtype=float)

    def gauss_newton(self, xs, us):
        n = len(xs)
        return (np.tile(2 * self.Q, (n, 1, 1)), np.tile(2 * self.R, (n, 1, 1)),
                2 * xs @ self.Q, 2 * us @ self.R)


def _problem(A, B, Q, R, N, u_lb, u_ub, x_lb=None, x_ub=None):
    nx = len(A)
    return OcpProblem(N=N, dynamics=LinearDynamics(A, B), cost=QuadraticCost(Q, R),
                      x_lb=np.full(nx, -np.inf) if x_lb is None else np.asarray(x_lb, dtype=float),
                      x_ub=np.full(nx, np.inf) if x_ub is None else np.asarray(x_ub, dtype=float),
                      u_lb=np.asarray(u_lb, dtype=float), u_ub=np.asarray(u_ub, dtype=float),
                      constraints=NoConstraints())


def _riccati_first_gain(A, B, Q, R, N):
    P = np.zeros_like(Q)
    K = None
    for _ in range(N):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ A - A.T @ P @ B @ K
    return K


def test_unconstrained_step_matches_finite_horizon_lqr():
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1]])
    Q = np.diag([1.0, 0.1])
    R = np.array([[0.01]])
    N = 20
    x0 = np.array([1.0, -0.5])
    problem = _problem(A, B, Q, R, N, [-1e3], [1e3])
    u0, state = rti_step(problem, x0, SolverState.hover_hold(np.zeros(2), np.zeros(1), N))
    assert state.status == QpStatus.SOLVED
    np.testing.assert_allclose(u0, -_riccati_first_gain(A, B, Q, R, N) @ x0, rtol=1e-5, atol=1e-6)
    # the predicted trajectory obeys the dynamics
    np.testing.assert_allclose(state.xs[1:], state.xs[:-1] @ A.T + state.us @ B.T, atol=1e-9)
    np.testing.assert_allclose(state.xs[0], x0, atol=1e-12)


def _brute_force(x0, N, u_max):
    """Scalar integrator x+ = x + u: enumerate every active set of the input box."""
    # x_i = x0 + L u with L lower-triangular ones shifted by one stage
    L = np.tril(np.ones((N, N)), -1)
    H = 2 * (L.T @ L + np.eye(N))
    g = 2 * L.T @ (x0 * np.ones(N))
    best, best_u = np.inf, None
    for pattern in itertools.product((-1, 0, 1), repeat=N):
        pattern = np.array(pattern)
        fixed = pattern != 0
        u = np.where(fixed, pattern * u_max, 0.0)
        free = ~fixed
        if free.any():
            rhs = -(g[free] + H[np.ix_(free, fixed)] @ u[fixed])
            u[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        if np.any(np.abs(u) > u_max + 1e-12):
            continue
        value = 0.5 * u @ H @ u + g @ u
        if value < best:
            best, best_u = value, u
    return best_u


@pytest.mark.parametrize("x0", [5.0, 0.3, -0.15])
def test_input_bounded_step_matches_active_set_enumeration(x0):
    N, u_max = 4, 0.2
    problem = _problem([[1.0]], [[1.0]], [[1.0]], [[1.0]], N, [-u_max], [u_max])
    _, state = rti_step(problem, np.array([x0]), SolverState.hover_hold(np.zeros(1), np.zeros(1), N))
    assert state.status == QpStatus.SOLVED
    np.testing.assert_allclose(state.us[:, 0], _brute_force(x0, N, u_max), atol=1e-6)


def test_infeasible_state_bounds_are_softened_by_slacks():
    N = 5
    problem = _problem([[1.0]], [[1.0]], [[1.0]], [[1.0]], N, [-0.1], [0.1], x_lb=[-np.inf], x_ub=[0.5])
    u0, state = rti_step(problem, np.array([1.0]), SolverState.hover_hold(np.array([1.0]), np.zeros(1), N))
    assert state.status == QpStatus.SOLVED
    assert np.sum(state.slacks) > 0.0
    # the L1 penalty pushes as hard as the input bound allows
    assert u0[0] == pytest.approx(-0.1, abs=1e-6)


def test_qp_failure_holds_the_previous_input():
    N = 3
    problem = _problem([[1.0]], [[1.0]], [[1.0]], [[1.0]], N, [-1.0], [1.0])
    warm = SolverState.hover_hold(np.zeros(1), np.array([0.25]), N)
    u0, state = rti_step(problem, np.array([0.5]), warm, SolverSettings(qp_backend="no_such_solver"))
    assert state.status == QpStatus.FAILED
    np.testing.assert_allclose(u0, [0.25])
    np.testing.assert_allclose(state.xs, warm.xs)
    np.testing.assert_allclose(state.us, warm.us)


def test_inconsistent_problems_are_rejected():
    with pytest.raises(SolverError):
        _problem([[1.0]], [[1.0]], [[1.0]], [[1.0]], 3, [1.0], [-1.0]).validate()
    with pytest.raises(SolverError):
        _problem([[1.0]], [[1.0]], [[1.0]], [[1.0]], 0, [-1.0], [1.0]).validate()
    problem = _problem([[1.0]], [[1.0]], [[1.0]], [[1.0]], 3, [-1.0], [1.0])
    with pytest.raises(SolverError):
        rti_step(problem, np.zeros(1), SolverState.hover_hold(np.zeros(1), np.zeros(1), 4))
    with pytest.raises(SolverError):
        problem.with_backoffs(-np.ones((4, 1)), np.zeros((4, 0))).validate()


def test_shift_warmstart_repeats_the_last_stage():
    state = SolverState(xs=np.arange(4.0)[:, None], us=np.arange(3.0)[:, None])
    shifted = shift_warmstart(state)
    np.testing.assert_allclose(shifted.xs[:, 0], [1, 2, 3, 3])
    np.testing.assert_allclose(shifted.us[:, 0], [1, 2, 2])


def test_dense_qp_and_kkt_residual():
    P = np.diag([2.0, 2.0])
    q = np.array([-2.0, -5.0])
    G = np.array([[0.0, 1.0]])
    h = np.array([1.0])
    result = solve_qp(P, q, G, h, SolverSettings(regularization=0.0))
    assert result.status == QpStatus.SOLVED
    np.testing.assert_allclose(result.x, [1.0, 1.0], atol=1e-8)
    np.testing.assert_allclose(result.z, [3.0], atol=1e-8)
    assert kkt_residual(P, q, G, h, np.array([1.0, 1.0]), np.array([3.0])) == pytest.approx(0.0, abs=1e-14)
    assert kkt_residual(P, q, G, h, np.array([1.0, 2.0]), np.array([0.0])) > 0.1

    unconstrained = solve_qp(P, q)
    np.testing.assert_allclose(unconstrained.x, [1.0, 2.5], atol=1e-6)


def test_kkt_residual_is_not_diluted_by_large_penalties():
    P = np.eye(1)
    q = np.array([1e4])
    empty = np.zeros((0, 1))
    assert kkt_residual(P, q, empty, np.zeros(0), np.array([-1e4 + 5e-4]), np.zeros(0)) == pytest.approx(5e-4)

    # the same bound-constrained problem with every entry scaled by 1e4 still solves to tolerance
    P = np.diag([2.0, 2.0])
    q = np.array([-2e4, -5e4])
    G = np.array([[0.0, 1.0]])
    h = np.array([1e4])
    result = solve_qp(P, q, G, h, SolverSettings(regularization=0.0))
    assert result.status == QpStatus.SOLVED
    assert result.kkt_residual <= 1e-7
    np.testing.assert_allclose(result.x, [1e4, 1e4], rtol=1e-10)
    np.testing.assert_allclose(result.z, [3e4], rtol=1e-10)


def _box_qp_by_enumeration(P, q, lb, ub):
    """Minimizer of 1/2 x'Px + q'x over lb <= x <= ub from every active pattern."""
    n = len(q)
    best, best_x = np.inf, None
    for pattern in itertools.product((-1, 0, 1), repeat=n):
        pattern = np.array(pattern)
        fixed = pattern != 0
        x = np.where(pattern < 0, lb, np.where(pattern > 0, ub, 0.0))
        free = ~fixed
        if free.any():
            rhs = -(q[free] + P[np.ix_(free, fixed)] @ x[fixed])
            x[free] = np.linalg.solve(P[np.ix_(free, free)], rhs)
        if np.any(x < lb - 1e-12) or np.any(x > ub + 1e-12):
            continue
        value = 0.5 * x @ P @ x + q @ x
        if value < best:
            best, best_x = value, x
    return best_x


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_random_box_qps_match_active_set_enumeration(n):
    rng = np.random.default_rng(100 + n)
    settings = SolverSettings(regularization=0.0)
    for _ in range(34):
        M = rng.standard_normal((n, n))
        P = M @ M.T + 0.1 * np.eye(n)
        q = 3.0 * rng.standard_normal(n)
        lb = -rng.uniform(0.1, 1.0, n)
        ub = rng.uniform(0.1, 1.0, n)
        G = np.vstack([np.eye(n), -np.eye(n)])
        h = np.concatenate([ub, -lb])
        result = solve_qp(P, q, G, h, settings)
        assert result.status == QpStatus.SOLVED
        assert result.kkt_residual <= settings.kkt_tol
        np.testing.assert_allclose(result.x, _box_qp_by_enumeration(P, q, lb, ub), atol=1e-7)


def test_inaccurate_backend_solutions_are_polished_on_their_active_set(monkeypatch):
    from types import SimpleNamespace

    import core.solver as solver

    def sloppy(problem, solver=None):
        return SimpleNamespace(found=True, x=np.array([1.0 + 1e-5, 1.0 - 1e-6]), z=np.array([3.0 + 1e-5]),
                               extras={})

    monkeypatch.setattr(solver, "solve_problem", sloppy)
    P = np.diag([2.0, 2.0])
    q = np.array([-2.0, -5.0])
    G = np.array([[0.0, 1.0]])
    h = np.array([1.0])
    result = solve_qp(P, q, G, h, SolverSettings(regularization=0.0))
    assert result.status == QpStatus.SOLVED
    np.testing.assert_allclose(result.x, [1.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(result.z, [3.0], atol=1e-12)

    def wrong(problem, solver=None):
        return SimpleNamespace(found=True, x=np.array([0.0, 0.0]), z=np.array([-1.0]), extras={})

    monkeypatch.setattr(solver, "solve_problem", wrong)
    assert solve_qp(P, q, G, h, SolverSettings(regularization=0.0)).status == QpStatus.FAILED
