#!/usr/bin/env python3
"""
Test script for closed-loop simulation, scenario sampling and batch studies
"""

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from core.config import SCENARIO_DIR, HookcarryConfig, load_scenario
from core.controller import ControllerConfig, MpcController
from core.phases import TimeWindows
from core.scenario import Scenario, SimSettings, derive_seeds, sample_scenarios, with_deviation
from core.sim import (INPUT_COLUMNS, STATE_COLUMNS, EllipsoidSampler, RunStatus, _status, batch_run,
                      deviation_study, deviation_table, run_closed_loop, summarize, timing_overhead)

WINDOWS = TimeWindows(6.0, 12.0, 14.0, 26.0)
SHORT = HookcarryConfig(sim=SimSettings(t_max=0.5))


def _scenario(**kwargs):
    base = dict(m_L=0.1, windows=WINDOWS, start_xy=(0.0, 0.0), s_g=0.0, v_g=0.5, seed=3, name="short")
    base.update(kwargs)
    return Scenario(**base)


def test_ellipsoid_sampler_stays_inside_and_hits_the_boundary():
    W = np.diag([4.0, 1.0, 0.25])
    sampler = EllipsoidSampler(W, p_boundary=0.1)
    rng = np.random.default_rng(0)
    w = np.array([sampler.sample(rng) for _ in range(4000)])
    q = np.einsum('ni,ij,nj->n', w, np.linalg.inv(W), w)
    assert np.all(q <= 1.0 + 1e-12)
    assert 0.07 < np.mean(q > 1.0 - 1e-9) < 0.13


def test_ellipsoid_sampler_consumes_a_fixed_number_of_draws():
    W = np.eye(3)
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    EllipsoidSampler(W, p_boundary=0.0).sample(a)
    EllipsoidSampler(W, p_boundary=1.0).sample(b)
    assert a.random() == b.random()


def test_status_precedence():
    args = dict(windows=WINDOWS, tol=1e-3, need_grasp=True, need_place=True)
    assert _status(7.0, 15.0, failures=2, violation=0.01, **args) == RunStatus.CONSTRAINT_VIOLATION
    assert _status(7.0, 15.0, failures=2, violation=5e-4, **args) == RunStatus.SOLVER_FAIL
    assert _status(None, None, failures=0, violation=0.0, **args) == RunStatus.DEADLINE_MISS
    assert _status(13.0, 15.0, failures=0, violation=0.0, **args) == RunStatus.DEADLINE_MISS
    assert _status(7.0, 15.0, failures=0, violation=0.0, **args) == RunStatus.SUCCESS
    assert _status(7.0, None, 0, 0.0, WINDOWS, 1e-3, True, False) == RunStatus.SUCCESS


def test_short_run_logs_every_step():
    result = run_closed_loop(_scenario(), "ramp", SHORT)
    assert result.n_steps == 11
    assert result.states.shape == (11, 16) and result.inputs.shape == (11, 4)
    np.testing.assert_allclose(result.times, 0.05 * np.arange(11))
    assert np.all(result.phases == 1)
    assert result.T_g is None and not result.success
    frame = result.to_frame()
    assert list(frame.columns[:17]) == ['t'] + STATE_COLUMNS
    assert list(frame.columns[17:21]) == INPUT_COLUMNS
    assert 'solve_time' not in frame.columns
    assert len(result.timing_frame()) == 11
    assert result.summary()['steps'] == 11


def test_runs_are_reproducible_from_the_seed():
    first = run_closed_loop(_scenario(), "ramp", SHORT).to_frame()
    second = run_closed_loop(_scenario(), "ramp", SHORT).to_frame()
    pd.testing.assert_frame_equal(first, second)


def test_disturbances_stay_in_the_bound():
    result = run_closed_loop(_scenario(seed=11), "nominal", SHORT)
    W = SHORT.controller.uncertainty.W_w
    q = np.einsum('ni,ij,nj->n', result.disturbances, np.linalg.inv(W), result.disturbances)
    assert len(q) == result.n_steps
    assert np.all(q <= 1.0 + 1e-9)


def test_robust_controller_without_uncertainty_matches_nominal():
    cfg = HookcarryConfig(controller=ControllerConfig().zero_uncertainty(), sim=SimSettings(t_max=0.5))
    robust = run_closed_loop(_scenario(), "ramp", cfg)
    nominal = run_closed_loop(_scenario(), "nominal", cfg)
    np.testing.assert_allclose(robust.inputs, nominal.inputs, rtol=0.0, atol=1e-10)
    np.testing.assert_allclose(robust.states, nominal.states, rtol=0.0, atol=1e-10)
    assert all(d.max_backoff == 0.0 for d in robust.diagnostics)


def test_missed_grasp_deadline_is_reported():
    windows = TimeWindows(0.0, 0.2, 0.3, 0.4)
    cfg = HookcarryConfig(sim=SimSettings(t_max=0.6))
    result = run_closed_loop(_scenario(windows=windows), "ramp", cfg)
    assert result.grasp_deadline_missed
    assert result.status in (RunStatus.DEADLINE_MISS, RunStatus.SOLVER_FAIL, RunStatus.CONSTRAINT_VIOLATION)
    stopped = run_closed_loop(_scenario(windows=windows), "ramp", cfg, stop_on_deadline=True)
    assert stopped.n_steps == 5


def test_window_step_must_match_the_controller():
    with pytest.raises(ValueError, match="dt"):
        run_closed_loop(_scenario(windows=TimeWindows(6.0, 12.0, 14.0, 26.0, dt=0.1)), "ramp", SHORT)


def test_unknown_controller_is_rejected():
    with pytest.raises(ValueError, match="unknown controller"):
        MpcController("fancy", ControllerConfig(), [0.1])


def test_failing_scenarios_become_error_rows():
    bad = _scenario(windows=TimeWindows(6.0, 12.0, 14.0, 26.0, dt=0.1), name="bad")
    summary = batch_run([bad, bad], "ramp", SHORT)
    assert list(summary.rows['status']) == ['ERROR', 'ERROR']
    assert summary.success_rate == 0.0
    assert summary.mean_cost is None
    with pytest.raises(ValueError):
        batch_run([], "ramp", SHORT)


def test_scenario_sampling_is_seeded():
    a = sample_scenarios(5, 42, WINDOWS)
    b = sample_scenarios(5, 42, WINDOWS)
    c = sample_scenarios(5, 43, WINDOWS)
    assert [s.as_dict() for s in a] == [s.as_dict() for s in b]
    assert [s.p_xy for s in a] != [s.p_xy for s in c]
    assert len(set(derive_seeds(42, 5))) == 5
    for s in a:
        assert 0.4 <= s.v_g <= 0.6 and 0.05 <= s.m_L <= 0.2
        assert s.dropoff_phase == pytest.approx((s.s_g + 0.5) % 1.0)
    with pytest.raises(ValueError):
        sample_scenarios(0, 42, WINDOWS)


def test_mass_deviation_scales_only_the_plant():
    heavy = with_deviation([_scenario(m_L=0.1)], 0.5)[0]
    assert heavy.true_mass == pytest.approx(0.15)
    assert heavy.nominal_mass == pytest.approx(0.1)
    assert replace(heavy, m_L_prior=0.07).nominal_mass == pytest.approx(0.07)
    with pytest.raises(ValueError):
        _scenario(mass_deviation=-1.0)
    with pytest.raises(ValueError):
        _scenario(p_xy=1.5)


def _row(index, deviation, controller, status, cost, solve_time):
    return {'index': index, 'mass_deviation': deviation, 'controller': controller, 'status': status,
            'cost': cost, 'solve_time_mean': solve_time}


def test_deviation_table_compares_commonly_solved_runs():
    rows = pd.DataFrame([
        _row(0, 0.1, 'nominal', 'SUCCESS', 10.0, 0.01),
        _row(0, 0.1, 'ramp', 'SUCCESS', 12.0, 0.02),
        _row(1, 0.1, 'nominal', 'DEADLINE_MISS', 50.0, 0.01),
        _row(1, 0.1, 'ramp', 'SUCCESS', 20.0, 0.02),
        _row(0, -0.1, 'nominal', 'SUCCESS', 8.0, 0.01),
        _row(0, -0.1, 'ramp', 'SUCCESS', 9.0, 0.02),
    ])
    table = deviation_table(rows).set_index('controller')
    assert set(table['deviation_pct']) == {10.0}
    assert table.loc['nominal', 'runs'] == 3
    assert table.loc['nominal', 'success_rate'] == pytest.approx(200.0 / 3.0)
    assert table.loc['ramp', 'success_rate'] == pytest.approx(100.0)
    assert table.loc['nominal', 'avg_cost'] == pytest.approx(9.0)
    assert table.loc['ramp', 'avg_cost'] == pytest.approx(10.5)
    assert timing_overhead(table.reset_index()) == pytest.approx(0.01)


def test_summary_of_mixed_rows():
    rows = [
        {'index': 1, 'status': 'SUCCESS', 'cost': 4.0, 'solve_time_mean': 0.02, 'solve_time_p95': 0.03,
         'solve_time_max': 0.05},
        {'index': 0, 'status': 'ERROR', 'error': 'boom'},
    ]
    summary = summarize(rows)
    assert list(summary.rows['index']) == [0, 1]
    assert summary.success_rate == pytest.approx(50.0)
    assert summary.mean_cost == pytest.approx(4.0)
    assert summary.timing['solve_time_mean'] == pytest.approx(0.02)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["representative_1", "representative_2", "representative_3"])
def test_representative_scenarios_run_to_completion(name):
    scn = load_scenario(SCENARIO_DIR / f"{name}.yaml")
    result = run_closed_loop(scn, "ramp", HookcarryConfig())
    assert isinstance(result.status, RunStatus)
    if result.T_g is not None:
        assert scn.windows.T_g_lo <= result.T_g <= scn.windows.T_g_hi + 1e-9
        assert np.all(result.phases[result.times > result.T_g] >= 3)
    if result.success:
        assert result.T_p is not None and result.max_violation() <= result.constraint_tol


@pytest.mark.slow
def test_small_deviation_study():
    scenarios = sample_scenarios(2, 1, WINDOWS)
    rows, table = deviation_study(scenarios, [0.0, 0.5], HookcarryConfig())
    assert len(rows) == 2 * 2 * 2
    assert set(table['controller']) == {'nominal', 'ramp'}
    assert set(table['deviation_pct']) == {0.0, 50.0}
