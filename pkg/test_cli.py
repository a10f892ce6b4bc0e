#!/usr/bin/env python3
"""
Test script for the command-line entry point and its exit codes
"""

import json
import textwrap

import numpy as np
import pytest

import cli
from cli import EXIT_FAILED, EXIT_INPUT, EXIT_OK, build_parser, main
from core.feasibility import WindowSearchResult

SCENARIO = """\
    schema_version: 1
    scenario:
      start: [0.0, 0.0]
      m_L: 0.1
      windows:
        grasp: [6.0, 12.0]
        placement: [14.0, 26.0]
    """

SHORT_CONTROLLER = """\
    schema_version: 1
    sim:
      t_max: 0.3
    """


def _write(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body), encoding="utf-8")
    return str(path)


def test_run_then_report(tmp_path):
    scenario = _write(tmp_path, "short.yaml", SCENARIO)
    controller = _write(tmp_path, "controller.yaml", SHORT_CONTROLLER)
    out = tmp_path / "out"
    # no grasp within 0.3 s, so the run is reported as failed
    code = main(["run", "--scenario", scenario, "--config", controller, "--out", str(out)])
    assert code == EXIT_FAILED
    assert (out / "short_ramp" / "steps.csv").is_file()
    assert (out / "short_ramp" / "summary.json").is_file()

    assert main(["report", "--out", str(out)]) == EXIT_OK
    assert (out / "report" / "trajectory_short_ramp.csv").is_file()
    assert (out / "report" / "estimation.csv").is_file()


def test_invalid_scenario_is_an_input_error(tmp_path):
    scenario = _write(tmp_path, "bad.yaml", SCENARIO.replace("      m_L: 0.1\n", ""))
    assert main(["run", "--scenario", scenario, "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["run", "--scenario", str(tmp_path / "absent.yaml"), "--out", str(tmp_path)]) == EXIT_INPUT


def test_report_without_runs_is_an_input_error(tmp_path):
    assert main(["report", "--runs", str(tmp_path / "nothing"), "--out", str(tmp_path)]) == EXIT_INPUT


def test_empty_batch_and_bad_job_count(tmp_path):
    assert main(["batch", "--n", "0", "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["batch", "--jobs", "0", "--out", str(tmp_path)]) == EXIT_INPUT


def test_windows_writes_certificates_and_reports_empty_sets(tmp_path, monkeypatch):
    def grasp(search, cfg, controller, jobs):
        return WindowSearchResult(kind='grasp', feasible=True, T_hi_max=12.0, T_lo_star=6.2, T_hi_star=11.4,
                                  worst_scenario=np.array([0.5, 0.1, 0.4]), nu_star=-0.02, evaluations=50)

    def placement(search, cfg, controller, jobs):
        return WindowSearchResult(kind='placement', feasible=False, T_hi_max=14.0, T_lo_star=0.0,
                                  advice="no admissible placement window")

    monkeypatch.setattr(cli, "grasp_window_search", grasp)
    monkeypatch.setattr(cli, "placement_window_search", placement)
    out = tmp_path / "out"
    assert main(["windows", "--kind", "grasp", "--out", str(out)]) == EXIT_OK
    record = json.loads((out / "windows" / "grasp.json").read_text(encoding="utf-8"))
    assert record['T_g_lo_star'] == pytest.approx(6.2)
    assert record['width_lower_bound'] == pytest.approx(5.2)
    assert main(["windows", "--out", str(out)]) == EXIT_FAILED
    assert (out / "windows" / "placement.json").is_file()


SMALL_SEARCH = """\
    schema_version: 1
    seed: 0
    eps_T: 0.1
    validation_samples: 2
    bo:
      budget: 6
      n_init: 3
      restarts: 2
    """


def test_windows_with_a_worst_case_violation_exit_failed(tmp_path, monkeypatch):
    import core.feasibility as feasibility

    class Timing:
        def __call__(self, problem):
            return lambda x: getattr(problem, 'T_lo', 0.0) + 1.0 + float(x[0])

    class Violation:
        def __init__(self, problem, until_step=None):
            pass

        def __call__(self, x):
            return 0.5

    monkeypatch.setattr(feasibility, "EventTime", Timing())
    monkeypatch.setattr(feasibility, "WorstViolation", Violation)
    search = _write(tmp_path, "search.yaml", SMALL_SEARCH)
    out = tmp_path / "out"
    assert main(["windows", "--kind", "placement", "--search", search, "--out", str(out)]) == EXIT_FAILED
    record = json.loads((out / "windows" / "placement.json").read_text(encoding="utf-8"))
    assert record['feasible'] is False
    assert record['nu_p_star'] == pytest.approx(0.5)
    assert len(record['violation_witness']) == 4


def test_runtime_errors_are_failures_not_input_errors(tmp_path, monkeypatch):
    scenario = _write(tmp_path, "short.yaml", SCENARIO)

    def broken(scn, variant, cfg):
        raise np.linalg.LinAlgError("singular matrix")

    monkeypatch.setattr(cli, "run_closed_loop", broken)
    assert main(["run", "--scenario", scenario, "--out", str(tmp_path)]) == EXIT_FAILED

    def bad_value(scn, variant, cfg):
        raise ValueError("step size mismatch")

    monkeypatch.setattr(cli, "run_closed_loop", bad_value)
    assert main(["run", "--scenario", scenario, "--out", str(tmp_path)]) == EXIT_FAILED


def test_parser_requires_a_scenario_for_run():
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["run"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        build_parser().parse_args(["windows", "--kind", "sideways"])
    args = build_parser().parse_args(["windows"])
    assert args.kind == "both" and args.jobs == 1
