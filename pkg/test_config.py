#!/usr/bin/env python3
"""
Test script for YAML configuration loading and validation
"""

import textwrap

import numpy as np
import pytest

from core.config import (CONTROLLER_PATH, MODEL_PATH, SCENARIO_DIR, SEARCH_PATH, load_config, load_controller,
                         load_model, load_scenario, load_search)
from core.controller import default_disturbance_bound
from core.errors import ConfigError


def _write(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body), encoding="utf-8")
    return path


def test_shipped_files_load():
    cfg = load_config(MODEL_PATH, CONTROLLER_PATH)
    assert cfg.dt == pytest.approx(0.05)
    assert cfg.controller.ocp.N == 25
    assert cfg.model.m_q == pytest.approx(0.605)
    np.testing.assert_allclose(cfg.controller.uncertainty.W_w, default_disturbance_bound())
    np.testing.assert_allclose(cfg.controller.cost.W_v, 0.1 * np.eye(8))
    assert cfg.sim.constraint_tol == pytest.approx(1e-3)
    assert cfg.sim.path.L_s == pytest.approx(2.5)

    search = load_search(SEARCH_PATH, cfg.dt)
    assert search.seed == 7
    assert search.bo.budget == 40
    assert search.grasp.bounds.shape == (3, 2)
    assert search.placement.bounds.shape == (4, 2)
    assert search.study.windows.T_p_hi == pytest.approx(26.0)
    assert 0.5 in search.study.deviations and -0.5 in search.study.deviations


@pytest.mark.parametrize("name, start, v, grasp, placement, mass", [
    ("representative_1", (2.0, -1.0), 0.4, (12.0, 15.5), (16.0, 23.0), 0.2),
    ("representative_2", (-2.0, -1.0), 0.5, (6.0, 10.0), (16.0, 22.0), 0.1),
    ("representative_3", (-2.0, 1.0), 0.6, (9.5, 13.5), (13.5, 19.0), 0.15),
])
def test_representative_scenarios(name, start, v, grasp, placement, mass):
    scn = load_scenario(SCENARIO_DIR / f"{name}.yaml")
    assert scn.name == name
    assert scn.start_xy == start
    assert scn.v_g == v and scn.dropoff_speed == v
    assert (scn.windows.T_g_lo, scn.windows.T_g_hi) == grasp
    assert (scn.windows.T_p_lo, scn.windows.T_p_hi) == placement
    assert scn.true_mass == pytest.approx(mass)
    assert scn.nominal_mass == pytest.approx(0.05)
    np.testing.assert_allclose(scn.start_position(), [start[0], start[1], 1.0])


SCENARIO = """\
    schema_version: 1
    scenario:
      p_xy: 0.3
      m_L: 0.1
      windows:
        grasp: [6.0, 12.0]
        placement: [14.0, 26.0]
    """


def test_minimal_scenario_takes_defaults(tmp_path):
    scn = load_scenario(_write(tmp_path, "mini.yaml", SCENARIO))
    assert scn.name == "mini"
    assert scn.p_xy == pytest.approx(0.3)
    assert scn.dropoff_phase == pytest.approx(0.5)
    assert scn.seed == 0


def test_missing_mass_is_reported(tmp_path):
    path = _write(tmp_path, "no_mass.yaml", SCENARIO.replace("      m_L: 0.1\n", ""))
    with pytest.raises(ConfigError, match="scenario.m_L"):
        load_scenario(path)


def test_unknown_key_reports_its_line(tmp_path):
    path = _write(tmp_path, "typo.yaml", SCENARIO.replace("      m_L: 0.1\n", "      m_L: 0.1\n      mass: 2\n"))
    with pytest.raises(ConfigError) as info:
        load_scenario(path)
    assert info.value.line == 5
    assert "typo.yaml:5" in str(info.value)
    assert "unknown key" in str(info.value)


def test_out_of_range_values_are_rejected(tmp_path):
    path = _write(tmp_path, "range.yaml", SCENARIO.replace("p_xy: 0.3", "p_xy: 1.5"))
    with pytest.raises(ConfigError, match="p_xy"):
        load_scenario(path)
    path = _write(tmp_path, "window.yaml", SCENARIO.replace("grasp: [6.0, 12.0]", "grasp: [12.0, 6.0]"))
    with pytest.raises(ConfigError, match="inverted"):
        load_scenario(path)
    path = _write(tmp_path, "both.yaml", SCENARIO.replace("p_xy: 0.3", "p_xy: 0.3\n      start: [0.0, 0.0]"))
    with pytest.raises(ConfigError, match="either"):
        load_scenario(path)


def test_schema_version_and_syntax(tmp_path):
    with pytest.raises(ConfigError, match="schema version"):
        load_scenario(_write(tmp_path, "v2.yaml", SCENARIO.replace("schema_version: 1", "schema_version: 2")))
    with pytest.raises(ConfigError, match="invalid YAML") as info:
        load_scenario(_write(tmp_path, "broken.yaml", "schema_version: 1\nscenario: [1, 2\n"))
    assert info.value.line is not None
    with pytest.raises(ConfigError, match="file not found"):
        load_scenario(tmp_path / "absent.yaml")


def test_controller_matrices(tmp_path):
    path = _write(tmp_path, "controller.yaml", """\
        schema_version: 1
        uncertainty:
          W_theta: 0.01
          Sigma_bar: {diag: [1, 1, 1]}
        """)
    with pytest.raises(ConfigError, match="diag needs 16 entries"):
        load_controller(path)

    path = _write(tmp_path, "negative.yaml", """\
        schema_version: 1
        ekf:
          Q: -1.0
        """)
    with pytest.raises(ConfigError, match="positive semidefinite"):
        load_controller(path)

    path = _write(tmp_path, "ok.yaml", """\
        schema_version: 1
        ocp:
          N: 10
        uncertainty:
          W_theta: 0.01
          Sigma_bar: {scale: 2.0e-4}
        """)
    controller, sim = load_controller(path)
    assert controller.ocp.N == 10
    np.testing.assert_allclose(controller.uncertainty.W_theta, [[0.01]])
    np.testing.assert_allclose(controller.uncertainty.Sigma_bar, 2e-4 * np.eye(16))
    assert sim.t_max == pytest.approx(40.0)


def test_model_dataclass_errors_carry_the_section(tmp_path):
    path = _write(tmp_path, "model.yaml", """\
        schema_version: 1
        model:
          m_q: 0.0
        """)
    with pytest.raises(ConfigError, match="m_q must be positive"):
        load_model(path)


def test_search_settings_are_checked(tmp_path):
    path = _write(tmp_path, "search.yaml", """\
        schema_version: 1
        bo:
          budget: 3
          n_init: 5
        """)
    with pytest.raises(ConfigError, match="smaller than the initial design"):
        load_search(path)
