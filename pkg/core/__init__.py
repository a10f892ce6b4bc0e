"""
Hookcarry Core Modules

This package contains the core functionality for aerial pick-and-place
between moving platforms:
- Quadrotor-with-pole dynamics and the five-phase task machine
- Phase-dependent optimal control problems and the RTI solver
- Zero-order robust backoffs and the payload-mass EKF
- Closed-loop simulation, batch studies and admissible time windows
"""

from .config import HookcarryConfig, SearchSettings, load_config, load_scenario, load_search
from .controller import VARIANTS, ControllerConfig, MpcController
from .dynamics import ModelParams, step
from .errors import ConfigError, DynamicsError, HookcarryError, SolverError
from .feasibility import bo_maximize, grasp_window_search, placement_window_search
from .phases import Phase, TimeWindows
from .scenario import Scenario, sample_scenarios
from .sim import RunStatus, SimResult, batch_run, deviation_study, run_closed_loop

__all__ = [
    'HookcarryConfig',
    'SearchSettings',
    'load_config',
    'load_scenario',
    'load_search',
    'VARIANTS',
    'ControllerConfig',
    'MpcController',
    'ModelParams',
    'step',
    'ConfigError',
    'DynamicsError',
    'HookcarryError',
    'SolverError',
    'bo_maximize',
    'grasp_window_search',
    'placement_window_search',
    'Phase',
    'TimeWindows',
    'Scenario',
    'sample_scenarios',
    'RunStatus',
    'SimResult',
    'batch_run',
    'deviation_study',
    'run_closed_loop',
]
