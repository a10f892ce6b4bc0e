"""
YAML configuration for models, controller tuning, window searches and scenarios.

Every file is validated in full (version, unknown keys, types, ranges, matrix
invariants) before anything is simulated. Errors carry the file name and the
1-based line of the offending key.
"""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from .controller import ControllerConfig, EkfSettings, default_disturbance_bound
from .dynamics import NQ, NU, NX, ModelParams
from .errors import ConfigError
from .ocp import OcpSettings, StageCostParams, StateBounds
from .phases import TimeWindows
from .platforms import PaperclipPath
from .scenario import Scenario, ScenarioBounds, SimSettings
from .solver import SolverSettings
from .zoro import UncertaintyConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ROOT = Path(__file__).resolve().parent.parent
MODELS_DIR = ROOT / "models"
SCENARIO_DIR = ROOT / "content" / "scenarios"
MODEL_PATH = MODELS_DIR / "quadrotor.yaml"
CONTROLLER_PATH = MODELS_DIR / "controller.yaml"
SEARCH_PATH = MODELS_DIR / "search.yaml"
DEFAULT_OUT = os.environ.get("HOOKCARRY_OUT", "runs")

_MISSING = object()


@dataclass(frozen=True, eq=False)
class HookcarryConfig:
    """Everything a closed-loop run needs besides the scenario."""
    model: ModelParams = field(default_factory=ModelParams)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    sim: SimSettings = field(default_factory=SimSettings)

    @property
    def dt(self) -> float:
        return self.controller.ocp.dt


@dataclass(frozen=True)
class BoSettings:
    budget: int = 40
    n_init: int = 5
    batch_size: int = 1
    restarts: int = 10

    def __post_init__(self):
        if self.n_init < 1 or self.batch_size < 1 or self.restarts < 1:
            raise ValueError("n_init, batch_size and restarts must be >= 1")
        if self.budget < self.n_init:
            raise ValueError(f"budget {self.budget} is smaller than the initial design {self.n_init}")


@dataclass(frozen=True)
class GraspSearchSettings:
    """Scenario box over (p_xy, s_g, v_g); the payload mass plays no role before the grasp."""
    T_g_hi_max: float = 12.0
    p_xy: Tuple[float, float] = (0.0, 1.0)
    s_g: Tuple[float, float] = (0.0, 1.0)
    v_g: Tuple[float, float] = (0.4, 0.6)
    m_L: float = 0.1

    @property
    def bounds(self) -> np.ndarray:
        return np.array([self.p_xy, self.s_g, self.v_g], dtype=float)


@dataclass(frozen=True)
class PlacementSearchSettings:
    """Scenario box over (p_xy, s_p, v_p, m_L) with a fixed nominal mass for the controller."""
    T_p_hi_max: float = 14.0
    p_xy: Tuple[float, float] = (0.0, 1.0)
    s_p: Tuple[float, float] = (0.0, 1.0)
    v_p: Tuple[float, float] = (0.4, 0.6)
    m_L: Tuple[float, float] = (0.05, 0.2)
    m_L_prior: float = 0.07

    @property
    def bounds(self) -> np.ndarray:
        return np.array([self.p_xy, self.s_p, self.v_p, self.m_L], dtype=float)


@dataclass(frozen=True)
class StudySettings:
    """Nominal-versus-robust comparison over payload-mass deviations."""
    n_scenarios: int = 100
    master_seed: int = 2024
    deviations: Tuple[float, ...] = (0.0, 0.1, -0.1, 0.2, -0.2, 0.5, -0.5)
    windows: TimeWindows = field(default_factory=lambda: TimeWindows(6.0, 12.0, 14.0, 26.0))
    bounds: ScenarioBounds = field(default_factory=ScenarioBounds)

    def __post_init__(self):
        if self.n_scenarios < 0:
            raise ValueError("n_scenarios must be non-negative")


@dataclass(frozen=True)
class SearchSettings:
    seed: int = 0
    eps_T: float = 0.1
    validation_samples: int = 20
    bo: BoSettings = field(default_factory=BoSettings)
    grasp: GraspSearchSettings = field(default_factory=GraspSearchSettings)
    placement: PlacementSearchSettings = field(default_factory=PlacementSearchSettings)
    study: StudySettings = field(default_factory=StudySettings)

    def __post_init__(self):
        if not self.eps_T > 0:
            raise ValueError("eps_T must be positive")
        if not self.grasp.T_g_hi_max > self.eps_T:
            raise ValueError("T_g_hi_max must exceed eps_T")
        if not self.placement.T_p_hi_max > 0:
            raise ValueError("T_p_hi_max must be positive")
        if self.validation_samples < 0:
            raise ValueError("validation_samples must be non-negative")


def _load_yaml(path: Any) -> Tuple[Dict, yaml.Node]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("file not found", str(path))
    text = path.read_text(encoding="utf-8")
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, 'problem_mark', None)
        problem = getattr(exc, 'problem', None) or str(exc)
        raise ConfigError(f"invalid YAML: {problem}", str(path), mark.line + 1 if mark else None)
    if not isinstance(data, dict) or not isinstance(node, yaml.MappingNode):
        raise ConfigError("top level must be a mapping", str(path), 1)
    return data, node


class _Section:
    """Typed, line-aware access to one YAML mapping."""

    def __init__(self, data: Dict, node: yaml.Node, path: str, name: str = ''):
        self.data = data
        self.node = node
        self.path = path
        self.name = name
        self._used = set()

    def __contains__(self, key: str) -> bool:
        return key in self.data

    def _key_node(self, key: str):
        if isinstance(self.node, yaml.MappingNode):
            for k, v in self.node.value:
                if k.value == key:
                    return k, v
        return None, None

    def line(self, key: Optional[str] = None) -> Optional[int]:
        k, _ = self._key_node(key) if key is not None else (None, None)
        node = k if k is not None else self.node
        return node.start_mark.line + 1 if node is not None else None

    def qualified(self, key: str) -> str:
        return f"{self.name}.{key}" if self.name else key

    def error(self, key: Optional[str], message: str) -> ConfigError:
        where = f"{self.qualified(key)}: " if key else (f"{self.name}: " if self.name else "")
        return ConfigError(f"{where}{message}", self.path, self.line(key))

    def raw(self, key: str, default: Any = _MISSING) -> Any:
        self._used.add(key)
        if key not in self.data:
            if default is _MISSING:
                raise self.error(None, f"missing required key '{self.qualified(key)}'")
            return default
        return self.data[key]

    def number(self, key: str, default: Any = _MISSING, lo: Optional[float] = None,
               hi: Optional[float] = None, integer: bool = False) -> Any:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(key, f"expected a number, got {value!r}")
        if integer and int(value) != value:
            raise self.error(key, f"expected an integer, got {value!r}")
        if not np.isfinite(value):
            raise self.error(key, "must be finite")
        if lo is not None and value < lo:
            raise self.error(key, f"must be >= {lo}, got {value}")
        if hi is not None and value > hi:
            raise self.error(key, f"must be <= {hi}, got {value}")
        return int(value) if integer else float(value)

    def flag(self, key: str, default: Any = _MISSING) -> bool:
        value = self.raw(key, default)
        if not isinstance(value, bool):
            raise self.error(key, f"expected true or false, got {value!r}")
        return value

    def text(self, key: str, default: Any = _MISSING) -> str:
        value = self.raw(key, default)
        if not isinstance(value, str):
            raise self.error(key, f"expected a string, got {value!r}")
        return value

    def vector(self, key: str, n: Optional[int] = None, default: Any = _MISSING) -> np.ndarray:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return value
        try:
            arr = np.asarray(value, dtype=float)
        except (TypeError, ValueError):
            raise self.error(key, f"expected a list of numbers, got {value!r}")
        if arr.ndim != 1 or (n is not None and arr.size != n):
            raise self.error(key, f"expected {n if n else 'a list of'} numbers, got shape {arr.shape}")
        return arr

    def interval(self, key: str, default: Any = _MISSING) -> Tuple[float, float]:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return value
        arr = self.vector(key, 2)
        if arr[0] > arr[1]:
            raise self.error(key, f"interval is inverted: [{arr[0]}, {arr[1]}]")
        return float(arr[0]), float(arr[1])

    def matrix(self, key: str, n: int, default: Any = _MISSING) -> np.ndarray:
        """n x n from {diag: [...]}, {scale: s} (s * I), a nested list, or a scalar when n == 1."""
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return value
        if isinstance(value, dict):
            unknown = set(value) - {'diag', 'scale'}
            if unknown or len(value) != 1:
                raise self.error(key, "matrix mapping takes exactly one of 'diag' or 'scale'")
            if 'diag' in value:
                diag = np.asarray(value['diag'], dtype=float)
                if diag.shape != (n,):
                    raise self.error(key, f"diag needs {n} entries, got {diag.size}")
                return np.diag(diag)
            scale = value['scale']
            if isinstance(scale, bool) or not isinstance(scale, (int, float)):
                raise self.error(key, f"scale must be a number, got {scale!r}")
            return float(scale) * np.eye(n)
        try:
            arr = np.atleast_2d(np.asarray(value, dtype=float))
        except (TypeError, ValueError):
            raise self.error(key, f"expected a matrix, got {value!r}")
        if arr.shape != (n, n):
            raise self.error(key, f"expected a {n}x{n} matrix, got shape {arr.shape}")
        return arr

    def section(self, key: str, required: bool = False) -> "_Section":
        value = self.raw(key, _MISSING if required else None)
        if value is None:
            return _Section({}, None, self.path, self.qualified(key))
        if not isinstance(value, dict):
            raise self.error(key, "expected a mapping")
        _, child = self._key_node(key)
        return _Section(value, child, self.path, self.qualified(key))

    def finish(self) -> None:
        unknown = [k for k in self.data if k not in self._used]
        if unknown:
            raise self.error(unknown[0], "unknown key")

    def build(self, factory, **kwargs):
        """Construct a config dataclass; its ValueErrors become ConfigErrors at this section."""
        try:
            return factory(**kwargs)
        except ValueError as exc:
            raise self.error(None, str(exc))


def _root(path: Any) -> _Section:
    data, node = _load_yaml(path)
    root = _Section(data, node, str(path))
    version = root.number('schema_version', integer=True)
    if version != SCHEMA_VERSION:
        raise root.error('schema_version', f"unsupported schema version {version}, expected {SCHEMA_VERSION}")
    return root


def _numbers(sec: _Section, names: List[str], **limits) -> Dict[str, float]:
    return {name: sec.number(name, **limits) for name in names if name in sec}


def load_model(path: Any = MODEL_PATH) -> ModelParams:
    root = _root(path)
    sec = root.section('model', required=True)
    kwargs = _numbers(sec, ['m_q', 'm_hook', 'L', 'hook_offset', 'd_LH', 'rho_H', 'g', 'F_max', 'tau_max'])
    if 'J' in sec:
        kwargs['J'] = tuple(sec.vector('J', 3))
    if 'damping' in sec:
        kwargs['damping'] = tuple(sec.vector('damping', 2))
    sec.finish()
    root.finish()
    return sec.build(ModelParams, **kwargs)


def _ocp_settings(sec: _Section) -> OcpSettings:
    kwargs = _numbers(sec, ['dt', 'rho_con', 'rho_con_tilde', 'z_bar', 'a1', 'a2', 'x_bar'])
    if 'N' in sec:
        kwargs['N'] = sec.number('N', integer=True, lo=1)
    if 'r_con' in sec:
        kwargs['r_con'] = tuple(sec.vector('r_con', 3))
    sec.finish()
    return sec.build(OcpSettings, **kwargs)


def _cost_params(sec: _Section) -> StageCostParams:
    kwargs = {}
    if 'weights' in sec:
        w = sec.raw('weights')
        try:
            kwargs['w'] = np.asarray(w, dtype=float)
        except (TypeError, ValueError):
            raise sec.error('weights', "expected five rows of four weights")
        if kwargs['w'].shape != (5, 4):
            raise sec.error('weights', f"expected five rows of four weights, got shape {kwargs['w'].shape}")
    if 'gamma' in sec:
        kwargs['gamma'] = sec.number('gamma', lo=0.0)
    if 'W_v' in sec:
        kwargs['W_v'] = sec.matrix('W_v', NQ)
    if 'W_u' in sec:
        kwargs['W_u'] = sec.matrix('W_u', NU)
    sec.finish()
    return sec.build(StageCostParams, **kwargs)


def _bounds(sec: _Section) -> StateBounds:
    kwargs = _numbers(sec, ['half_x', 'half_y', 'z_max', 'tilt', 'speed'], lo=0.0)
    sec.finish()
    return sec.build(StateBounds.arena, **kwargs)


def _solver_settings(sec: _Section) -> SolverSettings:
    kwargs = _numbers(sec, ['l1_penalty', 'l2_penalty', 'regularization', 'kkt_tol'])
    if 'qp_backend' in sec:
        kwargs['qp_backend'] = sec.text('qp_backend')
    sec.finish()
    return sec.build(SolverSettings, **kwargs)


def _uncertainty(sec: _Section) -> UncertaintyConfig:
    defaults = ControllerConfig().uncertainty
    alpha = sec.number('alpha', defaults.alpha)
    if not 0.0 < alpha < 1.0:
        raise sec.error('alpha', f"must lie in (0, 1), got {alpha}")
    W_theta = sec.matrix('W_theta', 1, defaults.W_theta)
    W_w = sec.matrix('W_w', NX, default_disturbance_bound())
    Sigma_bar = sec.matrix('Sigma_bar', NX, defaults.Sigma_bar)
    sec.finish()
    return sec.build(UncertaintyConfig, W_theta=W_theta, W_w=W_w, Sigma_bar=Sigma_bar, alpha=alpha)


def _ekf_settings(sec: _Section) -> EkfSettings:
    kwargs = {}
    for name, n in (('P0', 1), ('Q', 1), ('R', NX)):
        if name in sec:
            kwargs[name] = sec.matrix(name, n)
    if 'include_disturbance' in sec:
        kwargs['include_disturbance'] = sec.flag('include_disturbance')
    sec.finish()
    for name, M in kwargs.items():
        if name != 'include_disturbance' and (not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() < 0):
            raise sec.error(name, "must be symmetric positive semidefinite")
    return sec.build(EkfSettings, **kwargs)


def _sim_settings(sec: _Section) -> SimSettings:
    kwargs = _numbers(sec, ['t_max', 'eps_p', 'settle_time', 'boundary_probability', 'constraint_tol',
                            'payload_height'])
    if 'measurement_noise' in sec:
        kwargs['measurement_noise'] = sec.flag('measurement_noise')
    path = sec.section('path')
    path_kwargs = _numbers(path, ['R_c', 'L_s', 'height'])
    path.finish()
    kwargs['path'] = path.build(PaperclipPath, **path_kwargs)
    sec.finish()
    return sec.build(SimSettings, **kwargs)


def load_controller(path: Any = CONTROLLER_PATH) -> Tuple[ControllerConfig, SimSettings]:
    root = _root(path)
    config = ControllerConfig(
        ocp=_ocp_settings(root.section('ocp')),
        cost=_cost_params(root.section('cost')),
        bounds=_bounds(root.section('bounds')),
        solver=_solver_settings(root.section('solver')),
        uncertainty=_uncertainty(root.section('uncertainty')),
        ekf=_ekf_settings(root.section('ekf')),
    )
    sim = _sim_settings(root.section('sim'))
    root.finish()
    return config, sim


def load_config(model_path: Any = MODEL_PATH, controller_path: Any = CONTROLLER_PATH) -> HookcarryConfig:
    model = load_model(model_path)
    controller, sim = load_controller(controller_path)
    logger.debug("loaded config: model %s, controller %s", model_path, controller_path)
    return HookcarryConfig(model=model, controller=controller, sim=sim)


def _windows(sec: _Section, dt: float) -> TimeWindows:
    grasp = sec.interval('grasp')
    placement = sec.interval('placement')
    sec.finish()
    return sec.build(TimeWindows, T_g_lo=grasp[0], T_g_hi=grasp[1], T_p_lo=placement[0], T_p_hi=placement[1],
                     dt=dt)


def load_scenario(path: Any, dt: float = OcpSettings().dt) -> Scenario:
    """One scenario per file; either 'start' (x, y) or 'p_xy' places the quad."""
    root = _root(path)
    sec = root.section('scenario', required=True)
    kwargs: Dict[str, Any] = {'m_L': sec.number('m_L', lo=0.0)}
    kwargs['windows'] = _windows(sec.section('windows', required=True), dt)
    if 'start' in sec and 'p_xy' in sec:
        raise sec.error('start', "give either 'start' or 'p_xy', not both")
    if 'start' in sec:
        start = sec.vector('start', 2)
        kwargs['start_xy'] = (float(start[0]), float(start[1]))
    if 'p_xy' in sec:
        kwargs['p_xy'] = sec.number('p_xy', lo=0.0, hi=1.0)
    kwargs.update(_numbers(sec, ['s_g', 's_p'], lo=0.0, hi=1.0))
    kwargs.update(_numbers(sec, ['v_g', 'v_p', 'm_L_prior', 'disturbance_level'], lo=0.0))
    if 'mass_deviation' in sec:
        kwargs['mass_deviation'] = sec.number('mass_deviation', lo=-0.99)
    if 'seed' in sec:
        kwargs['seed'] = sec.number('seed', integer=True, lo=0)
    kwargs['name'] = sec.text('name', Path(path).stem)
    sec.finish()
    root.finish()
    return sec.build(Scenario, **kwargs)


def _scenario_bounds(sec: _Section) -> ScenarioBounds:
    kwargs = {name: sec.interval(name) for name in ('p_xy', 's', 'v', 'm_L') if name in sec}
    sec.finish()
    return sec.build(ScenarioBounds, **kwargs)


def load_search(path: Any = SEARCH_PATH, dt: float = OcpSettings().dt) -> SearchSettings:
    root = _root(path)
    kwargs: Dict[str, Any] = {}
    if 'seed' in root:
        kwargs['seed'] = root.number('seed', integer=True, lo=0)
    if 'eps_T' in root:
        kwargs['eps_T'] = root.number('eps_T')
    if 'validation_samples' in root:
        kwargs['validation_samples'] = root.number('validation_samples', integer=True, lo=0)

    bo = root.section('bo')
    bo_kwargs = {name: bo.number(name, integer=True, lo=1)
                 for name in ('budget', 'n_init', 'batch_size', 'restarts') if name in bo}
    bo.finish()
    kwargs['bo'] = bo.build(BoSettings, **bo_kwargs)

    grasp = root.section('grasp')
    g_kwargs = _numbers(grasp, ['T_g_hi_max', 'm_L'], lo=0.0)
    g_kwargs.update({name: grasp.interval(name) for name in ('p_xy', 's_g', 'v_g') if name in grasp})
    grasp.finish()
    kwargs['grasp'] = grasp.build(GraspSearchSettings, **g_kwargs)

    placement = root.section('placement')
    p_kwargs = _numbers(placement, ['T_p_hi_max', 'm_L_prior'], lo=0.0)
    p_kwargs.update({name: placement.interval(name) for name in ('p_xy', 's_p', 'v_p', 'm_L') if name in placement})
    placement.finish()
    kwargs['placement'] = placement.build(PlacementSearchSettings, **p_kwargs)

    study = root.section('study')
    s_kwargs: Dict[str, Any] = {}
    if 'n_scenarios' in study:
        s_kwargs['n_scenarios'] = study.number('n_scenarios', integer=True, lo=0)
    if 'master_seed' in study:
        s_kwargs['master_seed'] = study.number('master_seed', integer=True, lo=0)
    if 'deviations' in study:
        s_kwargs['deviations'] = tuple(float(d) for d in study.vector('deviations'))
        if any(d <= -1.0 for d in s_kwargs['deviations']):
            raise study.error('deviations', "mass deviations must exceed -1")
    if 'windows' in study:
        s_kwargs['windows'] = _windows(study.section('windows'), dt)
    if 'bounds' in study:
        s_kwargs['bounds'] = _scenario_bounds(study.section('bounds'))
    study.finish()
    kwargs['study'] = study.build(StudySettings, **s_kwargs)

    root.finish()
    return root.build(SearchSettings, **kwargs)
