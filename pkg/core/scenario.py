"""
Scenario records, closed-loop simulation settings and seeded scenario samplers.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .phases import DROPOFF_TOLERANCE, TimeWindows
from .platforms import PaperclipPath, PlatformTrajectory, initial_position


@dataclass(frozen=True)
class SimSettings:
    t_max: float = 40.0
    eps_p: float = DROPOFF_TOLERANCE
    settle_time: float = 1.0
    measurement_noise: bool = False
    boundary_probability: float = 0.1
    constraint_tol: float = 1e-3
    payload_height: float = 0.05
    path: PaperclipPath = field(default_factory=PaperclipPath)

    def __post_init__(self):
        if self.t_max <= 0 or self.eps_p <= 0 or self.settle_time < 0:
            raise ValueError("t_max and eps_p must be positive, settle_time non-negative")
        if not 0.0 <= self.boundary_probability <= 1.0:
            raise ValueError("boundary_probability must lie in [0, 1]")
        if self.constraint_tol < 0:
            raise ValueError("constraint_tol must be non-negative")


@dataclass(frozen=True)
class Scenario:
    """
    One closed-loop run: start position, both platforms, payload mass and windows.

    m_L is the nominal payload mass (EKF prior and nominal model unless
    m_L_prior is given); the plant carries m_L * (1 + mass_deviation).
    """
    m_L: float
    windows: TimeWindows
    p_xy: float = 0.0
    start_xy: Optional[Tuple[float, float]] = None
    s_g: float = 0.0
    v_g: float = 0.5
    s_p: Optional[float] = None
    v_p: Optional[float] = None
    m_L_prior: Optional[float] = None
    mass_deviation: float = 0.0
    seed: int = 0
    disturbance_level: float = 1.0
    name: str = ''

    def __post_init__(self):
        if self.m_L < 0 or (self.m_L_prior is not None and self.m_L_prior < 0):
            raise ValueError("payload masses must be non-negative")
        if not 0.0 <= self.p_xy <= 1.0:
            raise ValueError(f"p_xy must lie in [0, 1], got {self.p_xy}")
        for name in ('s_g', 's_p'):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        for name in ('v_g', 'v_p'):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.mass_deviation <= -1.0:
            raise ValueError("mass_deviation must exceed -1")
        if self.disturbance_level < 0:
            raise ValueError("disturbance_level must be non-negative")

    @property
    def true_mass(self) -> float:
        return self.m_L * (1.0 + self.mass_deviation)

    @property
    def nominal_mass(self) -> float:
        return self.m_L if self.m_L_prior is None else self.m_L_prior

    @property
    def dropoff_phase(self) -> float:
        return (self.s_g + 0.5) % 1.0 if self.s_p is None else self.s_p

    @property
    def dropoff_speed(self) -> float:
        return self.v_g if self.v_p is None else self.v_p

    def start_position(self) -> np.ndarray:
        if self.start_xy is not None:
            return np.array([self.start_xy[0], self.start_xy[1], 1.0])
        return initial_position(self.p_xy)

    def platforms(self, path: PaperclipPath) -> Tuple[PlatformTrajectory, PlatformTrajectory]:
        return (PlatformTrajectory(path, self.s_g, self.v_g),
                PlatformTrajectory(path, self.dropoff_phase, self.dropoff_speed))

    def as_dict(self) -> Dict:
        return {
            'name': self.name, 'p_xy': self.p_xy,
            'start_x': None if self.start_xy is None else self.start_xy[0],
            'start_y': None if self.start_xy is None else self.start_xy[1],
            's_g': self.s_g, 'v_g': self.v_g, 's_p': self.dropoff_phase, 'v_p': self.dropoff_speed,
            'm_L': self.m_L, 'm_L_prior': self.nominal_mass, 'mass_deviation': self.mass_deviation,
            'true_mass': self.true_mass, 'seed': self.seed, 'disturbance_level': self.disturbance_level,
            'T_g_lo': self.windows.T_g_lo, 'T_g_hi': self.windows.T_g_hi,
            'T_p_lo': self.windows.T_p_lo, 'T_p_hi': self.windows.T_p_hi,
        }


@dataclass(frozen=True)
class ScenarioBounds:
    """Box over the randomized scenario parameters."""
    p_xy: Tuple[float, float] = (0.0, 1.0)
    s: Tuple[float, float] = (0.0, 1.0)
    v: Tuple[float, float] = (0.4, 0.6)
    m_L: Tuple[float, float] = (0.05, 0.2)

    def __post_init__(self):
        for name in ('p_xy', 's', 'v', 'm_L'):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} bounds are inverted: [{lo}, {hi}]")


def derive_seeds(master_seed: int, n: int) -> List[int]:
    """Independent per-scenario seeds from one master seed."""
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [int(child.generate_state(1)[0]) for child in children]


def sample_scenarios(n: int, master_seed: int, windows: TimeWindows,
                     bounds: ScenarioBounds = ScenarioBounds(),
                     mass_deviation: float = 0.0) -> List[Scenario]:
    """n uniformly drawn scenarios; identical master seeds give identical lists."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(master_seed)
    seeds = derive_seeds(master_seed, n)
    out = []
    for i in range(n):
        p_xy, s_g, v_g, m_L = (rng.uniform(*bounds.p_xy), rng.uniform(*bounds.s),
                               rng.uniform(*bounds.v), rng.uniform(*bounds.m_L))
        out.append(Scenario(m_L=float(m_L), windows=windows, p_xy=float(p_xy), s_g=float(s_g),
                            v_g=float(v_g), mass_deviation=mass_deviation, seed=seeds[i],
                            name=f"scenario_{i:03d}"))
    return out


def with_deviation(scenarios: Sequence[Scenario], mass_deviation: float) -> List[Scenario]:
    return [replace(s, mass_deviation=mass_deviation) for s in scenarios]
