"""
Five-phase task state machine: approach, pick up, transport, place, unhook.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Any

import numpy as np

from .dynamics import DEFAULT_PARAMS, ModelParams, hook_position, payload_hook_position

logger = logging.getLogger(__name__)

# slack for T/dt landing a hair below an integer
_STEP_EPS = 1e-9

# default drop-off distance [m]
DROPOFF_TOLERANCE = 0.03


class Phase(IntEnum):
    APPROACH = 1
    PICK_UP = 2
    TRANSPORT = 3
    PLACE = 4
    UNHOOK = 5


@dataclass(frozen=True)
class TimeWindows:
    """Grasp window [T_g_lo, T_g_hi] and placement window [T_p_lo, T_p_hi] in seconds."""
    T_g_lo: float
    T_g_hi: float
    T_p_lo: float
    T_p_hi: float
    dt: float = 0.05
    check_order: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.T_g_lo < 0 or self.T_p_lo < 0:
            raise ValueError("window starts must be non-negative")
        if not self.T_g_lo < self.T_g_hi:
            raise ValueError(f"grasp window must satisfy T_g_lo < T_g_hi, got [{self.T_g_lo}, {self.T_g_hi}]")
        if not self.T_p_lo < self.T_p_hi:
            raise ValueError(f"placement window must satisfy T_p_lo < T_p_hi, got [{self.T_p_lo}, {self.T_p_hi}]")
        if self.check_order and self.T_g_hi > self.T_p_lo:
            logger.warning("placement window opens at %.2f s, before the grasp window closes at %.2f s",
                           self.T_p_lo, self.T_g_hi)

    @staticmethod
    def _to_step(t: float, dt: float) -> int:
        return int(math.floor(t / dt + _STEP_EPS))

    @property
    def N_g_lo(self) -> int:
        return self._to_step(self.T_g_lo, self.dt)

    @property
    def N_g_hi(self) -> int:
        return self._to_step(self.T_g_hi, self.dt)

    @property
    def N_p_lo(self) -> int:
        return self._to_step(self.T_p_lo, self.dt)

    @property
    def N_p_hi(self) -> int:
        return self._to_step(self.T_p_hi, self.dt)


@dataclass(frozen=True)
class PayloadPose:
    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def hook_point(self, d_LH: float) -> np.ndarray:
        return payload_hook_position(self.position, self.rotation, d_LH)


@dataclass(frozen=True)
class PhaseState:
    p: Phase = Phase.APPROACH
    entered_at_step: int = 0
    grasp_deadline_missed: bool = False
    dropoff_deadline_missed: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'p', Phase(int(self.p)))

    @property
    def deadline_missed(self) -> bool:
        return self.grasp_deadline_missed or self.dropoff_deadline_missed


def grasp_condition(r_H: Any, payload: PayloadPose, rho_H: float, d_LH: float = DEFAULT_PARAMS.d_LH) -> bool:
    """Hook within rho_H of the payload hook point (closed ball)."""
    distance = np.linalg.norm(np.asarray(r_H, dtype=float) - payload.hook_point(d_LH))
    return bool(distance <= rho_H)


def dropoff_condition(r_L: Any, r_p: Any, eps_p: float) -> bool:
    if eps_p <= 0:
        raise ValueError(f"eps_p must be positive, got {eps_p}")
    return bool(np.linalg.norm(np.asarray(r_L, dtype=float) - np.asarray(r_p, dtype=float)) <= eps_p)


def advance(phase: PhaseState, k: int, xi: Any, payload: PayloadPose, r_p: Any,
            windows: TimeWindows, params: ModelParams = DEFAULT_PARAMS,
            eps_p: float = DROPOFF_TOLERANCE) -> PhaseState:
    """
    At most one transition per call along 1 -> 2 -> 3 -> 4 -> 5.

    The payload pose is the current one (on the pick-up platform before the
    grasp, hanging from the hook afterwards); r_p is the drop-off point now.
    """
    t = k * windows.dt
    p = phase.p
    nxt = phase

    if p == Phase.APPROACH and k >= windows.N_g_lo:
        nxt = replace(phase, p=Phase.PICK_UP, entered_at_step=k)
    elif p == Phase.PICK_UP and t <= windows.T_g_hi:
        if grasp_condition(hook_position(xi, params), payload, params.rho_H, params.d_LH):
            nxt = replace(phase, p=Phase.TRANSPORT, entered_at_step=k)
    elif p == Phase.TRANSPORT and k >= windows.N_p_lo:
        nxt = replace(phase, p=Phase.PLACE, entered_at_step=k)
    elif p == Phase.PLACE and t <= windows.T_p_hi:
        if dropoff_condition(payload.position, r_p, eps_p):
            nxt = replace(phase, p=Phase.UNHOOK, entered_at_step=k)

    if nxt.p <= Phase.PICK_UP and t > windows.T_g_hi and not nxt.grasp_deadline_missed:
        logger.warning("grasp deadline %.2f s passed at step %d", windows.T_g_hi, k)
        nxt = replace(nxt, grasp_deadline_missed=True)
    if nxt.p <= Phase.PLACE and t > windows.T_p_hi and not nxt.dropoff_deadline_missed:
        logger.warning("drop-off deadline %.2f s passed at step %d", windows.T_p_hi, k)
        nxt = replace(nxt, dropoff_deadline_missed=True)
    if nxt.p != p:
        logger.debug("phase %d -> %d at step %d", int(p), int(nxt.p), k)
    return nxt


def placement_windows(T_p_hi: float, dt: float = 0.05) -> TimeWindows:
    """Windows for runs that start with the payload attached: T_p_lo = 0, no grasp window."""
    return TimeWindows(T_g_lo=0.0, T_g_hi=dt, T_p_lo=0.0, T_p_hi=T_p_hi, dt=dt, check_order=False)
