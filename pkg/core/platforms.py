"""
Moving ground platforms on a paperclip track and the start-position map.
"""
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .dynamics import rotation_matrix

TimeLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class PaperclipPath:
    """Two straights of length L_s joined by semicircles of radius R_c, traversed counter-clockwise."""
    R_c: float = 1.0
    L_s: float = 2.5
    height: float = 0.2

    def __post_init__(self):
        if self.R_c <= 0 or self.L_s < 0 or self.height < 0:
            raise ValueError(f"invalid paperclip geometry R_c={self.R_c} L_s={self.L_s} h={self.height}")

    @property
    def length(self) -> float:
        return 2.0 * self.L_s + 2.0 * np.pi * self.R_c

    def point(self, s: TimeLike) -> Tuple[np.ndarray, np.ndarray]:
        """Planar position (..., 2) and tangent yaw (...) at path fraction s."""
        shape = np.shape(s)
        a = np.mod(np.atleast_1d(np.asarray(s, dtype=float)), 1.0).ravel() * self.length
        half, R = 0.5 * self.L_s, self.R_c
        arc = np.pi * R
        b1, b2, b3 = self.L_s, self.L_s + arc, 2.0 * self.L_s + arc

        x = np.empty_like(a)
        y = np.empty_like(a)
        yaw = np.empty_like(a)

        bottom = a < b1
        x[bottom] = -half + a[bottom]
        y[bottom] = -R
        yaw[bottom] = 0.0

        right = (a >= b1) & (a < b2)
        phi = -0.5 * np.pi + (a[right] - b1) / R
        x[right] = half + R * np.cos(phi)
        y[right] = R * np.sin(phi)
        yaw[right] = phi + 0.5 * np.pi

        top = (a >= b2) & (a < b3)
        x[top] = half - (a[top] - b2)
        y[top] = R
        yaw[top] = np.pi

        left = a >= b3
        phi = 0.5 * np.pi + (a[left] - b3) / R
        x[left] = -half + R * np.cos(phi)
        y[left] = R * np.sin(phi)
        yaw[left] = phi + 0.5 * np.pi

        yaw = np.arctan2(np.sin(yaw), np.cos(yaw))
        return np.stack([x, y], axis=-1).reshape(shape + (2,)), yaw.reshape(shape)


@dataclass(frozen=True)
class PlatformTrajectory:
    path: PaperclipPath
    s0: float
    speed: float

    def __post_init__(self):
        if not 0.0 <= self.s0 <= 1.0:
            raise ValueError(f"s0 must lie in [0, 1], got {self.s0}")
        if self.speed < 0:
            raise ValueError(f"speed must be non-negative, got {self.speed}")

    @property
    def period(self) -> float:
        return self.path.length / self.speed if self.speed > 0 else float('inf')

    def pose(self, t: TimeLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Platform top point (..., 3), yaw (...) and rotation (..., 3, 3) at time t."""
        t = np.asarray(t, dtype=float)
        xy, yaw = self.path.point(self.s0 + self.speed * t / self.path.length)
        r = np.concatenate([xy, np.full(xy.shape[:-1] + (1,), self.path.height)], axis=-1)
        R = rotation_matrix(np.zeros_like(yaw), np.zeros_like(yaw), yaw)
        return r, yaw, R


def platform_state(traj: PlatformTrajectory, t: TimeLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if np.any(np.asarray(t) < 0):
        raise ValueError("platform time must be non-negative")
    return traj.pose(t)


def initial_position(p_xy: float) -> np.ndarray:
    """Map p_xy in [0, 1] onto the left and bottom arena edges, z = 1 m."""
    if not 0.0 <= p_xy <= 1.0:
        raise ValueError(f"p_xy must lie in [0, 1], got {p_xy}")
    if p_xy <= 0.5:
        return np.array([-3.5, 2.5 - 10.0 * p_xy, 1.0])
    return np.array([-3.5 + 14.0 * (p_xy - 0.5), -2.5, 1.0])
