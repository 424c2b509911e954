"""Planar unicycle motion model and relative-position measurement models.

Conventions shared by every estimator in the package:

- a robot pose is ``[x, y, theta]`` (meters, meters, radians), with ``theta``
  kept in ``(-pi, pi]`` after each propagation step;
- a control input is ``[v, omega]`` (m/s, rad/s), integrated with a fixed-step
  Euler scheme so the pose Jacobian has determinant exactly one and is always
  invertible;
- a relative measurement is the landmark robot's position expressed in the
  observer's body frame (2-vector, meters);
- an absolute measurement is a direct readout of the robot's own position in
  the world frame.

All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ModelError(ValueError):
    """Invalid input to a motion or measurement model."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to ``(-pi, pi]``.

    ``wrap_angle(-pi)`` returns ``pi``; the result is congruent to ``a``
    modulo ``2*pi`` and the function is idempotent.
    """
    if not math.isfinite(a):
        raise ModelError(f"cannot wrap non-finite angle {a!r}")
    r = math.remainder(a, math.tau)
    return r + math.tau if r <= -math.pi else r


@dataclass(slots=True, frozen=True)
class Pose:
    """World-frame robot pose.

    Attributes
    ----------
    x, y:
        Position in meters.
    theta:
        Heading in radians, in ``(-pi, pi]``.
    """

    x: float
    y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    @staticmethod
    def from_array(arr: np.ndarray) -> "Pose":
        return Pose(float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(slots=True, frozen=True)
class ControlInput:
    """Commanded or measured self-motion: linear and angular velocity."""

    v: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.omega], dtype=float)


@dataclass(slots=True, frozen=True)
class RelativeMeasurement:
    """One robot observing another: landmark position in the observer frame.

    ``observer`` and ``landmark`` are 1-based robot ids and must differ;
    ``time`` is the discrete timestep index the measurement was taken at.
    """

    observer: int
    landmark: int
    z: np.ndarray
    time: int

    def __post_init__(self) -> None:
        if self.observer == self.landmark:
            raise ModelError("a robot cannot take a relative measurement of itself")
        if not np.all(np.isfinite(self.z)):
            raise ModelError("relative measurement value must be finite")


@dataclass(slots=True, frozen=True)
class AbsoluteMeasurement:
    """Direct world-frame position measurement of a single robot."""

    observer: int
    z: np.ndarray
    time: int

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.z)):
            raise ModelError("absolute measurement value must be finite")


def propagate_pose(pose: np.ndarray, control: np.ndarray, dt: float) -> np.ndarray:
    """One Euler step of the unicycle model.

    Returns ``[x + v dt cos(theta), y + v dt sin(theta), wrap(theta + omega dt)]``.
    """
    if dt <= 0.0:
        raise ModelError(f"dt must be positive, got {dt}")
    x, y, theta = pose
    v, omega = control
    if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(theta)
            and math.isfinite(v) and math.isfinite(omega)):
        raise ModelError("non-finite pose or control input")
    return np.array([
        x + v * dt * math.cos(theta),
        y + v * dt * math.sin(theta),
        wrap_angle(theta + omega * dt),
    ])


def motion_jacobians(pose: np.ndarray, control: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of :func:`propagate_pose` w.r.t. the pose and the control noise.

    Returns ``(F, G)`` with ``F`` 3x3 (``det F == 1`` for every input) and
    ``G`` 3x2, the sensitivity to additive velocity-space noise.
    """
    if dt <= 0.0:
        raise ModelError(f"dt must be positive, got {dt}")
    theta = pose[2]
    v = control[0]
    c = math.cos(theta)
    s = math.sin(theta)
    f_jac = np.array([
        [1.0, 0.0, -v * dt * s],
        [0.0, 1.0, v * dt * c],
        [0.0, 0.0, 1.0],
    ])
    g_jac = np.array([
        [dt * c, 0.0],
        [dt * s, 0.0],
        [0.0, dt],
    ])
    return f_jac, g_jac


def relative_position(observer_pose: np.ndarray, landmark_pose: np.ndarray) -> np.ndarray:
    """Landmark position in the observer body frame."""
    c = math.cos(observer_pose[2])
    s = math.sin(observer_pose[2])
    dx = landmark_pose[0] - observer_pose[0]
    dy = landmark_pose[1] - observer_pose[1]
    return np.array([c * dx + s * dy, -s * dx + c * dy])


def relative_jacobians(observer_pose: np.ndarray, landmark_pose: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of :func:`relative_position` w.r.t. observer and landmark pose.

    The landmark Jacobian's heading column is identically zero: the model does
    not depend on the landmark's orientation.
    """
    c = math.cos(observer_pose[2])
    s = math.sin(observer_pose[2])
    dx = landmark_pose[0] - observer_pose[0]
    dy = landmark_pose[1] - observer_pose[1]
    h_obs = np.array([
        [-c, -s, -s * dx + c * dy],
        [s, -c, -c * dx - s * dy],
    ])
    h_lm = np.array([
        [c, s, 0.0],
        [-s, c, 0.0],
    ])
    return h_obs, h_lm


def absolute_position(pose: np.ndarray) -> np.ndarray:
    """World-frame position readout ``[x, y]``."""
    return np.array([pose[0], pose[1]])


def absolute_jacobian() -> np.ndarray:
    """Constant Jacobian of :func:`absolute_position`."""
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
