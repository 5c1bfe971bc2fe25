"""SE(2) poses, angle arithmetic, and scan geometry.

Poses are immutable (x, y, theta) triples with theta always stored wrapped
to [-pi, pi].  All helpers here are pure functions; 2D points are numpy
arrays of shape (2,) or (N, 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class EmptyScanError(ValueError):
    """Raised when an operation needs at least one valid ray."""


def angle_wrap(theta):
    """Wrap an angle (scalar or array) to [-pi, pi].

    The boundary value +pi is canonicalized to -pi so every angle has a
    single representative.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("angle_wrap: non-finite angle")
    # leave in-range values untouched so wrapping is exact there
    out_of_range = (theta < -np.pi) | (theta >= np.pi)
    wrapped = np.where(
        out_of_range, np.mod(theta + np.pi, 2.0 * np.pi) - np.pi, theta
    )
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose2:
    """SE(2) state (x, y, theta); theta wrapped to [-pi, pi] on construction."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", angle_wrap(float(self.theta)))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


def pose_compose(a: Pose2, b: Pose2) -> Pose2:
    """Group product a . b: rotate b's translation into a's frame and add."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def pose_inverse(a: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(-(c * a.x + s * a.y), -(-s * a.x + c * a.y), -a.theta)


def pose_between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose r with a . r = b (up to angle wrap)."""
    return pose_compose(pose_inverse(a), b)


def pose_apply(pose: Pose2, p) -> np.ndarray:
    """Map point(s) p through the rigid transform: R(theta) p + t."""
    p = np.asarray(p, dtype=np.float64)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    if p.ndim == 1:
        return np.array([c * p[0] - s * p[1] + pose.x, s * p[0] + c * p[1] + pose.y])
    out = np.empty_like(p)
    out[:, 0] = c * p[:, 0] - s * p[:, 1] + pose.x
    out[:, 1] = s * p[:, 0] + c * p[:, 1] + pose.y
    return out


def rotate_dirs(theta: float, d) -> np.ndarray:
    """Rotate direction vector(s) by theta (no translation)."""
    d = np.asarray(d, dtype=np.float64)
    c, s = math.cos(theta), math.sin(theta)
    if d.ndim == 1:
        return np.array([c * d[0] - s * d[1], s * d[0] + c * d[1]])
    out = np.empty_like(d)
    out[:, 0] = c * d[:, 0] - s * d[:, 1]
    out[:, 1] = s * d[:, 0] + c * d[:, 1]
    return out


@dataclass(frozen=True)
class Ray:
    """One LiDAR beam: unit direction in the sensor frame and a range."""

    direction: tuple
    range: float
    valid: bool = True

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "direction", (float(d[0]), float(d[1])))

    @property
    def dir_array(self) -> np.ndarray:
        return np.asarray(self.direction)


INVALID_RANGE = -1.0


@dataclass(frozen=True)
class LidarScan:
    """A timestamped planar scan.

    Bearings are implicit: beam k points at angle_min + k * angle_inc in the
    sensor frame.  Invalid beams (no return) carry range -1.
    """

    time: float
    odom: Pose2
    ranges: np.ndarray
    angle_min: float
    angle_inc: float
    range_max: float
    gt: Optional[Pose2] = None

    def __post_init__(self):
        r = np.asarray(self.ranges, dtype=np.float64)
        object.__setattr__(self, "ranges", r)

    @property
    def n_beams(self) -> int:
        return len(self.ranges)

    def bearings(self) -> np.ndarray:
        return self.angle_min + self.angle_inc * np.arange(self.n_beams)

    def directions(self) -> np.ndarray:
        """Unit beam directions in the sensor frame, shape (n_beams, 2)."""
        b = self.bearings()
        return np.stack([np.cos(b), np.sin(b)], axis=1)

    def valid_mask(self) -> np.ndarray:
        return (self.ranges > 0.0) & (self.ranges <= self.range_max)

    @property
    def rays(self) -> Sequence[Ray]:
        dirs = self.directions()
        valid = self.valid_mask()
        return [
            Ray(tuple(dirs[k]), float(self.ranges[k]), bool(valid[k]))
            for k in range(self.n_beams)
        ]


def scan_endpoints(scan: LidarScan, pose: Pose2):
    """World-frame beam endpoints and directions for the valid rays.

    Returns (points, world_dirs), both (M, 2) with M the number of valid
    rays.  Raises EmptyScanError when no ray is valid.
    """
    valid = scan.valid_mask()
    if not np.any(valid):
        raise EmptyScanError("scan has no valid rays")
    dirs = scan.directions()[valid]
    r = scan.ranges[valid]
    local = dirs * r[:, None]
    points = pose_apply(pose, local)
    world_dirs = rotate_dirs(pose.theta, dirs)
    return points, world_dirs
