"""Synthetic 2D worlds: segment floorplans, exact raycasting, distance
oracles, trajectory generation, and odometry corruption.

The oracles (true_sdf / true_psdf) are deliberately brute force over all
wall segments; they are the independent reference the learned field is
checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .se2 import LidarScan, Pose2, angle_wrap, pose_between, pose_compose

SIGN_MASK_RESOLUTION = 0.01  # meters
PSDF_NO_HIT = np.inf


class TrajectoryError(ValueError):
    """Waypoints cannot be connected with the required wall clearance."""


@dataclass
class FloorPlan:
    """Line-segment world.

    segments: (S, 2, 2) array of endpoints in meters.  free_interior_point
    anchors the sign convention: the connected region containing it is free
    space (positive distance).
    """

    segments: np.ndarray
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    free_interior_point: np.ndarray
    _free_mask: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 2, 2)
        self.bounds_lo = np.asarray(self.bounds_lo, dtype=np.float64)
        self.bounds_hi = np.asarray(self.bounds_hi, dtype=np.float64)
        self.free_interior_point = np.asarray(self.free_interior_point, dtype=np.float64)
        lengths = np.linalg.norm(self.segments[:, 1] - self.segments[:, 0], axis=1)
        if np.any(lengths <= 0):
            raise ValueError("floorplan contains a zero-length segment")

    # -- sign mask -----------------------------------------------------

    def _mask_grid(self):
        res = SIGN_MASK_RESOLUTION
        lo = self.bounds_lo - 2 * res
        n = np.ceil((self.bounds_hi - lo) / res).astype(int) + 4
        return lo, res, n

    def free_mask(self) -> np.ndarray:
        """Boolean raster (ny, nx): True where connected to the interior point."""
        if self._free_mask is None:
            lo, res, (nx, ny) = self._mask_grid()
            wall = np.zeros((ny, nx), dtype=bool)
            for a, b in self.segments:
                length = np.linalg.norm(b - a)
                steps = max(2, int(np.ceil(length / (res * 0.5))) + 1)
                ts = np.linspace(0.0, 1.0, steps)
                pts = a[None, :] + ts[:, None] * (b - a)[None, :]
                ii = np.clip(((pts[:, 0] - lo[0]) / res).astype(int), 0, nx - 1)
                jj = np.clip(((pts[:, 1] - lo[1]) / res).astype(int), 0, ny - 1)
                wall[jj, ii] = True
            labels, _ = ndimage.label(~wall)
            i0 = int((self.free_interior_point[0] - lo[0]) / res)
            j0 = int((self.free_interior_point[1] - lo[1]) / res)
            self._free_mask = labels == labels[j0, i0]
        return self._free_mask

    def is_free(self, p) -> np.ndarray:
        """Sign lookup: True where p is in the free interior region."""
        pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
        lo, res, (nx, ny) = self._mask_grid()
        mask = self.free_mask()
        ii = np.clip(((pts[:, 0] - lo[0]) / res).astype(int), 0, nx - 1)
        jj = np.clip(((pts[:, 1] - lo[1]) / res).astype(int), 0, ny - 1)
        out = mask[jj, ii]
        return out if np.asarray(p).ndim > 1 else bool(out[0])


@dataclass(frozen=True)
class SensorSpec:
    """Planar scanner model (UTM-30LX-like defaults)."""

    n_beams: int = 1081
    fov: float = math.radians(270.0)
    range_max: float = 30.0
    range_noise_std: float = 0.01

    @property
    def angle_min(self) -> float:
        return -self.fov / 2.0

    @property
    def angle_inc(self) -> float:
        if self.n_beams == 1:
            return 0.0
        return self.fov / (self.n_beams - 1)


# ---------------------------------------------------------------------------
# geometry


def _ray_hits(origins: np.ndarray, dirs: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """First-hit parameter t along each ray (inf where nothing is hit).

    origins, dirs: (B, 2); segments: (S, 2, 2).  Solves
    o + t d = a + u (b - a) with 0 <= u <= 1, t > 0.
    """
    a = segments[:, 0]
    e = segments[:, 1] - segments[:, 0]
    # denom[b, s] = cross(d_b, e_s)
    denom = dirs[:, None, 0] * e[None, :, 1] - dirs[:, None, 1] * e[None, :, 0]
    ao = a[None, :, :] - origins[:, None, :]
    t_num = ao[:, :, 0] * e[None, :, 1] - ao[:, :, 1] * e[None, :, 0]
    u_num = ao[:, :, 0] * dirs[:, None, 1] - ao[:, :, 1] * dirs[:, None, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = t_num / denom
        u = u_num / denom
    ok = (np.abs(denom) > 1e-15) & (u >= 0.0) & (u <= 1.0) & (t > 1e-12)
    t = np.where(ok, t, np.inf)
    return t.min(axis=1)


def true_psdf(plan: FloorPlan, p, d) -> np.ndarray:
    """Distance to the first wall along d from p; inf when nothing is hit."""
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(d, dtype=np.float64))
    t = _ray_hits(pts, dirs, plan.segments)
    return t if np.asarray(p).ndim > 1 else float(t[0])


def _point_segment_distance(pts: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """(B,) unsigned distance from each point to the nearest segment."""
    a = segments[:, 0]
    e = segments[:, 1] - segments[:, 0]
    ee = np.einsum("sd,sd->s", e, e)
    ap = pts[:, None, :] - a[None, :, :]
    u = np.clip(np.einsum("bsd,sd->bs", ap, e) / ee[None, :], 0.0, 1.0)
    closest = a[None, :, :] + u[:, :, None] * e[None, :, :]
    dist = np.linalg.norm(pts[:, None, :] - closest, axis=2)
    return dist.min(axis=1)


def true_sdf(plan: FloorPlan, p) -> np.ndarray:
    """Signed distance to the nearest wall: positive in free space."""
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    dist = _point_segment_distance(pts, plan.segments)
    sign = np.where(np.atleast_1d(plan.is_free(pts)), 1.0, -1.0)
    out = dist * sign
    return out if np.asarray(p).ndim > 1 else float(out[0])


def raycast(
    plan: FloorPlan,
    pose: Pose2,
    spec: SensorSpec,
    rng: Optional[np.random.Generator] = None,
    time: float = 0.0,
) -> LidarScan:
    """Simulate one scan from `pose`; deterministic given the generator state.

    Ranges get zero-mean Gaussian noise (if a generator is passed and the
    spec's noise std is positive); beams that miss everything or land beyond
    range_max are invalid (-1).
    """
    p = pose.translation
    if np.any(p < plan.bounds_lo) or np.any(p > plan.bounds_hi):
        raise ValueError("sensor pose outside floorplan bounds")
    bearings = spec.angle_min + spec.angle_inc * np.arange(spec.n_beams) + pose.theta
    dirs = np.stack([np.cos(bearings), np.sin(bearings)], axis=1)
    origins = np.broadcast_to(p, (spec.n_beams, 2))
    t = _ray_hits(origins, dirs, plan.segments)
    if rng is not None and spec.range_noise_std > 0:
        t = t + np.where(np.isfinite(t), rng.normal(0.0, spec.range_noise_std, spec.n_beams), 0.0)
    ranges = np.where(np.isfinite(t) & (t > 0) & (t <= spec.range_max), t, -1.0)
    return LidarScan(
        time=time,
        odom=pose,
        ranges=ranges,
        angle_min=spec.angle_min,
        angle_inc=spec.angle_inc,
        range_max=spec.range_max,
        gt=pose,
    )


# ---------------------------------------------------------------------------
# trajectories and datasets


def generate_trajectory(
    plan: FloorPlan,
    waypoints: Sequence,
    speed: float = 0.5,
    yaw_rate_max: float = 1.5,
    dt: float = 0.1,
    clearance: float = 0.3,
) -> List[Tuple[float, Pose2]]:
    """Drive-and-turn path through waypoints, sampled every dt seconds.

    The robot turns in place (bounded by yaw_rate_max) to face the next
    waypoint, then drives straight at `speed`.  Every sampled pose is
    validated to keep at least `clearance` of free space.
    """
    wps = [np.asarray(w, dtype=np.float64) for w in waypoints]
    if len(wps) == 0:
        raise TrajectoryError("need at least one waypoint")
    poses: List[Tuple[float, Pose2]] = []
    t = 0.0
    heading = 0.0
    if len(wps) >= 2:
        d0 = wps[1] - wps[0]
        heading = math.atan2(d0[1], d0[0])
    poses.append((t, Pose2(wps[0][0], wps[0][1], heading)))
    pos = wps[0].copy()
    for target in wps[1:]:
        # turn toward target
        goal_heading = math.atan2(target[1] - pos[1], target[0] - pos[0])
        while abs(angle_wrap(goal_heading - heading)) > yaw_rate_max * dt:
            heading = angle_wrap(heading + math.copysign(yaw_rate_max * dt, angle_wrap(goal_heading - heading)))
            t += dt
            poses.append((t, Pose2(pos[0], pos[1], heading)))
        heading = goal_heading
        # drive straight
        dist = np.linalg.norm(target - pos)
        n_steps = int(math.ceil(dist / (speed * dt)))
        for k in range(1, n_steps + 1):
            frac = min(1.0, k * speed * dt / dist) if dist > 0 else 1.0
            cur = pos + frac * (target - pos)
            t += dt
            poses.append((t, Pose2(cur[0], cur[1], heading)))
        pos = target.copy()
    pts = np.array([[p.x, p.y] for _, p in poses])
    sdf = true_sdf(plan, pts)
    if np.any(sdf < clearance):
        bad = float(np.min(sdf))
        raise TrajectoryError(f"trajectory violates clearance: min sdf {bad:.3f} < {clearance}")
    return poses


def corrupt_odometry(
    poses: Sequence[Pose2],
    alphas: Tuple[float, float, float, float],
    rng: np.random.Generator,
) -> List[Pose2]:
    """Integrate rot-trans-rot increments with odometry noise.

    alphas follow the standard odometry motion model: variance of the two
    rotations is a1*rot^2 + a2*trans^2, of the translation
    a3*trans^2 + a4*(rot1^2 + rot2^2).  The odometry frame starts at the
    first ground-truth pose and drifts from there.
    """
    if len(poses) < 2:
        raise ValueError("need at least 2 poses")
    a1, a2, a3, a4 = alphas
    odom = [poses[0]]
    cur = poses[0]
    for prev, nxt in zip(poses[:-1], poses[1:]):
        inc = pose_between(prev, nxt)
        trans = math.hypot(inc.x, inc.y)
        if trans > 1e-12:
            rot1 = angle_wrap(math.atan2(inc.y, inc.x))
        else:
            rot1 = 0.0
        rot2 = angle_wrap(inc.theta - rot1)
        s_rot1 = math.sqrt(a1 * rot1**2 + a2 * trans**2)
        s_trans = math.sqrt(a3 * trans**2 + a4 * (rot1**2 + rot2**2))
        s_rot2 = math.sqrt(a1 * rot2**2 + a2 * trans**2)
        n_rot1 = rot1 + rng.normal(0.0, 1.0) * s_rot1
        n_trans = trans + rng.normal(0.0, 1.0) * s_trans
        n_rot2 = rot2 + rng.normal(0.0, 1.0) * s_rot2
        noisy_inc = Pose2(
            n_trans * math.cos(n_rot1), n_trans * math.sin(n_rot1), n_rot1 + n_rot2
        )
        cur = pose_compose(cur, noisy_inc)
        odom.append(cur)
    return odom


def simulate_dataset(
    plan: FloorPlan,
    trajectory: Sequence[Tuple[float, Pose2]],
    spec: SensorSpec,
    odom_alphas: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0),
    rng: Optional[np.random.Generator] = None,
) -> List[LidarScan]:
    """One scan per trajectory sample, with ground truth and noisy odometry."""
    rng = rng if rng is not None else np.random.default_rng(0)
    times = [t for t, _ in trajectory]
    gts = [p for _, p in trajectory]
    if any(a > 0 for a in odom_alphas):
        odoms = corrupt_odometry(gts, odom_alphas, rng)
    else:
        odoms = list(gts)
    scans = []
    for t, gt, od in zip(times, gts, odoms):
        scan = raycast(plan, gt, spec, rng, time=t)
        scans.append(
            LidarScan(
                time=t,
                odom=od,
                ranges=scan.ranges,
                angle_min=scan.angle_min,
                angle_inc=scan.angle_inc,
                range_max=scan.range_max,
                gt=gt,
            )
        )
    return scans


# ---------------------------------------------------------------------------
# built-in worlds


def _rect(x0, y0, x1, y1):
    return [
        [[x0, y0], [x1, y0]],
        [[x1, y0], [x1, y1]],
        [[x1, y1], [x0, y1]],
        [[x0, y1], [x0, y0]],
    ]


def make_world(name: str) -> FloorPlan:
    """Built-in floorplans: square (4x4), tworoom (8x6), corridor_offices (20x8)."""
    if name == "square":
        return FloorPlan(_rect(0, 0, 4, 4), [0, 0], [4, 4], [2, 2])
    if name == "tworoom":
        segs = _rect(0, 0, 8, 6)
        # dividing wall at x=4 with a 1 m doorway at y in [2.5, 3.5]
        segs += [[[4, 0], [4, 2.5]], [[4, 3.5], [4, 6]]]
        return FloorPlan(segs, [0, 0], [8, 6], [2, 3])
    if name == "corridor_offices":
        segs = _rect(0, 0, 20, 8)
        # corridor along y in [5, 8]; four offices below, doorways at
        # deliberately different positions so the rooms are not identical
        room_walls = [5.0, 10.0, 15.0]
        for x in room_walls:
            segs += [[[x, 0], [x, 5]]]
        # corridor-side walls with per-room doorway offsets
        doors = [(1.0, 2.2), (6.5, 7.7), (12.3, 13.5), (17.0, 18.2)]
        xs = [0.0, 5.0, 10.0, 15.0, 20.0]
        for (x0, x1), (d0, d1) in zip(zip(xs[:-1], xs[1:]), doors):
            segs += [[[x0, 5], [d0, 5]], [[d1, 5], [x1, 5]]]
        # a pillar in room 2 and a notch in room 4 break the symmetry
        segs += _rect(7.0, 1.5, 7.6, 2.1)
        segs += [[[16.0, 0.0], [16.0, 1.0]], [[16.0, 1.0], [17.2, 1.0]]]
        return FloorPlan(segs, [0, 0], [20, 8], [10, 6.5])
    raise ValueError(f"unknown world: {name!r}")


# ---------------------------------------------------------------------------
# floorplan file format: header "xmin ymin xmax ymax ix iy", then one
# "ax ay bx by" line per segment


def save_floorplan(plan: FloorPlan, path) -> None:
    with open(path, "w") as fh:
        lo, hi, ip = plan.bounds_lo, plan.bounds_hi, plan.free_interior_point
        fh.write(f"{lo[0]:.9g} {lo[1]:.9g} {hi[0]:.9g} {hi[1]:.9g} {ip[0]:.9g} {ip[1]:.9g}\n")
        for a, b in plan.segments:
            fh.write(f"{a[0]:.9g} {a[1]:.9g} {b[0]:.9g} {b[1]:.9g}\n")


def load_floorplan(path) -> FloorPlan:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 6:
            raise ValueError(f"{path}: bad floorplan header")
        vals = [float(v) for v in header]
        segs = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields")
            ax, ay, bx, by = (float(v) for v in parts)
            segs.append([[ax, ay], [bx, by]])
    return FloorPlan(segs, vals[0:2], vals[2:4], vals[4:6])
