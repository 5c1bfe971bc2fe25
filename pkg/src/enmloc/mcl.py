"""Monte Carlo localization over the learned distance field.

Particles are stored column-wise (poses (N, 3), weights (N,)).  The
observation model scores each particle by the average half-sum of |s| and
|sbar| at the transformed beam endpoints and exponentiates with sharpness
lambda.  After the particle cloud collapses, the filter shrinks from the
global-initialization count to the tracking count once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import neuralmap as nm
from .se2 import LidarScan, Pose2, angle_wrap, pose_between


class DegenerateWeightsError(RuntimeError):
    """Every particle weight underflowed to zero."""


class NotNormalizedError(RuntimeError):
    """Operation requires a normalized particle set."""


@dataclass(frozen=True)
class Particle:
    pose: Pose2
    weight: float


@dataclass
class ParticleSet:
    poses: np.ndarray    # (N, 3)
    weights: np.ndarray  # (N,)
    normalized: bool = False

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.poses) != len(self.weights) or len(self.poses) < 1:
            raise ValueError("poses/weights length mismatch or empty set")

    def __len__(self):
        return len(self.weights)

    def particles(self) -> List[Particle]:
        return [
            Particle(Pose2(*self.poses[n]), float(self.weights[n])) for n in range(len(self))
        ]


@dataclass
class MclConfig:
    n_init: int = 80000
    n_track: int = 1000
    lam: float = 10.0          # observation sharpness, 1/meters
    beam_subsample: int = 60
    motion_noise: Tuple[float, float, float, float] = (0.1, 0.1, 0.05, 0.05)
    resample_threshold: float = 0.5  # ESS fraction of N
    oob_penalty: float = 0.5   # meters, used for endpoints outside the grid
    conv_pos_std: float = 0.5
    conv_yaw_std: float = math.radians(10.0)
    conv_hold: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_track > self.n_init:
            raise ValueError("n_track must be <= n_init")
        if self.lam <= 0 or self.beam_subsample < 1:
            raise ValueError("lambda must be > 0 and beam_subsample >= 1")


def init_uniform(lo, hi, n: int, rng: np.random.Generator) -> ParticleSet:
    """Uniform positions over the rectangle [lo, hi], uniform headings."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if n < 1 or np.any(hi <= lo):
        raise ValueError("need n >= 1 and non-degenerate bounds")
    poses = np.empty((n, 3))
    poses[:, 0] = rng.uniform(lo[0], hi[0], n)
    poses[:, 1] = rng.uniform(lo[1], hi[1], n)
    poses[:, 2] = angle_wrap(rng.uniform(-math.pi, math.pi, n))
    return ParticleSet(poses, np.full(n, 1.0 / n), normalized=True)


def init_gaussian(pose: Pose2, pos_std: float, yaw_std: float, n: int,
                  rng: np.random.Generator) -> ParticleSet:
    """Gaussian cloud around a known start pose."""
    poses = np.empty((n, 3))
    poses[:, 0] = pose.x + rng.normal(0.0, pos_std, n)
    poses[:, 1] = pose.y + rng.normal(0.0, pos_std, n)
    poses[:, 2] = angle_wrap(pose.theta + rng.normal(0.0, yaw_std, n))
    return ParticleSet(poses, np.full(n, 1.0 / n), normalized=True)


def motion_update(
    pset: ParticleSet,
    odom_prev: Pose2,
    odom_now: Pose2,
    cfg: MclConfig,
    rng: np.random.Generator,
) -> ParticleSet:
    """Propagate every particle by the noisy odometry increment.

    The increment is decomposed rot1-trans-rot2; each term is perturbed with
    zero-mean Gaussian noise using the standard odometry variance model
    (a1*rot^2 + a2*trans^2 for rotations, a3*trans^2 + a4*(rot1^2+rot2^2)
    for translation).  Weights are unchanged.
    """
    inc = pose_between(odom_prev, odom_now)
    trans = math.hypot(inc.x, inc.y)
    rot1 = angle_wrap(math.atan2(inc.y, inc.x)) if trans > 1e-12 else 0.0
    rot2 = angle_wrap(inc.theta - rot1)
    a1, a2, a3, a4 = cfg.motion_noise
    s_rot1 = math.sqrt(a1 * rot1**2 + a2 * trans**2)
    s_trans = math.sqrt(a3 * trans**2 + a4 * (rot1**2 + rot2**2))
    s_rot2 = math.sqrt(a1 * rot2**2 + a2 * trans**2)

    n = len(pset)
    noise = rng.standard_normal((n, 3))
    r1 = rot1 + noise[:, 0] * s_rot1
    tr = trans + noise[:, 1] * s_trans
    r2 = rot2 + noise[:, 2] * s_rot2

    theta = pset.poses[:, 2]
    heading = theta + r1
    out = np.empty_like(pset.poses)
    out[:, 0] = pset.poses[:, 0] + tr * np.cos(heading)
    out[:, 1] = pset.poses[:, 1] + tr * np.sin(heading)
    out[:, 2] = angle_wrap(theta + r1 + r2)
    return ParticleSet(out, pset.weights.copy(), normalized=pset.normalized)


def _subsample_beams(scan: LidarScan, k: int):
    """Evenly spaced valid beams: local endpoints and directions, (k', 2)."""
    valid = np.flatnonzero(scan.valid_mask())
    if valid.size == 0:
        raise ValueError("scan has no valid rays")
    k = min(k, valid.size)
    sel = valid[np.linspace(0, valid.size - 1, k).round().astype(int)]
    dirs = scan.directions()[sel]
    r = scan.ranges[sel]
    return dirs * r[:, None], dirs


def observation_update(
    pset: ParticleSet,
    scan: LidarScan,
    model: nm.EnmModel,
    cfg: MclConfig,
) -> ParticleSet:
    """Re-weight particles by the field alignment of their beam endpoints.

    Per particle the likelihood factor is exp(-lambda * mean((|s|+|sbar|)/2))
    over the subsampled beams; endpoints that fall outside the grid
    contribute cfg.oob_penalty meters instead of a model query.  The result
    is renormalized; total underflow raises DegenerateWeightsError.
    """
    local_pts, local_dirs = _subsample_beams(scan, cfg.beam_subsample)
    n = len(pset)
    k = len(local_pts)
    c = np.cos(pset.poses[:, 2])[:, None]
    s = np.sin(pset.poses[:, 2])[:, None]
    px, py = local_pts[:, 0][None, :], local_pts[:, 1][None, :]
    dx, dy = local_dirs[:, 0][None, :], local_dirs[:, 1][None, :]

    pts = np.empty((n, k, 2))
    pts[:, :, 0] = c * px - s * py + pset.poses[:, 0][:, None]
    pts[:, :, 1] = s * px + c * py + pset.poses[:, 1][:, None]
    dirs = np.empty((n, k, 2))
    dirs[:, :, 0] = c * dx - s * dy
    dirs[:, :, 1] = s * dx + c * dy

    sv, sbv, inside = nm.evaluate_points(model, pts.reshape(-1, 2), dirs.reshape(-1, 2))
    half = np.where(inside, 0.5 * (np.abs(sv) + np.abs(sbv)), cfg.oob_penalty)
    half = np.where(np.isfinite(half), half, cfg.oob_penalty)
    stat = half.reshape(n, k).mean(axis=1)
    # subtract the minimum before exponentiating so a sharp lambda cannot
    # underflow the whole set; the common factor cancels on normalization
    factors = np.exp(-cfg.lam * (stat - stat.min()))
    weights = pset.weights * factors
    total = weights.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise DegenerateWeightsError("all particle weights vanished")
    return ParticleSet(pset.poses.copy(), weights / total, normalized=True)


def effective_sample_size(pset: ParticleSet) -> float:
    if not pset.normalized:
        raise NotNormalizedError("ESS needs normalized weights")
    return float(1.0 / np.sum(pset.weights**2))


def resample(pset: ParticleSet, target_n: int, rng: np.random.Generator) -> ParticleSet:
    """Systematic resampling with a single uniform offset.

    Ancestor counts are guaranteed within floor/ceil of target_n * weight.
    Also used to shrink the set at convergence.
    """
    if not pset.normalized:
        raise NotNormalizedError("resampling needs normalized weights")
    u = rng.random()
    positions = (np.arange(target_n) + u) / target_n
    cumulative = np.cumsum(pset.weights)
    cumulative[-1] = 1.0
    idx = np.searchsorted(cumulative, positions, side="right")
    idx = np.clip(idx, 0, len(pset) - 1)
    return ParticleSet(
        pset.poses[idx].copy(), np.full(target_n, 1.0 / target_n), normalized=True
    )


def estimate_pose(pset: ParticleSet) -> Tuple[Pose2, float, float]:
    """Weighted mean pose with position and circular yaw dispersion.

    Yaw uses the weighted circular mean; yaw_std is sqrt(-2 ln Rbar), which
    grows without bound as the resultant length Rbar approaches 0 (e.g. two
    opposite headings), capped at pi.
    """
    if not pset.normalized:
        raise NotNormalizedError("pose estimate needs normalized weights")
    w = pset.weights
    mx = float(w @ pset.poses[:, 0])
    my = float(w @ pset.poses[:, 1])
    sin_sum = float(w @ np.sin(pset.poses[:, 2]))
    cos_sum = float(w @ np.cos(pset.poses[:, 2]))
    yaw = math.atan2(sin_sum, cos_sum)
    var = float(w @ ((pset.poses[:, 0] - mx) ** 2 + (pset.poses[:, 1] - my) ** 2))
    pos_std = math.sqrt(max(var, 0.0))
    rbar = min(1.0, math.hypot(sin_sum, cos_sum))
    yaw_std = math.pi if rbar < 1e-12 else min(math.pi, math.sqrt(max(0.0, -2.0 * math.log(rbar))))
    return Pose2(mx, my, yaw), pos_std, yaw_std


def check_convergence(history: Sequence[Tuple[float, float]], cfg: MclConfig) -> bool:
    """True iff the last cfg.conv_hold (pos_std, yaw_std) pairs are all below
    the configured thresholds."""
    if len(history) < cfg.conv_hold:
        return False
    recent = history[-cfg.conv_hold:]
    return all(p < cfg.conv_pos_std and y < cfg.conv_yaw_std for p, y in recent)


@dataclass
class TrajectoryRow:
    time: float
    pose: Pose2
    pos_std: float
    yaw_std: float
    converged: bool
    n_particles: int


@dataclass
class MclState:
    particles: ParticleSet
    prev_odom: Optional[Pose2] = None
    converged: bool = False
    std_history: List[Tuple[float, float]] = field(default_factory=list)
    trajectory: List[TrajectoryRow] = field(default_factory=list)


def mcl_step(
    state: MclState,
    scan: LidarScan,
    model: nm.EnmModel,
    cfg: MclConfig,
    rng: np.random.Generator,
) -> MclState:
    """One filter update: motion, observation, resample on low ESS, estimate,
    convergence check with a one-time shrink to cfg.n_track particles."""
    pset = state.particles
    if state.prev_odom is not None:
        pset = motion_update(pset, state.prev_odom, scan.odom, cfg, rng)
    pset = observation_update(pset, scan, model, cfg)

    target_n = cfg.n_track if state.converged else len(pset)
    if effective_sample_size(pset) < cfg.resample_threshold * len(pset) or target_n != len(pset):
        pset = resample(pset, target_n, rng)

    pose, pos_std, yaw_std = estimate_pose(pset)
    state.std_history.append((pos_std, yaw_std))
    if not state.converged and check_convergence(state.std_history, cfg):
        state.converged = True
        if len(pset) > cfg.n_track:
            pset = resample(pset, cfg.n_track, rng)

    state.particles = pset
    state.prev_odom = scan.odom
    state.trajectory.append(
        TrajectoryRow(scan.time, pose, pos_std, yaw_std, state.converged, len(pset))
    )
    return state


def run_localization(
    scans: Sequence[LidarScan],
    model: nm.EnmModel,
    cfg: MclConfig,
    start: Optional[Pose2] = None,
    start_pos_std: float = 0.2,
    start_yaw_std: float = math.radians(5.0),
) -> List[TrajectoryRow]:
    """Full filter run over a scan sequence.

    Global initialization samples cfg.n_init particles uniformly over the
    model's grid extent; with `start` given, initialization is a Gaussian
    cloud of cfg.n_track particles (tracking mode).
    """
    rng = np.random.default_rng(cfg.seed)
    if start is not None:
        pset = init_gaussian(start, start_pos_std, start_yaw_std, cfg.n_track, rng)
        state = MclState(pset, converged=True)
    else:
        pset = init_uniform(model.grid.origin, model.grid.upper, cfg.n_init, rng)
        state = MclState(pset)
    for scan in scans:
        state = mcl_step(state, scan, model, cfg, rng)
    return state.trajectory
