"""Training the feature-grid distance field from posed scans.

Samples are drawn along every LiDAR ray in three depth regions (just before
the hit, just behind it, and the traversed free interior).  The objective
combines an L1 projective-distance term on near-surface samples, a scaled
binary cross-entropy term on all samples, and an Eikonal regularizer on the
spatial gradient, weighted by `beta`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import neuralmap as nm
from .autodiff import Tensor
from .se2 import LidarScan, Pose2, rotate_dirs

REGION_TRUNCATED = 0
REGION_OCCUPIED = 1
REGION_FREE = 2
_REGION_NAMES = {REGION_TRUNCATED: "truncated", REGION_OCCUPIED: "occupied", REGION_FREE: "free"}

FREE_MIN_DEPTH = 0.05  # meters from the sensor origin


class EmptyBatchError(ValueError):
    """A loss was asked to average over zero samples."""


@dataclass
class TrainConfig:
    m_t: int = 6
    m_o: int = 4
    m_f: int = 5
    trunc_band: float = 0.30
    occ_band: float = 0.15
    logistic_scale: float = 0.05
    beta: float = 0.1
    lr: float = 1e-3
    iterations: int = 5000
    batch_rays: int = 2048
    seed: int = 0
    grid_resolution: float = nm.DEFAULT_RESOLUTION
    feature_dim: int = nm.DEFAULT_FEATURE_DIM
    n_bands: int = nm.DEFAULT_FREQ_BANDS
    bounds_pad: float = 1.0
    telemetry_every: int = 100

    def __post_init__(self):
        if min(self.m_t, self.m_o, self.m_f) < 0:
            raise ValueError("sample counts must be >= 0")
        if self.trunc_band <= 0 or self.occ_band <= 0 or self.logistic_scale <= 0:
            raise ValueError("bands and logistic scale must be positive")


@dataclass(frozen=True)
class TrainSample:
    """One supervised point: position, world ray direction, sensor origin,
    projective distance target, and region label."""

    p: np.ndarray
    d: np.ndarray
    origin: np.ndarray
    psdf_gt: float
    region: str


@dataclass
class TrainBatch:
    """Column-wise batch of train samples."""

    p: np.ndarray        # (M, 2)
    d: np.ndarray        # (M, 2) world-frame ray directions
    origin: np.ndarray   # (M, 2)
    psdf_gt: np.ndarray  # (M,)
    region: np.ndarray   # (M,) int8 codes

    def __len__(self):
        return len(self.psdf_gt)

    @property
    def near_mask(self) -> np.ndarray:
        return self.region != REGION_FREE


def sample_along_rays(
    origins: np.ndarray,
    dirs: np.ndarray,
    ranges: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> TrainBatch:
    """Vectorized region sampling for a set of world-frame rays.

    Per ray: m_t depths uniform in [r - t_r, r), m_o in (r, r + t_o], and
    m_f in [FREE_MIN_DEPTH, r - t_r) when that interval is non-degenerate
    (short rays simply emit no free samples).  Targets follow
    psdf_gt = r - depth.
    """
    R = len(ranges)
    parts = []

    def emit(depth, region, keep=None):
        m = depth.shape[1]
        ray_idx = np.repeat(np.arange(R), m)
        depth = depth.ravel()
        if keep is not None:
            keepf = np.repeat(keep, m)
            ray_idx, depth = ray_idx[keepf], depth[keepf]
        p = origins[ray_idx] + depth[:, None] * dirs[ray_idx]
        parts.append(
            TrainBatch(
                p=p,
                d=dirs[ray_idx],
                origin=origins[ray_idx],
                psdf_gt=ranges[ray_idx] - depth,
                region=np.full(len(depth), region, dtype=np.int8),
            )
        )

    if cfg.m_t > 0:
        band = np.minimum(cfg.trunc_band, ranges)[:, None]
        u = 1.0 - rng.random((R, cfg.m_t))  # (0, 1]
        emit(ranges[:, None] - band * u, REGION_TRUNCATED)
    if cfg.m_o > 0:
        u = 1.0 - rng.random((R, cfg.m_o))
        emit(ranges[:, None] + cfg.occ_band * u, REGION_OCCUPIED)
    if cfg.m_f > 0:
        hi = ranges - cfg.trunc_band
        keep = hi > FREE_MIN_DEPTH
        u = rng.random((R, cfg.m_f))
        depth = FREE_MIN_DEPTH + u * np.maximum(hi - FREE_MIN_DEPTH, 0.0)[:, None]
        emit(depth, REGION_FREE, keep=keep)

    return TrainBatch(
        p=np.concatenate([b.p for b in parts]),
        d=np.concatenate([b.d for b in parts]),
        origin=np.concatenate([b.origin for b in parts]),
        psdf_gt=np.concatenate([b.psdf_gt for b in parts]),
        region=np.concatenate([b.region for b in parts]),
    )


def sample_ray(pose: Pose2, ray, cfg: TrainConfig, rng: np.random.Generator) -> List[TrainSample]:
    """Region samples for a single ray of a posed scan."""
    if not ray.valid:
        return []
    origin = pose.translation[None, :]
    d = rotate_dirs(pose.theta, ray.dir_array)[None, :]
    batch = sample_along_rays(origin, d, np.array([ray.range]), cfg, rng)
    return [
        TrainSample(
            p=batch.p[k],
            d=batch.d[k],
            origin=batch.origin[k],
            psdf_gt=float(batch.psdf_gt[k]),
            region=_REGION_NAMES[int(batch.region[k])],
        )
        for k in range(len(batch))
    ]


# ---------------------------------------------------------------------------
# losses


def loss_psdf(pred_sbar: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute projective-distance error over near-surface samples."""
    if np.asarray(target).size == 0:
        raise EmptyBatchError("psdf loss over empty batch")
    return ad.mean(ad.absolute(ad.sub(pred_sbar, Tensor(target))))


def loss_sdf(pred_s: Tensor, target_psdf: np.ndarray, logistic_scale: float) -> Tensor:
    """Scaled-sigmoid binary cross-entropy between s and the projective target.

    Both prediction and target pass through sigmoid(x / scale); computed in
    the numerically stable softplus form.
    """
    target_psdf = np.asarray(target_psdf, dtype=np.float64)
    if target_psdf.size == 0:
        raise EmptyBatchError("sdf loss over empty batch")
    y = 1.0 / (1.0 + np.exp(-target_psdf / logistic_scale))
    z = ad.mul(pred_s, 1.0 / logistic_scale)
    bce = ad.add(
        ad.mul(Tensor(y), ad.softplus(ad.neg(z))),
        ad.mul(Tensor(1.0 - y), ad.softplus(z)),
    )
    return ad.mean(bce)


def loss_eikonal(gradients: Tensor) -> Tensor:
    """Mean squared deviation of the gradient norm from 1 on (B, 2) gradients."""
    if gradients.values.size == 0:
        raise EmptyBatchError("eikonal loss over empty batch")
    sq = ad.tsum(ad.square(gradients), axis=1)
    norm = ad.sqrt(ad.add(sq, 1e-24))
    return ad.mean(ad.square(ad.sub(norm, 1.0)))


def compute_losses(model: nm.EnmModel, batch: TrainBatch, cfg: TrainConfig) -> dict:
    """Build the full loss graph; returns Tensors keyed sdf/psdf/eikonal/total."""
    if len(batch) == 0:
        raise EmptyBatchError("empty training batch")
    near = batch.near_mask
    s_all, sbar_all = nm.enm_forward(model, batch.p, batch.d)
    _, grad_near = nm.sdf_with_spatial_gradient(model, batch.p[near])

    l_sdf = loss_sdf(s_all, batch.psdf_gt, cfg.logistic_scale)
    l_psdf = loss_psdf(_select(sbar_all, near), batch.psdf_gt[near])
    l_eik = loss_eikonal(grad_near)
    total = ad.add(ad.add(l_sdf, l_psdf), ad.mul(l_eik, cfg.beta))
    return {"sdf": l_sdf, "psdf": l_psdf, "eikonal": l_eik, "total": total}


def _select(t: Tensor, mask: np.ndarray) -> Tensor:
    """Row selection as a graph op."""
    idx = np.flatnonzero(mask)

    def backward_fn(g):
        gx = np.zeros_like(t.values)
        gx[idx] = g
        return (gx,)

    return ad._node(t.values[idx], (t,), backward_fn)


def total_loss(model: nm.EnmModel, batch: TrainBatch, cfg: TrainConfig):
    """Forward + one backward pass; grads accumulate into all parameters.

    Returns (total, components) as floats.
    """
    losses = compute_losses(model, batch, cfg)
    ad.backward(losses["total"])
    return float(losses["total"].values), {k: float(v.values) for k, v in losses.items()}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RayPool:
    """All valid rays of all training scans, flattened to world frame."""

    origins: np.ndarray
    dirs: np.ndarray
    ranges: np.ndarray

    def __len__(self):
        return len(self.ranges)


def build_ray_pool(scans: Sequence[LidarScan], poses: Optional[Sequence[Pose2]] = None) -> RayPool:
    if poses is None:
        poses = [s.gt for s in scans]
        if any(p is None for p in poses):
            raise ValueError("every training scan needs a pose (gt or provided)")
    origins, dirs, ranges = [], [], []
    for scan, pose in zip(scans, poses):
        valid = scan.valid_mask()
        if not np.any(valid):
            continue
        beam_dirs = scan.directions()[valid]
        origins.append(np.broadcast_to(pose.translation, (valid.sum(), 2)).copy())
        dirs.append(rotate_dirs(pose.theta, beam_dirs))
        ranges.append(scan.ranges[valid])
    if not origins:
        raise ValueError("no valid rays in training data")
    return RayPool(np.concatenate(origins), np.concatenate(dirs), np.concatenate(ranges))


def data_bounds(pool: RayPool, pad: float):
    endpoints = pool.origins + pool.ranges[:, None] * pool.dirs
    pts = np.concatenate([endpoints, pool.origins])
    return pts.min(axis=0) - pad, pts.max(axis=0) + pad


def train_map(
    scans: Sequence[LidarScan],
    cfg: TrainConfig,
    poses: Optional[Sequence[Pose2]] = None,
    telemetry: Optional[list] = None,
    log_path=None,
) -> nm.EnmModel:
    """Fit a model to posed scans; deterministic given cfg.seed.

    Telemetry rows (iteration, loss_sdf, loss_psdf, loss_eikonal, total) are
    appended to `telemetry` and/or written as comma-separated lines to
    `log_path` every cfg.telemetry_every iterations.
    """
    rng = np.random.default_rng(cfg.seed)
    pool = build_ray_pool(scans, poses)
    lo, hi = data_bounds(pool, cfg.bounds_pad)
    model = nm.init_model(
        lo, hi, cfg.grid_resolution, cfg.feature_dim, cfg.n_bands, rng
    )
    params = model.parameters()
    state = ad.AdamState.for_params(params, lr=cfg.lr)

    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for it in range(cfg.iterations):
            ray_idx = rng.integers(0, len(pool), size=cfg.batch_rays)
            batch = sample_along_rays(
                pool.origins[ray_idx], pool.dirs[ray_idx], pool.ranges[ray_idx], cfg, rng
            )
            keep = model.grid.contains(batch.p)
            if not np.all(keep):
                batch = TrainBatch(
                    batch.p[keep], batch.d[keep], batch.origin[keep],
                    batch.psdf_gt[keep], batch.region[keep],
                )
            total, comps = total_loss(model, batch, cfg)
            ad.adam_step(params, state)
            ad.zero_grads(params)
            if (it + 1) % cfg.telemetry_every == 0 or it == cfg.iterations - 1:
                row = (it + 1, comps["sdf"], comps["psdf"], comps["eikonal"], total)
                if telemetry is not None:
                    telemetry.append(row)
                if log_fh is not None:
                    log_fh.write(
                        f"{row[0]},{row[1]:.9g},{row[2]:.9g},{row[3]:.9g},{row[4]:.9g}\n"
                    )
    finally:
        if log_fh is not None:
            log_fh.close()
    return model
