"""Dataset / checkpoint / trajectory serialization, trajectory metrics, and
distance-field rendering.

Dataset files are line-delimited text, one scan per line, float fields at
32-bit precision.  Checkpoints are a fixed little-endian binary layout with
magic "ENM1".  Metric output is `metric,value` rows.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import neuralmap as nm
from .autodiff import Tensor
from .mcl import TrajectoryRow
from .se2 import LidarScan, Pose2, angle_wrap

CHECKPOINT_MAGIC = b"ENM1"
CHECKPOINT_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed dataset line or missing required field."""


class CheckpointFormatError(ValueError):
    """Bad magic or version in a checkpoint file."""


class CheckpointCorruptError(ValueError):
    """Checkpoint file is truncated or internally inconsistent."""


def _f32(x: float) -> str:
    """Shortest decimal string that round-trips through float32."""
    return np.format_float_positional(np.float32(x), unique=True, trim="0")


def _f32_angle(x: float) -> str:
    """Like _f32 but guaranteed to parse back into [-pi, pi).

    Quantizing an angle near the boundary can land one float32 ULP outside
    the range, which re-wrapping would move to the other end and break
    byte-stable round trips; nudge such values back inside.
    """
    v = np.float32(angle_wrap(float(x)))
    if not (-math.pi <= float(v) < math.pi):
        v = np.nextafter(v, np.float32(0.0))
    return np.format_float_positional(v, unique=True, trim="0")


# ---------------------------------------------------------------------------
# dataset text format: per line, space-separated key=value tokens
#   t=.. odom=x,y,th [gt=x,y,th] angle_min=.. angle_inc=.. range_max=.. ranges=r1,r2,...
# invalid ranges are encoded as -1


def write_dataset(scans: Sequence[LidarScan], path) -> None:
    with open(path, "w") as fh:
        for scan in scans:
            parts = [
                f"t={_f32(scan.time)}",
                f"odom={_f32(scan.odom.x)},{_f32(scan.odom.y)},{_f32_angle(scan.odom.theta)}",
            ]
            if scan.gt is not None:
                parts.append(f"gt={_f32(scan.gt.x)},{_f32(scan.gt.y)},{_f32_angle(scan.gt.theta)}")
            parts.append(f"angle_min={_f32(scan.angle_min)}")
            parts.append(f"angle_inc={_f32(scan.angle_inc)}")
            parts.append(f"range_max={_f32(scan.range_max)}")
            ranges = ",".join(_f32(r if r > 0 else -1.0) for r in scan.ranges)
            parts.append(f"ranges={ranges}")
            fh.write(" ".join(parts) + "\n")


def read_dataset(path) -> List[LidarScan]:
    scans = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = {}
            for token in line.split():
                if "=" not in token:
                    raise DatasetFormatError(f"{path}:{lineno}: bad token {token!r}")
                key, _, val = token.partition("=")
                fields[key] = val
            missing = {"t", "odom", "angle_min", "angle_inc", "range_max", "ranges"} - set(fields)
            if missing:
                raise DatasetFormatError(f"{path}:{lineno}: missing field(s) {sorted(missing)}")
            try:
                t = float(fields["t"])
                ox, oy, oth = (float(v) for v in fields["odom"].split(","))
                gt = None
                if "gt" in fields:
                    gx, gy, gth = (float(v) for v in fields["gt"].split(","))
                    gt = Pose2(gx, gy, gth)
                ranges = np.array([float(v) for v in fields["ranges"].split(",")])
                scans.append(
                    LidarScan(
                        time=t,
                        odom=Pose2(ox, oy, oth),
                        ranges=ranges,
                        angle_min=float(fields["angle_min"]),
                        angle_inc=float(fields["angle_inc"]),
                        range_max=float(fields["range_max"]),
                        gt=gt,
                    )
                )
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    return scans


# ---------------------------------------------------------------------------
# checkpoint binary format


def _layers_in_order(model: nm.EnmModel):
    return [*model.fp_layers, model.sdf_head, *model.fd_layers, model.psdf_head]


def checkpoint_size(model: nm.EnmModel) -> int:
    """Exact file size in bytes for the fixed layout."""
    header = 4 + 4 + 16 + 8 + 16  # magic, version, origin, resolution, nx/ny/D/L
    grid = 4 * model.grid.nx * model.grid.ny * model.grid.dim
    layers = sum(
        8 + 4 * (W.values.size + b.values.size) for W, b in _layers_in_order(model)
    )
    return header + grid + layers


def save_checkpoint(model: nm.EnmModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<2d", *model.grid.origin))
        fh.write(struct.pack("<d", model.grid.resolution))
        fh.write(
            struct.pack("<4I", model.grid.nx, model.grid.ny, model.grid.dim, model.n_bands)
        )
        fh.write(model.grid.features.values.astype("<f4").tobytes())
        for W, b in _layers_in_order(model):
            out_dim, in_dim = W.values.shape
            fh.write(struct.pack("<2I", in_dim, out_dim))
            fh.write(W.values.astype("<f4").tobytes())
            fh.write(b.values.astype("<f4").tobytes())


def load_checkpoint(path) -> nm.EnmModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    try:
        off = 8
        origin = struct.unpack_from("<2d", data, off)
        off += 16
        (resolution,) = struct.unpack_from("<d", data, off)
        off += 8
        nx, ny, dim, n_bands = struct.unpack_from("<4I", data, off)
        off += 16

        def take_f32(count):
            nonlocal off
            end = off + 4 * count
            if end > len(data):
                raise CheckpointCorruptError(f"{path}: truncated file")
            arr = np.frombuffer(data[off:end], dtype="<f4").astype(np.float64)
            off = end
            return arr

        feats = take_f32(nx * ny * dim).reshape(nx * ny, dim)
        grid = nm.FeatureGrid(np.array(origin), resolution, nx, ny,
                              Tensor(feats, requires_grad=True))
        layers = []
        for _ in range(8):
            if off + 8 > len(data):
                raise CheckpointCorruptError(f"{path}: truncated file")
            in_dim, out_dim = struct.unpack_from("<2I", data, off)
            off += 8
            W = take_f32(out_dim * in_dim).reshape(out_dim, in_dim)
            b = take_f32(out_dim)
            layers.append((Tensor(W, requires_grad=True), Tensor(b, requires_grad=True)))
        if off != len(data):
            raise CheckpointCorruptError(f"{path}: {len(data) - off} trailing bytes")
    except struct.error as exc:
        raise CheckpointCorruptError(f"{path}: truncated file") from exc
    return nm.EnmModel(
        grid,
        fp_layers=layers[0:3],
        sdf_head=layers[3],
        fd_layers=layers[4:7],
        psdf_head=layers[7],
        n_bands=n_bands,
    )


# ---------------------------------------------------------------------------
# trajectories and metrics


@dataclass
class Trajectory:
    """Timestamped pose sequence in the global map frame."""

    times: np.ndarray
    poses: np.ndarray  # (M, 3)
    converged: Optional[np.ndarray] = None
    convergence_time: Optional[float] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 3)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")


@dataclass
class AteReport:
    loc_rmse_cm: float
    yaw_rmse_deg: float
    n_matched: int
    success: Optional[bool] = None
    convergence_time: Optional[float] = None


def write_trajectory(rows: Sequence[TrajectoryRow], path) -> None:
    """Plain-text rows: time,x,y,theta,pos_std,yaw_std,converged,n_particles."""
    with open(path, "w") as fh:
        for r in rows:
            fh.write(
                f"{r.time:.9g},{r.pose.x:.9g},{r.pose.y:.9g},{r.pose.theta:.9g},"
                f"{r.pos_std:.9g},{r.yaw_std:.9g},{int(r.converged)},{r.n_particles}\n"
            )


def read_trajectory(path) -> Trajectory:
    times, poses, converged = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise DatasetFormatError(f"{path}:{lineno}: expected 8 fields")
            times.append(float(parts[0]))
            poses.append([float(parts[1]), float(parts[2]), float(parts[3])])
            converged.append(bool(int(parts[6])))
    return Trajectory(np.array(times), np.array(poses), np.array(converged, dtype=bool))


def gt_trajectory(scans: Sequence[LidarScan]) -> Trajectory:
    rows = [(s.time, s.gt) for s in scans if s.gt is not None]
    if not rows:
        raise ValueError("no ground-truth poses in dataset")
    return Trajectory(
        np.array([t for t, _ in rows]),
        np.array([[p.x, p.y, p.theta] for _, p in rows]),
    )


def _match(est: Trajectory, gt: Trajectory, from_time: float):
    """Nearest-timestamp pairing with tolerance half the median gt period."""
    if len(gt.times) > 1:
        tol = 0.5 * float(np.median(np.diff(gt.times)))
    else:
        tol = math.inf
    sel = np.flatnonzero(est.times >= from_time)
    idx = np.clip(np.searchsorted(gt.times, est.times[sel]), 0, len(gt.times) - 1)
    prev = np.clip(idx - 1, 0, len(gt.times) - 1)
    use_prev = np.abs(gt.times[prev] - est.times[sel]) < np.abs(gt.times[idx] - est.times[sel])
    idx = np.where(use_prev, prev, idx)
    ok = np.abs(gt.times[idx] - est.times[sel]) <= tol
    return sel[ok], idx[ok]


def ate_rmse(est: Trajectory, gt: Trajectory, from_time: float = -math.inf) -> AteReport:
    """Absolute trajectory error in the shared map frame (no alignment).

    Location RMSE in centimeters, yaw RMSE in degrees over wrapped angular
    differences; only samples at or after from_time are scored.
    """
    ei, gi = _match(est, gt, from_time)
    if ei.size == 0:
        raise ValueError("no matched trajectory pairs after from_time")
    dpos = est.poses[ei, :2] - gt.poses[gi, :2]
    loc_rmse = math.sqrt(float(np.mean(np.sum(dpos**2, axis=1))))
    dyaw = angle_wrap(est.poses[ei, 2] - gt.poses[gi, 2])
    yaw_rmse = math.sqrt(float(np.mean(np.square(dyaw))))
    return AteReport(
        loc_rmse_cm=loc_rmse * 100.0,
        yaw_rmse_deg=math.degrees(yaw_rmse),
        n_matched=int(ei.size),
    )


def success_and_convergence(
    est: Trajectory,
    gt: Trajectory,
    pos_gate: float = 0.3,
) -> Tuple[bool, Optional[float]]:
    """Success flag and convergence time for a localization run.

    Convergence time is the first timestamp whose row reports converged AND
    has instantaneous position error below pos_gate.  The run is a success
    when it converged, the filter stayed converged to the end, and the
    post-convergence location RMSE is below pos_gate.
    """
    if est.converged is None:
        raise ValueError("trajectory carries no convergence flags")
    ei, gi = _match(est, gt, -math.inf)
    err = np.full(len(est.times), np.inf)
    err[ei] = np.linalg.norm(est.poses[ei, :2] - gt.poses[gi, :2], axis=1)
    hits = np.flatnonzero(est.converged & (err < pos_gate))
    if hits.size == 0:
        return False, None
    t_conv = float(est.times[hits[0]])
    stays = bool(np.all(est.converged[hits[0]:]))
    post = ate_rmse(est, gt, from_time=t_conv)
    success = stays and post.loc_rmse_cm < pos_gate * 100.0
    return success, t_conv


def write_metrics(report: AteReport, path_or_fh) -> None:
    rows = [
        ("loc_rmse_cm", f"{report.loc_rmse_cm:.9g}"),
        ("yaw_rmse_deg", f"{report.yaw_rmse_deg:.9g}"),
        ("n_matched", str(report.n_matched)),
    ]
    if report.success is not None:
        rows.append(("success", str(int(report.success))))
    if report.convergence_time is not None:
        rows.append(("convergence_time_s", f"{report.convergence_time:.9g}"))
    text = "".join(f"{k},{v}\n" for k, v in rows)
    if hasattr(path_or_fh, "write"):
        path_or_fh.write(text)
    else:
        with open(path_or_fh, "w") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# rendering


def render_sdf(model: nm.EnmModel, lo, hi, px_per_meter: float):
    """Sample s on a pixel lattice over [lo, hi].

    Returns (image, contour): image is uint8 with [-0.5 m, +0.5 m] mapped to
    [0, 255] (clamped), contour is a bool mask of zero-crossing pixels.  Row
    0 is the top of the map (ymax).  Bounds must lie inside the grid.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo < model.grid.origin) or np.any(hi > model.grid.upper):
        raise nm.GridBoundsError("render bounds outside the feature grid")
    w_px = int(math.ceil((hi[0] - lo[0]) * px_per_meter))
    h_px = int(math.ceil((hi[1] - lo[1]) * px_per_meter))
    xs = lo[0] + (np.arange(w_px) + 0.5) / px_per_meter
    ys = hi[1] - (np.arange(h_px) + 0.5) / px_per_meter
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    pts = np.clip(pts, model.grid.origin, model.grid.upper)
    dirs = np.tile(np.array([1.0, 0.0]), (len(pts), 1))
    s, _, _ = nm.evaluate_points(model, pts, dirs)
    field = s.reshape(h_px, w_px)
    img = np.clip(np.round((field + 0.5) * 255.0), 0, 255).astype(np.uint8)
    sign = field >= 0
    contour = np.zeros_like(sign)
    contour[:, :-1] |= sign[:, :-1] != sign[:, 1:]
    contour[:-1, :] |= sign[:-1, :] != sign[1:, :]
    return img, contour


def write_pgm(image: np.ndarray, path) -> None:
    """Binary P5 portable graymap, maxval 255."""
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(image.astype(np.uint8).tobytes())


def render_sdf_image(model: nm.EnmModel, lo, hi, px_per_meter: float, path) -> None:
    """Write the grayscale field to `path` and the zero-contour mask to a
    companion file with suffix `.contour.pgm`."""
    img, contour = render_sdf(model, lo, hi, px_per_meter)
    write_pgm(img, path)
    write_pgm(np.where(contour, 255, 0).astype(np.uint8), str(path) + ".contour.pgm")
