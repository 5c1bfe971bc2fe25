"""Learnable feature-grid distance field.

A dense 2D grid of D-dimensional feature vectors is bilinearly interpolated
at a query point, run through a 3-layer MLP into a positional embedding, and
decoded by two heads: a signed distance `s` (direction-independent) and a
projective signed distance `sbar` conditioned on a sinusoidally encoded ray
direction.

Two evaluation paths exist: a graph-building path (autodiff Tensors) used in
training, and a plain-numpy batch path used by the particle filter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_FEATURE_DIM = 4
DEFAULT_FREQ_BANDS = 4
DEFAULT_RESOLUTION = 0.10

_BOUNDS_TOL = 1e-12
_EDGE_NUDGE = 1e-9  # cells, used when a query sits exactly on a grid line


class GridBoundsError(ValueError):
    """Query point outside the feature grid."""


@dataclass
class FeatureGrid:
    """Dense grid of corner features covering an axis-aligned rectangle.

    Corner (i, j) sits at origin + (i, j) * resolution and owns feature row
    j * nx + i of `features` (shape (nx * ny, D)).
    """

    origin: np.ndarray
    resolution: float
    nx: int
    ny: int
    features: Tensor

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 corners per axis")
        if self.resolution <= 0:
            raise ValueError("grid resolution must be positive")
        if self.features.values.shape[0] != self.nx * self.ny:
            raise ad.ShapeError("feature row count != nx * ny")

    @property
    def dim(self) -> int:
        return self.features.values.shape[1]

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.resolution * np.array([self.nx - 1, self.ny - 1])

    def contains(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        lo_ok = np.all(p >= self.origin - _BOUNDS_TOL, axis=1)
        hi_ok = np.all(p <= self.upper + _BOUNDS_TOL, axis=1)
        return lo_ok & hi_ok


def _cell_weights(grid: FeatureGrid, p: np.ndarray):
    """Corner row indices and bilinear weights (plus weight gradients) for p.

    p: (B, 2), must be inside the grid.  Returns (idx (B,4), w (B,4),
    dwdx (B,4), dwdy (B,4)); weight gradients are in 1/meters.
    """
    u = (p - grid.origin) / grid.resolution
    i = np.clip(np.floor(u[:, 0]).astype(np.int64), 0, grid.nx - 2)
    j = np.clip(np.floor(u[:, 1]).astype(np.int64), 0, grid.ny - 2)
    tx = u[:, 0] - i
    ty = u[:, 1] - j
    idx = np.stack(
        [j * grid.nx + i, j * grid.nx + i + 1, (j + 1) * grid.nx + i, (j + 1) * grid.nx + i + 1],
        axis=1,
    )
    w = np.stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty], axis=1)
    inv = 1.0 / grid.resolution
    dwdx = np.stack([-(1 - ty), (1 - ty), -ty, ty], axis=1) * inv
    dwdy = np.stack([-(1 - tx), -tx, (1 - tx), tx], axis=1) * inv
    return idx, w, dwdx, dwdy


def _check_inside(grid: FeatureGrid, p: np.ndarray):
    inside = grid.contains(p)
    if not np.all(inside):
        bad = np.flatnonzero(~inside)
        raise GridBoundsError(f"{bad.size} query point(s) outside grid, first at row {bad[0]}")


def grid_interpolate(grid: FeatureGrid, p) -> Tensor:
    """Bilinear interpolation of corner features at p ((2,) or (B, 2)).

    Differentiable w.r.t. the corner features.  Out-of-bounds points raise
    GridBoundsError; callers that need a policy (clamping, penalties) must
    filter first.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    _check_inside(grid, pts)
    idx, w, _, _ = _cell_weights(grid, pts)
    out = ad.bilinear_gather(grid.features, idx, w)
    return ad.reshape(out, (grid.dim,)) if single else out


def positional_encode(d, n_bands: int) -> np.ndarray:
    """Per-component sinusoidal encoding of a direction vector.

    Each component c maps to (c, sin 2^0 c, cos 2^0 c, ..., sin 2^(L-1) c,
    cos 2^(L-1) c), length 2L+1; the two component encodings are
    concatenated.  Accepts (2,) or (B, 2); returns (2(2L+1),) or (B, 2(2L+1)).
    """
    if n_bands < 0:
        raise ValueError("n_bands must be >= 0")
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    dd = np.atleast_2d(d)
    per = 2 * n_bands + 1
    out = np.empty((dd.shape[0], dd.shape[1] * per))
    for c in range(dd.shape[1]):
        comp = dd[:, c]
        base = c * per
        out[:, base] = comp
        for band in range(n_bands):
            scaled = float(2**band) * comp
            np.sin(scaled, out=out[:, base + 1 + 2 * band])
            np.cos(scaled, out=out[:, base + 2 + 2 * band])
    return out[0] if single else out


@dataclass
class EnmModel:
    """Feature grid plus the two-branch decoder.

    fp_layers: 3 affine (W, b) pairs of width D feeding sdf_head (D -> 1).
    fd_layers: 3 affine pairs of width D + 2(2L+1) feeding psdf_head (-> 1),
    applied to the positional embedding concatenated with the encoded
    direction.  Every hidden layer is followed by ReLU.
    """

    grid: FeatureGrid
    fp_layers: List[Tuple[Tensor, Tensor]]
    sdf_head: Tuple[Tensor, Tensor]
    fd_layers: List[Tuple[Tensor, Tensor]]
    psdf_head: Tuple[Tensor, Tensor]
    n_bands: int = DEFAULT_FREQ_BANDS

    def parameters(self) -> List[Tensor]:
        out = [self.grid.features]
        for W, b in [*self.fp_layers, self.sdf_head, *self.fd_layers, self.psdf_head]:
            out.extend([W, b])
        return out

    @property
    def feature_dim(self) -> int:
        return self.grid.dim

    @property
    def fd_width(self) -> int:
        return self.feature_dim + 2 * (2 * self.n_bands + 1)


def init_model(
    lo,
    hi,
    resolution: float = DEFAULT_RESOLUTION,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    n_bands: int = DEFAULT_FREQ_BANDS,
    rng: Optional[np.random.Generator] = None,
    feature_scale: float = 0.01,
) -> EnmModel:
    """Fresh model whose grid covers the rectangle [lo, hi]."""
    rng = rng if rng is not None else np.random.default_rng(0)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    nx = max(2, int(np.ceil((hi[0] - lo[0]) / resolution)) + 1)
    ny = max(2, int(np.ceil((hi[1] - lo[1]) / resolution)) + 1)
    features = Tensor(
        rng.uniform(-feature_scale, feature_scale, size=(nx * ny, feature_dim)),
        requires_grad=True,
    )
    grid = FeatureGrid(lo, resolution, nx, ny, features)

    def layer(out_dim, in_dim):
        W = ad.param_init((out_dim, in_dim), rng)
        b = ad.param_init((out_dim,), rng, fan_in=in_dim)
        return W, b

    D = feature_dim
    wide = D + 2 * (2 * n_bands + 1)
    fp_layers = [layer(D, D) for _ in range(3)]
    sdf_head = layer(1, D)
    fd_layers = [layer(wide, wide) for _ in range(3)]
    psdf_head = layer(1, wide)
    return EnmModel(grid, fp_layers, sdf_head, fd_layers, psdf_head, n_bands)


def _fp_branch(model: EnmModel, f: Tensor):
    """Positional branch; returns (embedding, s, relu masks, pre-act tensors)."""
    h = f
    masks = []
    for W, b in model.fp_layers:
        z = ad.affine_apply(W, b, h)
        masks.append(z.values > 0)
        h = ad.relu(z)
    W, b = model.sdf_head
    s = ad.affine_apply(W, b, h)
    return h, s, masks


def enm_forward(model: EnmModel, p, d) -> Tuple[Tensor, Tensor]:
    """Evaluate (s, sbar) at p with ray direction d; builds an autodiff graph.

    p, d: (2,)/(B, 2).  Returns Tensors of shape () or (B,).
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    dirs = np.atleast_2d(np.asarray(d, dtype=np.float64))
    f = grid_interpolate(model.grid, pts)
    femb, s, _ = _fp_branch(model, f)

    dg = positional_encode(dirs, model.n_bands)
    x = ad.concat_apply(femb, Tensor(dg), axis=1)
    for W, b in model.fd_layers:
        x = ad.relu(ad.affine_apply(W, b, x))
    W, b = model.psdf_head
    sbar = ad.affine_apply(W, b, x)

    s = ad.reshape(s, () if single else (pts.shape[0],))
    sbar = ad.reshape(sbar, () if single else (pts.shape[0],))
    return s, sbar


def sdf_with_spatial_gradient(model: EnmModel, p) -> Tuple[Tensor, Tensor]:
    """s and its spatial gradient as differentiable graph nodes.

    The gradient is assembled in closed form: grad = J_f(p)^T (ds/df), with
    the ReLU masks of the forward pass held fixed (exact almost everywhere
    for a piecewise-linear network).  Shapes: s (B,), grad (B, 2).
    """
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    _check_inside(model.grid, pts)
    idx, w, dwdx, dwdy = _cell_weights(model.grid, pts)
    f = ad.bilinear_gather(model.grid.features, idx, w)
    _, s, masks = _fp_branch(model, f)

    # ds/df via reversed weight chain with fixed masks
    W_head, _ = model.sdf_head
    v = ad.mul(Tensor(masks[2].astype(np.float64)), W_head)  # (B, D) via broadcast
    v = ad.matmul(v, model.fp_layers[2][0])
    v = ad.mul(v, Tensor(masks[1].astype(np.float64)))
    v = ad.matmul(v, model.fp_layers[1][0])
    v = ad.mul(v, Tensor(masks[0].astype(np.float64)))
    v = ad.matmul(v, model.fp_layers[0][0])

    fx = ad.bilinear_gather(model.grid.features, idx, dwdx)
    fy = ad.bilinear_gather(model.grid.features, idx, dwdy)
    gx = ad.tsum(ad.mul(v, fx), axis=1)
    gy = ad.tsum(ad.mul(v, fy), axis=1)
    grad = ad.concat_apply(
        ad.reshape(gx, (pts.shape[0], 1)), ad.reshape(gy, (pts.shape[0], 1)), axis=1
    )
    return ad.reshape(s, (pts.shape[0],)), grad


def sdf_spatial_gradient(model: EnmModel, p) -> np.ndarray:
    """Analytic spatial gradient of s, plain numpy; (2,) or (B, 2).

    Points sitting exactly on a grid line are evaluated one-sided in the
    cell on the positive side (a 1e-9-cell nudge breaks exact ties toward
    the interior at the upper boundary).
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p).copy()
    _check_inside(model.grid, pts)
    # nudge exact upper-edge queries inward so floor() picks a real cell
    upper = model.grid.upper
    for axis in range(2):
        on_edge = pts[:, axis] >= upper[axis] - _BOUNDS_TOL
        pts[on_edge, axis] = upper[axis] - _EDGE_NUDGE * model.grid.resolution
    s_t, grad_t = sdf_with_spatial_gradient(model, pts)
    g = grad_t.values
    return g[0] if single else g


def evaluate_points(
    model: EnmModel,
    points: np.ndarray,
    dirs: np.ndarray,
    chunk: int = 262144,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plain-numpy batched (s, sbar) with an inside-grid mask.

    Out-of-grid points get NaN outputs and inside=False instead of raising,
    so callers can apply their own penalty policy.  Chunked to bound memory.
    """
    points = np.asarray(points, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = points.shape[0]
    s = np.full(n, np.nan)
    sbar = np.full(n, np.nan)
    inside = model.grid.contains(points)

    Wf = [(W.values, b.values) for W, b in model.fp_layers]
    Wd = [(W.values, b.values) for W, b in model.fd_layers]
    Ws, bs = model.sdf_head[0].values, model.sdf_head[1].values
    Wp, bp = model.psdf_head[0].values, model.psdf_head[1].values
    feats = model.grid.features.values

    sel = np.flatnonzero(inside)
    for start in range(0, sel.size, chunk):
        rows = sel[start : start + chunk]
        idx, w, _, _ = _cell_weights(model.grid, points[rows])
        h = np.einsum("bk,bkd->bd", w, feats[idx])
        for W, b in Wf:
            h = h @ W.T
            h += b
            np.maximum(h, 0.0, out=h)
        s[rows] = (h @ Ws.T + bs)[:, 0]
        x = np.concatenate([h, positional_encode(dirs[rows], model.n_bands)], axis=1)
        for W, b in Wd:
            x = x @ W.T
            x += b
            np.maximum(x, 0.0, out=x)
        sbar[rows] = (x @ Wp.T + bp)[:, 0]
    return s, sbar, inside
