"""Voxel radiance field and differentiable volume rendering.

The scene representation is a dense voxel grid over an axis-aligned box:
one pre-activation density scalar per node plus 3 color channels x 4
degree-1 spherical-harmonic coefficients per node (view-dependent color
on purpose; view dependence is what goes wrong on camera poses far from
the training distribution). Values between nodes are trilinear; node i
of an N-node axis sits at ``lo + i * (hi - lo) / (N - 1)``.

Rendering integrates N samples per ray over the ray's intersection with
the grid box:

    a_i = sigma_i * delta_i
    T_i = exp(-sum_{j<i} a_j),  T_1 = 1
    w_i = T_i - T_{i+1}         (algebraically T_i * (1 - exp(-a_i)))
    color   = sum_i w_i c_i + T_{N+1} * background
    depth   = sum_i w_i t_i / max(sum_i w_i, 1e-8)   (expected ray distance)
    opacity = sum_i w_i = 1 - T_{N+1}

Gradients of the mean squared color loss with respect to the raw grids
are computed analytically (no autodiff): with S_k the color rendered by
everything behind sample k,

    dC/d a_k = T_{k+1} c_k - S_k,
    S_k = sum_{i>k} w_i c_i + T_{N+1} * background,

chained through softplus (density) and sigmoid (color), then scattered
into the grids through the trilinear weights.

Checkpoints are little-endian binary: 4-byte magic, uint32 header
length, JSON header, then the density and color blobs as float64 with x
fastest (density stream index ix + Nx*(iy + Ny*iz); color additionally
ordered by channel then coefficient, slowest last).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from closeview.geometry import Intrinsics, Pose, Ray, pixel_grid, ray_directions

SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
SH_C1 = 0.4886025119029199  # sqrt(3) / (2 sqrt(pi))
CHECKPOINT_MAGIC = b"CVF1"
CHECKPOINT_VERSION = 1
OPACITY_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Loss or gradient became non-finite; carries the offending ray index."""

    def __init__(self, message: str, ray_index: int):
        super().__init__(message)
        self.ray_index = ray_index


class CheckpointError(Exception):
    """Checkpoint file is malformed or from an unsupported version."""


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Degree-1 SH basis rows [1, y, z, x terms] for unit directions."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    b = np.empty(dirs.shape[:-1] + (4,), dtype=np.float64)
    b[..., 0] = SH_C0
    b[..., 1] = -SH_C1 * dirs[..., 1]
    b[..., 2] = SH_C1 * dirs[..., 2]
    b[..., 3] = -SH_C1 * dirs[..., 0]
    return b


@dataclass
class VoxelRadianceField:
    """Dense trilinear grid of densities and SH color coefficients.

    ``density_params`` has shape (Nx, Ny, Nz) and is pre-softplus;
    ``color_params`` has shape (Nx, Ny, Nz, 3, 4) and is pre-sigmoid.
    Density is zero outside ``bbox``; color is edge-clamped.
    """

    resolution: tuple
    bbox: np.ndarray  # (2, 3) [lo; hi]
    density_params: np.ndarray
    color_params: np.ndarray

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        if len(self.resolution) != 3 or any(n < 2 for n in self.resolution):
            raise ValueError(f"resolution must be three counts >= 2, got {self.resolution}")
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        if not (self.bbox[0] < self.bbox[1]).all():
            raise ValueError("bbox min must be strictly below max on every axis")
        self.density_params = np.asarray(self.density_params, dtype=np.float64)
        self.color_params = np.asarray(self.color_params, dtype=np.float64)
        if self.density_params.shape != self.resolution:
            raise ValueError(
                f"density_params shape {self.density_params.shape} != resolution {self.resolution}"
            )
        if self.color_params.shape != self.resolution + (3, 4):
            raise ValueError(
                f"color_params shape {self.color_params.shape} != {self.resolution + (3, 4)}"
            )
        if not np.isfinite(self.density_params).all() or not np.isfinite(self.color_params).all():
            raise ValueError("field parameters must be finite")

    @classmethod
    def zeros(cls, resolution, bbox, density_init: float = 0.0) -> "VoxelRadianceField":
        resolution = tuple(int(n) for n in resolution)
        return cls(
            resolution=resolution,
            bbox=bbox,
            density_params=np.full(resolution, density_init, dtype=np.float64),
            color_params=np.zeros(resolution + (3, 4), dtype=np.float64),
        )

    def copy(self) -> "VoxelRadianceField":
        return VoxelRadianceField(
            resolution=self.resolution,
            bbox=self.bbox.copy(),
            density_params=self.density_params.copy(),
            color_params=self.color_params.copy(),
        )

    def parameters(self) -> dict:
        """Live (mutable) parameter arrays keyed like gradient dicts."""
        return {"density": self.density_params, "color": self.color_params}

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz


@dataclass(frozen=True)
class RenderOptions:
    """Knobs shared by every rendering and gradient entry point."""

    n_samples: int = 64
    stratified_jitter: bool = False
    background_color: tuple = (1.0, 1.0, 1.0)
    opacity_floor: float = 0.5  # below this, depth is not trusted
    t_near: float = 1e-3
    t_far: float = 60.0
    chunk_size: int = 16384  # rays per render chunk, fixed for determinism

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        bg = np.asarray(self.background_color, dtype=np.float64)
        if bg.shape != (3,) or (bg < 0).any() or (bg > 1).any():
            raise ValueError("background_color must be RGB in [0, 1]")
        if not (0.0 < self.t_near < self.t_far):
            raise ValueError("need 0 < t_near < t_far")
        if not (0.0 <= self.opacity_floor <= 1.0):
            raise ValueError("opacity_floor must be in [0, 1]")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")


@dataclass
class RenderResult:
    """Single-ray render with the per-sample internals exposed for tests."""

    color: np.ndarray  # (3,)
    depth: float
    opacity: float
    weights: np.ndarray  # (S,)
    transmittance: np.ndarray  # (S+1,), leading 1
    deltas: np.ndarray  # (S,)
    ts: np.ndarray  # (S,)


@dataclass
class ImageRender:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    opacity: np.ndarray  # (H, W)


@dataclass(frozen=True)
class RayBatch:
    """Bundle of world rays sharing one [t_near, t_far] integration range."""

    origins: np.ndarray  # (B, 3)
    dirs: np.ndarray  # (B, 3), unit
    t_near: float = 1e-3
    t_far: float = 60.0

    def __post_init__(self):
        o = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(self.dirs, dtype=np.float64).reshape(-1, 3)
        if o.shape != d.shape:
            raise ValueError("origins and dirs must match in shape")
        n = np.linalg.norm(d, axis=1)
        if not np.allclose(n, 1.0, atol=1e-9, rtol=0.0):
            raise ValueError("ray directions must be unit length")
        if not (0.0 < self.t_near < self.t_far):
            raise ValueError("need 0 < t_near < t_far")
        object.__setattr__(self, "origins", o)
        object.__setattr__(self, "dirs", d)

    def __len__(self) -> int:
        return self.origins.shape[0]

    def take(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.t_near, self.t_far)


# ---------------------------------------------------------------------------
# Field sampling
# ---------------------------------------------------------------------------


def _trilinear_setup(field: VoxelRadianceField, pts: np.ndarray):
    """Corner flat indices (M, 8), weights (M, 8) and inside-bbox mask."""
    nx, ny, nz = field.resolution
    lo, hi = field.bbox
    inside = ((pts >= lo) & (pts <= hi)).all(axis=1)
    scale = (np.array([nx, ny, nz], dtype=np.float64) - 1.0) / (hi - lo)
    g = (pts - lo) * scale
    i0 = np.floor(g).astype(np.int64)
    i0 = np.clip(i0, 0, np.array([nx, ny, nz]) - 2)
    f = np.clip(g - i0, 0.0, 1.0)  # edge-clamps points outside the box

    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    wx = np.stack([1.0 - fx, fx], axis=1)
    wy = np.stack([1.0 - fy, fy], axis=1)
    wz = np.stack([1.0 - fz, fz], axis=1)
    # corner order: bit 2 -> +x, bit 1 -> +y, bit 0 -> +z
    w8 = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)

    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    offs = np.array(
        [((dx * ny + dy) * nz + dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
        dtype=np.int64,
    )
    idx8 = base[:, None] + offs[None, :]
    return idx8, w8, inside


def _interp_raw(field: VoxelRadianceField, idx8, w8, want_color: bool = True):
    """Raw (pre-activation) density and SH coefficients at sample points."""
    m = idx8.shape[0]
    dens_flat = field.density_params.reshape(-1)
    raw_d = np.zeros(m, dtype=np.float64)
    for c in range(8):
        raw_d += dens_flat[idx8[:, c]] * w8[:, c]
    if not want_color:
        return raw_d, None
    col_flat = field.color_params.reshape(-1, 12)
    raw_c = np.zeros((m, 12), dtype=np.float64)
    tmp = np.empty((m, 12), dtype=np.float64)
    for c in range(8):
        np.take(col_flat, idx8[:, c], axis=0, out=tmp)
        tmp *= w8[:, c : c + 1]
        raw_c += tmp
    return raw_d, raw_c


def sample_field(field: VoxelRadianceField, x, d):
    """Color and density at world points ``x`` seen along unit directions ``d``.

    Returns ``(c, sigma)`` with c in [0, 1] and sigma >= 0 (exactly zero
    outside the bbox). Accepts single points or (M, 3) batches.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(d, dtype=np.float64))
    dirs = np.broadcast_to(dirs, pts.shape)
    idx8, w8, inside = _trilinear_setup(field, pts)
    raw_d, raw_c = _interp_raw(field, idx8, w8)
    sigma = np.where(inside, softplus(raw_d), 0.0)
    logits = np.einsum("mk,mck->mc", sh_basis(dirs), raw_c.reshape(-1, 3, 4))
    color = sigmoid(logits)
    if np.ndim(x) == 1:
        return color[0], float(sigma[0])
    return color, sigma


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------


@dataclass
class CompositeResult:
    rgb: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)
    opacity: np.ndarray  # (R,)
    weights: np.ndarray  # (R, S)
    trans: np.ndarray  # (R, S+1), leading column 1
    deltas: np.ndarray  # (R, S)


def composite(sigmas, colors, ts, t_end, background) -> CompositeResult:
    """Alpha-composite per-ray samples; the one place the weights are built.

    ``ts`` are sample distances (R, S), ``t_end`` the integration far end
    (R,); the last delta is ``t_end - ts[:, -1]``.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    t_end = np.asarray(t_end, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)

    deltas = np.empty_like(ts)
    deltas[:, :-1] = ts[:, 1:] - ts[:, :-1]
    deltas[:, -1] = t_end - ts[:, -1]
    a = sigmas * deltas
    trans = np.empty((ts.shape[0], ts.shape[1] + 1), dtype=np.float64)
    trans[:, 0] = 1.0
    trans[:, 1:] = np.exp(-np.cumsum(a, axis=1))
    weights = trans[:, :-1] - trans[:, 1:]

    opacity = 1.0 - trans[:, -1]
    rgb = np.einsum("rs,rsc->rc", weights, colors) + trans[:, -1:] * bg
    depth = (weights * ts).sum(axis=1) / np.maximum(opacity, OPACITY_EPS)
    return CompositeResult(rgb=rgb, depth=depth, opacity=opacity, weights=weights, trans=trans, deltas=deltas)


def _ray_box_range(bbox, origins, dirs, t_near, t_far):
    """Clip [t_near, t_far] to each ray's bbox overlap; valid = non-empty."""
    lo, hi = bbox
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    par = np.abs(dirs) < 1e-15
    between = (origins >= lo) & (origins <= hi)
    near = np.where(par, np.where(between, -np.inf, np.inf), np.minimum(ta, tb))
    far = np.where(par, np.where(between, np.inf, -np.inf), np.maximum(ta, tb))
    t0 = np.maximum(near.max(axis=1), t_near)
    t1 = np.minimum(far.min(axis=1), t_far)
    valid = t1 > t0
    return t0, t1, valid


def _sample_ts(t0, t1, n_samples, jitter, rng):
    """Sample distances in [t0, t1]: bin midpoints, or stratified draws."""
    frac_edges = np.linspace(0.0, 1.0, n_samples + 1)
    edges = t0[:, None] + (t1 - t0)[:, None] * frac_edges[None, :]
    if jitter:
        if rng is None:
            raise ValueError("stratified_jitter requires an rng")
        u = rng.random((t0.shape[0], n_samples))
    else:
        u = 0.5
    return edges[:, :-1] + u * (edges[:, 1:] - edges[:, :-1])


def _forward(field, origins, dirs, t_near, t_far, opts, rng):
    """Shared forward pass; returns per-ray outputs plus sample internals."""
    n = origins.shape[0]
    bg = np.asarray(opts.background_color, dtype=np.float64)
    out_rgb = np.broadcast_to(bg, (n, 3)).copy()
    out_depth = np.zeros(n)
    out_opacity = np.zeros(n)

    t0, t1, valid = _ray_box_range(field.bbox, origins, dirs, t_near, t_far)
    internals = None
    if valid.any():
        vo, vd = origins[valid], dirs[valid]
        ts = _sample_ts(t0[valid], t1[valid], opts.n_samples, opts.stratified_jitter, rng)
        pts = vo[:, None, :] + ts[:, :, None] * vd[:, None, :]
        flat = pts.reshape(-1, 3)
        idx8, w8, _ = _trilinear_setup(field, flat)
        raw_d, raw_c = _interp_raw(field, idx8, w8)
        sigmas = softplus(raw_d).reshape(ts.shape)
        basis = sh_basis(vd)  # (Rv, 4): direction is constant along a ray
        logits = np.einsum("rk,rsck->rsc", basis, raw_c.reshape(ts.shape + (3, 4)))
        colors = sigmoid(logits)
        comp = composite(sigmas, colors, ts, t1[valid], bg)
        out_rgb[valid] = comp.rgb
        out_depth[valid] = comp.depth
        out_opacity[valid] = comp.opacity
        internals = {
            "ts": ts, "idx8": idx8, "w8": w8, "raw_d": raw_d,
            "basis": basis, "colors": colors, "comp": comp,
        }
    return out_rgb, out_depth, out_opacity, valid, internals


def render_ray(field: VoxelRadianceField, ray: Ray, opts: RenderOptions, rng=None) -> RenderResult:
    """Render one ray, exposing weights/transmittance for inspection."""
    origins = ray.origin[None, :]
    dirs = ray.direction[None, :]
    rgb, depth, opacity, valid, internals = _forward(
        field, origins, dirs, ray.t_near, ray.t_far, opts, rng
    )
    if internals is None:
        s = opts.n_samples
        return RenderResult(
            color=rgb[0], depth=float(depth[0]), opacity=0.0,
            weights=np.zeros(s), transmittance=np.ones(s + 1),
            deltas=np.zeros(s), ts=np.zeros(s),
        )
    comp = internals["comp"]
    return RenderResult(
        color=rgb[0], depth=float(depth[0]), opacity=float(opacity[0]),
        weights=comp.weights[0], transmittance=comp.trans[0],
        deltas=comp.deltas[0], ts=internals["ts"][0],
    )


def render_image(field: VoxelRadianceField, pose: Pose, K: Intrinsics,
                 opts: RenderOptions, rng=None) -> ImageRender:
    """Render every pixel; chunked, deterministic for a given rng seed."""
    us, vs = pixel_grid(K)
    dirs = ray_directions(pose, K, us.ravel().astype(np.float64), vs.ravel().astype(np.float64))
    n = dirs.shape[0]
    origins = np.broadcast_to(pose.translation, (n, 3))
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    opacity = np.empty(n)
    for s in range(0, n, opts.chunk_size):
        e = min(s + opts.chunk_size, n)
        r, d, o, _, _ = _forward(field, origins[s:e], dirs[s:e], opts.t_near, opts.t_far, opts, rng)
        rgb[s:e] = r
        depth[s:e] = d
        opacity[s:e] = o
    shape = (K.height, K.width)
    return ImageRender(rgb=rgb.reshape(shape + (3,)), depth=depth.reshape(shape), opacity=opacity.reshape(shape))


def _depth_forward(field, origins, dirs, t_near, t_far, opts, rng):
    """Depth/opacity without any color work (about 2x faster)."""
    n = origins.shape[0]
    out_depth = np.zeros(n)
    out_opacity = np.zeros(n)
    t0, t1, valid = _ray_box_range(field.bbox, origins, dirs, t_near, t_far)
    if valid.any():
        ts = _sample_ts(t0[valid], t1[valid], opts.n_samples, opts.stratified_jitter, rng)
        pts = origins[valid][:, None, :] + ts[:, :, None] * dirs[valid][:, None, :]
        idx8, w8, _ = _trilinear_setup(field, pts.reshape(-1, 3))
        raw_d, _ = _interp_raw(field, idx8, w8, want_color=False)
        sigmas = softplus(raw_d).reshape(ts.shape)
        deltas = np.empty_like(ts)
        deltas[:, :-1] = ts[:, 1:] - ts[:, :-1]
        deltas[:, -1] = t1[valid] - ts[:, -1]
        trans = np.exp(-np.cumsum(sigmas * deltas, axis=1))
        weights = np.empty_like(ts)
        weights[:, 0] = 1.0 - trans[:, 0]
        weights[:, 1:] = trans[:, :-1] - trans[:, 1:]
        opacity = 1.0 - trans[:, -1]
        out_depth[valid] = (weights * ts).sum(axis=1) / np.maximum(opacity, OPACITY_EPS)
        out_opacity[valid] = opacity
    return out_depth, out_opacity


def render_rays_depth(field, origins, dirs, opts, rng=None):
    """Depth and opacity for an explicit set of rays (no color work)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    return _depth_forward(field, origins, dirs, opts.t_near, opts.t_far, opts, rng)


def render_depth_map(field, pose, K, opts, rng=None):
    """Depth plus validity (opacity >= opacity_floor) for warping.

    Skips all color computation; bitwise-identical depth to render_image.
    """
    us, vs = pixel_grid(K)
    dirs = ray_directions(pose, K, us.ravel().astype(np.float64), vs.ravel().astype(np.float64))
    n = dirs.shape[0]
    origins = np.broadcast_to(pose.translation, (n, 3))
    depth = np.empty(n)
    opacity = np.empty(n)
    for s in range(0, n, opts.chunk_size):
        e = min(s + opts.chunk_size, n)
        depth[s:e], opacity[s:e] = _depth_forward(
            field, origins[s:e], dirs[s:e], opts.t_near, opts.t_far, opts, rng
        )
    shape = (K.height, K.width)
    return depth.reshape(shape), opacity.reshape(shape) >= opts.opacity_floor


# ---------------------------------------------------------------------------
# Loss and analytic gradients
# ---------------------------------------------------------------------------


def loss_and_gradients(field: VoxelRadianceField, rays: RayBatch, target_colors: np.ndarray,
                       opts: RenderOptions, rng=None):
    """Mean squared color error over a ray batch and its exact gradients.

    loss = mean_r ||C_hat(r) - C(r)||^2; returns (loss, {"density": g_d,
    "color": g_c}) with gradient arrays shaped like the parameter grids.
    Raises DivergenceError (with the offending ray index) on non-finite
    values anywhere in the pipeline.
    """
    if len(rays) == 0:
        raise ValueError("ray batch must be non-empty")
    targets = np.asarray(target_colors, dtype=np.float64).reshape(-1, 3)
    if targets.shape[0] != len(rays):
        raise ValueError("target_colors must match the batch size")

    rgb, _, _, valid, internals = _forward(
        field, rays.origins, rays.dirs, rays.t_near, rays.t_far, opts, rng
    )
    if not np.isfinite(rgb).all():
        bad = int(np.argwhere(~np.isfinite(rgb).all(axis=1))[0, 0])
        raise DivergenceError(f"non-finite rendered color at ray {bad}", bad)

    resid = rgb - targets
    n = len(rays)
    loss = float((resid**2).sum() / n)
    if not np.isfinite(loss):
        bad = int(np.argwhere(~np.isfinite(resid).all(axis=1))[0, 0])
        raise DivergenceError(f"non-finite loss from ray {bad}", bad)

    g_density = np.zeros_like(field.density_params)
    g_color = np.zeros_like(field.color_params)
    if internals is None:  # every ray missed the grid: gradients are zero
        return loss, {"density": g_density, "color": g_color}

    dLdC = (2.0 / n) * resid[valid]  # (Rv, 3)
    comp = internals["comp"]
    colors = internals["colors"]  # (Rv, S, 3)
    w = comp.weights
    trans_next = comp.trans[:, 1:]  # T_{k+1}
    bg = np.asarray(opts.background_color, dtype=np.float64)

    # S_k = everything composited behind sample k (exclusive suffix)
    wc = w[:, :, None] * colors
    suffix = np.cumsum(wc[:, ::-1, :], axis=1)[:, ::-1, :] - wc
    suffix += comp.trans[:, -1:, None] * bg

    # d loss / d a_k, a_k = sigma_k * delta_k
    dC_da = trans_next[:, :, None] * colors - suffix  # (Rv, S, 3)
    dL_da = np.einsum("rc,rsc->rs", dLdC, dC_da)
    dL_dsigma = dL_da * comp.deltas
    dL_draw_d = (dL_dsigma * sigmoid(internals["raw_d"].reshape(w.shape))).reshape(-1)

    # color chain: c = sigmoid(<basis, coeffs>)
    dL_dc = dLdC[:, None, :] * w[:, :, None]  # (Rv, S, 3)
    dL_dlogit = dL_dc * colors * (1.0 - colors)
    dL_dcoef = dL_dlogit[:, :, :, None] * internals["basis"][:, None, None, :]  # (Rv, S, 3, 4)

    idx8 = internals["idx8"]
    w8 = internals["w8"]
    n_nodes = field.n_nodes
    idx_flat = idx8.ravel()
    buf = np.empty_like(w8)
    np.multiply(dL_draw_d[:, None], w8, out=buf)
    g_density.reshape(-1)[:] = np.bincount(idx_flat, weights=buf.ravel(), minlength=n_nodes)
    gc_flat = g_color.reshape(-1, 12)
    dcoef_flat = dL_dcoef.reshape(-1, 12)
    for col in range(12):
        np.multiply(dcoef_flat[:, col : col + 1], w8, out=buf)
        gc_flat[:, col] = np.bincount(idx_flat, weights=buf.ravel(), minlength=n_nodes)
    grads = {"density": g_density, "color": g_color}
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite {name} gradient", -1)
    return loss, grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_field(field: VoxelRadianceField, path) -> None:
    """Atomically write a checkpoint (temp file + rename).

    Refuses non-finite parameter grids (a diverged optimizer can leave them
    behind through in-place updates): load_field could never accept the file.
    """
    if not (np.isfinite(field.density_params).all()
            and np.isfinite(field.color_params).all()):
        raise ValueError("refusing to save non-finite field parameters")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "resolution": list(field.resolution),
        "bbox": field.bbox.tolist(),
        "sh_degree": 1,
        "n_sh_coeffs": 4,
        "channels": 3,
        "density_activation": "softplus",
        "color_activation": "sigmoid",
        "dtype": "<f8",
        "layout": "x-fastest: density stream ix + Nx*(iy + Ny*iz); "
        "color stream additionally ordered channel then coefficient, slowest last",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.array(len(blob), dtype="<u4").tobytes())
        f.write(blob)
        f.write(field.density_params.astype("<f8").ravel(order="F").tobytes())
        f.write(field.color_params.astype("<f8").ravel(order="F").tobytes())
    os.replace(tmp, path)


def load_field(path) -> VoxelRadianceField:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a field checkpoint (bad magic)")
    hlen = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}")
    nx, ny, nz = (int(v) for v in header["resolution"])
    n_nodes = nx * ny * nz
    off = 8 + hlen
    need = off + 8 * n_nodes * 13
    if len(data) != need:
        raise CheckpointError(f"checkpoint truncated: {len(data)} bytes, expected {need}")
    dens = np.frombuffer(data, dtype="<f8", count=n_nodes, offset=off)
    cols = np.frombuffer(data, dtype="<f8", count=n_nodes * 12, offset=off + 8 * n_nodes)
    return VoxelRadianceField(
        resolution=(nx, ny, nz),
        bbox=np.asarray(header["bbox"], dtype=np.float64),
        density_params=dens.reshape((nx, ny, nz), order="F").copy(),
        color_params=cols.reshape((nx, ny, nz, 3, 4), order="F").copy(),
    )
