"""Close-up pose generation and warped pseudo-label construction.

The repair mechanism for close-up degradation: sample a camera pose much
nearer to the scene surface than any training pose, then supervise it
with labels warped from real training images instead of trusting the
field's own extrapolation.

Pose generation: pick a training view, pick an anchor pixel whose
rendered opacity clears a floor, lift it to a surface point X_a, move
the camera toward X_a so its distance shrinks by a magnification factor
lam (new center = ((lam-1) X_a + t_n) / lam), and perturb orientation by
independent uniform Euler offsets.

Labels: a backward warp resamples the seed view's image at projections
of target-depth-lifted points (sub-pixel bilinear), while a forward warp
splats every training pixel through its own depth into the target with
a minimum-depth z-buffer. Pixels where the two disagree (max channel
difference at or above a threshold) or where either is undefined are
masked out; occluded or mis-estimated geometry fails this cross-check.

All functions are pure given a field snapshot and an explicit rng.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from closeview.field import (
    RayBatch,
    RenderOptions,
    render_depth_map,
    render_rays_depth,
)
from closeview.geometry import (
    Intrinsics,
    Pose,
    euler_from_rotation,
    points_from_depth,
    project_points,
    ray_directions,
    rotation_from_euler,
)

ZBUFFER_TIE_EPS = 1e-6
ANCHOR_ATTEMPTS = 4096
ANCHOR_CHUNK = 512


class SceneNotReadyError(RuntimeError):
    """No anchor pixel cleared the opacity floor within the retry budget."""


class LabelRejectedError(RuntimeError):
    """Pseudo-label mask covered too little of the image; resample the pose."""

    def __init__(self, message: str, valid_fraction: float):
        super().__init__(message)
        self.valid_fraction = valid_fraction


class NoOverlapError(RuntimeError):
    """No training view projects any pixel into the test view."""


@dataclass(frozen=True)
class CloseupConfig:
    """Knobs for pose generation and label acceptance."""

    lambda_range: tuple = (2.0, 8.0)
    angle_bound: float = np.pi / 4
    rgb_match_threshold: float = 0.05
    min_anchor_opacity: float = 0.5
    min_mask_fraction: float = 0.05

    def __post_init__(self):
        lo, hi = self.lambda_range
        if not (2.0 <= lo < hi):
            raise ValueError(f"need 2 <= lambda_min < lambda_max, got {self.lambda_range}")
        if not (0.0 < self.angle_bound <= np.pi):
            raise ValueError("angle_bound must be in (0, pi]")
        if not self.rgb_match_threshold > 0:
            raise ValueError("rgb_match_threshold must be positive")
        if not (0.0 <= self.min_mask_fraction <= 1.0):
            raise ValueError("min_mask_fraction must be in [0, 1]")


@dataclass(frozen=True)
class CloseupPose:
    """A generated close-up camera with its provenance."""

    pose: Pose
    source_index: int  # manifest frame index of the seed training view
    anchor_pixel: tuple  # (u_a, v_a) integer pixel in the seed view
    anchor_point: np.ndarray  # X_a, world surface point
    magnification: float  # distance-shrink factor (lam)


@dataclass
class PseudoLabel:
    """Backward-warped label image plus its cross-check and mask."""

    image: np.ndarray  # (H, W, 3) backward warp I'
    defined: np.ndarray  # (H, W) bool, backward warp hit valid data
    aggregate: np.ndarray  # (H, W, 3) forward-splat winner colors
    aggregate_defined: np.ndarray  # (H, W) bool
    aggregate_depth: np.ndarray  # (H, W) z-buffer (ray distance), NaN undefined
    mask: np.ndarray  # (H, W) bool, final supervision mask

    @property
    def valid_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class PseudoBatch:
    """Mask-surviving pseudo supervision for a sampled pixel subset."""

    pixels: np.ndarray  # (n, 2) integer (u, v)
    colors: np.ndarray  # (n, 3) label colors
    rays: RayBatch

    def __len__(self) -> int:
        return self.pixels.shape[0]


# ---------------------------------------------------------------------------
# Pose generation
# ---------------------------------------------------------------------------


def closeup_translation(t_n: np.ndarray, anchor: np.ndarray, lam: float) -> np.ndarray:
    """Camera center moved toward the anchor: distance shrinks by 1/lam."""
    return ((lam - 1.0) * anchor + t_n) / lam


def perturbed_closeup_pose(base: Pose, anchor, lam: float, dtheta) -> Pose:
    """Close-up pose from a seed pose: translate toward anchor, rotate by offsets."""
    anchor = np.asarray(anchor, dtype=np.float64)
    t_new = closeup_translation(base.translation, anchor, lam)
    e = euler_from_rotation(base.rotation)
    r_new = rotation_from_euler(e.offset(*dtheta))
    return Pose(rotation=r_new, translation=t_new)


def generate_closeup_pose(field, manifest, config: CloseupConfig, rng,
                          opts: RenderOptions | None = None,
                          attempts: int = ANCHOR_ATTEMPTS) -> CloseupPose:
    """Sample one close-up pose seeded by a random training view.

    The seed view is uniform over training frames; the anchor pixel is
    uniform over that view's pixels whose rendered opacity is at least
    ``min_anchor_opacity``. Pixels are rejection-sampled in chunks (the
    first qualifying draw of an iid uniform sequence is itself uniform
    over the qualifying set). Raises SceneNotReadyError when the draw
    budget runs out, which means the field is still too empty to anchor.
    """
    opts = opts or RenderOptions()
    K = manifest.intrinsics
    train = manifest.train_indices
    spent = 0
    while spent < attempts:
        chunk = min(ANCHOR_CHUNK, attempts - spent)
        spent += chunk
        n = train[int(rng.integers(0, len(train)))]
        base = manifest.frames[n].pose
        ids = rng.integers(0, K.width * K.height, size=chunk)
        us = (ids % K.width).astype(np.float64)
        vs = (ids // K.width).astype(np.float64)
        dirs = ray_directions(base, K, us, vs)
        depth, opacity = render_rays_depth(
            field, np.broadcast_to(base.translation, dirs.shape), dirs, opts)
        hits = np.flatnonzero(opacity >= config.min_anchor_opacity)
        if hits.size == 0:
            continue
        k = int(hits[0])
        anchor = base.translation + depth[k] * dirs[k]
        lam = float(rng.uniform(*config.lambda_range))
        dtheta = rng.uniform(-config.angle_bound, config.angle_bound, size=3)
        pose = perturbed_closeup_pose(base, anchor, lam, dtheta)
        return CloseupPose(
            pose=pose, source_index=n, anchor_pixel=(int(us[k]), int(vs[k])),
            anchor_point=anchor, magnification=lam,
        )
    raise SceneNotReadyError(
        f"no anchor pixel reached opacity {config.min_anchor_opacity} in {attempts} draws"
    )


# ---------------------------------------------------------------------------
# Warps
# ---------------------------------------------------------------------------


def _bilinear_sample(image: np.ndarray, uv: np.ndarray):
    """Sample continuous image coordinates; returns colors and a support mask.

    Coordinates use the continuous convention (pixel i covers [i, i+1));
    a sample is supported when its full 2x2 neighborhood exists.
    """
    h, w = image.shape[:2]
    eps = 1e-9  # tolerate projection roundoff at the support boundary
    x = uv[:, 0] - 0.5
    y = uv[:, 1] - 0.5
    with np.errstate(invalid="ignore"):
        ok = (x >= -eps) & (x <= w - 1.0 + eps) & (y >= -eps) & (y <= h - 1.0 + eps)
    xs = np.clip(np.where(ok, x, 0.0), 0.0, w - 1.0)
    ys = np.clip(np.where(ok, y, 0.0), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 2)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    c00 = image[y0, x0]
    c01 = image[y0, x0 + 1]
    c10 = image[y0 + 1, x0]
    c11 = image[y0 + 1, x0 + 1]
    top = c00 * (1.0 - fx) + c01 * fx
    bot = c10 * (1.0 - fx) + c11 * fx
    return top * (1.0 - fy) + bot * fy, ok


def backward_warp(target_pose: Pose, target_depth_map: np.ndarray, source_image: np.ndarray,
                  source_pose: Pose, K: Intrinsics):
    """Resample the source image at projections of target-depth surface points.

    ``target_depth_map`` holds ray distances with NaN where invalid.
    Returns (image, defined); undefined pixels are black and flagged.
    """
    h, w = K.height, K.width
    if target_depth_map.shape != (h, w):
        raise ValueError(f"depth map {target_depth_map.shape} does not match {h}x{w}")
    out = np.zeros((h, w, 3))
    defined = np.zeros((h, w), dtype=bool)
    valid = np.isfinite(target_depth_map)
    if not valid.any():
        return out, defined
    vs, us = np.nonzero(valid)
    pts = points_from_depth(target_pose, K, us.astype(np.float64), vs.astype(np.float64),
                            target_depth_map[vs, us])
    uv, _, in_front = project_points(source_pose, K, pts)
    colors, supported = _bilinear_sample(source_image, uv)
    ok = in_front & supported
    out[vs[ok], us[ok]] = colors[ok]
    defined[vs[ok], us[ok]] = True
    return out, defined


def _zbuffer_winners(pix: np.ndarray, depth: np.ndarray, n_pixels: int):
    """First-processed candidate among those within a tie window of the
    per-pixel minimum depth. Returns candidate indices per pixel (-1 none)."""
    if pix.size == 0:
        return np.full(n_pixels, -1, dtype=np.int64)
    order = np.arange(pix.shape[0])
    s = np.lexsort((order, depth, pix))
    sp = pix[s]
    first = np.ones(sp.shape[0], dtype=bool)
    first[1:] = sp[1:] != sp[:-1]
    zmin = np.full(n_pixels, np.inf)
    zmin[sp[first]] = depth[s[first]]
    eligible = depth <= zmin[pix] + ZBUFFER_TIE_EPS
    ep = pix[eligible]
    eo = order[eligible]
    s2 = np.lexsort((eo, ep))
    ep_s = ep[s2]
    first2 = np.ones(ep_s.shape[0], dtype=bool)
    first2[1:] = ep_s[1:] != ep_s[:-1]
    winners = np.full(n_pixels, -1, dtype=np.int64)
    winners[ep_s[first2]] = eo[s2[first2]]
    return winners


def _forward_candidates(target_pose: Pose, sources, K: Intrinsics,
                        K_target: Intrinsics | None = None):
    """Splat every valid source pixel into the target pixel grid.

    Source pixels are lifted with ``K``; the target raster uses
    ``K_target`` (defaults to ``K``). Returns flat candidate arrays
    (target pixel id, ray-distance depth, color), ordered source-major
    then row-major, so "first processed" is deterministic.
    """
    kt = K_target if K_target is not None else K
    pix_all, depth_all, color_all = [], [], []
    for image, pose, depth_map in sources:
        valid = np.isfinite(depth_map)
        if not valid.any():
            continue
        vs, us = np.nonzero(valid)
        pts = points_from_depth(pose, K, us.astype(np.float64), vs.astype(np.float64),
                                depth_map[vs, us])
        uv, z, in_front = project_points(target_pose, kt, pts)
        with np.errstate(invalid="ignore"):
            px = np.floor(uv[:, 0]).astype(np.int64)
            py = np.floor(uv[:, 1]).astype(np.int64)
            inside = in_front & (uv[:, 0] >= 0) & (px < kt.width) & (uv[:, 1] >= 0) & (py < kt.height)
        if not inside.any():
            continue
        ray_dist = np.linalg.norm(pts[inside] - target_pose.translation, axis=1)
        pix_all.append(py[inside] * kt.width + px[inside])
        depth_all.append(ray_dist)
        color_all.append(image[vs[inside], us[inside]])
    if not pix_all:
        return (np.empty(0, dtype=np.int64), np.empty(0), np.empty((0, 3)))
    return np.concatenate(pix_all), np.concatenate(depth_all), np.vstack(color_all)


def forward_warp_aggregate(target_pose: Pose, sources, K: Intrinsics, resolution=None):
    """Z-buffered forward splat of all source pixels into the target view.

    ``sources`` is a list of (image, pose, depth_map) with NaN-invalid
    depths. Keeps the minimum-target-ray-distance candidate per pixel
    (ties within 1e-6 go to the first processed). ``resolution`` (w, h)
    rescales the target raster (uniform scale of the shared intrinsics,
    e.g. draft previews); sources stay at native resolution. Returns
    (aggregate image, z-buffer with NaN holes, defined flags).
    """
    if resolution is None:
        w, h = K.width, K.height
        kt = K
    else:
        w, h = resolution
        if abs(w / K.width - h / K.height) > 1e-9:
            raise ValueError(f"resolution {resolution} changes the aspect of {K.width}x{K.height}")
        kt = K.scaled(w / K.width)
    n_pixels = w * h
    pix, depth, color = _forward_candidates(target_pose, sources, K, kt)
    winners = _zbuffer_winners(pix, depth, n_pixels)
    have = winners >= 0
    agg = np.zeros((n_pixels, 3))
    zbuf = np.full(n_pixels, np.nan)
    agg[have] = color[winners[have]]
    zbuf[have] = depth[winners[have]]
    return agg.reshape(h, w, 3), zbuf.reshape(h, w), have.reshape(h, w)


def consistency_mask(warped: np.ndarray, warped_defined: np.ndarray, aggregate: np.ndarray,
                     aggregate_defined: np.ndarray, threshold: float) -> np.ndarray:
    """Accept pixels where both warps exist and agree in every channel."""
    if warped.shape != aggregate.shape:
        raise ValueError(f"shape mismatch: {warped.shape} vs {aggregate.shape}")
    diff = np.abs(warped - aggregate).max(axis=-1)
    return warped_defined & aggregate_defined & (diff < threshold)


# ---------------------------------------------------------------------------
# Label assembly
# ---------------------------------------------------------------------------


def _nanify(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    return np.where(valid, depth, np.nan)


def render_source_depths(field, manifest, opts: RenderOptions, indices=None):
    """Depth maps (NaN-invalid) for training views; the cacheable half of
    label building."""
    indices = manifest.train_indices if indices is None else list(indices)
    out = {}
    for i in indices:
        depth, valid = render_depth_map(field, manifest.frames[i].pose, manifest.intrinsics, opts)
        out[i] = _nanify(depth, valid)
    return out


def build_pseudo_label(field, manifest, target: CloseupPose, config: CloseupConfig,
                       opts: RenderOptions | None = None, source_depths: dict | None = None,
                       target_depth: np.ndarray | None = None) -> PseudoLabel:
    """Full-image pseudo-label for one close-up pose.

    ``source_depths`` (frame index -> NaN-invalid depth map) and
    ``target_depth`` are injectable: callers cache source depths across
    poses, and tests substitute oracle depths. Raises LabelRejectedError
    when the mask covers less than ``min_mask_fraction`` of the image.
    """
    opts = opts or RenderOptions()
    K = manifest.intrinsics
    if target_depth is None:
        depth, valid = render_depth_map(field, target.pose, K, opts)
        target_depth = _nanify(depth, valid)
    if source_depths is None:
        source_depths = render_source_depths(field, manifest, opts)

    src = manifest.frames[target.source_index]
    warped, w_def = backward_warp(target.pose, target_depth, manifest.image(target.source_index),
                                  src.pose, K)
    sources = [
        (manifest.image(i), manifest.frames[i].pose, source_depths[i])
        for i in manifest.train_indices
    ]
    agg, zbuf, a_def = forward_warp_aggregate(target.pose, sources, K)
    mask = consistency_mask(warped, w_def, agg, a_def, config.rgb_match_threshold)
    label = PseudoLabel(
        image=warped, defined=w_def, aggregate=agg,
        aggregate_defined=a_def, aggregate_depth=zbuf, mask=mask,
    )
    if label.valid_fraction < config.min_mask_fraction:
        raise LabelRejectedError(
            f"mask covers {label.valid_fraction:.3f} < {config.min_mask_fraction}",
            label.valid_fraction,
        )
    return label


def pseudo_ray_batch(field, manifest, target: CloseupPose, batch_size: int,
                     config: CloseupConfig, rng, opts: RenderOptions | None = None,
                     source_depths: dict | None = None) -> PseudoBatch:
    """Pseudo supervision for ``batch_size`` random target pixels.

    Renders depth only for the sampled rays, restricts the forward splat
    to candidates landing on those pixels (identical winners to the
    full-image path), and returns only mask-surviving entries. May be
    empty; callers then train on the photometric half alone.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    opts = opts or RenderOptions()
    K = manifest.intrinsics
    ids = rng.integers(0, K.width * K.height, size=batch_size)
    us = (ids % K.width).astype(np.int64)
    vs = (ids // K.width).astype(np.int64)

    origin = target.pose.translation
    dirs = ray_directions(target.pose, K, us.astype(np.float64), vs.astype(np.float64))
    depth, opacity = render_rays_depth(field, np.broadcast_to(origin, dirs.shape), dirs, opts)
    depth = np.where(opacity >= opts.opacity_floor, depth, np.nan)

    # backward warp, restricted to the sampled pixels
    valid = np.isfinite(depth)
    warped = np.zeros((batch_size, 3))
    w_def = np.zeros(batch_size, dtype=bool)
    if valid.any():
        pts = origin + depth[valid, None] * dirs[valid]
        src_pose = manifest.frames[target.source_index].pose
        uv, _, in_front = project_points(src_pose, K, pts)
        colors, supported = _bilinear_sample(manifest.image(target.source_index), uv)
        ok = in_front & supported
        sel = np.flatnonzero(valid)[ok]
        warped[sel] = colors[ok]
        w_def[sel] = True

    if source_depths is None:
        source_depths = render_source_depths(field, manifest, opts)
    sources = [
        (manifest.image(i), manifest.frames[i].pose, source_depths[i])
        for i in manifest.train_indices
    ]
    pix, cdepth, ccolor = _forward_candidates(target.pose, sources, K)
    wanted = np.zeros(K.width * K.height, dtype=bool)
    pixel_ids = vs * K.width + us
    wanted[pixel_ids] = True
    keep = wanted[pix]
    winners = _zbuffer_winners(pix[keep], cdepth[keep], K.width * K.height)

    win = winners[pixel_ids]
    a_def = win >= 0
    agg = np.zeros((batch_size, 3))
    agg[a_def] = ccolor[keep][win[a_def]]

    diff = np.abs(warped - agg).max(axis=1)
    mask = w_def & a_def & (diff < config.rgb_match_threshold)
    sel = np.flatnonzero(mask)
    return PseudoBatch(
        pixels=np.stack([us[sel], vs[sel]], axis=1),
        colors=warped[sel],
        rays=RayBatch(
            origins=np.broadcast_to(origin, (sel.size, 3)).copy(),
            dirs=dirs[sel],
            t_near=opts.t_near,
            t_far=opts.t_far,
        ),
    )


def select_source_view(manifest, training_depths: dict, test_pose: Pose, K: Intrinsics) -> int:
    """Training view whose valid-depth pixels land most often in the test view.

    ``training_depths`` maps frame index -> NaN-invalid depth map. Ties go
    to the lowest frame index; all-zero counts raise NoOverlapError.
    """
    best_idx = -1
    best_count = 0
    for i in manifest.train_indices:
        depth_map = training_depths[i]
        valid = np.isfinite(depth_map)
        if not valid.any():
            continue
        vs, us = np.nonzero(valid)
        pts = points_from_depth(manifest.frames[i].pose, K, us.astype(np.float64),
                                vs.astype(np.float64), depth_map[vs, us])
        uv, _, in_front = project_points(test_pose, K, pts)
        with np.errstate(invalid="ignore"):
            inside = (
                in_front
                & (uv[:, 0] >= 0) & (uv[:, 0] < K.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
            )
        count = int(inside.sum())
        if count > best_count:
            best_count = count
            best_idx = i
    if best_idx < 0:
        raise NoOverlapError("no training view projects into the test pose")
    return best_idx
