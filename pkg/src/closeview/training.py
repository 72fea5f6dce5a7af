"""Optimization loops: baseline grid fitting and three pseudo-label fine-tunes.

All loops share one from-scratch Adam and one report format. Determinism
contract: a fixed seed fixes every random draw, so reruns produce bit
identical parameter grids and report files (wall time lives in a sidecar
file, never in the report itself). Each run derives two independent
generator streams from the seed: one for training-pixel batches plus the
photometric render jitter, one for close-up pose sampling plus the pseudo
half. Separate streams make a run whose masks never pass reduce bitwise
to photometric-only training on the same seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from .field import (
    DivergenceError,
    RayBatch,
    RenderOptions,
    VoxelRadianceField,
    loss_and_gradients,
)
from .geometry import Intrinsics, Pose, pixel_grid, ray_directions
from .pseudo import (
    CloseupConfig,
    CloseupPose,
    LabelRejectedError,
    NoOverlapError,
    SceneNotReadyError,
    build_pseudo_label,
    generate_closeup_pose,
    pseudo_ray_batch,
    render_source_depths,
    select_source_view,
)

MODES = ("baseline", "finetune_diverse", "finetune_fullimage", "finetune_testtime")

GRAD_CHUNK = 8192  # rays per gradient chunk in full-image accumulation


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by every optimization loop.

    ``render = None`` means defaults with the dataset's background color.
    ``mode`` only routes dispatch (CLI, service); the loop functions ignore
    it and stamp reports with what they actually ran.
    """

    iterations: int = 2000
    batch_size: int = 2048
    learning_rate: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    mode: str = "baseline"
    grid_resolution: tuple = (64, 64, 64)
    render: RenderOptions | None = None
    closeup: CloseupConfig = dc_field(default_factory=CloseupConfig)
    source_depth_refresh: int = 250  # iterations between source-depth rebuilds
    freeze_pseudo_depth: bool = False  # warp depths from the input field, not the live one
    label_retries: int = 20  # full-image mode: pose redraws per iteration
    testtime_iterations: int = 5  # optimization steps per test pose

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not (0.0 <= b < 1.0):
                raise ValueError("Adam betas must be in [0, 1)")
        if not self.adam_epsilon > 0:
            raise ValueError("adam_epsilon must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        res = tuple(int(n) for n in self.grid_resolution)
        if len(res) != 3 or any(n < 2 for n in res):
            raise ValueError("grid_resolution must be three sizes >= 2")
        object.__setattr__(self, "grid_resolution", res)
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.source_depth_refresh < 1:
            raise ValueError("source_depth_refresh must be >= 1")
        if self.label_retries < 1:
            raise ValueError("label_retries must be >= 1")
        if self.testtime_iterations < 1:
            raise ValueError("testtime_iterations must be >= 1")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moment accumulators, shaped like the parameter grids."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_field(cls, field: VoxelRadianceField) -> "OptimizerState":
        params = field.parameters()
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adam_step(field: VoxelRadianceField, grads: dict, state: OptimizerState,
              config: TrainConfig) -> None:
    """One in-place Adam update: p -= lr * mhat / (sqrt(vhat) + eps)."""
    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    for name, p in field.parameters().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p -= config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_epsilon)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _scalar(x):
    if x is None:
        return None
    if isinstance(x, (np.floating, float)):
        return float(x)
    return int(x)


@dataclass
class TrainReport:
    """Per-iteration loss trace for one optimization run.

    Serializes to line-delimited JSON: one run row, then one row per
    iteration. The file is deterministic for a fixed seed; wall time is
    written to a ``<name>.timing.json`` sidecar so report files from equal
    seeds compare byte-identical. ``pseudo_loss`` / ``valid_fraction`` are
    None on iterations without a pseudo half. In batched fine-tuning,
    ``valid_fraction`` is the survivor fraction of pseudo candidates; in
    full-image mode it is the label's mask fraction.
    """

    mode: str
    seed: int
    total_loss: list = dc_field(default_factory=list)
    photometric_loss: list = dc_field(default_factory=list)
    pseudo_loss: list = dc_field(default_factory=list)
    pseudo_rays: list = dc_field(default_factory=list)
    valid_fraction: list = dc_field(default_factory=list)
    aborted: str | None = None
    notes: dict = dc_field(default_factory=dict)
    wall_time_s: float = 0.0

    def record(self, total, photometric, pseudo, pseudo_rays, valid_fraction) -> None:
        self.total_loss.append(float(total))
        self.photometric_loss.append(float(photometric))
        self.pseudo_loss.append(_scalar(pseudo))
        self.pseudo_rays.append(int(pseudo_rays))
        self.valid_fraction.append(_scalar(valid_fraction))

    @property
    def iterations_run(self) -> int:
        return len(self.total_loss)

    def save(self, path) -> None:
        path = Path(path)
        rows = [{
            "row": "run",
            "mode": self.mode,
            "seed": self.seed,
            "iterations": self.iterations_run,
            "aborted": self.aborted,
            "notes": self.notes,
        }]
        for i in range(self.iterations_run):
            rows.append({
                "row": "iteration",
                "iteration": i,
                "total": self.total_loss[i],
                "photometric": self.photometric_loss[i],
                "pseudo": self.pseudo_loss[i],
                "pseudo_rays": self.pseudo_rays[i],
                "valid_fraction": self.valid_fraction[i],
            })
        text = "\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n"
        path.write_text(text)
        timing = path.with_name(path.name + ".timing.json")
        timing.write_text(json.dumps({"wall_time_s": self.wall_time_s}) + "\n")

    @classmethod
    def load(cls, path) -> "TrainReport":
        path = Path(path)
        lines = [json.loads(s) for s in path.read_text().splitlines() if s.strip()]
        if not lines or lines[0].get("row") != "run":
            raise ValueError(f"{path} is not a training report")
        head = lines[0]
        report = cls(mode=head["mode"], seed=head["seed"],
                     aborted=head.get("aborted"), notes=head.get("notes", {}))
        for row in lines[1:]:
            if row.get("row") != "iteration":
                continue
            report.record(row["total"], row["photometric"], row["pseudo"],
                          row["pseudo_rays"], row["valid_fraction"])
        timing = path.with_name(path.name + ".timing.json")
        if timing.exists():
            report.wall_time_s = json.loads(timing.read_text())["wall_time_s"]
        return report


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def _streams(seed: int):
    """Independent (training, pseudo) generator streams from one seed."""
    train_ss, pose_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(train_ss), np.random.default_rng(pose_ss)


def far_plane(manifest) -> float:
    """Integration range end: just past the farthest camera-to-content distance.

    A generous fixed far plane spreads ray samples over empty space and
    quantizes depth; the content box plus the known cameras bound every
    distance that matters (generated close-up poses only move inward).
    """
    bbox = np.asarray(manifest.bbox, dtype=np.float64)
    corners = np.array([[bbox[i, 0], bbox[j, 1], bbox[k, 2]]
                        for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    eyes = np.array([f.pose.translation for f in manifest.frames])
    d = np.linalg.norm(eyes[:, None, :] - corners[None, :, :], axis=-1)
    return 1.05 * float(d.max())


def render_options_for(manifest, config: TrainConfig) -> RenderOptions:
    """The run's render options; defaults composite onto the dataset background."""
    if config.render is not None:
        return config.render
    return RenderOptions(background_color=tuple(float(c) for c in manifest.background),
                         t_far=far_plane(manifest))


def make_field(manifest, config: TrainConfig) -> VoxelRadianceField:
    """Fresh zero-initialized grid covering the dataset's content box."""
    bbox = np.asarray(manifest.bbox, dtype=np.float64)
    return VoxelRadianceField.zeros(config.grid_resolution, bbox)


def sample_training_rays(manifest, batch_size: int, rng, opts: RenderOptions):
    """Uniform (pixel, view) pairs over every training pixel.

    Returns (RayBatch, target colors). One flat draw over
    n_train * width * height keeps the stream consumption independent of
    how the draws scatter across views.
    """
    train = manifest.train_indices
    K = manifest.intrinsics
    n_pix = K.width * K.height
    ids = rng.integers(0, len(train) * n_pix, size=batch_size)
    view_slot = ids // n_pix
    pix = ids % n_pix
    us = pix % K.width
    vs = pix // K.width
    origins = np.empty((batch_size, 3), dtype=np.float64)
    dirs = np.empty((batch_size, 3), dtype=np.float64)
    colors = np.empty((batch_size, 3), dtype=np.float64)
    for slot in np.unique(view_slot):
        sel = view_slot == slot
        frame_idx = train[int(slot)]
        pose = manifest.frames[frame_idx].pose
        origins[sel] = pose.translation
        dirs[sel] = ray_directions(pose, K, us[sel], vs[sel])
        colors[sel] = manifest.image(frame_idx)[vs[sel], us[sel]]
    rays = RayBatch(origins, dirs, opts.t_near, opts.t_far)
    return rays, colors


def loss_and_gradients_chunked(field: VoxelRadianceField, rays: RayBatch, target_colors,
                               opts: RenderOptions, rng=None, chunk: int = GRAD_CHUNK):
    """loss_and_gradients over an arbitrarily large batch, chunk-accumulated.

    Exact up to float summation order: the mean loss and mean gradients are
    recombined with per-chunk ray counts. With stratified jitter on, the
    rng consumption differs from the single-call path.
    """
    n = len(rays)
    targets = np.asarray(target_colors, dtype=np.float64).reshape(-1, 3)
    if n <= chunk:
        return loss_and_gradients(field, rays, targets, opts, rng)
    loss_sum = 0.0
    grad_sum = None
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        part_loss, part_grads = loss_and_gradients(
            field, rays.take(idx), targets[idx], opts, rng)
        w = idx.size
        loss_sum += w * part_loss
        if grad_sum is None:
            grad_sum = {k: w * g for k, g in part_grads.items()}
        else:
            for k, g in part_grads.items():
                grad_sum[k] += w * g
    loss = loss_sum / n
    grads = {k: g / n for k, g in grad_sum.items()}
    return loss, grads


def _combine(loss_c: float, grads_c: dict, loss_p, grads_p):
    """Equal-weight sum of the photometric and pseudo halves.

    An empty pseudo half leaves the photometric term alone (no reweighting).
    """
    if loss_p is None:
        return loss_c, grads_c, None
    total = 0.5 * (loss_c + loss_p)
    grads = {k: 0.5 * grads_c[k] + 0.5 * grads_p[k] for k in grads_c}
    return total, grads, loss_p


def _half(batch_size: int) -> int:
    half = batch_size // 2
    if half < 1:
        raise ValueError("fine-tuning needs batch_size >= 2 to split in halves")
    return half


# ---------------------------------------------------------------------------
# Baseline training
# ---------------------------------------------------------------------------


def train_baseline(manifest, config: TrainConfig | None = None,
                   init_field: VoxelRadianceField | None = None):
    """Fit a grid to the training images with plain photometric MSE.

    Returns (field, report). With ``init_field`` the loop continues from a
    copy of that grid instead of zeros, which is also the photometric-only
    fine-tune that degenerate pseudo configurations reduce to. A non-finite
    loss aborts the run; the report keeps the iterations that completed.
    """
    config = config or TrainConfig()
    opts = render_options_for(manifest, config)
    rng_train, _ = _streams(config.seed)
    field = init_field.copy() if init_field is not None else make_field(manifest, config)
    state = OptimizerState.for_field(field)
    report = TrainReport(mode="baseline", seed=config.seed)
    t0 = time.perf_counter()
    for i in range(config.iterations):
        rays, colors = sample_training_rays(manifest, config.batch_size, rng_train, opts)
        try:
            loss, grads = loss_and_gradients(field, rays, colors, opts, rng_train)
        except DivergenceError as e:
            report.aborted = f"iteration {i}: {e}"
            break
        report.record(loss, loss, None, 0, None)
        adam_step(field, grads, state, config)
    report.wall_time_s = time.perf_counter() - t0
    return field, report


# ---------------------------------------------------------------------------
# Batched diverse fine-tuning
# ---------------------------------------------------------------------------


def finetune_diverse(field: VoxelRadianceField, manifest,
                     config: TrainConfig | None = None):
    """Fine-tune with a fresh close-up pose and pseudo ray batch per iteration.

    Each iteration draws batch_size/2 pseudo candidates (mask survivors are
    kept) and batch_size/2 training pixels, then steps on the equal-weight
    sum of the two mean losses. Warp depths come from the live grid; the
    per-view source depth maps used by the forward splat are refreshed every
    ``source_depth_refresh`` iterations as a cost compromise, and
    ``freeze_pseudo_depth`` pins all depths to the input grid instead.
    """
    config = config or TrainConfig()
    half = _half(config.batch_size)
    opts = render_options_for(manifest, config)
    label_opts = replace(opts, stratified_jitter=False)
    rng_train, rng_pose = _streams(config.seed)
    tuned = field.copy()
    depth_field = field.copy() if config.freeze_pseudo_depth else tuned
    state = OptimizerState.for_field(tuned)
    report = TrainReport(mode="finetune_diverse", seed=config.seed)
    source_depths = None
    t0 = time.perf_counter()
    for i in range(config.iterations):
        if source_depths is None or (
                not config.freeze_pseudo_depth and i % config.source_depth_refresh == 0):
            source_depths = render_source_depths(depth_field, manifest, label_opts)
        try:
            target = generate_closeup_pose(
                depth_field, manifest, config.closeup, rng_pose, label_opts)
        except SceneNotReadyError as e:
            report.aborted = f"iteration {i}: {e}"
            break
        pseudo = pseudo_ray_batch(
            depth_field, manifest, target, half, config.closeup, rng_pose,
            label_opts, source_depths=source_depths)
        rays, colors = sample_training_rays(manifest, half, rng_train, opts)
        try:
            loss_c, grads_c = loss_and_gradients(tuned, rays, colors, opts, rng_train)
            if len(pseudo):
                loss_p, grads_p = loss_and_gradients(
                    tuned, pseudo.rays, pseudo.colors, opts, rng_pose)
            else:
                loss_p, grads_p = None, None
        except DivergenceError as e:
            report.aborted = f"iteration {i}: {e}"
            break
        total, grads, loss_p = _combine(loss_c, grads_c, loss_p, grads_p)
        report.record(total, loss_c, loss_p, len(pseudo), len(pseudo) / half)
        adam_step(tuned, grads, state, config)
    report.wall_time_s = time.perf_counter() - t0
    return tuned, report


# ---------------------------------------------------------------------------
# Full-image fine-tuning
# ---------------------------------------------------------------------------


def _full_view_rays(pose: Pose, K: Intrinsics, opts: RenderOptions) -> RayBatch:
    us, vs = pixel_grid(K)
    dirs = ray_directions(pose, K, us.ravel(), vs.ravel())
    origins = np.broadcast_to(pose.translation, dirs.shape)
    return RayBatch(origins, dirs, opts.t_near, opts.t_far)


def finetune_fullimage(field: VoxelRadianceField, manifest,
                       config: TrainConfig | None = None):
    """Fine-tune on one whole pseudo-label and one whole training image per step.

    The pseudo half averages over every masked label pixel, the photometric
    half over every pixel of one random training view; the step uses the
    equal-weight sum. A rejected label resamples the pose up to
    ``label_retries`` times, then aborts. An all-false mask drops the pseudo
    half for that iteration.
    """
    config = config or TrainConfig()
    opts = render_options_for(manifest, config)
    label_opts = replace(opts, stratified_jitter=False)
    rng_train, rng_pose = _streams(config.seed)
    tuned = field.copy()
    depth_field = field.copy() if config.freeze_pseudo_depth else tuned
    state = OptimizerState.for_field(tuned)
    report = TrainReport(mode="finetune_fullimage", seed=config.seed)
    K = manifest.intrinsics
    train = manifest.train_indices
    source_depths = None
    t0 = time.perf_counter()
    for i in range(config.iterations):
        if source_depths is None or (
                not config.freeze_pseudo_depth and i % config.source_depth_refresh == 0):
            source_depths = render_source_depths(depth_field, manifest, label_opts)
        label = None
        target = None
        try:
            for _ in range(config.label_retries):
                target = generate_closeup_pose(
                    depth_field, manifest, config.closeup, rng_pose, label_opts)
                try:
                    label = build_pseudo_label(
                        depth_field, manifest, target, config.closeup, label_opts,
                        source_depths=source_depths)
                    break
                except LabelRejectedError:
                    continue
        except SceneNotReadyError as e:
            report.aborted = f"iteration {i}: {e}"
            break
        if label is None:
            report.aborted = (
                f"iteration {i}: no label passed the mask floor in "
                f"{config.label_retries} pose draws")
            break
        view = train[int(rng_train.integers(0, len(train)))]
        frame_pose = manifest.frames[view].pose
        rays_c = _full_view_rays(frame_pose, K, opts)
        targets_c = manifest.image(view).reshape(-1, 3)
        vs_m, us_m = np.nonzero(label.mask)
        try:
            loss_c, grads_c = loss_and_gradients_chunked(
                tuned, rays_c, targets_c, opts, rng_train)
            if us_m.size:
                dirs = ray_directions(target.pose, K, us_m, vs_m)
                rays_p = RayBatch(
                    np.broadcast_to(target.pose.translation, dirs.shape), dirs,
                    opts.t_near, opts.t_far)
                loss_p, grads_p = loss_and_gradients_chunked(
                    tuned, rays_p, label.image[vs_m, us_m], opts, rng_pose)
            else:
                loss_p, grads_p = None, None
        except DivergenceError as e:
            report.aborted = f"iteration {i}: {e}"
            break
        total, grads, loss_p = _combine(loss_c, grads_c, loss_p, grads_p)
        report.record(total, loss_c, loss_p, us_m.size, label.valid_fraction)
        adam_step(tuned, grads, state, config)
    report.wall_time_s = time.perf_counter() - t0
    return tuned, report


# ---------------------------------------------------------------------------
# Test-time fine-tuning
# ---------------------------------------------------------------------------


def finetune_testtime(field: VoxelRadianceField, manifest, test_poses,
                      config: TrainConfig | None = None):
    """Fine-tune toward given test poses using labels frozen at the input grid.

    All warp depths (training views and the test poses' own) are rendered
    once from the input grid, one full label is built per reachable pose,
    and each pose then gets ``testtime_iterations`` steps whose pseudo half
    draws uniformly from that label's masked pixels. Poses with no
    training-view overlap or a rejected label are skipped and listed in
    ``report.notes['poses']``.
    """
    config = config or TrainConfig()
    half = _half(config.batch_size)
    opts = render_options_for(manifest, config)
    label_opts = replace(opts, stratified_jitter=False)
    rng_train, rng_pose = _streams(config.seed)
    tuned = field.copy()
    frozen = field.copy()
    state = OptimizerState.for_field(tuned)
    report = TrainReport(mode="finetune_testtime", seed=config.seed)
    K = manifest.intrinsics
    t0 = time.perf_counter()
    training_depths = render_source_depths(frozen, manifest, label_opts)
    pose_rows = []
    jobs = []
    for q, pose in enumerate(test_poses):
        try:
            src = select_source_view(manifest, training_depths, pose, K)
        except NoOverlapError:
            pose_rows.append({"pose": q, "source_view": None,
                              "valid_fraction": None, "skipped": "no_overlap"})
            continue
        # External poses carry no close-up provenance; only pose and source
        # view feed the label.
        target = CloseupPose(
            pose=pose, source_index=src, anchor_pixel=(0, 0),
            anchor_point=np.asarray(pose.translation, dtype=np.float64),
            magnification=1.0)
        try:
            label = build_pseudo_label(
                frozen, manifest, target, config.closeup, label_opts,
                source_depths=training_depths)
        except LabelRejectedError as e:
            pose_rows.append({"pose": q, "source_view": int(src),
                              "valid_fraction": float(e.valid_fraction),
                              "skipped": "label_rejected"})
            continue
        pose_rows.append({"pose": q, "source_view": int(src),
                          "valid_fraction": float(label.valid_fraction),
                          "skipped": None})
        jobs.append((q, target, label))
    report.notes["poses"] = pose_rows
    for q, target, label in jobs:
        mask_ids = np.flatnonzero(label.mask.ravel())
        if mask_ids.size == 0:
            continue
        label_colors = label.image.reshape(-1, 3)
        aborted = False
        for _ in range(config.testtime_iterations):
            pick = mask_ids[rng_pose.integers(0, mask_ids.size, size=half)]
            us = pick % K.width
            vs = pick // K.width
            dirs = ray_directions(target.pose, K, us, vs)
            rays_p = RayBatch(
                np.broadcast_to(target.pose.translation, dirs.shape), dirs,
                opts.t_near, opts.t_far)
            rays_c, colors_c = sample_training_rays(manifest, half, rng_train, opts)
            try:
                loss_c, grads_c = loss_and_gradients(
                    tuned, rays_c, colors_c, opts, rng_train)
                loss_p, grads_p = loss_and_gradients(
                    tuned, rays_p, label_colors[pick], opts, rng_pose)
            except DivergenceError as e:
                report.aborted = f"pose {q}: {e}"
                aborted = True
                break
            total, grads, loss_p = _combine(loss_c, grads_c, loss_p, grads_p)
            report.record(total, loss_c, loss_p, half, label.valid_fraction)
            adam_step(tuned, grads, state, config)
        if aborted:
            break
    report.wall_time_s = time.perf_counter() - t0
    return tuned, report
