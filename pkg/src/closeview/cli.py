"""Command-line entry point driving every pipeline stage.

One executable, subcommand style: make-synthetic | train | finetune |
finetune-testtime | render | pseudo-dump | eval | serve. Options may come
from a JSON config file (--config) whose keys mirror the flag names with
underscores; explicit flags win over the file, unknown keys are rejected.
Progress goes to standard error, machine-readable output to files only.
Exit codes: 0 success, 1 usage error, 2 bad input, 3 numeric failure.
Every subcommand is deterministic for fixed inputs and seed; the only
non-reproducible artifact is the wall-time sidecar next to a report.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (
    ManifestError,
    default_intrinsics,
    load_manifest,
    make_benchmark,
    save_image,
)
from .field import (
    CheckpointError,
    DivergenceError,
    RenderOptions,
    load_field,
    render_image,
    save_field,
)
from .metrics import evaluate
from .pseudo import CloseupConfig, SceneNotReadyError, build_pseudo_label, generate_closeup_pose
from .service import ApiError, parse_wire_pose, serve
from .training import (
    TrainConfig,
    far_plane,
    finetune_diverse,
    finetune_fullimage,
    finetune_testtime,
    train_baseline,
)

CHECKPOINT_NAME = "checkpoint.cvf"
REPORT_NAME = "report.ndjson"


class CliError(Exception):
    """Categorized failure carrying its process exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the contract reserves 2 for bad
    # input files, so usage errors are rethrown as code 1.
    def error(self, message):
        raise CliError(1, message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Config file + flag merging
# ---------------------------------------------------------------------------


def _load_config(path, allowed) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(2, f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(2, f"config file {p} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise CliError(2, f"config file {p} must hold a JSON object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise CliError(2, f"unknown config keys: {', '.join(unknown)}")
    return doc


def _resolve(args, cfg: dict, key: str, default=None):
    """Flag value if given, else config-file value, else default."""
    v = getattr(args, key, None)
    if v is None:
        v = cfg.get(key, default)
    return v


def _require(args, cfg: dict, key: str):
    v = _resolve(args, cfg, key)
    if v is None:
        raise CliError(1, f"missing --{key.replace('_', '-')}")
    return v


def _config_keys(parser: argparse.ArgumentParser):
    """Every option dest of one subcommand, minus the config path itself."""
    return {a.dest for a in parser._actions if a.dest not in ("help", "config")}


# ---------------------------------------------------------------------------
# Shared loading helpers
# ---------------------------------------------------------------------------


def _manifest_path(dataset) -> Path:
    p = Path(dataset)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise CliError(2, f"no manifest at {p}")
    return p


def _load_dataset(args, cfg):
    return load_manifest(_manifest_path(_require(args, cfg, "dataset")))


def _load_checkpoint(args, cfg):
    p = Path(_require(args, cfg, "checkpoint"))
    if not p.exists():
        raise CliError(2, f"no checkpoint at {p}")
    return load_field(p)


def _load_poses(path):
    """Pose file: JSON list of 3x4 row-major matrices (or {"poses": [...]})."""
    p = Path(path)
    if not p.exists():
        raise CliError(2, f"no pose file at {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(2, f"pose file {p} is not valid JSON: {e}")
    if isinstance(doc, dict):
        doc = doc.get("poses")
    if not isinstance(doc, list) or not doc:
        raise CliError(2, f"pose file {p} must hold a non-empty list of 3x4 matrices")
    poses = []
    for i, m in enumerate(doc):
        try:
            poses.append(parse_wire_pose(m))
        except ApiError as e:
            raise CliError(2, f"pose {i}: {e}")
    return poses


def _render_options(manifest, samples) -> RenderOptions:
    background = tuple(float(c) for c in manifest.background)
    far = far_plane(manifest)
    if samples is None:
        return RenderOptions(background_color=background, t_far=far)
    return RenderOptions(n_samples=int(samples), background_color=background,
                         t_far=far)


def _grid(text) -> tuple:
    parts = [int(v) for v in str(text).split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ValueError("grid must be N or Nx,Ny,Nz")
    return tuple(parts)


def _train_config(args, cfg: dict, mode: str) -> TrainConfig:
    """TrainConfig from resolved options; unset ones keep dataclass defaults."""
    kw = {}
    for key, field_name in [
        ("iterations", "iterations"),
        ("batch_size", "batch_size"),
        ("learning_rate", "learning_rate"),
        ("depth_refresh", "source_depth_refresh"),
        ("label_retries", "label_retries"),
    ]:
        v = _resolve(args, cfg, key)
        if v is not None:
            kw[field_name] = v
    grid = _resolve(args, cfg, "grid")
    if grid is not None:
        kw["grid_resolution"] = tuple(grid) if isinstance(grid, (list, tuple)) else _grid(grid)
    if _resolve(args, cfg, "freeze_depth"):
        kw["freeze_pseudo_depth"] = True
    closeup_kw = {}
    lo = _resolve(args, cfg, "lambda_min")
    hi = _resolve(args, cfg, "lambda_max")
    if lo is not None or hi is not None:
        defaults = CloseupConfig()
        closeup_kw["lambda_range"] = (
            defaults.lambda_range[0] if lo is None else float(lo),
            defaults.lambda_range[1] if hi is None else float(hi),
        )
    for key, field_name in [
        ("angle_bound", "angle_bound"),
        ("mask_threshold", "rgb_match_threshold"),
        ("min_mask_fraction", "min_mask_fraction"),
    ]:
        v = _resolve(args, cfg, key)
        if v is not None:
            closeup_kw[field_name] = float(v)
    if closeup_kw:
        kw["closeup"] = CloseupConfig(**closeup_kw)
    return TrainConfig(mode=mode, seed=int(_resolve(args, cfg, "seed", 0)), **kw)


def _finish_run(out: Path, field, report) -> int:
    """Write checkpoint + report, then exit 0 or 3 on an aborted run."""
    out.mkdir(parents=True, exist_ok=True)
    finite = all(np.isfinite(p).all() for p in field.parameters().values())
    if finite:
        save_field(field, out / CHECKPOINT_NAME)
    else:
        _log("checkpoint not written: parameters are non-finite")
    report.save(out / REPORT_NAME)
    _log(f"{report.mode}: {report.iterations_run} iterations in "
         f"{report.wall_time_s:.1f}s -> {out / REPORT_NAME}")
    if report.aborted:
        _log(f"numeric failure: {report.aborted}")
        return 3
    return 0


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_make_synthetic(args) -> int:
    cfg = _load_config(args.config, args._keys)
    seed = int(_resolve(args, cfg, "seed", 0))
    out = _require(args, cfg, "out")
    _log(f"make-synthetic: seed {seed} -> {out}")
    _, manifest = make_benchmark(
        scene_seed=seed,
        n_train=int(_resolve(args, cfg, "train_views", 30)),
        n_test=int(_resolve(args, cfg, "test_views", 5)),
        K=default_intrinsics(int(_resolve(args, cfg, "width", 192)),
                             int(_resolve(args, cfg, "height", 108))),
        out_dir=out,
        n_indomain=int(_resolve(args, cfg, "indomain_views", 6)),
        closeup_lambda=(float(_resolve(args, cfg, "lambda_min", 3.0)),
                        float(_resolve(args, cfg, "lambda_max", 6.0))),
        closeup_angle=float(_resolve(args, cfg, "angle_bound", np.pi / 4)),
        glossy=bool(_resolve(args, cfg, "glossy", False)),
    )
    _log(f"wrote {len(manifest.frames)} frames to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args._keys)
    out = Path(_require(args, cfg, "out"))
    manifest = _load_dataset(args, cfg)
    config = _train_config(args, cfg, "baseline")
    samples = _resolve(args, cfg, "samples")
    if samples is not None:
        config = replace(config, render=_render_options(manifest, samples))
    _log(f"train: {config.iterations} iterations, batch {config.batch_size}, "
         f"grid {'x'.join(map(str, config.grid_resolution))}, seed {config.seed}")
    field, report = train_baseline(manifest, config)
    return _finish_run(out, field, report)


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config, args._keys)
    out = Path(_require(args, cfg, "out"))
    mode = str(_resolve(args, cfg, "mode", "diverse"))
    mode = mode if mode.startswith("finetune_") else "finetune_" + mode
    if mode not in ("finetune_diverse", "finetune_fullimage"):
        raise CliError(1, f"finetune mode must be diverse or fullimage, got {mode!r}")
    manifest = _load_dataset(args, cfg)
    field = _load_checkpoint(args, cfg)
    config = _train_config(args, cfg, mode)
    samples = _resolve(args, cfg, "samples")
    if samples is not None:
        config = replace(config, render=_render_options(manifest, samples))
    _log(f"{mode}: {config.iterations} iterations, seed {config.seed}")
    run = finetune_diverse if mode == "finetune_diverse" else finetune_fullimage
    tuned, report = run(field, manifest, config)
    return _finish_run(out, tuned, report)


def cmd_finetune_testtime(args) -> int:
    cfg = _load_config(args.config, args._keys)
    out = Path(_require(args, cfg, "out"))
    manifest = _load_dataset(args, cfg)
    field = _load_checkpoint(args, cfg)
    poses_file = _resolve(args, cfg, "poses")
    if poses_file is not None:
        poses = _load_poses(poses_file)
    else:
        kind = _resolve(args, cfg, "kind", "closeup")
        ids = manifest.indices("test", kind)
        if not ids:
            raise CliError(2, f"dataset has no test frames of kind {kind!r}")
        poses = [manifest.frames[i].pose for i in ids]
    config = _train_config(args, cfg, "finetune_testtime")
    iters = _resolve(args, cfg, "iterations")
    if iters is not None:
        # For this subcommand --iterations means steps per pose.
        config = replace(config, testtime_iterations=int(iters))
    samples = _resolve(args, cfg, "samples")
    if samples is not None:
        config = replace(config, render=_render_options(manifest, samples))
    _log(f"finetune-testtime: {len(poses)} poses, "
         f"{config.testtime_iterations} iterations each, seed {config.seed}")
    tuned, report = finetune_testtime(field, manifest, poses, config)
    skipped = sum(1 for r in report.notes.get("poses", []) if r["skipped"])
    if skipped:
        _log(f"skipped {skipped}/{len(poses)} poses (no overlap or rejected label)")
    return _finish_run(out, tuned, report)


def cmd_render(args) -> int:
    cfg = _load_config(args.config, args._keys)
    manifest = _load_dataset(args, cfg)
    field = _load_checkpoint(args, cfg)
    opts = _render_options(manifest, _resolve(args, cfg, "samples"))
    out = Path(_require(args, cfg, "out"))
    frame = _resolve(args, cfg, "frame")
    poses_file = _resolve(args, cfg, "poses")
    if (frame is None) == (poses_file is None):
        raise CliError(1, "render needs exactly one of --frame or --poses")
    if frame is not None:
        frame = int(frame)
        if not 0 <= frame < len(manifest.frames):
            raise CliError(2, f"frame {frame} out of range 0..{len(manifest.frames) - 1}")
        render = render_image(field, manifest.frames[frame].pose, manifest.intrinsics, opts)
        save_image(out, render.rgb)
        _log(f"rendered frame {frame} -> {out}")
        return 0
    poses = _load_poses(poses_file)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        render = render_image(field, pose, manifest.intrinsics, opts)
        save_image(out / f"pose_{i:03d}.png", render.rgb)
    _log(f"rendered {len(poses)} poses -> {out}")
    return 0


def cmd_pseudo_dump(args) -> int:
    cfg = _load_config(args.config, args._keys)
    out = Path(_require(args, cfg, "out"))
    manifest = _load_dataset(args, cfg)
    field = _load_checkpoint(args, cfg)
    seed = int(_resolve(args, cfg, "seed", 0))
    opts = _render_options(manifest, _resolve(args, cfg, "samples"))
    defaults = CloseupConfig()
    closeup = CloseupConfig(
        lambda_range=(
            float(_resolve(args, cfg, "lambda_min", defaults.lambda_range[0])),
            float(_resolve(args, cfg, "lambda_max", defaults.lambda_range[1])),
        ),
        angle_bound=float(_resolve(args, cfg, "angle_bound", defaults.angle_bound)),
        rgb_match_threshold=float(
            _resolve(args, cfg, "mask_threshold", defaults.rgb_match_threshold)),
        min_mask_fraction=0.0,  # a dump is for inspection, never rejected
    )
    rng = np.random.default_rng(seed)
    target = generate_closeup_pose(field, manifest, closeup, rng, opts)
    label = build_pseudo_label(field, manifest, target, closeup, opts)
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / "label.png", np.where(label.defined[..., None], label.image, 0.0))
    save_image(out / "aggregate.png",
               np.where(label.aggregate_defined[..., None], label.aggregate, 0.0))
    save_image(out / "mask.png", np.repeat(label.mask[..., None].astype(np.float64), 3, axis=2))
    meta = {
        "pose": target.pose.matrix3x4().tolist(),
        "magnification": float(target.magnification),
        "source_view": int(target.source_index),
        "anchor_pixel": [int(v) for v in target.anchor_pixel],
        "valid_fraction": label.valid_fraction,
        "seed": seed,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    _log(f"pseudo-dump: magnification {target.magnification:.2f}, "
         f"valid fraction {label.valid_fraction:.3f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, args._keys)
    out = _require(args, cfg, "out")
    manifest = _load_dataset(args, cfg)
    field = _load_checkpoint(args, cfg)
    opts = _render_options(manifest, _resolve(args, cfg, "samples"))
    split = _resolve(args, cfg, "split", "test")
    kind = _resolve(args, cfg, "kind")
    ids = manifest.indices(split, kind)
    if not ids:
        raise CliError(2, f"no frames in split {split!r} kind {kind!r}")
    report = evaluate(field, manifest, opts, split=split, kind=kind)
    report.save(out)
    _log(f"eval {split}{'/' + kind if kind else ''}: "
         f"{len(report.view_ids)} views, mean PSNR {report.mean_psnr:.2f} dB, "
         f"mean SSIM {report.mean_ssim:.4f} -> {out}")
    return 0


def cmd_serve(args) -> int:
    cfg = _load_config(args.config, args._keys)
    manifest_path = _manifest_path(_require(args, cfg, "dataset"))
    checkpoint = Path(_require(args, cfg, "checkpoint"))
    if not checkpoint.exists():
        raise CliError(2, f"no checkpoint at {checkpoint}")
    host = _resolve(args, cfg, "host", "127.0.0.1")
    port = int(_resolve(args, cfg, "port", 8172))
    _log(f"serve: http://{host}:{port}")
    serve(checkpoint=checkpoint, dataset=manifest_path, host=host, port=port,
          allow_cors=bool(_resolve(args, cfg, "cors", False)))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p, *names):
    if "config" in names:
        p.add_argument("--config", help="JSON config file; flags override its keys")
    if "seed" in names:
        p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    if "dataset" in names:
        p.add_argument("--dataset", help="dataset directory or manifest.json path")
    if "checkpoint" in names:
        p.add_argument("--checkpoint", help="field checkpoint to load")
    if "out" in names:
        p.add_argument("--out", help="output path")
    if "samples" in names:
        p.add_argument("--samples", type=int, help="ray samples per render (default 64)")
    if "closeup" in names:
        p.add_argument("--lambda-min", type=float, dest="lambda_min",
                       help="distance-shrink factor lower bound")
        p.add_argument("--lambda-max", type=float, dest="lambda_max",
                       help="distance-shrink factor upper bound")
        p.add_argument("--angle-bound", type=float,
                       help="per-axis rotation perturbation bound, radians")
        p.add_argument("--mask-threshold", type=float,
                       help="max per-channel warp disagreement kept in the mask")


def build_parser() -> _Parser:
    parser = _Parser(prog="closeview",
                     description="Voxel radiance fields with pseudo-label "
                                 "fine-tuning for close-up novel views.")
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("make-synthetic", help="render a synthetic benchmark dataset")
    _add_common(p, "config", "seed", "out", "closeup")
    p.add_argument("--train-views", type=int, help="ring training views (default 30)")
    p.add_argument("--test-views", type=int, help="close-up test views (default 5)")
    p.add_argument("--indomain-views", type=int, help="held-out ring views (default 6)")
    p.add_argument("--width", type=int, help="image width (default 192)")
    p.add_argument("--height", type=int, help="image height (default 108)")
    p.add_argument("--glossy", action="store_true", default=None,
                   help="add a view-dependent specular lobe")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="fit a field to the training views")
    _add_common(p, "config", "seed", "dataset", "out", "samples")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--grid", type=_grid, help="voxel resolution, N or Nx,Ny,Nz")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="pseudo-label fine-tune a checkpoint")
    _add_common(p, "config", "seed", "dataset", "checkpoint", "out", "samples", "closeup")
    p.add_argument("--mode", help="diverse (fresh pose per step) or fullimage")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--min-mask-fraction", type=float,
                   help="reject labels whose mask covers less than this")
    p.add_argument("--depth-refresh", type=int,
                   help="iterations between source-depth rebuilds")
    p.add_argument("--freeze-depth", action="store_true", default=None,
                   help="warp with the input checkpoint's depth throughout")
    p.add_argument("--label-retries", type=int,
                   help="fullimage: pose redraws before giving up")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("finetune-testtime", help="fine-tune toward specific viewpoints")
    _add_common(p, "config", "seed", "dataset", "checkpoint", "out", "samples", "closeup")
    p.add_argument("--poses", help="JSON file with 3x4 row-major poses "
                                   "(default: the dataset's close-up test poses)")
    p.add_argument("--kind", help="manifest test kind to pull poses from")
    p.add_argument("--iterations", type=int, help="optimization steps per pose (default 5)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--min-mask-fraction", type=float)
    p.set_defaults(func=cmd_finetune_testtime)

    p = sub.add_parser("render", help="render frames or poses from a checkpoint")
    _add_common(p, "config", "dataset", "checkpoint", "out", "samples")
    p.add_argument("--frame", type=int, help="manifest frame index; --out is the PNG path")
    p.add_argument("--poses", help="JSON pose file; --out is a directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("pseudo-dump",
                       help="write one pseudo label, aggregate, and mask for inspection")
    _add_common(p, "config", "seed", "dataset", "checkpoint", "out", "samples", "closeup")
    p.set_defaults(func=cmd_pseudo_dump)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset split")
    _add_common(p, "config", "dataset", "checkpoint", "out", "samples")
    p.add_argument("--split", choices=("train", "test"), help="default test")
    p.add_argument("--kind", help="restrict to one frame kind (indomain | closeup)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="serve the interactive HTTP API")
    _add_common(p, "config", "dataset", "checkpoint")
    p.add_argument("--port", type=int, help="default 8172")
    p.add_argument("--host", help="default 127.0.0.1")
    p.add_argument("--cors", action="store_true", default=None,
                   help="answer cross-origin requests (for the viewer dev server)")
    p.set_defaults(func=cmd_serve)

    for sp in sub.choices.values():
        sp.set_defaults(_keys=_config_keys(sp))
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as e:
        _log(f"usage error: {e}")
        return e.code
    except SystemExit as e:  # --help prints and exits 0
        return int(e.code or 0)
    try:
        return args.func(args)
    except CliError as e:
        _log(("usage error: " if e.code == 1 else "input error: ") + str(e))
        return e.code
    except (ManifestError, CheckpointError, FileNotFoundError, ValueError) as e:
        _log(f"input error: {e}")
        return 2
    except (DivergenceError, SceneNotReadyError) as e:
        _log(f"numeric failure: {e}")
        return 3
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    raise SystemExit(main())
