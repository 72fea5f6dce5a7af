"""Voxel radiance fields with pseudo-label fine-tuning for close-up views.

The package is organized as a numpy library:

* ``geometry``  pinhole cameras, pose algebra, Euler conversions
* ``field``     explicit voxel radiance field and differentiable renderer
* ``data``      synthetic analytic-scene oracle and dataset manifests
* ``metrics``   PSNR / SSIM and the evaluation harness
* ``pseudo``    close-up pose generation, dual warping, consistency masks
* ``training``  baseline training and the pseudo-label fine-tuning modes
* ``cli``       batch entry point (``closeview`` command)
* ``service``   HTTP facade for the interactive viewer

The names below cover the library surface; ``cli`` and ``service`` are
entry points and stay module-qualified.
"""

from closeview.data import (
    Albedo,
    Box,
    DatasetManifest,
    Frame,
    ManifestError,
    OracleRender,
    Sphere,
    SyntheticScene,
    benchmark_scene,
    box_wall_scene,
    default_intrinsics,
    load_manifest,
    make_benchmark,
    oracle_render,
    save_manifest,
)
from closeview.field import (
    CheckpointError,
    DivergenceError,
    ImageRender,
    RayBatch,
    RenderOptions,
    RenderResult,
    VoxelRadianceField,
    composite,
    load_field,
    loss_and_gradients,
    render_depth_map,
    render_image,
    render_ray,
    save_field,
)
from closeview.geometry import (
    EulerAngles,
    Intrinsics,
    Pose,
    Ray,
    euler_from_rotation,
    look_at_pose,
    pixel_grid,
    pixel_to_ray,
    point_from_depth,
    points_from_depth,
    project_point,
    project_points,
    ray_directions,
    rotation_from_euler,
)
from closeview.metrics import EvalReport, evaluate, psnr, ssim
from closeview.pseudo import (
    CloseupConfig,
    CloseupPose,
    LabelRejectedError,
    NoOverlapError,
    PseudoLabel,
    SceneNotReadyError,
    backward_warp,
    build_pseudo_label,
    consistency_mask,
    forward_warp_aggregate,
    generate_closeup_pose,
    perturbed_closeup_pose,
    render_source_depths,
    select_source_view,
)
from closeview.training import (
    TrainConfig,
    TrainReport,
    far_plane,
    finetune_diverse,
    finetune_testtime,
    train_baseline,
)

__all__ = [
    "Albedo",
    "Box",
    "CheckpointError",
    "CloseupConfig",
    "CloseupPose",
    "DatasetManifest",
    "DivergenceError",
    "EulerAngles",
    "EvalReport",
    "Frame",
    "ImageRender",
    "Intrinsics",
    "LabelRejectedError",
    "ManifestError",
    "NoOverlapError",
    "OracleRender",
    "Pose",
    "PseudoLabel",
    "Ray",
    "RayBatch",
    "RenderOptions",
    "RenderResult",
    "SceneNotReadyError",
    "Sphere",
    "SyntheticScene",
    "TrainConfig",
    "TrainReport",
    "VoxelRadianceField",
    "backward_warp",
    "benchmark_scene",
    "box_wall_scene",
    "build_pseudo_label",
    "composite",
    "consistency_mask",
    "default_intrinsics",
    "euler_from_rotation",
    "evaluate",
    "far_plane",
    "finetune_diverse",
    "finetune_testtime",
    "forward_warp_aggregate",
    "generate_closeup_pose",
    "load_field",
    "load_manifest",
    "look_at_pose",
    "loss_and_gradients",
    "make_benchmark",
    "oracle_render",
    "perturbed_closeup_pose",
    "pixel_grid",
    "pixel_to_ray",
    "point_from_depth",
    "points_from_depth",
    "project_point",
    "project_points",
    "psnr",
    "ray_directions",
    "render_depth_map",
    "render_image",
    "render_ray",
    "render_source_depths",
    "rotation_from_euler",
    "save_field",
    "save_manifest",
    "select_source_view",
    "ssim",
    "train_baseline",
]

__version__ = "0.1.0"
