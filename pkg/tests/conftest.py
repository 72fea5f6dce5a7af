"""Shared miniature dataset and trained grid for the optimization-level tests.

Session scope: baseline training to plateau costs ~20 s and is reused by the
training, CLI, and service suites. Resolution 64x36 divides exactly by the
service's draft scale.
"""

import numpy as np
import pytest

from closeview.data import (
    Albedo,
    DatasetManifest,
    Frame,
    Sphere,
    SyntheticScene,
    oracle_render,
)
from closeview.field import RenderOptions
from closeview.geometry import Intrinsics, look_at_pose
from closeview.training import TrainConfig, train_baseline

MINI_BACKGROUND = (0.72, 0.78, 0.84)


def mini_dataset():
    """Eight ring views of one gradient sphere at thumbnail resolution."""
    scene = SyntheticScene(primitives=(
        Sphere(center=(0.0, 0.0, 0.0), radius=0.6,
               albedo=Albedo("gradient", (0.9, 0.2, 0.1), (0.1, 0.3, 0.9), axis=2)),
    ))
    w, h = 64, 36
    K = Intrinsics(fx=0.9 * w, fy=0.9 * w, cx=w / 2.0, cy=h / 2.0, width=w, height=h)
    n = 8
    frames = []
    for i in range(n):
        az = 2.0 * np.pi * i / n
        eye = np.array([2.2 * np.cos(az), 2.2 * np.sin(az), 0.9])
        frames.append(Frame(file=f"t{i}.png", pose=look_at_pose(eye, (0.0, 0.0, 0.0)),
                            split="train"))
    man = DatasetManifest(intrinsics=K, frames=frames, scene_name="mini",
                          bbox=scene.content_bbox(), background=scene.background)
    for i in range(n):
        man.attach_image(i, oracle_render(scene, frames[i].pose, K).rgb)
    return scene, man


def mini_config(**kw) -> TrainConfig:
    base = dict(
        iterations=100,
        batch_size=256,
        grid_resolution=(16, 16, 16),
        render=RenderOptions(n_samples=32, background_color=MINI_BACKGROUND),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def mini():
    return mini_dataset()


@pytest.fixture(scope="session")
def trained(mini):
    _, man = mini
    field, report = train_baseline(man, mini_config(iterations=2000, seed=3))
    assert report.aborted is None
    return field
