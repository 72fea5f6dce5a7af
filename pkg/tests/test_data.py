"""Tests for the analytic scene oracle and dataset I/O.

Intersection code is checked two ways: hand-computed closed-form cases
(axis-aligned cameras where hit distances are exact small integers) and a
brute-force ray-marching oracle that knows nothing about quadratics or
slabs, only about inside/outside tests.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from closeview.data import (
    Albedo,
    Box,
    DatasetManifest,
    Frame,
    ManifestMissingImageError,
    ManifestResolutionError,
    ManifestVersionError,
    Sphere,
    SyntheticScene,
    benchmark_scene,
    box_wall_scene,
    default_intrinsics,
    load_depth,
    load_image,
    load_manifest,
    oracle_render,
    save_depth,
    save_image,
    save_manifest,
)
from closeview.geometry import Intrinsics, look_at_pose

# Principal point on the exact center of pixel (32, 32): axis-aligned
# cameras then render that pixel along the optical axis exactly.
K_CENTER = Intrinsics(fx=100.0, fy=100.0, cx=32.5, cy=32.5, width=65, height=65)


def axis_camera(eye, target, up=(0.0, 0.0, 1.0)):
    return look_at_pose(np.asarray(eye, float), np.asarray(target, float), up)


class TestAlbedo:
    def test_solid_returns_constant(self):
        a = Albedo("solid", (0.2, 0.4, 0.6))
        out = a.eval(np.array([[0.0, 0.0, 0.0], [3.0, -1.0, 2.0]]))
        np.testing.assert_array_equal(out, [[0.2, 0.4, 0.6], [0.2, 0.4, 0.6]])

    def test_checker_alternates_between_adjacent_cells(self):
        a = Albedo("checker", (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), scale=2.0)
        # scale 2: cell size 0.5; (0.1,...) and (0.6,...) differ by one cell in x
        out = a.eval(np.array([[0.1, 0.1, 0.1], [0.6, 0.1, 0.1]]))
        np.testing.assert_array_equal(out[0], [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(out[1], [0.0, 0.0, 0.0])

    def test_gradient_interpolates_along_axis(self):
        a = Albedo("gradient", (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), axis=2)
        out = a.eval(np.array([[5.0, 5.0, 0.25]]))
        np.testing.assert_allclose(out[0], [0.75, 0.25, 0.0], atol=1e-15)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            Albedo("perlin", (1.0, 1.0, 1.0))


class TestIntersectionsExact:
    def test_unit_sphere_at_distance_five_center_depth_exactly_four(self):
        scene = SyntheticScene(
            primitives=(Sphere(center=(5.0, 0.0, 0.0), radius=1.0, albedo=Albedo("solid", (1, 1, 1))),)
        )
        pose = axis_camera((0, 0, 0), (5, 0, 0))
        out = oracle_render(scene, pose, K_CENTER)
        assert out.depth[32, 32] == 4.0
        assert out.prim_id[32, 32] == 0
        assert out.hit_mask[32, 32]

    def test_box_front_face_depth(self):
        scene = SyntheticScene(
            primitives=(Box(lo=(3.0, -1.0, -1.0), hi=(4.0, 1.0, 1.0), albedo=Albedo("solid", (1, 1, 1))),)
        )
        pose = axis_camera((0, 0, 0), (1, 0, 0))
        out = oracle_render(scene, pose, K_CENTER)
        assert out.depth[32, 32] == 3.0

    def test_camera_inside_box_hits_exit_face(self):
        scene = SyntheticScene(
            primitives=(Box(lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0), albedo=Albedo("solid", (0.5, 0.5, 0.5))),)
        )
        pose = axis_camera((0, 0, 0), (1, 0, 0))
        out = oracle_render(scene, pose, K_CENTER)
        assert out.depth[32, 32] == 1.0
        # exit-face shading uses the inward (viewer-facing) normal, so the
        # pixel is lit, not black
        assert out.rgb[32, 32].min() > 0.0

    def test_nearest_primitive_wins(self):
        scene = box_wall_scene()  # wall is primitive 0, box in front is 1
        pose = axis_camera((0, -2, 0), (0, 0, 0))
        out = oracle_render(scene, pose, K_CENTER)
        assert out.prim_id[32, 32] == 1
        np.testing.assert_allclose(out.depth[32, 32], 1.9, atol=1e-12)
        # wall visible beside the box silhouette
        assert (out.prim_id == 0).any()

    def test_miss_pixels_are_background_nan_and_minus_one(self):
        scene = SyntheticScene(
            primitives=(Sphere(center=(5.0, 0.0, 0.0), radius=1.0, albedo=Albedo("solid", (1, 1, 1))),),
            background=(0.1, 0.2, 0.3),
        )
        pose = axis_camera((0, 0, 0), (-5, 0, 0))  # looking away
        out = oracle_render(scene, pose, K_CENTER)
        assert not out.hit_mask.any()
        assert np.isnan(out.depth).all()
        assert (out.prim_id == -1).all()
        np.testing.assert_array_equal(out.rgb, np.broadcast_to([0.1, 0.2, 0.3], out.rgb.shape))


class TestIntersectionsAgainstMarching:
    """Brute-force oracle: march along each ray, find the first sample that
    is inside any primitive. The first inside sample must land in the
    analytic [entry, entry + step) window."""

    STEP = 2e-3

    @staticmethod
    def _inside(scene, pts):
        hit = np.zeros(pts.shape[0], dtype=bool)
        for prim in scene.primitives:
            if isinstance(prim, Sphere):
                c = np.asarray(prim.center)
                hit |= np.sum((pts - c) ** 2, axis=1) <= prim.radius**2
            else:
                lo, hi = np.asarray(prim.lo), np.asarray(prim.hi)
                hit |= np.all((pts >= lo) & (pts <= hi), axis=1)
        return hit

    def test_march_confirms_analytic_first_hits(self):
        rng = np.random.default_rng(20260816)
        prims = []
        for _ in range(3):
            prims.append(
                Sphere(
                    center=tuple(rng.uniform(-1.5, 1.5, 3)),
                    radius=float(rng.uniform(0.3, 0.8)),
                    albedo=Albedo("solid", (1, 1, 1)),
                )
            )
        for _ in range(3):
            lo = rng.uniform(-1.5, 1.0, 3)
            hi = lo + rng.uniform(0.3, 1.0, 3)
            prims.append(Box(lo=tuple(lo), hi=tuple(hi), albedo=Albedo("solid", (1, 1, 1))))
        scene = SyntheticScene(primitives=tuple(prims))

        n_rays = 200
        # origins on a far sphere, aimed at jittered primitive centers so
        # nearly every ray hits something
        dirs_origin = rng.normal(size=(n_rays, 3))
        origins = 8.0 * dirs_origin / np.linalg.norm(dirs_origin, axis=1, keepdims=True)
        centers = np.array(
            [
                np.asarray(p.center) if isinstance(p, Sphere) else 0.5 * (np.asarray(p.lo) + np.asarray(p.hi))
                for p in prims
            ]
        )
        targets = centers[rng.integers(0, len(prims), n_rays)] + rng.normal(scale=0.15, size=(n_rays, 3))
        dirs = targets - origins
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

        ts = np.arange(self.STEP, 16.0, self.STEP)
        n_march_hits = 0
        for o, d in zip(origins, dirs):
            pts = o + ts[:, None] * d
            inside = self._inside(scene, pts)
            if not inside.any():
                continue
            n_march_hits += 1
            t_march = ts[np.argmax(inside)]
            # analytic first hit from the renderer's intersectors
            img = oracle_render(
                scene,
                _single_ray_pose(o, d),
                _SINGLE_RAY_K,
            )
            t_analytic = img.depth[0, 0]
            assert np.isfinite(t_analytic)
            assert -1e-9 <= t_march - t_analytic <= self.STEP + 1e-9
        assert n_march_hits > 0.8 * n_rays


_SINGLE_RAY_K = Intrinsics(fx=1000.0, fy=1000.0, cx=0.5, cy=0.5, width=1, height=1)


def _single_ray_pose(origin, direction):
    """Pose whose single-pixel camera shoots exactly along ``direction``."""
    target = origin + direction
    up = (0.0, 0.0, 1.0) if abs(direction[2]) < 0.99 else (0.0, 1.0, 0.0)
    return look_at_pose(origin, target, up)


class TestShading:
    def _head_on_scene(self, light, glossy=False):
        return SyntheticScene(
            primitives=(
                Sphere(center=(5.0, 0.0, 0.0), radius=1.0, albedo=Albedo("solid", (0.3, 0.5, 0.7)), glossy=glossy),
            ),
            light_dir=light,
            ambient=0.35,
        )

    def test_light_facing_surface_gets_full_albedo(self):
        # normal at the hit point is (-1,0,0); light from the same side
        scene = self._head_on_scene(light=(-1.0, 0.0, 0.0))
        out = oracle_render(scene, axis_camera((0, 0, 0), (5, 0, 0)), K_CENTER)
        np.testing.assert_allclose(out.rgb[32, 32], [0.3, 0.5, 0.7], atol=1e-12)

    def test_backlit_surface_gets_ambient_only(self):
        scene = self._head_on_scene(light=(1.0, 0.0, 0.0))
        out = oracle_render(scene, axis_camera((0, 0, 0), (5, 0, 0)), K_CENTER)
        np.testing.assert_allclose(out.rgb[32, 32], 0.35 * np.array([0.3, 0.5, 0.7]), atol=1e-12)

    def _two_view_colors(self, glossy):
        # both cameras look straight at the sphere's top point (0,0,1), so
        # pixel (32,32) hits exactly the same surface point from each view
        scene = SyntheticScene(
            primitives=(Sphere(center=(0.0, 0.0, 0.0), radius=1.0, albedo=Albedo("solid", (0.5, 0.5, 0.5)), glossy=glossy),),
            light_dir=(0.0, 0.0, 1.0),
            ambient=0.35,
        )
        p = (0.0, 0.0, 1.0)
        side = axis_camera((1.5, 0.0, 1.5), p)
        near_top = axis_camera((0.3, 0.0, 2.5), p)
        c_side = oracle_render(scene, side, K_CENTER).rgb[32, 32]
        c_top = oracle_render(scene, near_top, K_CENTER).rgb[32, 32]
        return c_side, c_top

    def test_matte_surface_color_is_view_independent(self):
        c_side, c_top = self._two_view_colors(glossy=False)
        np.testing.assert_allclose(c_side, c_top, atol=1e-12)

    def test_glossy_surface_color_is_view_dependent(self):
        c_side, c_top = self._two_view_colors(glossy=True)
        # half-vector nearly parallel to the normal from near the light,
        # nearly 36 degrees off from the side: large specular difference
        assert c_top[0] - c_side[0] > 0.3


class TestOracleImages:
    def test_supersampled_render_box_downsamples_to_base_render(self):
        K = default_intrinsics(96, 54)
        scene = benchmark_scene(7)
        pose = axis_camera((2.6, 1.2, 1.3), (0, 0, 0))
        base = oracle_render(scene, pose, K).rgb
        hi = oracle_render(scene, pose, K.scaled(2.0)).rgb
        down = hi.reshape(54, 2, 96, 2, 3).mean(axis=(1, 3))
        mae = np.abs(down - base).mean()
        # bound tracks the point-sampling alias level of the scene's
        # finest checker scale at this resolution
        assert mae <= 0.03, f"supersampling MAE {mae:.4f}"

    def test_depth_nan_exactly_off_the_hit_mask(self):
        scene = benchmark_scene(3)
        pose = axis_camera((2.8, -0.5, 1.4), (0, 0, 0))
        out = oracle_render(scene, pose, default_intrinsics(96, 54))
        np.testing.assert_array_equal(np.isnan(out.depth), ~out.hit_mask)
        np.testing.assert_array_equal(out.prim_id == -1, ~out.hit_mask)
        assert out.rgb.min() >= 0.0 and out.rgb.max() <= 1.0

    def test_benchmark_scene_is_seed_deterministic(self):
        a = benchmark_scene(11)
        b = benchmark_scene(11)
        c = benchmark_scene(12)
        assert a == b
        assert a != c

    def test_content_bbox_encloses_primitives(self):
        scene = SyntheticScene(
            primitives=(
                Sphere(center=(1.0, 2.0, 3.0), radius=0.5, albedo=Albedo("solid", (1, 1, 1))),
                Box(lo=(-1.0, -1.0, -1.0), hi=(0.0, 0.0, 0.0), albedo=Albedo("solid", (1, 1, 1))),
            )
        )
        bbox = scene.content_bbox(pad=0.2)
        np.testing.assert_allclose(bbox[0], [-1.2, -1.2, -1.2], atol=1e-15)
        np.testing.assert_allclose(bbox[1], [1.7, 2.7, 3.7], atol=1e-15)


class TestImageAndDepthIO:
    def test_image_roundtrip_is_exact_after_quantization(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, size=(24, 32, 3))
        save_image(tmp_path / "a.png", img)
        back = load_image(tmp_path / "a.png")
        np.testing.assert_array_equal(back, np.round(img * 255.0) / 255.0)

    def test_depth_roundtrip_preserves_values_and_nans(self, tmp_path):
        rng = np.random.default_rng(6)
        depth = rng.uniform(0.5, 9.0, size=(24, 32))
        depth[rng.uniform(size=depth.shape) < 0.3] = np.nan
        save_depth(tmp_path / "d.raw", depth)
        back = load_depth(tmp_path / "d.raw")
        np.testing.assert_array_equal(back, depth.astype(np.float32).astype(np.float64))

    def test_depth_version_check(self, tmp_path):
        save_depth(tmp_path / "d.raw", np.ones((4, 4)))
        sidecar = tmp_path / "d.raw.json"
        doc = json.loads(sidecar.read_text())
        doc["format_version"] = 99
        sidecar.write_text(json.dumps(doc))
        with pytest.raises(ManifestVersionError):
            load_depth(tmp_path / "d.raw")


class TestManifestIO:
    def _write_dataset(self, root: Path) -> DatasetManifest:
        K = Intrinsics(fx=40.0, fy=40.0, cx=16.0, cy=12.0, width=32, height=24)
        rng = np.random.default_rng(9)
        frames = []
        for i, split in enumerate(["train", "train", "test"]):
            eye = np.array([2.0 + 0.3 * i, 1.0 - 0.2 * i, 1.0])
            frames.append(
                Frame(
                    file=f"images/f{i}.png",
                    pose=look_at_pose(eye, (0, 0, 0)),
                    split=split,
                    kind="indomain" if split == "test" else "ring",
                )
            )
            save_image(root / frames[-1].file, rng.uniform(0, 1, size=(24, 32, 3)))
        manifest = DatasetManifest(
            intrinsics=K,
            frames=frames,
            scene_name="fixture",
            bbox=np.array([[-1.0, -1.0, -0.5], [1.0, 1.0, 0.5]]),
            background=(0.2, 0.3, 0.4),
            root=root,
        )
        save_manifest(manifest, root / "manifest.json")
        return manifest

    def test_roundtrip_preserves_poses_bit_exactly(self, tmp_path):
        saved = self._write_dataset(tmp_path)
        loaded = load_manifest(tmp_path / "manifest.json")
        assert loaded.intrinsics == saved.intrinsics
        assert loaded.scene_name == "fixture"
        assert loaded.background == (0.2, 0.3, 0.4)
        np.testing.assert_array_equal(loaded.bbox, saved.bbox)
        assert [f.split for f in loaded.frames] == ["train", "train", "test"]
        assert [f.kind for f in loaded.frames] == ["ring", "ring", "indomain"]
        for fl, fs in zip(loaded.frames, saved.frames):
            # json float repr round-trips doubles exactly
            np.testing.assert_array_equal(fl.pose.rotation, fs.pose.rotation)
            np.testing.assert_array_equal(fl.pose.translation, fs.pose.translation)

    def test_image_loading_through_manifest(self, tmp_path):
        self._write_dataset(tmp_path)
        loaded = load_manifest(tmp_path / "manifest.json")
        img = loaded.image(0)
        assert img.shape == (24, 32, 3)
        assert loaded.train_indices == [0, 1]
        assert loaded.indices("test") == [2]
        assert loaded.indices("test", kind="closeup") == []

    def test_version_mismatch_raises_distinct_error(self, tmp_path):
        self._write_dataset(tmp_path)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        doc["format_version"] = 2
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestVersionError):
            load_manifest(tmp_path / "manifest.json")

    def test_missing_image_raises_distinct_error(self, tmp_path):
        self._write_dataset(tmp_path)
        (tmp_path / "images/f1.png").unlink()
        with pytest.raises(ManifestMissingImageError):
            load_manifest(tmp_path / "manifest.json")

    def test_resolution_mismatch_raises_distinct_error(self, tmp_path):
        self._write_dataset(tmp_path)
        save_image(tmp_path / "images/f1.png", np.zeros((10, 10, 3)))
        with pytest.raises(ManifestResolutionError):
            load_manifest(tmp_path / "manifest.json")

    def test_invalid_split_rejected(self):
        with pytest.raises(ValueError):
            Frame(file="x.png", pose=look_at_pose((1, 1, 1), (0, 0, 0)), split="val")


K_BENCH = Intrinsics(fx=57.6, fy=57.6, cx=32.0, cy=18.0, width=64, height=36)


@pytest.fixture(scope="module")
def built():
    from closeview.data import make_benchmark

    return make_benchmark(11, n_train=10, n_test=5, K=K_BENCH, n_indomain=3)


class TestMakeBenchmark:
    """End-to-end dataset builder: ring train views plus two test flavors."""

    K = K_BENCH

    def test_composition_and_kinds(self, built):
        scene, man = built
        assert man.train_indices == list(range(10))
        assert man.indices("test", kind="indomain") == [10, 11, 12]
        assert man.indices("test", kind="closeup") == [13, 14, 15, 16, 17]
        files = [f.file for f in man.frames]
        assert len(set(files)) == len(files)
        for i in range(len(man.frames)):
            assert man.image(i).shape == (36, 64, 3)
        np.testing.assert_array_equal(man.bbox, scene.content_bbox())

    def test_closeup_views_keep_min_coverage(self, built):
        scene, man = built
        for i in man.indices("test", kind="closeup"):
            render = oracle_render(scene, man.frames[i].pose, self.K)
            assert render.hit_mask.mean() >= 0.5

    def test_images_match_fresh_oracle_renders(self, built):
        scene, man = built
        for i in (0, 10, 13):
            render = oracle_render(scene, man.frames[i].pose, self.K)
            np.testing.assert_array_equal(man.image(i), render.rgb)

    def test_determinism(self, built):
        from closeview.data import make_benchmark

        _, again = make_benchmark(11, n_train=10, n_test=5, K=self.K, n_indomain=3)
        _, man = built
        assert len(again.frames) == len(man.frames)
        for a, b in zip(again.frames, man.frames):
            assert a.split == b.split and a.kind == b.kind
            np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
            np.testing.assert_array_equal(a.pose.translation, b.pose.translation)
        np.testing.assert_array_equal(again.image(17), man.image(17))

    def test_on_disk_roundtrip(self, built, tmp_path):
        from closeview.data import make_benchmark

        _, man = make_benchmark(11, n_train=10, n_test=5, K=self.K, n_indomain=3,
                                out_dir=tmp_path)
        assert (tmp_path / "manifest.json").exists()
        loaded = load_manifest(tmp_path / "manifest.json")
        assert len(loaded.frames) == len(man.frames)
        # 8-bit PNG quantization
        assert np.abs(loaded.image(3) - man.image(3)).max() <= 1.0 / 255.0

    def test_size_floors(self):
        from closeview.data import make_benchmark

        with pytest.raises(ValueError):
            make_benchmark(1, n_train=9, n_test=5, K=self.K)
        with pytest.raises(ValueError):
            make_benchmark(1, n_train=10, n_test=4, K=self.K)
