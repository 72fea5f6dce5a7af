"""Synthetic analytic-scene oracle and dataset manifest I/O.

The synthetic benchmark substitutes a real capture: training views sit on a
far ring around the scene, test views are generated close-up poses with
exact ground-truth renders. The oracle ray tracer intersects spheres and
axis-aligned boxes analytically, so its images and depth maps are exact up
to floating point and serve as the independent reference for the warping
and rendering code.

File formats (all versioned):

* manifest: one JSON file; camera-to-world poses stored row-major as 12
  numbers (3x4); frame image paths are relative to the manifest directory.
* images: 8-bit RGB PNG.
* depth maps: raw little-endian float32 (row-major) plus a JSON sidecar;
  NaN encodes invalid depth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from closeview.geometry import Intrinsics, Pose, look_at_pose, pixel_grid, ray_directions

MANIFEST_VERSION = 1
DEPTH_VERSION = 1
HIT_EPS = 1e-9


class ManifestError(Exception):
    """Base class for dataset manifest problems."""


class ManifestVersionError(ManifestError):
    """Manifest format_version is not supported."""


class ManifestMissingImageError(ManifestError):
    """A frame references an image file that does not exist."""


class ManifestResolutionError(ManifestError):
    """A frame image does not match the manifest intrinsics resolution."""


# ---------------------------------------------------------------------------
# Scene primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Albedo:
    """Procedural surface color: solid, 3D checker, or axis gradient."""

    kind: str  # "solid" | "checker" | "gradient"
    color_a: tuple
    color_b: tuple = (0.0, 0.0, 0.0)
    scale: float = 2.0  # checker cells per world unit
    axis: int = 2  # gradient world axis

    def __post_init__(self):
        if self.kind not in ("solid", "checker", "gradient"):
            raise ValueError(f"unknown albedo kind {self.kind!r}")

    def eval(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        if self.kind == "solid":
            return np.broadcast_to(a, (pts.shape[0], 3)).copy()
        if self.kind == "checker":
            # offset keeps cell boundaries off the exact world-axis planes
            cells = np.floor(pts * self.scale + 0.137).astype(np.int64)
            parity = (cells.sum(axis=1) & 1).astype(np.float64)[:, None]
            return a * (1.0 - parity) + b * parity
        # sawtooth ramp along one world axis, period 1
        t = (pts[:, self.axis] % 1.0)[:, None]
        return a * (1.0 - t) + b * t


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: Albedo
    glossy: bool = False  # adds a view-dependent specular lobe


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    albedo: Albedo


@dataclass(frozen=True)
class SyntheticScene:
    """Lambertian primitive scene with one fixed directional light.

    ``light_dir`` points from the surface toward the light. Shading is
    ``albedo * (ambient + (1 - ambient) * max(0, n . l))``, so the color of
    a surface point is view-independent unless a sphere is glossy.
    """

    primitives: tuple
    background: tuple = (0.72, 0.78, 0.84)
    light_dir: tuple = (0.35, -0.25, 0.88)
    ambient: float = 0.35
    specular_strength: float = 0.55
    specular_power: float = 24.0

    def light(self) -> np.ndarray:
        l = np.asarray(self.light_dir, dtype=np.float64)
        return l / np.linalg.norm(l)

    def content_bbox(self, pad: float = 0.2) -> np.ndarray:
        """Axis-aligned bounds enclosing every primitive, padded."""
        los, his = [], []
        for p in self.primitives:
            if isinstance(p, Sphere):
                c = np.asarray(p.center, dtype=np.float64)
                los.append(c - p.radius)
                his.append(c + p.radius)
            else:
                los.append(np.asarray(p.lo, dtype=np.float64))
                his.append(np.asarray(p.hi, dtype=np.float64))
        lo = np.min(los, axis=0) - pad
        hi = np.max(his, axis=0) + pad
        return np.stack([lo, hi])


@dataclass
class OracleRender:
    """Exact primary-ray render: colors, ray-distance depth, hits, ids."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), NaN where no hit
    hit_mask: np.ndarray  # (H, W) bool
    prim_id: np.ndarray  # (H, W) int, -1 where no hit


def _intersect_sphere(origin, dirs, sphere):
    oc = origin - np.asarray(sphere.center, dtype=np.float64)
    b = dirs @ oc
    c0 = oc @ oc - sphere.radius**2
    disc = b * b - c0
    hit = disc > 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = -b - sq
    t_far = -b + sq
    t = np.where(t_near > HIT_EPS, t_near, t_far)
    hit &= t > HIT_EPS
    return np.where(hit, t, np.inf)


def _intersect_box(origin, dirs, box):
    lo = np.asarray(box.lo, dtype=np.float64)
    hi = np.asarray(box.hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    # rays parallel to a slab: inside -> (-inf, +inf), outside -> empty
    par = np.abs(dirs) < 1e-15
    inside = (origin >= lo) & (origin <= hi)
    near = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    far = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    enter = near.max(axis=1)
    exit_ = far.min(axis=1)
    hit = (enter <= exit_) & (exit_ > HIT_EPS)
    t = np.where(enter > HIT_EPS, enter, exit_)
    hit &= t > HIT_EPS
    return np.where(hit, t, np.inf)


def _surface_normal(prim, pts, dirs):
    if isinstance(prim, Sphere):
        n = (pts - np.asarray(prim.center, dtype=np.float64)) / prim.radius
        return n
    lo = np.asarray(prim.lo, dtype=np.float64)
    hi = np.asarray(prim.hi, dtype=np.float64)
    # face with the smallest distance from the hit point wins
    d_lo = np.abs(pts - lo)
    d_hi = np.abs(pts - hi)
    n = np.zeros_like(pts)
    axis = np.argmin(np.minimum(d_lo, d_hi), axis=1)
    rows = np.arange(pts.shape[0])
    sign = np.where(d_lo[rows, axis] < d_hi[rows, axis], -1.0, 1.0)
    n[rows, axis] = sign
    # flip to face the viewer when the camera is inside the box
    flip = np.sum(n * dirs, axis=1) > 0
    n[flip] *= -1.0
    return n


def oracle_render(scene: SyntheticScene, pose: Pose, K: Intrinsics) -> OracleRender:
    """Exact nearest-hit render with Lambertian shading.

    Depth is ray distance (matching the renderer's depth semantics); misses
    get the background color, NaN depth and prim_id -1.
    """
    us, vs = pixel_grid(K)
    dirs = ray_directions(pose, K, us.ravel().astype(np.float64), vs.ravel().astype(np.float64))
    origin = pose.translation
    n_pix = dirs.shape[0]

    best_t = np.full(n_pix, np.inf)
    best_id = np.full(n_pix, -1, dtype=np.int64)
    for idx, prim in enumerate(scene.primitives):
        if isinstance(prim, Sphere):
            t = _intersect_sphere(origin, dirs, prim)
        else:
            t = _intersect_box(origin, dirs, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, idx, best_id)

    hit = np.isfinite(best_t)
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (n_pix, 3)).copy()
    light = scene.light()
    for idx, prim in enumerate(scene.primitives):
        sel = best_id == idx
        if not sel.any():
            continue
        pts = origin + best_t[sel, None] * dirs[sel]
        n = _surface_normal(prim, pts, dirs[sel])
        lambert = np.maximum(n @ light, 0.0)
        shade = scene.ambient + (1.0 - scene.ambient) * lambert
        color = prim.albedo.eval(pts) * shade[:, None]
        if isinstance(prim, Sphere) and prim.glossy:
            # Blinn-Phong lobe: view-dependent on purpose
            view = -dirs[sel]
            half = light + view
            half /= np.linalg.norm(half, axis=1, keepdims=True)
            spec = np.maximum(np.sum(n * half, axis=1), 0.0) ** scene.specular_power
            color += scene.specular_strength * spec[:, None]
        rgb[sel] = np.clip(color, 0.0, 1.0)

    depth = np.where(hit, best_t, np.nan)
    shape = (K.height, K.width)
    return OracleRender(
        rgb=rgb.reshape(shape + (3,)),
        depth=depth.reshape(shape),
        hit_mask=hit.reshape(shape),
        prim_id=best_id.reshape(shape),
    )


# ---------------------------------------------------------------------------
# Canned scenes
# ---------------------------------------------------------------------------


def benchmark_scene(seed: int, glossy: bool = False) -> SyntheticScene:
    """Desk-scale scene: checkered floor plus a handful of textured objects.

    Every primitive is checkered: photometric-only optimization leaves
    geometry unconstrained on textureless surfaces, and warp-consistency
    masking needs local color contrast to reject bad depth.
    """
    rng = np.random.default_rng(seed)

    def color():
        c = rng.uniform(0.15, 0.95, size=3)
        return tuple(np.round(c, 4))

    floor = Box(
        lo=(-1.8, -1.8, -0.62),
        hi=(1.8, 1.8, -0.5),
        albedo=Albedo("checker", (0.85, 0.85, 0.82), (0.22, 0.24, 0.28), scale=3.0),
    )
    s1 = Sphere(
        center=(-0.45 + rng.uniform(-0.08, 0.08), -0.3 + rng.uniform(-0.08, 0.08), -0.12),
        radius=0.38,
        albedo=Albedo("checker", color(), color(), scale=8.0),
        glossy=glossy,
    )
    s2 = Sphere(
        center=(0.55, 0.4, -0.05),
        radius=0.45,
        albedo=Albedo("checker", color(), color(), scale=7.0),
    )
    s3 = Sphere(center=(-0.25, 0.72, -0.28), radius=0.22,
                albedo=Albedo("checker", color(), color(), scale=9.0))
    b1 = Box(
        lo=(0.05, -0.85, -0.5),
        hi=(0.55, -0.35, 0.05),
        albedo=Albedo("checker", color(), color(), scale=6.0),
    )
    b2 = Box(lo=(-1.0, 0.15, -0.5), hi=(-0.72, 0.45, -0.02),
             albedo=Albedo("checker", color(), color(), scale=7.0))
    return SyntheticScene(primitives=(floor, s1, s2, s3, b1, b2))


def box_wall_scene() -> SyntheticScene:
    """Occlusion fixture: a small blue box in front of a red wall.

    Side views see the wall behind the box; a frontal target view must never
    receive wall color inside the box silhouette.
    """
    wall = Box(lo=(-1.5, 0.8, -1.0), hi=(1.5, 1.0, 1.0), albedo=Albedo("solid", (0.85, 0.1, 0.1)))
    box = Box(lo=(-0.3, -0.1, -0.3), hi=(0.3, 0.3, 0.3), albedo=Albedo("solid", (0.1, 0.2, 0.85)))
    return SyntheticScene(primitives=(wall, box))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class Frame:
    file: str  # image path relative to the manifest directory
    pose: Pose
    split: str  # "train" | "test"
    kind: str = "ring"  # "ring" | "indomain" | "closeup"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")


@dataclass
class DatasetManifest:
    """Posed image collection with train/test split.

    ``bbox`` (world bounds of the scene content) and ``background`` extend
    the minimum schema so consumers can size the voxel grid and composite
    sky pixels without access to the generating scene.
    """

    intrinsics: Intrinsics
    frames: list
    scene_name: str
    bbox: np.ndarray  # (2, 3) [lo; hi]
    background: tuple = (1.0, 1.0, 1.0)
    format_version: int = MANIFEST_VERSION
    root: Path | None = None
    _images: dict = field(default_factory=dict, repr=False)

    def indices(self, split: str, kind: str | None = None) -> list:
        return [
            i
            for i, f in enumerate(self.frames)
            if f.split == split and (kind is None or f.kind == kind)
        ]

    @property
    def train_indices(self) -> list:
        return self.indices("train")

    def image(self, i: int) -> np.ndarray:
        """Load (and cache) frame i as float64 RGB in [0, 1]."""
        if i not in self._images:
            if self.root is None:
                raise ManifestError("manifest has no root directory to resolve images")
            self._images[i] = load_image(Path(self.root) / self.frames[i].file)
        return self._images[i]

    def attach_image(self, i: int, img: np.ndarray) -> None:
        self._images[i] = img


def save_image(path, img: np.ndarray) -> None:
    """Write float RGB in [0, 1] as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    u8 = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_depth(path, depth: np.ndarray) -> None:
    """Raw little-endian float32 plus JSON sidecar (`<path>.json`)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = np.asarray(depth, dtype="<f4")
    path.write_bytes(d.tobytes(order="C"))
    header = {
        "format_version": DEPTH_VERSION,
        "height": int(d.shape[0]),
        "width": int(d.shape[1]),
        "dtype": "<f4",
        "invalid": "nan",
    }
    Path(str(path) + ".json").write_text(json.dumps(header, indent=1) + "\n")


def load_depth(path) -> np.ndarray:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    if header.get("format_version") != DEPTH_VERSION:
        raise ManifestVersionError(f"unsupported depth format {header.get('format_version')}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    return raw.reshape(header["height"], header["width"]).astype(np.float64)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": manifest.format_version,
        "scene": manifest.scene_name,
        "convention": "camera-to-world [R|t], row-major 3x4; +x right, +y down, +z forward",
        "intrinsics": {
            "fx": manifest.intrinsics.fx,
            "fy": manifest.intrinsics.fy,
            "cx": manifest.intrinsics.cx,
            "cy": manifest.intrinsics.cy,
            "width": manifest.intrinsics.width,
            "height": manifest.intrinsics.height,
        },
        "bbox": np.asarray(manifest.bbox).tolist(),
        "background": list(manifest.background),
        "frames": [
            {
                "file": f.file,
                "split": f.split,
                "kind": f.kind,
                "pose": f.pose.matrix3x4().ravel().tolist(),
            }
            for f in manifest.frames
        ],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_manifest(path, check_images: bool = True) -> DatasetManifest:
    """Load and validate a manifest.

    Raises ManifestVersionError / ManifestMissingImageError /
    ManifestResolutionError for the three corruption classes, ManifestError
    for structural problems.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    version = doc.get("format_version")
    if version != MANIFEST_VERSION:
        raise ManifestVersionError(f"unsupported manifest format_version {version!r}")
    ki = doc["intrinsics"]
    intr = Intrinsics(
        fx=ki["fx"], fy=ki["fy"], cx=ki["cx"], cy=ki["cy"],
        width=ki["width"], height=ki["height"],
    )
    frames = [
        Frame(
            file=fr["file"],
            pose=Pose.from_matrix3x4(fr["pose"]),
            split=fr["split"],
            kind=fr.get("kind", "ring"),
        )
        for fr in doc["frames"]
    ]
    manifest = DatasetManifest(
        intrinsics=intr,
        frames=frames,
        scene_name=doc.get("scene", path.stem),
        bbox=np.asarray(doc["bbox"], dtype=np.float64).reshape(2, 3),
        background=tuple(doc.get("background", (1.0, 1.0, 1.0))),
        format_version=version,
        root=path.parent,
    )
    if len(manifest.train_indices) < 2:
        raise ManifestError("manifest needs at least 2 train frames")
    if check_images:
        for i, fr in enumerate(manifest.frames):
            p = path.parent / fr.file
            if not p.exists():
                raise ManifestMissingImageError(f"missing image {fr.file}")
            with Image.open(p) as im:
                if im.size != (intr.width, intr.height):
                    raise ManifestResolutionError(
                        f"{fr.file} is {im.size}, expected {(intr.width, intr.height)}"
                    )
    return manifest


# ---------------------------------------------------------------------------
# Benchmark generation
# ---------------------------------------------------------------------------

RING_RADIUS = 3.0
DEFAULT_RESOLUTION = (192, 108)  # same 16:9 aspect as a 960x540 capture, 5x down


def default_intrinsics(width: int = DEFAULT_RESOLUTION[0], height: int = DEFAULT_RESOLUTION[1]) -> Intrinsics:
    f = 0.9 * width
    return Intrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def _ring_pose(rng, radius=RING_RADIUS, azimuth=None):
    az = rng.uniform(0.0, 2 * np.pi) if azimuth is None else azimuth
    r = radius * (1.0 + rng.uniform(-0.05, 0.05))
    h = rng.uniform(0.9, 1.6)
    eye = np.array([r * np.cos(az), r * np.sin(az), h])
    target = rng.uniform(-0.1, 0.1, size=3)
    return look_at_pose(eye, target), np.linalg.norm(eye)


def make_benchmark(
    scene_seed: int,
    n_train: int,
    n_test: int,
    K: Intrinsics | None = None,
    out_dir=None,
    n_indomain: int = 6,
    closeup_lambda: tuple = (3.0, 6.0),
    closeup_angle: float = np.pi / 4,
    min_coverage: float = 0.5,
    glossy: bool = False,
):
    """Render a train-far / test-close synthetic benchmark.

    Train views sit on a ring around the scene; in-domain test views are
    held-out ring poses; close-up test views are generated with the same
    anchor/magnification mechanism the fine-tuner uses, against oracle
    depth, so their ground truth is exact. Returns (scene, manifest); when
    ``out_dir`` is given, images and `manifest.json` are written there.
    """
    from closeview.pseudo import perturbed_closeup_pose  # local: data <-> pseudo layering

    if n_train < 10:
        raise ValueError("need n_train >= 10")
    if n_test < 5:
        raise ValueError("need n_test >= 5")
    K = K or default_intrinsics()
    rng = np.random.default_rng(scene_seed)
    scene = benchmark_scene(scene_seed, glossy=glossy)

    frames = []
    images = []
    ring_cache = []

    azimuths = np.linspace(0.0, 2 * np.pi, n_train, endpoint=False)
    for i, az in enumerate(azimuths):
        pose, _ = _ring_pose(rng, azimuth=az + rng.uniform(-0.04, 0.04))
        render = oracle_render(scene, pose, K)
        frames.append(Frame(file=f"images/train_{i:03d}.png", pose=pose, split="train"))
        images.append(render.rgb)
        ring_cache.append(render)

    for i in range(n_indomain):
        az = (i + 0.5) * 2 * np.pi / n_indomain
        pose, _ = _ring_pose(rng, azimuth=az + rng.uniform(-0.04, 0.04))
        render = oracle_render(scene, pose, K)
        frames.append(Frame(file=f"images/indomain_{i:03d}.png", pose=pose, split="test", kind="indomain"))
        images.append(render.rgb)

    made = 0
    attempts = 0
    while made < n_test:
        attempts += 1
        if attempts > 200 * n_test:
            raise RuntimeError("could not generate enough close-up views with coverage")
        src = int(rng.integers(0, n_train))
        base = frames[src].pose
        depth = ring_cache[src].depth
        valid = np.argwhere(np.isfinite(depth))
        va, ua = valid[rng.integers(0, len(valid))]
        anchor = (
            base.translation
            + depth[va, ua] * ray_directions(base, K, float(ua), float(va))
        )
        lam = rng.uniform(*closeup_lambda)
        dtheta = rng.uniform(-closeup_angle, closeup_angle, size=3)
        pose = perturbed_closeup_pose(base, anchor, lam, dtheta)
        render = oracle_render(scene, pose, K)
        if render.hit_mask.mean() < min_coverage:
            continue
        frames.append(
            Frame(file=f"images/closeup_{made:03d}.png", pose=pose, split="test", kind="closeup")
        )
        images.append(render.rgb)
        made += 1

    manifest = DatasetManifest(
        intrinsics=K,
        frames=frames,
        scene_name=f"synthetic-{scene_seed}",
        bbox=scene.content_bbox(),
        background=scene.background,
        root=Path(out_dir) if out_dir is not None else None,
    )
    for i, img in enumerate(images):
        manifest.attach_image(i, img)

    if out_dir is not None:
        out_dir = Path(out_dir)
        for frame, img in zip(manifest.frames, images):
            save_image(out_dir / frame.file, img)
        save_manifest(manifest, out_dir / "manifest.json")
    return scene, manifest
