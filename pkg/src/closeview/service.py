"""HTTP facade for interactive viewpoint work: render, preview, fine-tune.

Stdlib-only server (ThreadingHTTPServer). Concurrency contract: renders are
unlimited readers against an immutable published snapshot; fine-tuning is an
exclusive single writer that works on a copy and atomically republishes, so
renders issued mid-job reflect exactly the pre-job snapshot. Poses travel as
3x4 camera-to-world row-major arrays, the manifest convention.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import threading
import uuid
from dataclasses import dataclass, field as dc_field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image

from .field import RenderOptions, VoxelRadianceField, load_field, render_image, save_field
from .geometry import Intrinsics, Pose
from .metrics import psnr
from .pseudo import (
    CloseupConfig,
    CloseupPose,
    LabelRejectedError,
    NoOverlapError,
    build_pseudo_label,
    render_source_depths,
    select_source_view,
)
from .training import TrainConfig, far_plane, finetune_testtime

DRAFT_SCALE = 0.25  # draft renders at quarter resolution
POSE_ORTHO_TOL = 1e-3  # wire poses re-orthonormalized within this


class ApiError(Exception):
    """Maps a request failure to an HTTP status + message."""

    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


@dataclass
class JobRecord:
    """One fine-tune (or queued render) job; single path queued->running->end."""

    id: str
    kind: str  # "render" | "finetune"
    status: str  # "queued" | "running" | "done" | "failed"
    poses: list
    progress: float = 0.0
    result: dict | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "status": self.status,
            "poses": self.poses,
            "progress": self.progress,
            "result": self.result,
            "error": self.error,
        }


def _png_b64(img: np.ndarray) -> str:
    u8 = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if u8.ndim == 2:
        u8 = np.repeat(u8[:, :, None], 3, axis=2)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(data: str) -> np.ndarray:
    """Inverse of the service's image encoding, for clients and tests."""
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def parse_wire_pose(obj) -> Pose:
    """3x4 row-major camera-to-world -> Pose; 400 on anything malformed.

    Orientation is accepted within 1e-3 of orthonormal and snapped to the
    nearest rotation; reflections are rejected.
    """
    m = np.asarray(obj, dtype=np.float64)
    if m.shape != (3, 4) or not np.isfinite(m).all():
        raise ApiError(400, "pose must be a finite 3x4 row-major matrix")
    R, t = m[:, :3], m[:, 3]
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > POSE_ORTHO_TOL:
        raise ApiError(400, f"pose rotation is not orthonormal (error {err:.2e})")
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:
        raise ApiError(400, "pose rotation is a reflection")
    return Pose(rotation=R, translation=t)


def _checkpoint_id(field: VoxelRadianceField) -> str:
    h = hashlib.sha256()
    h.update(field.density_params.tobytes())
    h.update(field.color_params.tobytes())
    return h.hexdigest()[:12]


@dataclass
class ServiceApp:
    """All server state; handlers delegate here so tests can drive it directly."""

    manifest: object = None
    snapshot: VoxelRadianceField | None = None
    checkpoint_path: Path | None = None
    opts: RenderOptions | None = None
    closeup: CloseupConfig = dc_field(default_factory=CloseupConfig)
    allow_cors: bool = False
    lock: threading.Lock = dc_field(default_factory=threading.Lock)
    jobs: dict = dc_field(default_factory=dict)
    active_job: JobRecord | None = None
    _depth_cache: tuple | None = None  # (checkpoint_id, {view: depth})

    @property
    def loaded(self) -> bool:
        return self.manifest is not None and self.snapshot is not None

    def load(self, manifest, field: VoxelRadianceField,
             checkpoint_path=None, opts: RenderOptions | None = None) -> None:
        self.manifest = manifest
        self.snapshot = field.copy()
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.opts = opts or RenderOptions(
            background_color=tuple(float(c) for c in manifest.background),
            t_far=far_plane(manifest))

    # -- read side ----------------------------------------------------------

    def _require_loaded(self):
        if not self.loaded:
            raise ApiError(503, "no checkpoint loaded")

    def state(self) -> dict:
        self._require_loaded()
        man = self.manifest
        K = man.intrinsics
        return {
            "scene_name": man.scene_name,
            "checkpoint_id": _checkpoint_id(self.snapshot),
            "resolution": [K.width, K.height],
            "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
                           "width": K.width, "height": K.height},
            "background": [float(c) for c in man.background],
            "frames": [
                {
                    "index": i,
                    "file": f.file,
                    "split": f.split,
                    "kind": f.kind,
                    "pose": f.pose.matrix3x4().tolist(),
                }
                for i, f in enumerate(man.frames)
            ],
        }

    def render(self, body: dict) -> dict:
        self._require_loaded()
        if "pose" not in body:
            raise ApiError(400, "missing 'pose'")
        pose = parse_wire_pose(body["pose"])
        quality = body.get("quality", "draft")
        if quality not in ("draft", "full"):
            raise ApiError(400, "quality must be 'draft' or 'full'")
        snapshot = self.snapshot  # one read: immutable once published
        K = self.manifest.intrinsics
        if quality == "draft":
            K = K.scaled(DRAFT_SCALE)
        out = render_image(snapshot, pose, K, self.opts)
        valid = out.opacity >= self.opts.opacity_floor
        depths = out.depth[valid]
        return {
            "image": _png_b64(out.rgb),
            "width": K.width,
            "height": K.height,
            "quality": quality,
            "depth_stats": {
                "valid_fraction": float(valid.mean()),
                "min": float(depths.min()) if depths.size else None,
                "max": float(depths.max()) if depths.size else None,
                "mean": float(depths.mean()) if depths.size else None,
            },
            "opacity_mean": float(out.opacity.mean()),
        }

    def _training_depths(self, snapshot: VoxelRadianceField) -> dict:
        # per-snapshot cache: source depth maps are the expensive half
        key = _checkpoint_id(snapshot)
        cached = self._depth_cache
        if cached is not None and cached[0] == key:
            return cached[1]
        label_opts = replace(self.opts, stratified_jitter=False)
        depths = render_source_depths(snapshot, self.manifest, label_opts)
        self._depth_cache = (key, depths)
        return depths

    def pseudo_preview(self, body: dict) -> dict:
        self._require_loaded()
        if "pose" not in body:
            raise ApiError(400, "missing 'pose'")
        pose = parse_wire_pose(body["pose"])
        snapshot = self.snapshot
        depths = self._training_depths(snapshot)
        K = self.manifest.intrinsics
        try:
            src = select_source_view(self.manifest, depths, pose, K)
        except NoOverlapError as e:
            raise ApiError(422, str(e))
        target = CloseupPose(pose=pose, source_index=src, anchor_pixel=(0, 0),
                             anchor_point=np.asarray(pose.translation), magnification=1.0)
        label_opts = replace(self.opts, stratified_jitter=False)
        # preview never rejects: the point is to show the fraction
        preview_cfg = replace(self.closeup, min_mask_fraction=0.0)
        label = build_pseudo_label(snapshot, self.manifest, target, preview_cfg,
                                   label_opts, source_depths=depths)
        return {
            "label": _png_b64(np.where(label.defined[:, :, None], label.image, 0.0)),
            "aggregate": _png_b64(
                np.where(label.aggregate_defined[:, :, None], label.aggregate, 0.0)),
            "mask": _png_b64(label.mask.astype(np.float64)),
            "valid_fraction": label.valid_fraction,
            "source_view": int(src),
        }

    # -- write side ---------------------------------------------------------

    def submit_finetune(self, body: dict) -> dict:
        self._require_loaded()
        poses_raw = body.get("poses")
        if not isinstance(poses_raw, list) or len(poses_raw) == 0:
            raise ApiError(400, "need a non-empty 'poses' list")
        poses = [parse_wire_pose(p) for p in poses_raw]
        iterations = int(body.get("iterations_per_view", 5))
        if iterations < 1:
            raise ApiError(400, "iterations_per_view must be >= 1")
        with self.lock:
            if self.active_job is not None and self.active_job.status in ("queued", "running"):
                raise ApiError(409, f"job {self.active_job.id} is {self.active_job.status}")
            job = JobRecord(id=uuid.uuid4().hex[:12], kind="finetune", status="queued",
                            poses=[p.matrix3x4().tolist() for p in poses])
            self.active_job = job
            self.jobs[job.id] = job
        worker = threading.Thread(target=self._run_finetune, args=(job, poses, iterations),
                                  daemon=True)
        worker.start()
        return {"job_id": job.id}

    def _masked_agreement(self, field: VoxelRadianceField, pose: Pose, label) -> float | None:
        """PSNR between a render and the label on masked pixels only."""
        if not label.mask.any():
            return None
        out = render_image(field, pose, self.manifest.intrinsics,
                           replace(self.opts, stratified_jitter=False))
        return float(psnr(out.rgb[label.mask], label.image[label.mask]))

    def _run_finetune(self, job: JobRecord, poses: list, iterations: int) -> None:
        try:
            job.status = "running"
            snapshot = self.snapshot
            config = TrainConfig(
                iterations=1, batch_size=1024, mode="finetune_testtime",
                testtime_iterations=iterations, render=self.opts,
                closeup=self.closeup)
            # before/after agreement needs the same frozen labels the op uses
            depths = self._training_depths(snapshot)
            label_opts = replace(self.opts, stratified_jitter=False)
            labels = {}
            for q, pose in enumerate(poses):
                try:
                    src = select_source_view(self.manifest, depths, pose,
                                             self.manifest.intrinsics)
                    target = CloseupPose(pose=pose, source_index=src,
                                         anchor_pixel=(0, 0),
                                         anchor_point=np.asarray(pose.translation),
                                         magnification=1.0)
                    labels[q] = build_pseudo_label(
                        snapshot, self.manifest, target, self.closeup, label_opts,
                        source_depths=depths)
                except (NoOverlapError, LabelRejectedError):
                    labels[q] = None
            before = {q: self._masked_agreement(snapshot, poses[q], lab)
                      for q, lab in labels.items() if lab is not None}
            job.progress = 0.25
            tuned, report = finetune_testtime(snapshot, self.manifest, poses, config)
            if report.aborted:
                raise RuntimeError(report.aborted)
            job.progress = 0.75
            rows = []
            for row in report.notes["poses"]:
                q = row["pose"]
                lab = labels.get(q)
                after = (self._masked_agreement(tuned, poses[q], lab)
                         if lab is not None else None)
                rows.append({**row, "agreement_before": before.get(q),
                             "agreement_after": after})
            with self.lock:
                self.snapshot = tuned  # publish: renders switch atomically
                self._depth_cache = None
            if self.checkpoint_path is not None:
                save_field(tuned, self.checkpoint_path)  # temp + rename inside
            job.result = {"checkpoint_id": _checkpoint_id(tuned), "poses": rows}
            job.progress = 1.0
            job.status = "done"
        except Exception as e:  # failed job keeps the old snapshot
            job.error = f"{type(e).__name__}: {e}"
            job.status = "failed"

    def job(self, job_id: str) -> dict:
        record = self.jobs.get(job_id)
        if record is None:
            raise ApiError(404, f"unknown job {job_id!r}")
        return record.to_json()

    # -- dispatch ------------------------------------------------------------

    def handle(self, method: str, path: str, body: dict | None) -> tuple[int, dict]:
        try:
            if method == "GET" and path == "/api/state":
                return 200, self.state()
            if method == "POST" and path == "/api/render":
                return 200, self.render(body or {})
            if method == "POST" and path == "/api/pseudo_preview":
                return 200, self.pseudo_preview(body or {})
            if method == "POST" and path == "/api/finetune":
                return 200, self.submit_finetune(body or {})
            if method == "GET" and path.startswith("/api/job/"):
                return 200, self.job(path[len("/api/job/"):])
            raise ApiError(404, f"no route for {method} {path}")
        except ApiError as e:
            return e.status, {"error": str(e)}


def _json_default(obj):
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def app(self) -> ServiceApp:
        return self.server.app

    def _reply(self, status: int, payload: dict) -> None:
        data = json.dumps(payload, default=_json_default).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        if self.app.allow_cors:
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()
        self.wfile.write(data)

    def do_OPTIONS(self):  # CORS preflight
        self._reply(204 if self.app.allow_cors else 405, {})

    def do_GET(self):
        status, payload = self.app.handle("GET", self.path, None)
        self._reply(status, payload)

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        try:
            body = json.loads(raw.decode() or "{}")
            if not isinstance(body, dict):
                raise ValueError("body must be a JSON object")
        except (ValueError, UnicodeDecodeError) as e:
            self._reply(400, {"error": f"bad JSON body: {e}"})
            return
        status, payload = self.app.handle("POST", self.path, body)
        self._reply(status, payload)

    def log_message(self, fmt, *args):  # quiet: progress belongs to the CLI
        pass


def make_server(app: ServiceApp, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Bound but not yet serving; port 0 picks a free one (see server_port)."""
    server = ThreadingHTTPServer((host, port), _Handler)
    server.app = app
    return server


def serve(checkpoint, dataset, host: str = "127.0.0.1", port: int = 8172,
          allow_cors: bool = False, closeup: CloseupConfig | None = None) -> None:
    """Load a checkpoint + manifest and serve until interrupted."""
    from .data import load_manifest

    app = ServiceApp(allow_cors=allow_cors)
    if closeup is not None:
        app.closeup = closeup
    manifest = load_manifest(dataset)
    field = load_field(checkpoint)
    app.load(manifest, field, checkpoint_path=checkpoint)
    server = make_server(app, host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()
