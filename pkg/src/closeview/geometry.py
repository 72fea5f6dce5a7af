"""Pinhole camera model, pose algebra and pixel/ray/point transforms.

Conventions used throughout this package:

* World and camera frames are right-handed.
* Camera frame: +x right, +y down, +z forward. Points with positive
  camera-frame z are in front of the camera.
* Poses are camera-to-world: ``x_world = R @ x_cam + t``, with ``t`` the
  camera center in world coordinates.
* Euler angles are intrinsic Z-Y-X (yaw about z, then pitch about y,
  then roll about x): ``R = Rz(theta_z) @ Ry(theta_y) @ Rx(theta_x)``.
  ``theta_y`` is extracted into [-pi/2, pi/2].
* Continuous image coordinates place the center of pixel ``(u, v)`` at
  ``(u + 0.5, v + 0.5)``; u runs right (width), v runs down (height).
* "Depth" always means distance along the ray. ``project_point`` reports
  the camera-frame z coordinate separately; the two are related by the
  cosine between the ray and the optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
BEHIND_EPS = 1e-9


class BehindCameraError(ValueError):
    """A point lies on or behind the camera plane (z <= BEHIND_EPS)."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie strictly inside the image")

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for the same camera at a resolution scaled by ``factor``."""
        return Intrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )


def _check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0.0):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("rotation must have determinant +1")
    return R


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world pose [R | t]; ``translation`` is the camera center."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = R.copy()
        t = t.copy()
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def matrix3x4(self) -> np.ndarray:
        """Row-major 3x4 [R | t], the wire/manifest representation."""
        return np.hstack([self.rotation, self.translation[:, None]])

    @classmethod
    def from_matrix3x4(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(rotation=m[:, :3], translation=m[:, 3])

    def forward(self) -> np.ndarray:
        """World-space optical axis (+z camera axis)."""
        return self.rotation[:, 2].copy()


@dataclass(frozen=True)
class EulerAngles:
    """Intrinsic Z-Y-X Euler angles in radians.

    ``gimbal_lock`` marks angles extracted on the degenerate branch
    (|pitch| = pi/2), where the x/z split is not unique; the canonical
    branch sets theta_x = 0.
    """

    theta_x: float
    theta_y: float
    theta_z: float
    gimbal_lock: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in ("theta_x", "theta_y", "theta_z"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def offset(self, dx: float, dy: float, dz: float) -> "EulerAngles":
        return EulerAngles(self.theta_x + dx, self.theta_y + dy, self.theta_z + dz)


@dataclass(frozen=True, eq=False)
class Ray:
    """World-space ray origin + t * direction, integrated over [t_near, t_far]."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        d = np.asarray(self.direction, dtype=np.float64).reshape(3).copy()
        n = np.linalg.norm(d)
        if abs(n - 1.0) > ORTHO_TOL:
            raise ValueError(f"direction must be unit length, |d| = {n}")
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError(f"need 0 <= t_near < t_far, got [{self.t_near}, {self.t_far}]")
        o.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def rotation_from_euler(e: EulerAngles) -> np.ndarray:
    """Rotation matrix for intrinsic Z-Y-X angles: Rz(tz) @ Ry(ty) @ Rx(tx)."""
    cx, sx = np.cos(e.theta_x), np.sin(e.theta_x)
    cy, sy = np.cos(e.theta_y), np.sin(e.theta_y)
    cz, sz = np.cos(e.theta_z), np.sin(e.theta_z)
    return np.array(
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ],
        dtype=np.float64,
    )


def euler_from_rotation(R: np.ndarray, lock_tol: float = 1e-10) -> EulerAngles:
    """Extract intrinsic Z-Y-X Euler angles from a rotation matrix.

    Away from gimbal lock, ``rotation_from_euler(euler_from_rotation(R))``
    reconstructs R to ~1e-9. At |R[2,0]| = 1 (pitch = -/+ pi/2) only
    theta_z +/- theta_x is determined; the canonical branch fixes
    theta_x = 0 and flags the result.
    """
    R = _check_rotation(R)
    szy = -R[2, 0]
    if abs(szy) >= 1.0 - lock_tol:
        theta_y = np.pi / 2 if szy > 0 else -np.pi / 2
        if szy > 0:  # sy = +1: R[0,1] = sin(x - z), R[0,2] = cos(x - z)
            theta_z = -np.arctan2(R[0, 1], R[0, 2])
        else:  # sy = -1: R[0,1] = -sin(z + x), R[0,2] = -cos(z + x)
            theta_z = np.arctan2(-R[0, 1], -R[0, 2])
        return EulerAngles(0.0, float(theta_y), float(theta_z), gimbal_lock=True)
    theta_y = np.arcsin(np.clip(szy, -1.0, 1.0))
    theta_x = np.arctan2(R[2, 1], R[2, 2])
    theta_z = np.arctan2(R[1, 0], R[0, 0])
    return EulerAngles(float(theta_x), float(theta_y), float(theta_z))


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``eye`` with +z toward ``target``.

    With the +y-down camera convention the image "up" direction maps to
    world ``up``; degenerate when the view direction is parallel to up.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    z = fwd / n
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return Pose(rotation=R, translation=eye)


# ---------------------------------------------------------------------------
# Pixel <-> ray <-> point transforms. Scalar operations wrap the vectorized
# cores, which every image-scale caller uses directly.
# ---------------------------------------------------------------------------


def ray_directions(pose: Pose, K: Intrinsics, u, v) -> np.ndarray:
    """Unit world-space directions through pixel centers.

    ``u``, ``v`` are pixel indices (fractional allowed); the ray passes
    through the continuous image point (u + 0.5, v + 0.5).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u + 0.5 - K.cx) / K.fx
    y = (v + 0.5 - K.cy) / K.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_world = d_cam @ pose.rotation.T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def pixel_to_ray(pose: Pose, K: Intrinsics, u: float, v: float,
                 t_near: float = 1e-3, t_far: float = 1e3) -> Ray:
    """Back-project pixel (u, v) into a world ray from the camera center."""
    if not (0 <= u < K.width and 0 <= v < K.height):
        raise ValueError(f"pixel ({u}, {v}) outside a {K.width}x{K.height} image")
    d = ray_directions(pose, K, u, v)
    return Ray(origin=pose.translation, direction=d, t_near=t_near, t_far=t_far)


def project_points(pose: Pose, K: Intrinsics, X: np.ndarray):
    """Project world points into the image (vectorized, no exceptions).

    Returns ``(uv, z, in_front)``: continuous image coordinates (N, 2),
    camera-frame z (N,), and a validity mask for z > BEHIND_EPS.
    Coordinates may lie outside the image bounds; callers filter. Where
    ``in_front`` is False the coordinates are meaningless.
    """
    X = np.asarray(X, dtype=np.float64)
    x_cam = (X - pose.translation) @ pose.rotation
    z = x_cam[..., 2]
    in_front = z > BEHIND_EPS
    safe_z = np.where(in_front, z, 1.0)
    u = K.fx * x_cam[..., 0] / safe_z + K.cx
    v = K.fy * x_cam[..., 1] / safe_z + K.cy
    return np.stack([u, v], axis=-1), z, in_front


def project_point(pose: Pose, K: Intrinsics, X) -> tuple[float, float, float]:
    """Project one world point; returns continuous (u, v) and camera z.

    Raises BehindCameraError for points at or behind the camera plane.
    """
    uv, z, ok = project_points(pose, K, np.asarray(X, dtype=np.float64).reshape(1, 3))
    if not ok[0]:
        raise BehindCameraError(f"point has camera-frame z = {z[0]:.3g}")
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def points_from_depth(pose: Pose, K: Intrinsics, u, v, depth) -> np.ndarray:
    """Lift pixels to world points: origin + depth * direction (vectorized)."""
    d = ray_directions(pose, K, u, v)
    depth = np.asarray(depth, dtype=np.float64)[..., None]
    return pose.translation + depth * d


def point_from_depth(pose: Pose, K: Intrinsics, u: float, v: float, depth: float) -> np.ndarray:
    """Lift one pixel at ray-distance ``depth`` to a world point."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return points_from_depth(pose, K, u, v, depth)


def pixel_grid(K: Intrinsics):
    """Integer pixel index grids (us, vs), each of shape (height, width)."""
    vs, us = np.mgrid[0 : K.height, 0 : K.width]
    return us, vs
