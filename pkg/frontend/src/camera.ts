/**
 * Camera math for the viewer, matching the rendering service's conventions:
 * camera frame +x right, +y down, +z forward; poses are camera-to-world with
 * the rotation's columns holding the camera axes in world coordinates; the
 * wire format is a 3x4 row-major [R|t] as nested JSON rows.
 */

export type Vec3 = [number, number, number];
export type Mat3 = [Vec3, Vec3, Vec3]; // row-major rows

export interface Camera {
  position: Vec3;
  rotation: Mat3; // camera-to-world
}

export interface Intrinsics {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
}

export const WORLD_UP: Vec3 = [0, 0, 1];

// -- vector helpers ---------------------------------------------------------

export function add(a: Vec3, b: Vec3): Vec3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

export function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

export function scale(a: Vec3, s: number): Vec3 {
  return [a[0] * s, a[1] * s, a[2] * s];
}

export function dot(a: Vec3, b: Vec3): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

export function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

export function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

export function normalize(a: Vec3): Vec3 {
  const n = norm(a);
  if (n < 1e-12) throw new Error("cannot normalize a zero vector");
  return scale(a, 1 / n);
}

// -- matrix helpers ---------------------------------------------------------

export function column(m: Mat3, j: 0 | 1 | 2): Vec3 {
  return [m[0][j], m[1][j], m[2][j]];
}

export function fromColumns(x: Vec3, y: Vec3, z: Vec3): Mat3 {
  return [
    [x[0], y[0], z[0]],
    [x[1], y[1], z[1]],
    [x[2], y[2], z[2]],
  ];
}

export function matVec(m: Mat3, v: Vec3): Vec3 {
  return [dot(m[0], v), dot(m[1], v), dot(m[2], v)];
}

export function matMul(a: Mat3, b: Mat3): Mat3 {
  const r = (i: number, j: number) =>
    a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
  return [
    [r(0, 0), r(0, 1), r(0, 2)],
    [r(1, 0), r(1, 1), r(1, 2)],
    [r(2, 0), r(2, 1), r(2, 2)],
  ];
}

/** Rodrigues rotation about a unit axis. */
export function axisAngle(axis: Vec3, angle: number): Mat3 {
  const [x, y, z] = normalize(axis);
  const c = Math.cos(angle);
  const s = Math.sin(angle);
  const t = 1 - c;
  return [
    [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
    [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
    [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
  ];
}

/**
 * Snap a near-rotation back onto the rotation manifold.
 *
 * Forward-priority Gram-Schmidt on the columns: the view direction is kept,
 * the down axis is re-squared against it, and right completes the
 * right-handed frame (x = y cross z under this convention).
 */
export function orthonormalize(m: Mat3): Mat3 {
  if (orthonormalityError(m) <= 1e-12) return m; // already on the manifold
  const z = normalize(column(m, 2));
  const y0 = column(m, 1);
  const y = normalize(sub(y0, scale(z, dot(y0, z))));
  const x = cross(y, z);
  return fromColumns(x, y, z);
}

/** Max absolute entry of R R^T - I; 0 for an exact rotation. */
export function orthonormalityError(m: Mat3): number {
  let worst = 0;
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      const g = dot(m[i] as Vec3, m[j] as Vec3) - (i === j ? 1 : 0);
      worst = Math.max(worst, Math.abs(g));
    }
  }
  return worst;
}

// -- wire format ------------------------------------------------------------

/** Camera -> 3x4 row-major nested rows, the service's pose JSON shape. */
export function cameraToWire(cam: Camera): number[][] {
  return cam.rotation.map((row, i) => [...row, cam.position[i]]);
}

/** 3x4 nested rows -> Camera; throws on malformed input. */
export function wireToCamera(m: number[][]): Camera {
  if (!Array.isArray(m) || m.length !== 3 || m.some(r => !Array.isArray(r) || r.length !== 4)) {
    throw new Error("pose must be 3 rows of 4 numbers");
  }
  const flat = m.flat();
  if (flat.some(v => typeof v !== "number" || !Number.isFinite(v))) {
    throw new Error("pose entries must be finite numbers");
  }
  const rot: Mat3 = [
    [m[0][0], m[0][1], m[0][2]],
    [m[1][0], m[1][1], m[1][2]],
    [m[2][0], m[2][1], m[2][2]],
  ];
  return {
    position: [m[0][3], m[1][3], m[2][3]],
    rotation: orthonormalize(rot),
  };
}

// -- pose construction and navigation ---------------------------------------

/** Camera at eye with +z toward target and image-up aligned to world up. */
export function lookAt(eye: Vec3, target: Vec3, up: Vec3 = WORLD_UP): Camera {
  const z = normalize(sub(target, eye));
  const xRaw = cross(z, up);
  if (norm(xRaw) < 1e-9) throw new Error("view direction is parallel to up");
  const x = normalize(xRaw);
  const y = cross(z, x);
  return { position: [...eye], rotation: fromColumns(x, y, z) };
}

/**
 * Rotate the camera around a pivot, preserving distance exactly and
 * re-aiming at the pivot. Elevation is clamped short of the poles so the
 * look-at frame stays well defined.
 */
export function orbit(
  cam: Camera,
  pivot: Vec3,
  dAzimuth: number,
  dElevation: number,
  up: Vec3 = WORLD_UP,
): Camera {
  const u = normalize(up);
  // stable horizontal basis: pick the world axis least aligned with up
  const seed: Vec3 = Math.abs(u[0]) < 0.9 ? [1, 0, 0] : [0, 1, 0];
  const e1 = normalize(cross(seed, u));
  const e2 = cross(u, e1);

  const offset = sub(cam.position, pivot);
  const r = norm(offset);
  if (r < 1e-9) throw new Error("camera sits on the orbit pivot");
  const a = dot(offset, e1);
  const b = dot(offset, e2);
  const c = dot(offset, u);

  const az = Math.atan2(b, a) + dAzimuth;
  const maxEl = Math.PI / 2 - 1e-3;
  const el = Math.min(maxEl, Math.max(-maxEl, Math.asin(c / r) + dElevation));

  const horiz = r * Math.cos(el);
  const eye = add(pivot, add(
    add(scale(e1, horiz * Math.cos(az)), scale(e2, horiz * Math.sin(az))),
    scale(u, r * Math.sin(el)),
  ));
  return lookAt(eye, pivot, u);
}

/**
 * Move toward an anchor point, shrinking the camera-to-anchor distance by
 * the magnification factor. Orientation is unchanged; magnification 2 puts
 * the camera at the midpoint, values below 1 back away.
 */
export function dolly(cam: Camera, anchor: Vec3, magnification: number): Camera {
  if (!(magnification > 0)) throw new Error("magnification must be positive");
  const offset = scale(sub(cam.position, anchor), 1 / magnification);
  return { position: add(anchor, offset), rotation: cam.rotation };
}

/** Rotate the view in place: yaw about world up, pitch about the right axis. */
export function freeLook(
  cam: Camera,
  dYaw: number,
  dPitch: number,
  up: Vec3 = WORLD_UP,
): Camera {
  let rot = cam.rotation;
  if (dYaw !== 0) rot = matMul(axisAngle(up, dYaw), rot);
  if (dPitch !== 0) rot = matMul(axisAngle(column(rot, 0), dPitch), rot);
  return { position: cam.position, rotation: orthonormalize(rot) };
}

// -- pixel picking ----------------------------------------------------------

/** Unit world direction through pixel center (u + 0.5, v + 0.5). */
export function pixelRay(cam: Camera, intr: Intrinsics, u: number, v: number): Vec3 {
  const dCam: Vec3 = [
    (u + 0.5 - intr.cx) / intr.fx,
    (v + 0.5 - intr.cy) / intr.fy,
    1,
  ];
  return normalize(matVec(cam.rotation, dCam));
}

/** Lift a pixel at a given ray distance to a world point. */
export function liftPixel(
  cam: Camera,
  intr: Intrinsics,
  u: number,
  v: number,
  depth: number,
): Vec3 {
  return add(cam.position, scale(pixelRay(cam, intr, u, v), depth));
}
