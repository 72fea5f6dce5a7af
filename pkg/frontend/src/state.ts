/**
 * Viewer state and its URL-hash codec.
 *
 * The camera pose and display modes serialize into the location hash so a
 * found viewpoint is shareable and scriptable; job ids and cached images are
 * session-local runtime and stay out of the hash.
 */

import { Camera, Mat3, orthonormalize, Vec3 } from "./camera.js";

export type RenderMode = "draft" | "full";
export type OverlayMode = "none" | "mask" | "aggregate";

export interface ViewerState {
  camera: Camera;
  mode: RenderMode;
  overlay: OverlayMode;
  lastJobId: string | null;
  before: string | null; // base64 PNG pair kept for the comparison slider
  after: string | null;
}

export function initialState(camera: Camera): ViewerState {
  return {
    camera,
    mode: "draft",
    overlay: "none",
    lastJobId: null,
    before: null,
    after: null,
  };
}

const RENDER_MODES: RenderMode[] = ["draft", "full"];
const OVERLAY_MODES: OverlayMode[] = ["none", "mask", "aggregate"];

/**
 * Encode the shareable part of the state as "#c=<12 floats>&r=...&o=...".
 *
 * Numbers use JS shortest round-trip formatting, so decode(encode(x))
 * reproduces every float bit-exactly.
 */
export function stateToHash(s: ViewerState): string {
  const m = s.camera.rotation;
  const p = s.camera.position;
  const nums = [
    p[0], p[1], p[2],
    m[0][0], m[0][1], m[0][2],
    m[1][0], m[1][1], m[1][2],
    m[2][0], m[2][1], m[2][2],
  ];
  return `#c=${nums.map(String).join(",")}&r=${s.mode}&o=${s.overlay}`;
}

/** Decode a location hash; null when it does not carry a camera. */
export function stateFromHash(hash: string): ViewerState | null {
  const text = hash.startsWith("#") ? hash.slice(1) : hash;
  if (!text) return null;
  const fields = new Map<string, string>();
  for (const part of text.split("&")) {
    const eq = part.indexOf("=");
    if (eq > 0) fields.set(part.slice(0, eq), part.slice(eq + 1));
  }
  const c = fields.get("c");
  if (!c) return null;
  const nums = c.split(",").map(Number);
  if (nums.length !== 12 || nums.some(v => !Number.isFinite(v))) return null;

  const position: Vec3 = [nums[0], nums[1], nums[2]];
  const rotation: Mat3 = [
    [nums[3], nums[4], nums[5]],
    [nums[6], nums[7], nums[8]],
    [nums[9], nums[10], nums[11]],
  ];
  // reject hashes whose rotation part is nowhere near a rotation
  const det =
    rotation[0][0] * (rotation[1][1] * rotation[2][2] - rotation[1][2] * rotation[2][1]) -
    rotation[0][1] * (rotation[1][0] * rotation[2][2] - rotation[1][2] * rotation[2][0]) +
    rotation[0][2] * (rotation[1][0] * rotation[2][1] - rotation[1][1] * rotation[2][0]);
  if (!(det > 0.5 && det < 1.5)) return null;

  const state = initialState({ position, rotation: orthonormalize(rotation) });
  const r = fields.get("r") as RenderMode | undefined;
  const o = fields.get("o") as OverlayMode | undefined;
  if (r && RENDER_MODES.includes(r)) state.mode = r;
  if (o && OVERLAY_MODES.includes(o)) state.overlay = o;
  return state;
}
