/**
 * Typed client for the rendering service's HTTP API.
 *
 * The fetch implementation is injectable so tests can drive the client with
 * a scripted fake; every request accepts an AbortSignal because the UI must
 * stay responsive while renders are in flight.
 */

export interface SceneIntrinsics {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
}

export interface SceneFrame {
  index: number;
  file: string;
  split: string;
  kind: string;
  pose: number[][]; // 3x4 row-major camera-to-world
}

export interface SceneState {
  scene_name: string;
  checkpoint_id: string;
  resolution: [number, number];
  intrinsics: SceneIntrinsics;
  background: number[];
  frames: SceneFrame[];
}

export interface DepthStats {
  valid_fraction: number;
  min: number | null;
  max: number | null;
  mean: number | null;
}

export interface RenderResponse {
  image: string; // base64 PNG
  width: number;
  height: number;
  quality: "draft" | "full";
  depth_stats: DepthStats;
  opacity_mean: number;
}

export interface PreviewResponse {
  label: string; // base64 PNG, undefined pixels zeroed
  aggregate: string;
  mask: string;
  valid_fraction: number;
  source_view: number;
}

export interface JobPoseRow {
  pose: number;
  agreement_before: number | null;
  agreement_after: number | null;
  [extra: string]: unknown;
}

export interface JobResult {
  checkpoint_id: string;
  poses: JobPoseRow[];
}

export type JobStatus = "queued" | "running" | "done" | "failed";

export interface JobRecord {
  id: string;
  kind: string;
  status: JobStatus;
  progress: number;
  result: JobResult | null;
  error: string | null;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

export class ApiClient {
  constructor(
    private base: string = "",
    private fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async call<T>(method: string, path: string, body?: unknown,
                        signal?: AbortSignal): Promise<T> {
    const init: RequestInit = { method, signal };
    if (body !== undefined) {
      init.headers = { "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const resp = await this.fetchFn(this.base + path, init);
    let payload: unknown = null;
    try {
      payload = await resp.json();
    } catch {
      // non-JSON error bodies fall through to the status check
    }
    if (!resp.ok) {
      const message =
        payload && typeof payload === "object" && "error" in payload
          ? String((payload as { error: unknown }).error)
          : `HTTP ${resp.status}`;
      throw new ApiError(resp.status, message);
    }
    return payload as T;
  }

  state(signal?: AbortSignal): Promise<SceneState> {
    return this.call("GET", "/api/state", undefined, signal);
  }

  render(pose: number[][], quality: "draft" | "full",
         signal?: AbortSignal): Promise<RenderResponse> {
    return this.call("POST", "/api/render", { pose, quality }, signal);
  }

  pseudoPreview(pose: number[][], signal?: AbortSignal): Promise<PreviewResponse> {
    return this.call("POST", "/api/pseudo_preview", { pose }, signal);
  }

  submitFinetune(poses: number[][][], iterationsPerView: number,
                 signal?: AbortSignal): Promise<{ job_id: string }> {
    return this.call("POST", "/api/finetune",
                     { poses, iterations_per_view: iterationsPerView }, signal);
  }

  job(id: string, signal?: AbortSignal): Promise<JobRecord> {
    return this.call("GET", `/api/job/${id}`, undefined, signal);
  }
}
