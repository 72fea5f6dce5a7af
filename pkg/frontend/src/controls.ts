/**
 * Interaction plumbing that keeps the UI responsive: request rate limiting,
 * single-flight cancellation, job polling, and the enhance workflow.
 *
 * Nothing here touches the DOM; the pieces are wired up in app.ts and
 * exercised directly by the test suite.
 */

import { ApiClient, ApiError, JobRecord } from "./api.js";

/**
 * Trailing-edge rate limiter: executes immediately when idle, otherwise
 * remembers only the latest request and fires it once the interval since the
 * previous execution has elapsed. Continuous motion therefore produces at
 * most one execution per interval.
 */
export class TrailingRateLimiter {
  private lastFire = -Infinity;
  private pending: (() => void) | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private intervalMs: number,
    private now: () => number = () => Date.now(),
  ) {}

  request(fn: () => void): void {
    const t = this.now();
    if (this.timer === null && t - this.lastFire >= this.intervalMs) {
      this.lastFire = t;
      fn();
      return;
    }
    this.pending = fn;
    if (this.timer === null) {
      const wait = Math.max(0, this.intervalMs - (t - this.lastFire));
      this.timer = setTimeout(() => this.flush(), wait);
    }
  }

  private flush(): void {
    this.timer = null;
    const fn = this.pending;
    this.pending = null;
    if (fn) {
      this.lastFire = this.now();
      fn();
    }
  }

  cancel(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = null;
    this.pending = null;
  }
}

/**
 * At most one request of a kind in flight: starting a new one aborts the
 * previous. Callers treat an AbortError rejection as "superseded".
 */
export class SingleFlight {
  private ctrl: AbortController | null = null;

  run<T>(op: (signal: AbortSignal) => Promise<T>): Promise<T> {
    this.ctrl?.abort();
    const ctrl = new AbortController();
    this.ctrl = ctrl;
    return op(ctrl.signal);
  }

  abort(): void {
    this.ctrl?.abort();
    this.ctrl = null;
  }
}

export function isAbortError(e: unknown): boolean {
  return e instanceof Error && e.name === "AbortError";
}

export interface PollOptions {
  intervalMs?: number;
  onTick?: (job: JobRecord) => void;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) =>
  new Promise<void>(resolve => setTimeout(resolve, ms));

/** Poll a job until it reaches a terminal status. */
export async function pollJob(
  client: ApiClient,
  id: string,
  opts: PollOptions = {},
): Promise<JobRecord> {
  const intervalMs = opts.intervalMs ?? 500;
  const sleep = opts.sleep ?? defaultSleep;
  for (;;) {
    const job = await client.job(id);
    opts.onTick?.(job);
    if (job.status === "done" || job.status === "failed") return job;
    await sleep(intervalMs);
  }
}

export type EnhancePhase =
  | "idle"
  | "submitting"
  | "polling"
  | "done"
  | "failed"
  | "busy";

export interface EnhanceOutcome {
  job: JobRecord;
  /** agreement_after - agreement_before per pose; null where either is unknown */
  deltas: (number | null)[];
  meanDelta: number | null;
}

/**
 * The enhance workflow: submit a fine-tune job for the given poses, poll it
 * to completion, and report the per-pose agreement change. Refuses to start
 * while a job is active (locally busy or a service 409) without disturbing
 * any displayed state.
 */
export class EnhanceFlow {
  busy = false;
  lastJobId: string | null = null;

  constructor(
    private client: ApiClient,
    private onPhase: (phase: EnhancePhase, detail?: string) => void = () => {},
    private pollOpts: PollOptions = {},
  ) {}

  async run(poses: number[][][], iterationsPerView = 5): Promise<EnhanceOutcome | null> {
    if (this.busy) {
      this.onPhase("busy", "a job is already running");
      return null;
    }
    this.busy = true;
    try {
      this.onPhase("submitting");
      let jobId: string;
      try {
        ({ job_id: jobId } = await this.client.submitFinetune(poses, iterationsPerView));
      } catch (e) {
        if (e instanceof ApiError && e.status === 409) {
          this.onPhase("busy", e.message);
          return null;
        }
        throw e;
      }
      this.lastJobId = jobId;
      this.onPhase("polling");
      const job = await pollJob(this.client, jobId, this.pollOpts);
      if (job.status === "failed") {
        this.onPhase("failed", job.error ?? "job failed");
        return { job, deltas: [], meanDelta: null };
      }
      const rows = job.result?.poses ?? [];
      const deltas = rows.map(r =>
        r.agreement_before != null && r.agreement_after != null
          ? r.agreement_after - r.agreement_before
          : null,
      );
      const known = deltas.filter((d): d is number => d !== null);
      const meanDelta = known.length
        ? known.reduce((a, b) => a + b, 0) / known.length
        : null;
      this.onPhase("done");
      return { job, deltas, meanDelta };
    } finally {
      this.busy = false;
    }
  }
}
