import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiClient } from "../src/api.js";
import {
  isAbortError,
  pollJob,
  SingleFlight,
  TrailingRateLimiter,
} from "../src/controls.js";
import { lookAt, orbit } from "../src/camera.js";

afterEach(() => {
  vi.useRealTimers();
});

describe("TrailingRateLimiter", () => {
  it("caps continuous motion at 10 requests per second for a 100 ms interval", () => {
    vi.useFakeTimers();
    const fired: number[] = [];
    const limiter = new TrailingRateLimiter(100);
    // pointermove every 10 ms for 5 s of simulated dragging
    for (let t = 0; t <= 5000; t += 10) {
      limiter.request(() => fired.push(Date.now()));
      vi.advanceTimersByTime(10);
    }
    limiter.cancel();
    expect(fired.length).toBeGreaterThan(10); // it does keep rendering
    for (const start of fired) {
      const inWindow = fired.filter(t => t >= start && t < start + 1000).length;
      expect(inWindow).toBeLessThanOrEqual(10);
    }
  });

  it("fires the latest pending request after the interval (trailing edge)", () => {
    vi.useFakeTimers();
    const seen: string[] = [];
    const limiter = new TrailingRateLimiter(100);
    limiter.request(() => seen.push("a")); // leading, immediate
    limiter.request(() => seen.push("b")); // coalesced away
    limiter.request(() => seen.push("c")); // the one that must survive
    expect(seen).toEqual(["a"]);
    vi.advanceTimersByTime(100);
    expect(seen).toEqual(["a", "c"]);
  });

  it("executes immediately again once idle", () => {
    vi.useFakeTimers();
    const seen: number[] = [];
    const limiter = new TrailingRateLimiter(100);
    limiter.request(() => seen.push(1));
    vi.advanceTimersByTime(500);
    limiter.request(() => seen.push(2));
    expect(seen).toEqual([1, 2]);
  });

  it("cancel drops the pending call", () => {
    vi.useFakeTimers();
    const seen: number[] = [];
    const limiter = new TrailingRateLimiter(100);
    limiter.request(() => seen.push(1));
    limiter.request(() => seen.push(2));
    limiter.cancel();
    vi.advanceTimersByTime(1000);
    expect(seen).toEqual([1]);
  });
});

describe("SingleFlight", () => {
  function abortable<T>(value: T, ms: number) {
    return (signal: AbortSignal) =>
      new Promise<T>((resolve, reject) => {
        const timer = setTimeout(() => resolve(value), ms);
        signal.addEventListener("abort", () => {
          clearTimeout(timer);
          reject(new DOMException("aborted", "AbortError"));
        });
      });
  }

  it("aborts the previous request when a new one starts", async () => {
    vi.useFakeTimers();
    const flight = new SingleFlight();
    const first = flight.run(abortable("first", 50));
    const firstOutcome = first.then(() => "resolved", e => (isAbortError(e) ? "aborted" : "other"));
    const second = flight.run(abortable("second", 50));
    await vi.advanceTimersByTimeAsync(60);
    expect(await firstOutcome).toBe("aborted");
    expect(await second).toBe("second");
  });

  it("lets a sole request complete", async () => {
    vi.useFakeTimers();
    const flight = new SingleFlight();
    const only = flight.run(abortable(42, 10));
    await vi.advanceTimersByTimeAsync(20);
    expect(await only).toBe(42);
  });
});

describe("pollJob", () => {
  function clientWithStatuses(statuses: string[]): ApiClient {
    let call = 0;
    const fetchFn = async (url: string) => {
      expect(url).toContain("/api/job/j1");
      const status = statuses[Math.min(call++, statuses.length - 1)];
      const body = {
        id: "j1", kind: "finetune", status, progress: call / statuses.length,
        result: status === "done" ? { checkpoint_id: "c", poses: [] } : null,
        error: status === "failed" ? "boom" : null,
      };
      return new Response(JSON.stringify(body), { status: 200 });
    };
    return new ApiClient("", fetchFn);
  }

  it("polls until done and reports each tick", async () => {
    const ticks: string[] = [];
    const job = await pollJob(clientWithStatuses(["queued", "running", "running", "done"]), "j1", {
      sleep: async () => {},
      onTick: j => ticks.push(j.status),
    });
    expect(job.status).toBe("done");
    expect(ticks).toEqual(["queued", "running", "running", "done"]);
  });

  it("stops on failure with the error preserved", async () => {
    const job = await pollJob(clientWithStatuses(["running", "failed"]), "j1", {
      sleep: async () => {},
    });
    expect(job.status).toBe("failed");
    expect(job.error).toBe("boom");
  });
});

describe("main-loop responsiveness", () => {
  it("handles a full second of motion events in far under 100 ms", () => {
    let renderCalls = 0;
    const neverSettles = () => {
      renderCalls += 1;
      return new Promise<Response>(() => {});
    };
    const client = new ApiClient("", neverSettles);
    const flight = new SingleFlight();
    const limiter = new TrailingRateLimiter(100);
    let cam = lookAt([3, 0, 1.2], [0, 0, 0]);

    const start = performance.now();
    // 1000 pointer events: camera math plus a rate-limited async render kick
    for (let i = 0; i < 1000; i++) {
      cam = orbit(cam, [0, 0, 0], 0.002, 0.001);
      limiter.request(() => {
        void flight.run(signal =>
          client.render([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]], "draft", signal));
      });
    }
    const elapsed = performance.now() - start;
    limiter.cancel();

    expect(elapsed).toBeLessThan(100);
    expect(renderCalls).toBeGreaterThan(0); // the work was actually dispatched
    expect(renderCalls).toBeLessThanOrEqual(2); // and the network never ran hot
  });
});
