import { describe, expect, it } from "vitest";

import { ApiClient, ApiError, FetchLike } from "../src/api.js";
import { EnhanceFlow, EnhancePhase, pollJob } from "../src/controls.js";
import { cameraToWire, lookAt } from "../src/camera.js";

const POSE = cameraToWire(lookAt([1.5, 0, 0.8], [0, 0, 0.3]));

/**
 * Scripted stand-in for the rendering service: one fine-tune job that walks
 * queued -> running -> done, renders that change with the checkpoint, and a
 * 409 while the job is active.
 */
function fakeService(opts: { failJob?: boolean } = {}) {
  const state = {
    checkpoint: "ckpt-before",
    jobStatus: null as string | null,
    polls: 0,
    renders: [] as string[],
  };

  const json = (body: unknown, status = 200) =>
    new Response(JSON.stringify(body), { status });

  const fetchFn: FetchLike = async (url, init) => {
    const method = init?.method ?? "GET";
    const path = url.replace(/^https?:\/\/[^/]+/, "");

    if (method === "GET" && path === "/api/state") {
      return json({
        scene_name: "toy", checkpoint_id: state.checkpoint,
        resolution: [96, 54],
        intrinsics: { fx: 120, fy: 120, cx: 48, cy: 27, width: 96, height: 54 },
        background: [0, 0, 0],
        frames: [{ index: 0, file: "f0.png", split: "train", kind: "ring", pose: POSE }],
      });
    }
    if (method === "POST" && path === "/api/render") {
      const image = `png-of-${state.checkpoint}`;
      state.renders.push(image);
      return json({
        image, width: 24, height: 13, quality: JSON.parse(String(init!.body)).quality,
        depth_stats: { valid_fraction: 0.8, min: 0.5, max: 3.0, mean: 1.4 },
        opacity_mean: 0.9,
      });
    }
    if (method === "POST" && path === "/api/pseudo_preview") {
      return json({
        label: "png-label", aggregate: "png-aggregate", mask: "png-mask",
        valid_fraction: 0.31, source_view: 0,
      });
    }
    if (method === "POST" && path === "/api/finetune") {
      if (state.jobStatus === "queued" || state.jobStatus === "running") {
        return json({ error: "job j1 is running" }, 409);
      }
      state.jobStatus = "queued";
      state.polls = 0;
      return json({ job_id: "j1" });
    }
    if (method === "GET" && path === "/api/job/j1") {
      state.polls += 1;
      if (state.polls === 1) state.jobStatus = "running";
      if (state.polls >= 3) state.jobStatus = opts.failJob ? "failed" : "done";
      const done = state.jobStatus === "done";
      if (done) state.checkpoint = "ckpt-after";
      return json({
        id: "j1", kind: "finetune", status: state.jobStatus,
        progress: done ? 1 : state.polls * 0.25,
        result: done
          ? {
              checkpoint_id: "ckpt-after",
              poses: [{ pose: 0, psnr_before: 14.1, psnr_after: 14.6,
                        agreement_before: 19.2, agreement_after: 20.9 }],
            }
          : null,
        error: state.jobStatus === "failed" ? "boom" : null,
      });
    }
    return json({ error: `no route for ${method} ${path}` }, 404);
  };

  return { fetchFn, state };
}

describe("ApiClient", () => {
  it("maps service errors to ApiError with status and message", async () => {
    const client = new ApiClient("", async () =>
      new Response(JSON.stringify({ error: "no overlap with any training view" }),
                   { status: 422 }));
    const err = await client.pseudoPreview(POSE).catch(e => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(422);
    expect(err.message).toContain("no overlap");
  });

  it("handles non-JSON error bodies", async () => {
    const client = new ApiClient("", async () =>
      new Response("<html>gateway error</html>", { status: 502 }));
    const err = await client.state().catch(e => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(502);
    expect(err.message).toBe("HTTP 502");
  });

  it("sends poses in the service wire shape", async () => {
    let captured: unknown = null;
    const client = new ApiClient("", async (_url, init) => {
      captured = JSON.parse(String(init!.body));
      return new Response(JSON.stringify({ job_id: "j9" }), { status: 200 });
    });
    await client.submitFinetune([POSE], 5);
    // JSON canonicalizes -0 to 0, so compare through the same lens
    expect(captured).toEqual(JSON.parse(JSON.stringify(
      { poses: [POSE], iterations_per_view: 5 })));
  });
});

describe("viewer loop against the scripted service", () => {
  it("navigate, preview, enhance: job completes and agreement improves", async () => {
    const { fetchFn, state } = fakeService();
    const client = new ApiClient("http://svc", fetchFn);
    const phases: EnhancePhase[] = [];
    const flow = new EnhanceFlow(client, p => phases.push(p), { sleep: async () => {} });

    // navigate: draft render of the close-up pose
    const before = await client.render(POSE, "draft");
    expect(before.image).toBe("png-of-ckpt-before");

    // preview the pseudo-label mask for this pose
    const preview = await client.pseudoPreview(POSE);
    expect(preview.valid_fraction).toBeGreaterThan(0);
    expect(preview.mask).toBe("png-mask");

    // enhance: submit, poll to completion, read the agreement delta
    const outcome = await flow.run([POSE], 5);
    expect(outcome).not.toBeNull();
    expect(outcome!.job.status).toBe("done");
    expect(phases).toEqual(["submitting", "polling", "done"]);
    expect(flow.lastJobId).toBe("j1");

    // after-image agreement >= before
    expect(outcome!.deltas).toEqual([20.9 - 19.2]);
    expect(outcome!.meanDelta!).toBeGreaterThanOrEqual(0);

    // the post-job render sees the new checkpoint; the before image is kept
    const after = await client.render(POSE, "full");
    expect(after.image).toBe("png-of-ckpt-after");
    expect(before.image).toBe("png-of-ckpt-before");
    expect(state.renders).toEqual(["png-of-ckpt-before", "png-of-ckpt-after"]);
  });

  it("409 while a job is active surfaces as a busy state, not an error", async () => {
    const { fetchFn } = fakeService();
    const client = new ApiClient("http://svc", fetchFn);

    // occupy the service with a job held in "running"
    await client.submitFinetune([POSE], 5);
    await client.job("j1"); // one poll: queued -> running

    const phases: Array<[EnhancePhase, string | undefined]> = [];
    const flow = new EnhanceFlow(client, (p, d) => phases.push([p, d]),
                                 { sleep: async () => {} });
    const outcome = await flow.run([POSE], 5);
    expect(outcome).toBeNull();
    expect(phases[phases.length - 1][0]).toBe("busy");
    expect(phases[phases.length - 1][1]).toContain("j1");
    expect(flow.busy).toBe(false); // ready to try again once the job drains
  });

  it("a second local run while busy is refused without touching the service", async () => {
    const { fetchFn } = fakeService();
    const client = new ApiClient("http://svc", fetchFn);
    let release!: () => void;
    const gate = new Promise<void>(resolve => { release = resolve; });
    const flow = new EnhanceFlow(client, () => {}, { sleep: () => gate });

    const first = flow.run([POSE], 5);
    await Promise.resolve(); // let the submit land
    const second = await flow.run([POSE], 5);
    expect(second).toBeNull();
    release();
    const outcome = await first;
    expect(outcome!.job.status).toBe("done");
  });

  it("job failure reports the error and the old checkpoint keeps rendering", async () => {
    const { fetchFn, state } = fakeService({ failJob: true });
    const client = new ApiClient("http://svc", fetchFn);
    const phases: Array<[EnhancePhase, string | undefined]> = [];
    const flow = new EnhanceFlow(client, (p, d) => phases.push([p, d]),
                                 { sleep: async () => {} });

    const outcome = await flow.run([POSE], 5);
    expect(outcome!.job.status).toBe("failed");
    expect(outcome!.meanDelta).toBeNull();
    expect(phases[phases.length - 1]).toEqual(["failed", "boom"]);

    const render = await client.render(POSE, "draft");
    expect(render.image).toBe("png-of-ckpt-before");
    expect(state.checkpoint).toBe("ckpt-before");
  });

  it("pollJob reports progress ticks in order", async () => {
    const { fetchFn } = fakeService();
    const client = new ApiClient("http://svc", fetchFn);
    await client.submitFinetune([POSE], 5);
    const progress: number[] = [];
    const job = await pollJob(client, "j1", {
      sleep: async () => {},
      onTick: j => progress.push(j.progress),
    });
    expect(job.status).toBe("done");
    const sorted = [...progress].sort((a, b) => a - b);
    expect(progress).toEqual(sorted);
    expect(progress[progress.length - 1]).toBe(1);
  });
});
