/**
 * DOM wiring for the viewer. All math and flow logic lives in camera.ts,
 * state.ts, api.ts, and controls.ts; this file only connects events to those
 * pieces and paints responses onto the canvas.
 *
 * Input handlers never await the network: they update local state and hand
 * the render request to a rate limiter, so the main loop stays free.
 */

import {
  Camera,
  cameraToWire,
  dolly,
  freeLook,
  liftPixel,
  lookAt,
  norm,
  orbit,
  sub,
  Vec3,
  wireToCamera,
} from "./camera.js";
import { ApiClient, PreviewResponse, RenderResponse, SceneState } from "./api.js";
import {
  EnhanceFlow,
  isAbortError,
  SingleFlight,
  TrailingRateLimiter,
} from "./controls.js";
import {
  initialState,
  OverlayMode,
  stateFromHash,
  stateToHash,
  ViewerState,
} from "./state.js";

const DRAFT_INTERVAL_MS = 100; // at most 10 draft requests per second
const FULL_UPGRADE_MS = 700; // idle time before a full-quality re-render

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function pngUrl(b64: string): string {
  return `data:image/png;base64,${b64}`;
}

function loadImage(b64: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error("bad image payload"));
    img.src = pngUrl(b64);
  });
}

class ViewerApp {
  private client = new ApiClient(
    new URLSearchParams(location.search).get("api") ?? "http://127.0.0.1:8172",
  );
  private scene!: SceneState;
  private state!: ViewerState;
  private pivot: Vec3 = [0, 0, 0];
  private lastRender: RenderResponse | null = null;
  private lastPreview: PreviewResponse | null = null;

  private canvas = el<HTMLCanvasElement>("view");
  private ctx = this.canvas.getContext("2d")!;
  private status = el<HTMLElement>("status");
  private toast = el<HTMLElement>("toast");
  private readout = el<HTMLElement>("readout");
  private frameSelect = el<HTMLSelectElement>("frames");
  private enhanceBtn = el<HTMLButtonElement>("enhance");
  private compare = el<HTMLInputElement>("compare");
  private compareRow = el<HTMLElement>("compare-row");

  private renderFlight = new SingleFlight();
  private previewFlight = new SingleFlight();
  private draftLimiter = new TrailingRateLimiter(DRAFT_INTERVAL_MS);
  private fullTimer: ReturnType<typeof setTimeout> | null = null;
  private enhance = new EnhanceFlow(
    this.client,
    (phase, detail) => this.onEnhancePhase(phase, detail),
    { onTick: job => this.setStatus(`job ${job.id}: ${job.status} ${(job.progress * 100).toFixed(0)}%`) },
  );
  private beforeImage: HTMLImageElement | null = null;
  private afterImage: HTMLImageElement | null = null;

  async boot(): Promise<void> {
    this.scene = await this.client.state();
    const fromHash = stateFromHash(location.hash);
    this.state = fromHash ?? initialState(this.defaultCamera());
    this.populateFrames();
    this.bindInputs();
    this.setStatus(`scene "${this.scene.scene_name}", checkpoint ${this.scene.checkpoint_id}`);
    this.requestDraft();
    this.scheduleFullUpgrade();
  }

  private defaultCamera(): Camera {
    const train = this.scene.frames.find(f => f.split === "train");
    return train ? wireToCamera(train.pose) : lookAt([3, 0, 1.2], [0, 0, 0]);
  }

  private populateFrames(): void {
    for (const f of this.scene.frames) {
      const opt = document.createElement("option");
      opt.value = String(f.index);
      opt.textContent = `${f.index}: ${f.split}/${f.kind}`;
      this.frameSelect.appendChild(opt);
    }
    this.frameSelect.addEventListener("change", () => {
      const f = this.scene.frames[Number(this.frameSelect.value)];
      if (!f) return;
      this.state.camera = wireToCamera(f.pose);
      this.afterMotion();
    });
  }

  // -- rendering ------------------------------------------------------------

  private requestDraft(): void {
    this.draftLimiter.request(() => this.fireRender("draft"));
  }

  private scheduleFullUpgrade(): void {
    if (this.fullTimer !== null) clearTimeout(this.fullTimer);
    this.fullTimer = setTimeout(() => this.fireRender("full"), FULL_UPGRADE_MS);
  }

  private fireRender(quality: "draft" | "full"): void {
    const wire = cameraToWire(this.state.camera);
    this.renderFlight
      .run(signal => this.client.render(wire, quality, signal))
      .then(async resp => {
        this.lastRender = resp;
        this.afterImage = null; // stale once the camera moved
        await this.paint(await loadImage(resp.image));
        this.updateReadout();
      })
      .catch(e => this.surface(e));
    if (this.state.overlay !== "none") this.firePreview();
  }

  private firePreview(): void {
    const wire = cameraToWire(this.state.camera);
    this.previewFlight
      .run(signal => this.client.pseudoPreview(wire, signal))
      .then(async resp => {
        this.lastPreview = resp;
        if (this.lastRender) await this.paint(await loadImage(this.lastRender.image));
        this.updateReadout();
      })
      .catch(e => this.surface(e));
  }

  private async paint(base: HTMLImageElement): Promise<void> {
    const { width, height } = this.canvas;
    this.ctx.clearRect(0, 0, width, height);
    this.ctx.imageSmoothingEnabled = false;
    this.ctx.drawImage(base, 0, 0, width, height);

    const overlay = this.state.overlay;
    if (overlay !== "none" && this.lastPreview) {
      const layer = overlay === "mask" ? this.lastPreview.mask : this.lastPreview.aggregate;
      const img = await loadImage(layer);
      this.ctx.globalAlpha = 0.5;
      this.ctx.drawImage(img, 0, 0, width, height);
      this.ctx.globalAlpha = 1.0;
    }

    if (this.beforeImage && this.afterImage) {
      // comparison wipe: before on the left of the slider, after on the right
      const split = Number(this.compare.value) / 100 * width;
      this.ctx.drawImage(this.afterImage, 0, 0, width, height);
      this.ctx.save();
      this.ctx.beginPath();
      this.ctx.rect(0, 0, split, height);
      this.ctx.clip();
      this.ctx.drawImage(this.beforeImage, 0, 0, width, height);
      this.ctx.restore();
      this.ctx.fillStyle = "#fff";
      this.ctx.fillRect(split - 1, 0, 2, height);
    }
  }

  private async repaint(): Promise<void> {
    if (this.lastRender) await this.paint(await loadImage(this.lastRender.image));
  }

  private updateReadout(): void {
    const parts: string[] = [];
    const r = this.lastRender;
    if (r) {
      const d = r.depth_stats;
      parts.push(`${r.quality} ${r.width}x${r.height}`);
      parts.push(`opacity ${r.opacity_mean.toFixed(3)}`);
      if (d.mean !== null) parts.push(`depth ~${d.mean.toFixed(2)}`);
    }
    const p = this.lastPreview;
    if (p && this.state.overlay !== "none") {
      parts.push(`label valid ${(p.valid_fraction * 100).toFixed(1)}% (src view ${p.source_view})`);
    }
    parts.push(`pivot dist ${norm(sub(this.state.camera.position, this.pivot)).toFixed(3)}`);
    this.readout.textContent = parts.join(" | ");
  }

  // -- input ----------------------------------------------------------------

  private bindInputs(): void {
    let dragging = false;
    let freelooking = false;
    let lastX = 0;
    let lastY = 0;

    this.canvas.addEventListener("pointerdown", e => {
      dragging = true;
      freelooking = e.shiftKey;
      lastX = e.clientX;
      lastY = e.clientY;
      this.canvas.setPointerCapture(e.pointerId);
    });
    this.canvas.addEventListener("pointerup", () => {
      dragging = false;
      this.afterMotion();
    });
    this.canvas.addEventListener("pointermove", e => {
      if (!dragging) return;
      const dx = (e.clientX - lastX) * 0.008;
      const dy = (e.clientY - lastY) * 0.008;
      lastX = e.clientX;
      lastY = e.clientY;
      this.state.camera = freelooking
        ? freeLook(this.state.camera, -dx, -dy)
        : orbit(this.state.camera, this.pivot, -dx, dy);
      this.onMotion();
    });
    this.canvas.addEventListener("wheel", e => {
      e.preventDefault();
      // wheel up dollies toward the pivot; factor per notch keeps λ literal
      const factor = Math.exp(-e.deltaY * 0.001);
      this.state.camera = dolly(this.state.camera, this.pivot, factor);
      this.onMotion();
      this.afterMotionSoon();
    }, { passive: false });
    this.canvas.addEventListener("dblclick", e => {
      const rect = this.canvas.getBoundingClientRect();
      const K = this.scene.intrinsics;
      const u = (e.clientX - rect.left) / rect.width * K.width;
      const v = (e.clientY - rect.top) / rect.height * K.height;
      const depth = this.lastRender?.depth_stats.mean
        ?? norm(sub(this.pivot, this.state.camera.position));
      this.pivot = liftPixel(this.state.camera, K, u, v, depth);
      this.setStatus(`pivot set to [${this.pivot.map(c => c.toFixed(2)).join(", ")}] (ray depth ${depth.toFixed(2)})`);
      this.updateReadout();
    });

    document.addEventListener("keydown", e => {
      if (e.key === "f") { this.state.mode = "full"; this.fireRender("full"); }
      if (e.key === "o") this.cycleOverlay();
    });

    for (const mode of ["none", "mask", "aggregate"] as OverlayMode[]) {
      el<HTMLButtonElement>(`overlay-${mode}`).addEventListener("click", () => {
        this.setOverlay(mode);
      });
    }
    this.enhanceBtn.addEventListener("click", () => void this.runEnhance());
    this.compare.addEventListener("input", () => void this.repaint());
    el<HTMLButtonElement>("clear-compare").addEventListener("click", () => {
      this.beforeImage = null;
      this.afterImage = null;
      this.compareRow.hidden = true;
      void this.repaint();
    });

    window.addEventListener("hashchange", () => {
      const s = stateFromHash(location.hash);
      if (!s) return;
      this.state.camera = s.camera;
      this.state.mode = s.mode;
      this.setOverlay(s.overlay);
      this.requestDraft();
      this.scheduleFullUpgrade();
    });
  }

  private onMotion(): void {
    this.requestDraft();
    this.scheduleFullUpgrade();
  }

  /** Motion settled: publish the pose to the hash (shareable viewpoint). */
  private afterMotion(): void {
    this.requestDraft();
    this.scheduleFullUpgrade();
    history.replaceState(null, "", stateToHash(this.state));
  }

  private settleTimer: ReturnType<typeof setTimeout> | null = null;

  private afterMotionSoon(): void {
    if (this.settleTimer !== null) clearTimeout(this.settleTimer);
    this.settleTimer = setTimeout(() => this.afterMotion(), 300);
  }

  private cycleOverlay(): void {
    const order: OverlayMode[] = ["none", "mask", "aggregate"];
    this.setOverlay(order[(order.indexOf(this.state.overlay) + 1) % order.length]);
  }

  private setOverlay(mode: OverlayMode): void {
    this.state.overlay = mode;
    for (const m of ["none", "mask", "aggregate"]) {
      el(`overlay-${m}`).classList.toggle("active", m === mode);
    }
    if (mode !== "none") this.firePreview();
    else void this.repaint();
    history.replaceState(null, "", stateToHash(this.state));
  }

  // -- enhance --------------------------------------------------------------

  private async runEnhance(): Promise<void> {
    if (this.enhance.busy) return;
    // keep the pre-job render for the comparison slider
    try {
      const wire = cameraToWire(this.state.camera);
      const before = await this.renderFlight.run(signal =>
        this.client.render(wire, "full", signal));
      this.beforeImage = await loadImage(before.image);
      this.state.before = before.image;

      const outcome = await this.enhance.run([wire], 5);
      if (!outcome || outcome.job.status !== "done") return;
      this.state.lastJobId = outcome.job.id;

      const after = await this.renderFlight.run(signal =>
        this.client.render(wire, "full", signal));
      this.afterImage = await loadImage(after.image);
      this.state.after = after.image;
      this.lastRender = after;
      this.compareRow.hidden = false;
      await this.repaint();

      const delta = outcome.meanDelta;
      this.setStatus(delta === null
        ? "enhance done (no masked pixels to score agreement on)"
        : `enhance done: label agreement ${delta >= 0 ? "+" : ""}${delta.toFixed(2)} dB`);
    } catch (e) {
      this.surface(e);
    }
  }

  private onEnhancePhase(phase: string, detail?: string): void {
    this.enhanceBtn.disabled = phase === "submitting" || phase === "polling" || phase === "busy";
    if (phase === "busy") this.showToast(detail ?? "a job is already running");
    if (phase === "failed") this.showToast(`enhance failed: ${detail ?? "unknown error"}`);
    if (phase === "submitting") this.setStatus("submitting fine-tune job");
    if (phase === "done" || phase === "failed" || phase === "idle") {
      this.enhanceBtn.disabled = false;
    }
  }

  // -- feedback -------------------------------------------------------------

  private setStatus(text: string): void {
    this.status.textContent = text;
  }

  private toastTimer: ReturnType<typeof setTimeout> | null = null;

  private showToast(text: string): void {
    this.toast.textContent = text;
    this.toast.classList.add("show");
    if (this.toastTimer !== null) clearTimeout(this.toastTimer);
    this.toastTimer = setTimeout(() => this.toast.classList.remove("show"), 4000);
  }

  private surface(e: unknown): void {
    if (isAbortError(e)) return; // superseded request, not an error
    this.showToast(e instanceof Error ? e.message : String(e));
  }
}

new ViewerApp().boot().catch(e => {
  const status = document.getElementById("status");
  if (status) status.textContent =
    `could not reach the rendering service: ${e instanceof Error ? e.message : e}`;
});
