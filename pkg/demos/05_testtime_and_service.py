# Per-view test-time adaptation, then the same machinery over HTTP.
#
# When the viewpoints that matter are known (a user parked the camera
# somewhere), a handful of fine-tune steps specialized to those poses is
# cheaper than the diverse pass and never touches unrelated views. Labels
# that cover too little of the frame are declined rather than trained on;
# the report says which poses were skipped and why. The HTTP service wraps
# render / label-preview / fine-tune for an interactive viewer; this
# script drives it with plain urllib. Run demos 02 and 04 first.

import json
import threading
import time
import urllib.request

from closeview import (
    RenderOptions,
    TrainConfig,
    default_intrinsics,
    far_plane,
    load_field,
    make_benchmark,
    psnr,
    render_image,
)
from closeview.service import ServiceApp, decode_png_b64, make_server
from closeview.training import finetune_testtime

# --- 1. adapt the fine-tuned field to two chosen close-up views ------------

scene, man = make_benchmark(7, n_train=12, n_test=5, n_indomain=3,
                            K=default_intrinsics(96, 54))
K = man.intrinsics
field = load_field("demos/out_diverse.cvf")
opts = RenderOptions(n_samples=32, t_far=far_plane(man),
                     background_color=tuple(float(c) for c in man.background))

chosen = man.indices("test", "closeup")[:2]
poses = [man.frames[i].pose for i in chosen]
cfg = TrainConfig(batch_size=512, render=opts, seed=0,
                  mode="finetune_testtime", testtime_iterations=5)
t0 = time.perf_counter()
adapted, report = finetune_testtime(field, man, poses, cfg)
print(f"test-time adaptation: {len(poses)} poses x "
      f"{cfg.testtime_iterations} steps in {time.perf_counter() - t0:.0f}s")
for row, i in zip(report.notes["poses"], chosen):
    gt = man.image(i)
    b = psnr(render_image(field, man.frames[i].pose, K, opts).rgb, gt)
    a = psnr(render_image(adapted, man.frames[i].pose, K, opts).rgb, gt)
    note = f"skipped: {row['skipped']}" if row["skipped"] else "adapted"
    print(f"  view {i}: {b:.2f} -> {a:.2f} dB ({a - b:+.2f})  "
          f"label covers {row['valid_fraction']:.1%}, {note}")
# a pose whose label covers too little is left alone on purpose: training
# on a handful of sketchy pixels can damage the view it meant to help

# --- 2. the same operations over HTTP ---------------------------------------

app = ServiceApp()
app.load(man, field, opts=opts)
server = make_server(app, port=0)  # port 0 picks a free one
threading.Thread(target=server.serve_forever, daemon=True).start()
root = f"http://127.0.0.1:{server.server_port}"
print(f"\nservice listening at {root}")


def call(method, path, body=None):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(root + path, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req) as r:
        return json.loads(r.read())


state = call("GET", "/api/state")
print("state:", state["scene_name"], state["resolution"],
      len(state["frames"]), "frames")

# poses travel as 3x4 camera-to-world row-major matrices
wire_pose = man.frames[chosen[0]].pose.matrix3x4().tolist()
draft = call("POST", "/api/render", {"pose": wire_pose, "quality": "draft"})
print(f"draft render: {draft['width']}x{draft['height']}, "
      f"opacity {draft['opacity_mean']:.2f}")

preview = call("POST", "/api/pseudo_preview", {"pose": wire_pose})
print(f"label preview: source view {preview['source_view']}, "
      f"valid fraction {preview['valid_fraction']:.1%}")

job = call("POST", "/api/finetune",
           {"poses": [wire_pose], "iterations_per_view": 3})
while True:
    status = call("GET", f"/api/job/{job['job_id']}")
    if status["status"] in ("done", "failed"):
        break
    time.sleep(0.5)
print(f"fine-tune job {job['job_id']}: {status['status']}")

# renders now come from the republished snapshot
full = call("POST", "/api/render", {"pose": wire_pose, "quality": "full"})
img = decode_png_b64(full["image"])
gt = man.image(chosen[0])
print(f"full render after job: {img.shape[1]}x{img.shape[0]}, "
      f"PSNR vs ground truth {psnr(img, gt):.2f} dB")

server.shutdown()
server.server_close()
print("server stopped")
