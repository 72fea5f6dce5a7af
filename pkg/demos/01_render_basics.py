# Rendering basics: the analytic oracle, a voxel field, and one ray by hand.
#
# The library has two renderers. `oracle_render` ray-traces an analytic
# scene exactly (depth included), so it can serve as ground truth. The
# voxel field renders by alpha compositing density samples along each ray;
# this script walks one ray through that computation by hand and checks it
# against the library.

import numpy as np

from closeview import (
    RenderOptions,
    VoxelRadianceField,
    benchmark_scene,
    composite,
    default_intrinsics,
    look_at_pose,
    oracle_render,
    render_image,
    render_ray,
)
from closeview.geometry import Ray

# --- 1. the analytic scene oracle ---------------------------------------

scene = benchmark_scene(3)
K = default_intrinsics(96, 54)
pose = look_at_pose((3.0, 0.0, 1.2), (0.0, 0.0, 0.0))
truth = oracle_render(scene, pose, K)
print("oracle render:", truth.rgb.shape, "hit fraction", round(truth.hit_mask.mean(), 3))
print("depth range on hits:", round(np.nanmin(truth.depth), 2), "to",
      round(np.nanmax(truth.depth), 2))

# --- 2. one ray through the compositor, by hand -------------------------

# two samples on a ray: a half-transparent slab then an opaque one.
# alpha_i = 1 - exp(-sigma_i * delta_i); each sample contributes its color
# weighted by alpha_i times the transmittance left after earlier samples.
# composite is batched (rays x samples), so the single ray is row 0.
sigmas = np.array([[np.log(2.0) / 0.5, 20.0]])
colors = np.array([[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]])
ts = np.array([[1.0, 1.5]])
out = composite(sigmas, colors, ts, t_end=[2.5], background=(0.0, 0.0, 0.0))

a1 = 1.0 - np.exp(-sigmas[0, 0] * 0.5)        # first slab absorbs half
t2 = 1.0 - a1                                  # what survives to slab two
w2 = t2 * (1.0 - np.exp(-sigmas[0, 1] * 1.0))
print("\nhand weights:", [round(a1, 6), round(w2, 6)],
      "vs composite:", np.round(out.weights[0], 6).tolist())
print("hand color:", np.round(a1 * colors[0, 0] + w2 * colors[0, 1], 6).tolist(),
      "vs composite:", np.round(out.rgb[0], 6).tolist())
print("weights + leftover transmittance:",
      float(out.weights[0].sum() + out.trans[0, -1]), "(always 1)")

# --- 3. the same invariant on a real field ------------------------------

rng = np.random.default_rng(0)
bbox = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
field = VoxelRadianceField.zeros((16, 16, 16), bbox, density_init=0.0)
field.density_params[:] = rng.normal(0.0, 1.0, field.density_params.shape)
field.color_params[:] = rng.normal(0.0, 0.3, field.color_params.shape)

ray = Ray(np.array([0.0, -2.5, 0.0]), np.array([0.0, 1.0, 0.0]), 0.1, 5.0)
res = render_ray(field, ray, RenderOptions(n_samples=64))
print("\nrandom field ray: rgb", np.round(res.color, 4).tolist(),
      "opacity", round(float(res.weights.sum()), 4))
print("invariant error:",
      float(abs(res.weights.sum() + res.transmittance[-1] - 1.0)))

# --- 4. a full image from an untrained field ----------------------------

# density params are pre-softplus, so a fresh grid is a faint uniform fog
# (sigma = ln 2 everywhere inside the box) over the background; training
# (demo 02) is what carves surfaces out of it.
fresh = VoxelRadianceField.zeros((16, 16, 16), scene.content_bbox())
img = render_image(fresh, pose, K, RenderOptions(n_samples=32,
                                                 background_color=scene.background))
gray = img.rgb.mean(axis=-1)
print("\nfresh field renders as fog: pixel value spread",
      round(float(gray.max() - gray.min()), 3),
      "mean opacity", round(float(img.opacity.mean()), 3))
