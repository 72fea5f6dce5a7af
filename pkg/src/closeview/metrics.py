"""Image quality metrics (PSNR, SSIM) and the evaluation harness.

SSIM variant, fixed so numbers are comparable across implementations:
computed on Rec.601 luma, 11x11 Gaussian window with sigma 1.5, K1=0.01,
K2=0.03, dynamic range 1.0, population (not sample) statistics, averaged
over the valid region (no padded border pixels enter the mean).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from closeview.field import RenderOptions, render_image

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])  # Rec.601
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def to_luma(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an (H, W, 3) image; 2D arrays pass through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA_WEIGHTS
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(data_range**2 / mse)


def _gaussian_kernel(radius: int, sigma: float) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _sepconv_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2D correlation, valid region only."""
    n = kernel.shape[0]
    h, w = img.shape
    out = np.zeros((h, w - n + 1))
    for k in range(n):
        out += kernel[k] * img[:, k : k + w - n + 1]
    out2 = np.zeros((h - n + 1, w - n + 1))
    for k in range(n):
        out2 += kernel[k] * out[k : k + h - n + 1]
    return out2


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local SSIM between two images (RGB inputs compare luma)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ya = to_luma(a)
    yb = to_luma(b)
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(f"image too small for an {SSIM_WINDOW}x{SSIM_WINDOW} window: {ya.shape}")

    kernel = _gaussian_kernel(SSIM_WINDOW // 2, SSIM_SIGMA)
    mu_a = _sepconv_valid(ya, kernel)
    mu_b = _sepconv_valid(yb, kernel)
    e_aa = _sepconv_valid(ya * ya, kernel)
    e_bb = _sepconv_valid(yb * yb, kernel)
    e_ab = _sepconv_valid(ya * yb, kernel)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(s.mean())


@dataclass
class EvalReport:
    """Per-view and aggregate quality numbers for one field/split pair."""

    view_ids: list
    psnr_values: list
    ssim_values: list
    config: dict = field(default_factory=dict)

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr_values)) if self.psnr_values else None

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim_values)) if self.ssim_values else None

    def to_dict(self) -> dict:
        def enc(v):
            return float(v) if v is not None and np.isfinite(v) else None

        return {
            "view_ids": list(self.view_ids),
            "psnr": [enc(v) for v in self.psnr_values],
            "ssim": [enc(v) for v in self.ssim_values],
            "mean_psnr": enc(self.mean_psnr),
            "mean_ssim": enc(self.mean_ssim),
            "config": self.config,
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def evaluate(field_, manifest, opts: RenderOptions, split: str = "test",
             kind: str | None = None, rng=None) -> EvalReport:
    """Render every frame of a split and score it against the stored image."""
    ids = manifest.indices(split, kind)
    psnrs, ssims = [], []
    for i in ids:
        out = render_image(field_, manifest.frames[i].pose, manifest.intrinsics, opts, rng)
        truth = manifest.image(i)
        psnrs.append(psnr(out.rgb, truth))
        ssims.append(ssim(out.rgb, truth))
    return EvalReport(
        view_ids=ids,
        psnr_values=psnrs,
        ssim_values=ssims,
        config={
            "split": split,
            "kind": kind,
            "n_samples": opts.n_samples,
            "background_color": list(opts.background_color),
        },
    )
