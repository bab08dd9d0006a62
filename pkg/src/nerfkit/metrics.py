"""Evaluation metrics: PSNR, windowed SSIM, scale-aligned depth RMSE and
plane flatness.

Rendered depth lives on an arbitrary scale relative to metric ground
truth, so depth metrics first align the prediction by the ratio of
medians. Plane flatness is the mean absolute distance of back-projected
plane-region points to their least-squares plane; it scales linearly
with depth, which is why the alignment must happen first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .cameras import back_project
from .segmentation import PlaneRegion

logger = logging.getLogger(__name__)

__all__ = [
    "EvalReport",
    "DegenerateDepth",
    "psnr",
    "ssim_image",
    "median_scale_align",
    "depth_rmse",
    "plane_mean_deviation",
]

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class DegenerateDepth(ValueError):
    """Median of the predicted depth is zero; no scale can align it."""


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def _gaussian_kernel(radius: int = 5, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_image(pred: np.ndarray, gt: np.ndarray, sigma: float = 1.5) -> float:
    """Structural similarity with an 11x11 Gaussian window.

    Windowed population statistics, computed over fully-valid window
    positions only, per channel, then averaged.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    kernel = _gaussian_kernel(sigma=sigma)
    if pred.shape[0] < kernel.shape[0] or pred.shape[1] < kernel.shape[1]:
        raise ValueError("image smaller than the SSIM window")

    def filt(img):
        return fftconvolve(img, kernel, mode="valid")

    vals = []
    for c in range(pred.shape[2]):
        x, y = pred[..., c], gt[..., c]
        mu_x, mu_y = filt(x), filt(y)
        var_x = filt(x * x) - mu_x**2
        var_y = filt(y * y) - mu_y**2
        cov = filt(x * y) - mu_x * mu_y
        s = ((2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)) / (
            (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        )
        vals.append(s.mean())
    return float(np.mean(vals))


def median_scale_align(
    pred_depth: np.ndarray, gt_depth: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Scale the prediction so the masked medians coincide.

    Even pixel counts use the numpy convention (mean of the two middle
    values). Returns ``(scale, scaled prediction)``.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty validity mask")
    med_pred = float(np.median(pred_depth[mask]))
    if med_pred == 0.0:
        raise DegenerateDepth("median predicted depth is zero")
    scale = float(np.median(gt_depth[mask])) / med_pred
    return scale, scale * np.asarray(pred_depth)


def depth_rmse(aligned_pred: np.ndarray, gt_depth: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty validity mask")
    diff = np.asarray(aligned_pred)[mask] - np.asarray(gt_depth)[mask]
    return float(np.sqrt(np.mean(diff**2)))


def plane_mean_deviation(
    aligned_depth: np.ndarray,
    regions: list[PlaneRegion],
    K: np.ndarray,
    valid_mask: np.ndarray | None = None,
) -> float:
    """Mean point-to-plane distance of back-projected plane regions.

    Each region's pixels are lifted with the aligned depth, a plane is fit
    by centroid + smallest principal axis, and the mean absolute distance
    is averaged over regions. Rank-deficient regions are skipped.
    """
    deviations = []
    for region in regions:
        us, vs = region.pixels[:, 0], region.pixels[:, 1]
        if valid_mask is not None:
            keep = valid_mask[vs, us]
            us, vs = us[keep], vs[keep]
        if len(us) < 3:
            continue
        depths = aligned_depth[vs, us]
        pos = depths > 0
        us, vs, depths = us[pos], vs[pos], depths[pos]
        if len(us) < 3:
            continue
        pts = back_project(np.stack([us, vs], axis=1).astype(np.float64), depths, K)
        centered = pts - pts.mean(axis=0)
        scatter = centered.T @ centered
        eigvals, eigvecs = np.linalg.eigh(scatter)
        if eigvals[1] < 1e-12 * max(eigvals[2], 1e-300):
            logger.warning("plane region %d is collinear; skipped", region.region_id)
            continue
        normal = eigvecs[:, 0]
        deviations.append(float(np.mean(np.abs(centered @ normal))))
    if not deviations:
        raise ValueError("no usable plane regions")
    return float(np.mean(deviations))


@dataclass
class EvalReport:
    """Per-view and mean metrics for a set of evaluation views."""

    view_ids: list[int]
    psnr: list[float]
    ssim: list[float]
    depth_rmse: list[float]
    plane_dev: list[float]
    scales: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_depth_rmse(self) -> float:
        return float(np.mean(self.depth_rmse))

    @property
    def mean_plane_dev(self) -> float:
        return float(np.mean([d for d in self.plane_dev if np.isfinite(d)]))

    def rows(self) -> list[dict]:
        out = []
        for i, vid in enumerate(self.view_ids):
            out.append(
                {
                    "view": vid,
                    "psnr": self.psnr[i],
                    "ssim": self.ssim[i],
                    "depth_rmse": self.depth_rmse[i],
                    "plane_dev": self.plane_dev[i],
                    "scale": self.scales[i],
                }
            )
        out.append(
            {
                "view": "mean",
                "psnr": self.mean_psnr,
                "ssim": self.mean_ssim,
                "depth_rmse": self.mean_depth_rmse,
                "plane_dev": self.mean_plane_dev,
                "scale": float(np.mean(self.scales)),
            }
        )
        return out
