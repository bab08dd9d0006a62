"""Training losses: color, patch photometric, planar and sparse-depth terms.

The structural terms all supervise rendered depth:

* photometric: a 3x3 support window around each sampled pixel is warped
  into nearby source views with the rendered center depth shared across
  the window; the warped source samples are compared against the target
  window with an SSIM + L1 mix. Gradients reach the depth through the
  warp coordinates; image samples are data.
* planar: 4 pixels per large superpixel are lifted to 3D with rendered
  depths; their scalar triple product vanishes iff they are coplanar.
* sparse: SfM keypoint depths supervise the rendered depth at keypoint
  pixels, weighted by reprojection confidence, active only during the
  warm-up phase of training.

All loss functions run on tape Values (differentiable) and on plain
numpy arrays (oracles in the tests).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .cameras import Camera, bilinear_sample, support_domain

logger = logging.getLogger(__name__)

__all__ = [
    "LossWeights",
    "AblationFlags",
    "LossBreakdown",
    "PatchBatch",
    "make_patch_batch",
    "color_loss",
    "ssim_patch",
    "ssim_patches",
    "photometric_terms",
    "photometric_loss",
    "quad_points_from_depths",
    "planar_consistency_loss",
    "sparse_depth_loss",
    "lambda_sparse_at",
    "total_loss",
]

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    lambda_ph: float = 0.025
    lambda_pc: float = 0.025
    lambda_sparse: float = 0.05
    alpha: float = 0.85  # SSIM share of the photometric mix
    warmup_fraction: float = 0.5

    def __post_init__(self):
        if min(self.lambda_ph, self.lambda_pc, self.lambda_sparse) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0 <= self.warmup_fraction <= 1:
            raise ValueError("warmup_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class AblationFlags:
    no_dense_sampling: bool = False
    no_patch: bool = False
    no_warmup: bool = False
    no_sparse: bool = False
    no_patchmatch: bool = False
    no_plane_reg: bool = False

    @classmethod
    def from_names(cls, names) -> "AblationFlags":
        valid = set(cls.__dataclass_fields__)
        kwargs = {}
        for name in names:
            name = name.strip()
            if not name:
                continue
            if name not in valid:
                raise ValueError(f"unknown ablation flag '{name}' (choose from {sorted(valid)})")
            kwargs[name] = True
        return cls(**kwargs)


@dataclass
class LossBreakdown:
    """Reduced (per-batch mean) loss components and their combination."""

    color: float
    ph: float
    pc: float
    sparse: float
    total: float
    lambda_sparse: float
    n_rays: int = 0
    n_patches: int = 0
    n_quads: int = 0
    n_keypoints: int = 0


def color_loss(rendered, gt):
    """Sum of squared L2 color residuals over the batch."""
    diff = rendered - np.asarray(gt, dtype=np.float64)
    return ad.vsum(diff * diff)


def _patch_stats(p, q):
    mu_p = ad.vmean(p, axis=1, keepdims=True)
    mu_q = ad.vmean(q, axis=1, keepdims=True)
    var_p = ad.vmean(p * p, axis=1, keepdims=True) - mu_p * mu_p
    var_q = ad.vmean(q * q, axis=1, keepdims=True) - mu_q * mu_q
    cov = ad.vmean(p * q, axis=1, keepdims=True) - mu_p * mu_q
    return mu_p, mu_q, var_p, var_q, cov


def ssim_patches(p, q):
    """Per-patch SSIM over (n, k, 3) sample stacks; returns (n,).

    Population statistics over the k window samples, unit dynamic range
    constants, averaged across channels.
    """
    mu_p, mu_q, var_p, var_q, cov = _patch_stats(p, q)
    num = (2.0 * mu_p * mu_q + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_p * mu_p + mu_q * mu_q + SSIM_C1) * (var_p + var_q + SSIM_C2)
    per_channel = num / den  # (n, 1, 3)
    return ad.reshape(ad.vmean(per_channel, axis=2), (-1,))


def ssim_patch(p, q):
    """SSIM between two 9-sample patches, each (9, 3)."""
    out = ssim_patches(
        ad.reshape(p, (1,) + tuple(np.shape(p))), ad.reshape(q, (1,) + tuple(np.shape(q)))
    )
    return out[0] if isinstance(out, Value) else float(out[0])


@dataclass
class PatchBatch:
    """Support windows of a pixel batch in the target view."""

    centers: np.ndarray  # (P, 2)
    coords: np.ndarray  # (P, K, 2), K = 9 (or 1 in point-based mode)
    target_values: np.ndarray  # (P, K, 3)
    static_valid: np.ndarray  # (P,) all support coords inside the target image

    @property
    def n(self) -> int:
        return len(self.centers)


def make_patch_batch(
    pixels: np.ndarray, spacing: int, target_image: np.ndarray, point_based: bool = False
) -> PatchBatch:
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if point_based:
        coords = pixels[:, None, :].copy()
    else:
        steps = (-spacing, 0, spacing)
        grid = np.array([(du, dv) for dv in steps for du in steps], dtype=np.float64)
        coords = pixels[:, None, :] + grid[None, :, :]
    flat = coords.reshape(-1, 2)
    values, valid = bilinear_sample(target_image, flat)
    k = coords.shape[1]
    return PatchBatch(
        centers=pixels,
        coords=coords,
        target_values=values.reshape(len(pixels), k, 3),
        static_valid=valid.reshape(len(pixels), k).all(axis=1),
    )


def _warp_coords_diff(coords: np.ndarray, z_depth, cam_t: Camera, cam_s: Camera):
    """Differentiable warp of support coords sharing one depth per patch.

    ``z_depth`` is a (P,) Value (or array) of camera-frame z at the patch
    centers. Returns ``(u, v, in_front)`` with u, v shaped (P, K) and a
    boolean mask of samples that land in front of the source camera.
    Lanes behind the camera are clamped to harmless values; callers must
    mask them out.
    """
    p, k = coords.shape[:2]
    ones = np.ones(coords.shape[:2] + (1,))
    hom = np.concatenate(
        [
            (coords[..., :1] - cam_t.cx) / cam_t.fx,
            (coords[..., 1:] - cam_t.cy) / cam_t.fy,
            ones,
        ],
        axis=-1,
    )  # (P, K, 3) rays through the target pixels at unit z
    rel = cam_s.M @ cam_t.inverse_M()
    a = hom @ rel[:3, :3].T  # (P, K, 3) constants
    t = rel[:3, 3]
    d = ad.reshape(z_depth, (p, 1)) if isinstance(z_depth, Value) else np.reshape(z_depth, (p, 1))
    x = a[..., 0] * d + t[0]
    y = a[..., 1] * d + t[1]
    z = a[..., 2] * d + t[2]
    z_data = z.data if isinstance(z, Value) else z
    in_front = z_data > 1e-6
    front = in_front.astype(np.float64)
    z_safe = z * front + (1.0 - front)  # 1.0 on masked lanes
    u = cam_s.fx * (x / z_safe) + cam_s.cx
    v = cam_s.fy * (y / z_safe) + cam_s.cy
    return u, v, in_front


def _bilinear_diff(image: np.ndarray, u, v):
    """Bilinear sampling differentiable in the coordinates.

    The four neighbor colors are gathered as constants; only the blend
    weights carry gradient. Returns ``(values (P,K,3), valid (P,K))``.
    """
    h, w = image.shape[:2]
    u_data = u.data if isinstance(u, Value) else u
    v_data = v.data if isinstance(v, Value) else v
    valid = (u_data >= 0) & (u_data <= w - 1) & (v_data >= 0) & (v_data <= h - 1)
    u0 = np.floor(np.clip(u_data, 0, w - 1)).astype(np.int64)
    v0 = np.floor(np.clip(v_data, 0, h - 1)).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    if isinstance(fu, Value):
        fu = ad.reshape(fu, fu.shape + (1,))
        fv = ad.reshape(fv, fv.shape + (1,))
    else:
        fu, fv = fu[..., None], fv[..., None]
    c00, c10 = image[v0, u0], image[v0, u1]
    c01, c11 = image[v1, u0], image[v1, u1]
    vals = (
        c00 * ((1.0 - fu) * (1.0 - fv))
        + c10 * (fu * (1.0 - fv))
        + c01 * ((1.0 - fu) * fv)
        + c11 * (fu * fv)
    )
    return vals, valid


def photometric_terms(
    patches: PatchBatch,
    z_depth,
    cam_t: Camera,
    sources: list[tuple[Camera, np.ndarray]],
    alpha: float = 0.85,
    point_based: bool = False,
):
    """Per-batch photometric sum and valid-patch count.

    Each patch is warped into every source view; per valid (patch, source)
    the term is ``alpha * (1 - SSIM)/2 + (1 - alpha) * mean|I_t - I_s|``,
    averaged over that patch's valid sources. Returns ``(sum, count)``
    where ``sum`` adds the per-patch averages of patches with at least one
    valid source. In point-based mode (single-sample window) the SSIM term
    is dropped and the pure L1 distance is used.
    """
    p = patches.n
    if p == 0 or not sources:
        return 0.0, 0
    term_sum = None
    counts = np.zeros(p)
    for cam_s, img_s in sources:
        u, v, in_front = _warp_coords_diff(patches.coords, z_depth, cam_t, cam_s)
        warped, in_img = _bilinear_diff(img_s, u, v)
        valid = patches.static_valid & in_front.all(axis=1) & in_img.all(axis=1)
        diff = ad.absolute(warped - patches.target_values)
        l1 = ad.vmean(ad.vmean(diff, axis=2), axis=1)
        if point_based:
            term = l1
        else:
            ssim = ssim_patches(patches.target_values, warped)
            term = alpha * ((1.0 - ssim) * 0.5) + (1.0 - alpha) * l1
        mask = valid.astype(np.float64)
        masked = term * mask
        term_sum = masked if term_sum is None else term_sum + masked
        counts += mask
    has_any = counts > 0
    denom = np.maximum(counts, 1.0)
    per_patch = term_sum * (has_any.astype(np.float64) / denom)
    return ad.vsum(per_patch), int(has_any.sum())


def photometric_loss(
    patches: PatchBatch,
    z_depth,
    cam_t: Camera,
    sources: list[tuple[Camera, np.ndarray]],
    alpha: float = 0.85,
    point_based: bool = False,
):
    """Mean photometric term over valid patches; 0 when none are valid."""
    total, count = photometric_terms(patches, z_depth, cam_t, sources, alpha, point_based)
    if count == 0:
        logger.warning("photometric loss: no valid patches in this batch")
        return 0.0, 0
    return total * (1.0 / count), count


def quad_points_from_depths(pixel_quads: np.ndarray, z_depths, K: np.ndarray):
    """Lift (Q, 4) plane pixels to camera-frame points with rendered depths."""
    quads = np.asarray(pixel_quads, dtype=np.float64)
    ones = np.ones(quads.shape[:2] + (1,))
    dirs = np.concatenate(
        [(quads[..., :1] - K[0, 2]) / K[0, 0], (quads[..., 1:] - K[1, 2]) / K[1, 1], ones],
        axis=-1,
    )  # (Q, 4, 3)
    if isinstance(z_depths, Value):
        d = ad.reshape(z_depths, z_depths.shape + (1,))
    else:
        d = np.asarray(z_depths)[..., None]
    return dirs * d


def planar_consistency_loss(points):
    """Mean |(B-A) x (C-A) . (D-A)| over quads of back-projected points."""
    shape = points.shape if isinstance(points, Value) else np.shape(points)
    if len(shape) != 3 or shape[1] != 4 or shape[2] != 3 or shape[0] == 0:
        raise ValueError("expected (n_quads, 4, 3) points with n_quads >= 1")
    a, b, c, d = (points[:, i, :] for i in range(4))
    ab, ac, ad_ = b - a, c - a, d - a

    def col(m, j):
        return m[:, j]

    cx = col(ab, 1) * col(ac, 2) - col(ab, 2) * col(ac, 1)
    cy = col(ab, 2) * col(ac, 0) - col(ab, 0) * col(ac, 2)
    cz = col(ab, 0) * col(ac, 1) - col(ab, 1) * col(ac, 0)
    triple = cx * col(ad_, 0) + cy * col(ad_, 1) + cz * col(ad_, 2)
    return ad.vmean(ad.absolute(triple))


def sparse_depth_loss(pred_z, target_z, weights):
    """Sum of confidence-weighted squared depth residuals at keypoints."""
    w = np.asarray(weights, dtype=np.float64)
    diff = pred_z - np.asarray(target_z, dtype=np.float64)
    return ad.vsum(w * (diff * diff))


def lambda_sparse_at(iteration: int, total_iters: int, weights: LossWeights, warmup: bool = True) -> float:
    """Warm-up schedule: full weight for the first half, zero afterwards.

    The boundary is half-open: iteration ``total_iters * warmup_fraction``
    is the first one without sparse supervision. With warm-up disabled the
    weight is constant.
    """
    if not 0 <= iteration < total_iters:
        raise ValueError("iteration out of range")
    if not warmup:
        return weights.lambda_sparse
    return weights.lambda_sparse if iteration < weights.warmup_fraction * total_iters else 0.0


def total_loss(
    color,
    ph,
    pc,
    sparse,
    iteration: int,
    total_iters: int,
    weights: LossWeights,
    flags: AblationFlags = AblationFlags(),
    counts: tuple[int, int, int, int] = (0, 0, 0, 0),
):
    """Combine reduced components; returns ``(total, LossBreakdown)``.

    Inputs are the already-reduced per-batch means. Ablation flags zero
    the corresponding weights; zeroed terms are skipped entirely so the
    degenerate combination equals the color term exactly.
    """
    lam_ph = 0.0 if flags.no_patchmatch else weights.lambda_ph
    lam_pc = 0.0 if flags.no_plane_reg else weights.lambda_pc
    lam_sp = (
        0.0
        if flags.no_sparse
        else lambda_sparse_at(iteration, total_iters, weights, warmup=not flags.no_warmup)
    )
    total = color
    if lam_ph != 0.0:
        total = total + lam_ph * ph
    if lam_pc != 0.0:
        total = total + lam_pc * pc
    if lam_sp != 0.0:
        total = total + lam_sp * sparse
    breakdown = LossBreakdown(
        color=_as_float(color),
        ph=_as_float(ph),
        pc=_as_float(pc),
        sparse=_as_float(sparse),
        total=_as_float(total),
        lambda_sparse=lam_sp,
        n_rays=counts[0],
        n_patches=counts[1],
        n_quads=counts[2],
        n_keypoints=counts[3],
    )
    return total, breakdown


def _as_float(x) -> float:
    if isinstance(x, Value):
        return x.item()
    return float(x)
