"""Pinhole cameras, back-projection and point/patch warping between views.

Conventions used throughout the package:

* pixel ``(u, v)`` sits at continuous image coordinate ``(u, v)`` exactly
  (no half-pixel offset); ``u`` indexes columns, ``v`` rows.
* ``M`` is the 4x4 world-to-camera rigid transform; the camera looks
  along +z of its own frame.
* "depth" of a pixel means the camera-frame z of the surface point, so
  ``P = depth * K^-1 [u, v, 1]`` has ``P.z == depth`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Camera",
    "CameraError",
    "PointBehindCamera",
    "SupportPatch",
    "back_project",
    "project",
    "warp_point",
    "warp_patch",
    "support_domain",
    "bilinear_sample",
    "camera_rays",
]


class CameraError(ValueError):
    """Invalid camera construction."""


class PointBehindCamera(ValueError):
    """Projection of a point with non-positive camera-frame z."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics K (zero skew) and world-to-camera M."""

    K: np.ndarray
    M: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        M = np.asarray(self.M, dtype=np.float64)
        if K.shape != (3, 3) or M.shape != (4, 4):
            raise CameraError(f"bad shapes K{K.shape} M{M.shape}")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise CameraError("focal lengths must be positive")
        R = M[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise CameraError("rotation block is not orthonormal")
        if np.linalg.det(R) < 0:
            raise CameraError("rotation block has negative determinant")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "M", M)

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def R(self) -> np.ndarray:
        return self.M[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.M[:3, 3]

    def inverse_M(self) -> np.ndarray:
        """Camera-to-world transform, computed as a rigid inverse."""
        out = np.eye(4)
        out[:3, :3] = self.R.T
        out[:3, 3] = -self.R.T @ self.t
        return out

    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def contains(self, uv: np.ndarray) -> np.ndarray:
        """True where coords lie in the closed rectangle [0,W-1]x[0,H-1]."""
        uv = np.asarray(uv, dtype=np.float64)
        return (
            (uv[..., 0] >= 0.0)
            & (uv[..., 0] <= self.width - 1)
            & (uv[..., 1] >= 0.0)
            & (uv[..., 1] <= self.height - 1)
        )


@dataclass
class SupportPatch:
    """A sampled pixel with its 3x3 support window sharing one depth."""

    center: np.ndarray  # (2,) pixel
    coords: np.ndarray  # (9, 2) support coordinates, row-major
    spacing: int
    depth: float | None = None  # rendered depth of the center pixel


def back_project(pixels, depth, K) -> np.ndarray:
    """Lift pixels to camera-frame points: depth * K^-1 [u, v, 1].

    Accepts a single (2,) pixel with scalar depth, or (n, 2) with (n,).
    The returned z component equals ``depth`` exactly.
    """
    K = np.asarray(K, dtype=np.float64)
    uv = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0.0):
        raise ValueError("depth must be positive")
    x = (uv[..., 0] - K[0, 2]) / K[0, 0] * d
    y = (uv[..., 1] - K[1, 2]) / K[1, 1] * d
    return np.stack([x, y, np.broadcast_to(d, x.shape).copy()], axis=-1)


def project(points, K) -> np.ndarray:
    """Perspective-project camera-frame points onto the image plane."""
    K = np.asarray(K, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0.0):
        raise PointBehindCamera("point has non-positive camera-frame z")
    u = K[0, 0] * p[..., 0] / z + K[0, 2]
    v = K[1, 1] * p[..., 1] / z + K[1, 2]
    return np.stack([u, v], axis=-1)


def _relative_pose(cam_t: Camera, cam_s: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rotation/translation mapping target-camera points to the source frame."""
    rel = cam_s.M @ cam_t.inverse_M()
    return rel[:3, :3], rel[:3, 3]


def warp_point(pixel, depth: float, cam_t: Camera, cam_s: Camera):
    """Reproject a target pixel with known depth into the source view.

    Returns ``(uv, in_bounds)``. Raises :class:`PointBehindCamera` when the
    transformed point lands behind the source camera.
    """
    p_cam = back_project(pixel, depth, cam_t.K)
    R, t = _relative_pose(cam_t, cam_s)
    p_src = p_cam @ R.T + t
    uv = project(p_src, cam_s.K)
    return uv, bool(np.all(cam_s.contains(uv)))


def support_domain(pixel, spacing: int) -> np.ndarray:
    """The 3x3 grid around ``pixel`` with the given spacing, row-major.

    Coordinates may leave the image; consumers mask them.
    """
    u, v = float(pixel[0]), float(pixel[1])
    offsets = (-spacing, 0, spacing)
    return np.array([(u + du, v + dv) for dv in offsets for du in offsets], dtype=np.float64)


def warp_patch(patch: SupportPatch, cam_t: Camera, cam_s: Camera):
    """Warp all 9 support coordinates with the shared center depth.

    Returns ``(coords (9,2), valid)``; ``valid`` is False when any of the
    warped points falls behind the source camera (the whole patch is then
    excluded from the photometric loss).
    """
    if patch.depth is None or patch.depth <= 0:
        raise ValueError("patch depth must be positive")
    p_cam = back_project(patch.coords, np.full(9, patch.depth), cam_t.K)
    R, t = _relative_pose(cam_t, cam_s)
    p_src = p_cam @ R.T + t
    if np.any(p_src[:, 2] <= 0.0):
        return np.full((9, 2), np.nan), False
    return project(p_src, cam_s.K), True


def bilinear_sample(image: np.ndarray, coords) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly interpolate ``image`` at continuous coords.

    Returns ``(values, valid)``. A coordinate is valid when it lies in the
    closed rectangle [0, W-1] x [0, H-1]; integer coordinates reproduce the
    pixel value exactly. Invalid samples are returned as zeros.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("image is empty")
    squeeze = False
    if img.ndim == 2:
        img = img[..., None]
        squeeze = True
    h, w = img.shape[:2]
    uv = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    u, v = uv[..., 0], uv[..., 1]
    valid = (u >= 0.0) & (u <= w - 1) & (v >= 0.0) & (v <= h - 1)
    uc = np.clip(u, 0.0, w - 1)
    vc = np.clip(v, 0.0, h - 1)
    u0 = np.floor(uc).astype(np.int64)
    v0 = np.floor(vc).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (uc - u0)[..., None]
    fv = (vc - v0)[..., None]
    out = (
        img[v0, u0] * (1 - fu) * (1 - fv)
        + img[v0, u1] * fu * (1 - fv)
        + img[v1, u0] * (1 - fu) * fv
        + img[v1, u1] * fu * fv
    )
    out[~valid] = 0.0
    if squeeze:
        out = out[..., 0]
    return out, valid


def camera_rays(camera: Camera, pixels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World-space rays through continuous pixel coordinates.

    Returns ``(origins (n,3), unit directions (n,3), z_scale (n,))`` where
    ``z_scale`` converts distance along the unit ray into camera-frame z
    (``z = t * z_scale``).
    """
    uv = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    dirs_cam = np.stack(
        [
            (uv[:, 0] - camera.cx) / camera.fx,
            (uv[:, 1] - camera.cy) / camera.fy,
            np.ones(len(uv)),
        ],
        axis=-1,
    )
    norms = np.linalg.norm(dirs_cam, axis=-1)
    dirs_world = (dirs_cam / norms[:, None]) @ camera.R  # R^T applied row-wise
    origin = camera.center()
    origins = np.broadcast_to(origin, dirs_world.shape).copy()
    return origins, dirs_world, 1.0 / norms
