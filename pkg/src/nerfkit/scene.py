"""Procedural textured-box rooms with analytic ground truth.

A scene is a closed axis-aligned box observed from inside by an orbit of
cameras looking outward. Every wall carries a view-independent texture
(checker, gradient or flat color), so ground-truth images, depth maps and
cross-view correspondences are exact: these scenes are the oracles for
the warping, plane and depth machinery.

Wall indexing: 0:x-lo 1:x-hi 2:y-lo 3:y-hi 4:z-lo(floor) 5:z-hi(ceiling).
Ground-truth depth maps store camera-frame z of the hit point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cameras import Camera, camera_rays
from .io import read_pfm, read_png, write_depth_png16, write_pfm, write_png
from .sfm import (
    CameraRecord,
    ImageRecord,
    SceneBundle,
    SparsePoint,
    finalize_weights,
    parse_colmap_text,
    rot_to_quat,
    write_colmap_text,
)

__all__ = [
    "TextureSpec",
    "BoxSceneConfig",
    "BoxScene",
    "TrainScene",
    "make_box_scene",
    "render_ground_truth",
    "gt_pixel_samples",
    "make_sparse_points",
    "scene_to_bundle",
    "write_scene",
    "load_scene",
    "parse_scene_config",
    "format_scene_config",
]

WALL_NAMES = ("x_lo", "x_hi", "y_lo", "y_hi", "floor", "ceiling")


@dataclass(frozen=True)
class TextureSpec:
    """Procedural wall texture. kinds: checker, gradient, flat."""

    kind: str
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 0.5

    def __post_init__(self):
        if self.kind not in ("checker", "gradient", "flat"):
            raise ValueError(f"unknown texture kind '{self.kind}'")
        if self.kind == "checker" and self.scale <= 0:
            raise ValueError("checker scale must be positive")


DEFAULT_TEXTURES = (
    TextureSpec("checker", (0.85, 0.25, 0.20), (0.95, 0.90, 0.85), 0.5),
    TextureSpec("checker", (0.20, 0.35, 0.75), (0.90, 0.92, 0.95), 0.35),
    TextureSpec("gradient", (0.20, 0.50, 0.80), (0.90, 0.60, 0.30)),
    TextureSpec("flat", (0.82, 0.80, 0.78)),
    TextureSpec("flat", (0.45, 0.40, 0.38)),
    TextureSpec("flat", (0.92, 0.92, 0.95)),
)


@dataclass(frozen=True)
class BoxSceneConfig:
    extents: tuple[float, float, float] = (4.0, 4.0, 2.4)
    textures: tuple[TextureSpec, ...] = DEFAULT_TEXTURES
    n_cameras: int = 23
    test_views: tuple[int, ...] = (5, 11, 17)  # 0-based camera indices
    resolution: int = 64
    fov_degrees: float = 70.0
    camera_radius: float = 0.55
    seed: int = 0

    def __post_init__(self):
        if any(e <= 0 for e in self.extents):
            raise ValueError("extents must be positive")
        if len(self.textures) != 6:
            raise ValueError("need one texture per wall")
        if self.n_cameras < 3:
            raise ValueError("need at least 3 cameras (source views require neighbors)")
        if any(not (0 <= t < self.n_cameras) for t in self.test_views):
            raise ValueError("test view index out of range")


@dataclass
class BoxScene:
    config: BoxSceneConfig
    lo: np.ndarray
    hi: np.ndarray
    cameras: list[Camera]
    t_near: float
    t_far: float

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def train_indices(self) -> list[int]:
        test = set(self.config.test_views)
        return [i for i in range(len(self.cameras)) if i not in test]

    @property
    def test_indices(self) -> list[int]:
        return list(self.config.test_views)


def _look_at_pose(position: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """World-to-camera M for a camera at ``position`` looking along ``forward``.

    Camera x is right, y is down, z is forward; world up is +z.
    """
    f = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        raise ValueError("camera cannot look straight up or down")
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])  # rows: world->camera
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ position
    return M


def make_box_scene(config: BoxSceneConfig, seed: int | None = None) -> BoxScene:
    """Deterministic inside-out orbit for (config, seed).

    ``seed`` overrides ``config.seed`` when given.
    """
    if seed is not None:
        config = replace(config, seed=seed)
    rng = np.random.default_rng(config.seed)
    lo = np.zeros(3)
    hi = np.array(config.extents, dtype=np.float64)
    center = 0.5 * (lo + hi)
    res = config.resolution
    focal = 0.5 * res / np.tan(0.5 * np.radians(config.fov_degrees))
    K = np.array(
        [[focal, 0, (res - 1) / 2], [0, focal, (res - 1) / 2], [0, 0, 1.0]]
    )

    cameras = []
    n = config.n_cameras
    for i in range(n):
        angle = 2 * np.pi * i / n + rng.uniform(-0.25, 0.25) * (2 * np.pi / n)
        radius = config.camera_radius * (1.0 + rng.uniform(-0.12, 0.12))
        height = center[2] + 0.18 * config.extents[2] * np.sin(4 * np.pi * i / n + rng.uniform(0, 2 * np.pi) * 0.1)
        position = center + np.array([radius * np.cos(angle), radius * np.sin(angle), 0.0])
        position[2] = height
        if np.any(position <= lo) or np.any(position >= hi):
            raise ValueError(f"camera {i} falls outside the box")
        pitch = rng.uniform(-0.22, 0.22)
        forward = np.array([np.cos(angle), np.sin(angle), pitch])
        cameras.append(Camera(K, _look_at_pose(position, forward), res, res))

    # scene-constant sampling bounds from the camera/box geometry
    min_wall = min(
        float(min(np.min(c.center() - lo), np.min(hi - c.center()))) for c in cameras
    )
    t_near = max(0.05, 0.5 * min_wall)
    t_far = float(np.linalg.norm(hi - lo)) * 1.02
    return BoxScene(config, lo, hi, cameras, t_near, t_far)


def _intersect_walls(scene: BoxScene, origins: np.ndarray, dirs: np.ndarray):
    """First exit of interior rays through the box boundary.

    Returns ``(t (n,), face (n,), points (n, 3))``; exact for origins
    strictly inside the closed box.
    """
    n = len(origins)
    t_candidates = np.full((n, 6), np.inf)
    for axis in range(3):
        d = dirs[:, axis]
        with np.errstate(divide="ignore"):
            t_lo = (scene.lo[axis] - origins[:, axis]) / d
            t_hi = (scene.hi[axis] - origins[:, axis]) / d
        t_candidates[:, 2 * axis] = np.where(d < 0, t_lo, np.inf)
        t_candidates[:, 2 * axis + 1] = np.where(d > 0, t_hi, np.inf)
    face_slot = np.argmin(t_candidates, axis=1)
    t = t_candidates[np.arange(n), face_slot]
    # slots are (x_lo, x_hi, y_lo, y_hi, z_lo, z_hi) matching WALL_NAMES
    points = origins + t[:, None] * dirs
    return t, face_slot, points


def _texture_color(spec: TextureSpec, s: np.ndarray, t: np.ndarray, s_extent: float, t_extent: float):
    a = np.asarray(spec.color_a)
    b = np.asarray(spec.color_b)
    if spec.kind == "flat":
        return np.broadcast_to(a, s.shape + (3,)).copy()
    if spec.kind == "checker":
        parity = (np.floor(s / spec.scale) + np.floor(t / spec.scale)) % 2
        return np.where(parity[..., None] == 0, a, b)
    frac = np.clip(s / s_extent, 0.0, 1.0)[..., None]
    return a + (b - a) * frac


_FACE_AXES = {0: (1, 2), 1: (1, 2), 2: (0, 2), 3: (0, 2), 4: (0, 1), 5: (0, 1)}


def wall_colors(scene: BoxScene, faces: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Texture color of boundary points lying on the given walls."""
    out = np.zeros(points.shape[:-1] + (3,))
    extent = scene.hi - scene.lo
    for face in range(6):
        mask = faces == face
        if not np.any(mask):
            continue
        sa, ta = _FACE_AXES[face]
        s = points[mask][:, sa] - scene.lo[sa]
        t = points[mask][:, ta] - scene.lo[ta]
        out[mask] = _texture_color(
            scene.config.textures[face], s, t, float(extent[sa]), float(extent[ta])
        )
    return out


def gt_pixel_samples(scene: BoxScene, camera: Camera, pixels: np.ndarray):
    """Exact color / z-depth / hit info for continuous pixel coordinates.

    Returns ``(colors (n,3), z_depth (n,), t_dist (n,), faces (n,))``.
    """
    origins, dirs, zscale = camera_rays(camera, pixels)
    t, faces, points = _intersect_walls(scene, origins, dirs)
    colors = wall_colors(scene, faces, points)
    return colors, t * zscale, t, faces


def render_ground_truth(scene: BoxScene, camera: Camera, width: int, height: int):
    """Analytic (rgb, z-depth) images for one camera."""
    us, vs = np.meshgrid(np.arange(width), np.arange(height))
    pixels = np.stack([us.ravel(), vs.ravel()], axis=-1).astype(np.float64)
    colors, z, _, _ = gt_pixel_samples(scene, camera, pixels)
    return colors.reshape(height, width, 3), z.reshape(height, width)


def _sample_wall_points(scene: BoxScene, n: int, rng: np.random.Generator) -> np.ndarray:
    extent = scene.hi - scene.lo
    areas = np.array(
        [
            extent[1] * extent[2],
            extent[1] * extent[2],
            extent[0] * extent[2],
            extent[0] * extent[2],
            extent[0] * extent[1],
            extent[0] * extent[1],
        ]
    )
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    points = np.empty((n, 3))
    for i, face in enumerate(faces):
        axis = face // 2
        coord = scene.lo[axis] if face % 2 == 0 else scene.hi[axis]
        sa, ta = _FACE_AXES[face]
        points[i, axis] = coord
        points[i, sa] = rng.uniform(scene.lo[sa], scene.hi[sa])
        points[i, ta] = rng.uniform(scene.lo[ta], scene.hi[ta])
    return points


def make_sparse_points(
    scene: BoxScene,
    n_points: int = 200,
    pixel_noise_sigma: float = 0.5,
    outlier_fraction: float = 0.1,
    seed: int = 0,
    outlier_shift: float = 0.25,
) -> list[SparsePoint]:
    """Synthesize an SfM-style keypoint cloud on the box walls.

    Observations are true projections plus Gaussian pixel noise, restricted
    to the cameras whose image rectangle contains the point. An exact
    ``outlier_fraction`` of points get their 3D position displaced along
    the mean viewing direction of their track (low-parallax direction), the
    way triangulation noise corrupts depth while keeping reprojection
    errors moderate. Weights come from the usual confidence formula.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    points: list[SparsePoint] = []
    guard = 0
    while len(points) < n_points:
        guard += 1
        if guard > 100 * n_points:
            raise RuntimeError("could not place enough visible points")
        xyz = _sample_wall_points(scene, 1, rng)[0]
        observations = []
        for view_index, cam in enumerate(scene.cameras):
            p_cam = cam.R @ xyz + cam.t
            if p_cam[2] <= 1e-9:
                continue
            u = cam.fx * p_cam[0] / p_cam[2] + cam.cx
            v = cam.fy * p_cam[1] / p_cam[2] + cam.cy
            if 0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1:
                noisy = np.array([u, v]) + rng.normal(0.0, pixel_noise_sigma, 2)
                observations.append((view_index + 1, noisy))  # image ids are 1-based
        if len(observations) < 2:
            continue
        points.append(
            SparsePoint(
                point_id=len(points) + 1,
                xyz=xyz,
                rgb=(128, 128, 128),
                error=0.0,
                track=[],
                observations=observations,
            )
        )

    n_outliers = int(round(outlier_fraction * n_points))
    if n_outliers:
        chosen = rng.choice(n_points, size=n_outliers, replace=False)
        for idx in chosen:
            p = points[idx]
            centers = np.stack(
                [scene.cameras[iid - 1].center() for iid, _ in p.observations]
            )
            direction = p.xyz - centers.mean(axis=0)
            direction /= np.linalg.norm(direction)
            shift = rng.uniform(0.5, 1.5) * outlier_shift * rng.choice([-1.0, 1.0])
            p.xyz = p.xyz + shift * direction
    return points


def scene_to_bundle(scene: BoxScene, points: list[SparsePoint]) -> SceneBundle:
    """Assemble cameras + keypoints into an SfM bundle with weights."""
    res = scene.config.resolution
    K = scene.cameras[0].K
    cameras = {
        1: CameraRecord(1, "PINHOLE", res, res, np.array([K[0, 0], K[1, 1], K[0, 2], K[1, 2]]))
    }
    images: dict[int, ImageRecord] = {}
    for i, cam in enumerate(scene.cameras):
        iid = i + 1
        images[iid] = ImageRecord(
            image_id=iid,
            qvec=rot_to_quat(cam.R),
            tvec=cam.t.copy(),
            camera_id=1,
            name=f"view_{i:03d}.png",
            points2d=np.zeros((0, 2)),
            point3d_ids=np.zeros(0, dtype=np.int64),
        )
    # fill per-image keypoint tables and track back-references
    buckets: dict[int, list[tuple[float, float, int]]] = {iid: [] for iid in images}
    for p in points:
        p.track = []
        for iid, uv in p.observations:
            buckets[iid].append((uv[0], uv[1], p.point_id))
            p.track.append((iid, len(buckets[iid]) - 1))
    for iid, rows in buckets.items():
        if rows:
            arr = np.array(rows)
            images[iid].points2d = arr[:, :2]
            images[iid].point3d_ids = arr[:, 2].astype(np.int64)
    bundle = SceneBundle(cameras, images, points)
    finalize_weights(bundle)
    return bundle


# -- scene directory layout ------------------------------------------------
#
#   scene.txt            key-value config (documented in README)
#   cameras.txt / images.txt / points3D.txt   COLMAP text model
#   images/view_###.png  8-bit renders
#   depth/view_###.pfm   float ground-truth z-depth
#   depth/view_###.png   16-bit preview, value = z * 65535 / (4 * diagonal)


@dataclass
class TrainScene:
    """Everything the trainer needs, loaded from a scene directory."""

    bundle: SceneBundle
    images: dict[int, np.ndarray]  # image id -> (H, W, 3) float
    gt_depths: dict[int, np.ndarray]
    view_order: list[int]  # image ids in trajectory order
    train_ids: list[int]
    test_ids: list[int]
    t_near: float
    t_far: float

    def camera(self, image_id: int) -> Camera:
        return self.bundle.camera_for_image(image_id)


def format_scene_config(config: BoxSceneConfig, scene: BoxScene) -> str:
    lines = [
        f"extents {config.extents[0]!r} {config.extents[1]!r} {config.extents[2]!r}",
        f"n_cameras {config.n_cameras}",
        f"resolution {config.resolution}",
        f"fov_degrees {config.fov_degrees!r}",
        f"camera_radius {config.camera_radius!r}",
        f"seed {config.seed}",
        "test_views " + " ".join(str(t) for t in config.test_views),
        f"t_near {scene.t_near!r}",
        f"t_far {scene.t_far!r}",
    ]
    for name, tex in zip(WALL_NAMES, config.textures):
        fields = [tex.kind]
        fields += [repr(c) for c in tex.color_a]
        fields += [repr(c) for c in tex.color_b]
        fields.append(repr(tex.scale))
        lines.append(f"texture.{name} " + " ".join(fields))
    return "\n".join(lines) + "\n"


def parse_scene_config(text: str) -> tuple[BoxSceneConfig, float, float]:
    values: dict[str, list[str]] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        values[key] = rest
    textures = []
    for name in WALL_NAMES:
        kind, *nums = values[f"texture.{name}"]
        f = [float(x) for x in nums]
        textures.append(TextureSpec(kind, tuple(f[0:3]), tuple(f[3:6]), f[6]))
    config = BoxSceneConfig(
        extents=tuple(float(x) for x in values["extents"]),
        textures=tuple(textures),
        n_cameras=int(values["n_cameras"][0]),
        test_views=tuple(int(x) for x in values["test_views"]),
        resolution=int(values["resolution"][0]),
        fov_degrees=float(values["fov_degrees"][0]),
        camera_radius=float(values["camera_radius"][0]),
        seed=int(values["seed"][0]),
    )
    return config, float(values["t_near"][0]), float(values["t_far"][0])


def write_scene(scene: BoxScene, points: list[SparsePoint], out_dir) -> SceneBundle:
    """Emit the full scene directory; returns the bundle that was written."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    bundle = scene_to_bundle(scene, points)
    write_colmap_text(bundle, out)
    (out / "scene.txt").write_text(format_scene_config(scene.config, scene))
    depth_scale = 65535.0 / (4.0 * scene.diagonal)
    for i, cam in enumerate(scene.cameras):
        rgb, depth = render_ground_truth(scene, cam, cam.width, cam.height)
        write_png(out / "images" / f"view_{i:03d}.png", rgb)
        write_pfm(out / "depth" / f"view_{i:03d}.pfm", depth)
        write_depth_png16(out / "depth" / f"view_{i:03d}.png", depth, depth_scale)
    return bundle


def load_scene(directory) -> TrainScene:
    directory = Path(directory)
    config, t_near, t_far = parse_scene_config((directory / "scene.txt").read_text())
    bundle = parse_colmap_text(directory)
    images = {}
    gt_depths = {}
    for iid, rec in bundle.images.items():
        images[iid] = read_png(directory / "images" / rec.name)
        pfm = directory / "depth" / rec.name.replace(".png", ".pfm")
        if pfm.exists():
            gt_depths[iid] = read_pfm(pfm)
    view_order = sorted(bundle.images)
    test_ids = [view_order[i] for i in config.test_views]
    train_ids = [iid for iid in view_order if iid not in set(test_ids)]
    return TrainScene(
        bundle=bundle,
        images=images,
        gt_depths=gt_depths,
        view_order=view_order,
        train_ids=train_ids,
        test_ids=test_ids,
        t_near=t_near,
        t_far=t_far,
    )
