"""COLMAP text-format ingestion and keypoint confidence weighting.

Reads/writes ``cameras.txt``, ``images.txt`` and ``points3D.txt`` in the
standard COLMAP text layout ('#' comments, whitespace-separated fields,
images described by a pose line followed by a 2D-point line, quaternions
as world-to-camera (qw, qx, qy, qz)).

Each 3D keypoint gets a confidence weight

    w_i = exp(-(e_i / e_bar)^2)

where ``e_i`` sums the per-view reprojection distances in pixels and
``e_bar`` is the scene mean of those totals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import Camera, PointBehindCamera, project

__all__ = [
    "SparsePoint",
    "SceneBundle",
    "CameraRecord",
    "ImageRecord",
    "UnsupportedModel",
    "MalformedTrack",
    "MalformedPose",
    "quat_to_rot",
    "rot_to_quat",
    "parse_colmap_text",
    "write_colmap_text",
    "reprojection_error",
    "keypoint_weight",
]


class UnsupportedModel(ValueError):
    pass


class MalformedTrack(ValueError):
    pass


class MalformedPose(ValueError):
    pass


def quat_to_rot(q) -> np.ndarray:
    """Rotation matrix from a unit quaternion (w, x, y, z)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(R) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix, with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    K = (
        np.array(
            [
                [R[0, 0] - R[1, 1] - R[2, 2], 0, 0, 0],
                [R[0, 1] + R[1, 0], R[1, 1] - R[0, 0] - R[2, 2], 0, 0],
                [R[0, 2] + R[2, 0], R[1, 2] + R[2, 1], R[2, 2] - R[0, 0] - R[1, 1], 0],
                [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1], R[0, 0] + R[1, 1] + R[2, 2]],
            ]
        )
        / 3.0
    )
    eigvals, eigvecs = np.linalg.eigh(K)
    q = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    if q[0] < 0:
        q = -q
    return q


@dataclass
class CameraRecord:
    camera_id: int
    model: str
    width: int
    height: int
    params: np.ndarray  # PINHOLE: fx fy cx cy; SIMPLE_PINHOLE: f cx cy

    def intrinsics(self) -> np.ndarray:
        if self.model == "PINHOLE":
            fx, fy, cx, cy = self.params
        elif self.model == "SIMPLE_PINHOLE":
            f, cx, cy = self.params
            fx = fy = f
        else:
            raise UnsupportedModel(f"camera model '{self.model}'")
        return np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])


@dataclass
class ImageRecord:
    image_id: int
    qvec: np.ndarray  # (w, x, y, z), world-to-camera
    tvec: np.ndarray
    camera_id: int
    name: str
    points2d: np.ndarray  # (n, 2)
    point3d_ids: np.ndarray  # (n,), -1 when untracked

    def pose_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = quat_to_rot(self.qvec / np.linalg.norm(self.qvec))
        M[:3, 3] = self.tvec
        return M


@dataclass
class SparsePoint:
    """An SfM keypoint with its observations and confidence weight."""

    point_id: int
    xyz: np.ndarray
    rgb: tuple[int, int, int]
    error: float  # ERROR column as stored by the reconstruction
    track: list[tuple[int, int]]  # (image_id, point2d_idx)
    observations: list[tuple[int, np.ndarray]] = field(default_factory=list)
    e_i: float = 0.0  # total reprojection error, recomputed at load
    w_i: float = 1.0
    behind_camera: bool = False


@dataclass
class SceneBundle:
    cameras: dict[int, CameraRecord]
    images: dict[int, ImageRecord]
    points: list[SparsePoint]
    mean_error: float = 0.0

    def camera_for_image(self, image_id: int) -> Camera:
        rec = self.images[image_id]
        cam = self.cameras[rec.camera_id]
        return Camera(cam.intrinsics(), rec.pose_matrix(), cam.width, cam.height)

    def usable_points(self) -> list[SparsePoint]:
        return [p for p in self.points if not p.behind_camera]


def _data_lines(path: Path):
    """Yield (line_number, stripped line) skipping comments; keeps blanks."""
    with open(path, "r", newline="") as f:
        for i, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if line.lstrip().startswith("#"):
                continue
            yield i, line


def parse_colmap_text(directory) -> SceneBundle:
    """Parse a COLMAP sparse text model from ``directory``.

    Reprojection errors and weights are recomputed from geometry; points
    observed behind any camera are flagged and excluded from supervision.
    """
    directory = Path(directory)
    cameras: dict[int, CameraRecord] = {}
    for lineno, line in _data_lines(directory / "cameras.txt"):
        if not line.strip():
            continue
        parts = line.split()
        model = parts[1]
        if model not in ("PINHOLE", "SIMPLE_PINHOLE"):
            raise UnsupportedModel(f"cameras.txt line {lineno}: camera model '{model}'")
        cameras[int(parts[0])] = CameraRecord(
            camera_id=int(parts[0]),
            model=model,
            width=int(parts[2]),
            height=int(parts[3]),
            params=np.array([float(x) for x in parts[4:]]),
        )

    images: dict[int, ImageRecord] = {}
    pending = None  # pose parsed, waiting for the 2D-point line
    for lineno, line in _data_lines(directory / "images.txt"):
        if pending is None:
            if not line.strip():
                continue
            parts = line.split()
            qvec = np.array([float(x) for x in parts[1:5]])
            if abs(np.linalg.norm(qvec) - 1.0) > 1e-6:
                raise MalformedPose(f"images.txt line {lineno}: quaternion norm {np.linalg.norm(qvec)!r}")
            pending = ImageRecord(
                image_id=int(parts[0]),
                qvec=qvec,
                tvec=np.array([float(x) for x in parts[5:8]]),
                camera_id=int(parts[8]),
                name=parts[9],
                points2d=np.zeros((0, 2)),
                point3d_ids=np.zeros(0, dtype=np.int64),
            )
        else:
            fields = line.split()
            if len(fields) % 3 != 0:
                raise MalformedTrack(f"images.txt line {lineno}: 2D point list not triples")
            n = len(fields) // 3
            pts = np.array([float(x) for x in fields], dtype=np.float64).reshape(n, 3) if n else np.zeros((0, 3))
            pending.points2d = pts[:, :2]
            pending.point3d_ids = pts[:, 2].astype(np.int64)
            images[pending.image_id] = pending
            pending = None
    if pending is not None:
        raise MalformedTrack("images.txt: missing 2D point line for last image")

    points: list[SparsePoint] = []
    for lineno, line in _data_lines(directory / "points3D.txt"):
        if not line.strip():
            continue
        parts = line.split()
        track_fields = parts[8:]
        if len(track_fields) % 2 != 0:
            raise MalformedTrack(f"points3D.txt line {lineno}: track list not pairs")
        track = []
        observations = []
        for j in range(0, len(track_fields), 2):
            image_id, p2d_idx = int(track_fields[j]), int(track_fields[j + 1])
            if image_id not in images:
                raise MalformedTrack(f"points3D.txt line {lineno}: unknown image id {image_id}")
            rec = images[image_id]
            if not (0 <= p2d_idx < len(rec.points2d)):
                raise MalformedTrack(
                    f"points3D.txt line {lineno}: 2D point index {p2d_idx} out of range"
                )
            track.append((image_id, p2d_idx))
            observations.append((image_id, rec.points2d[p2d_idx].copy()))
        points.append(
            SparsePoint(
                point_id=int(parts[0]),
                xyz=np.array([float(x) for x in parts[1:4]]),
                rgb=(int(parts[4]), int(parts[5]), int(parts[6])),
                error=float(parts[7]),
                track=track,
                observations=observations,
            )
        )

    bundle = SceneBundle(cameras, images, points)
    finalize_weights(bundle)
    return bundle


def finalize_weights(bundle: SceneBundle) -> None:
    """Recompute e_i and w_i; flag behind-camera points; set the scene mean."""
    view_cams = {iid: bundle.camera_for_image(iid) for iid in bundle.images}
    for p in bundle.points:
        try:
            p.e_i = reprojection_error(p, view_cams)
            p.behind_camera = False
        except PointBehindCamera:
            p.e_i = float("nan")
            p.behind_camera = True
    usable = bundle.usable_points()
    bundle.mean_error = float(np.mean([p.e_i for p in usable])) if usable else 0.0
    for p in bundle.points:
        p.w_i = 0.0 if p.behind_camera else keypoint_weight(p.e_i, bundle.mean_error)


def reprojection_error(point: SparsePoint, cameras: dict[int, Camera]) -> float:
    """Sum of pixel distances between projections and detected keypoints."""
    total = 0.0
    for image_id, uv in point.observations:
        cam = cameras[image_id]
        cam_point = cam.M[:3, :3] @ point.xyz + cam.M[:3, 3]
        projected = project(cam_point, cam.K)  # raises PointBehindCamera on z <= 0
        total += float(np.linalg.norm(projected - uv))
    return total


def keypoint_weight(e_i: float, mean_error: float) -> float:
    """Confidence weight exp(-(e/e_bar)^2).

    A scene whose errors are all zero gets unit weights by convention;
    the threshold 1e-9 px treats pure float roundoff as zero.
    """
    if mean_error < 0:
        raise ValueError("mean error must be nonnegative")
    if mean_error < 1e-9:
        return 1.0
    return float(np.exp(-((e_i / mean_error) ** 2)))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_colmap_text(bundle: SceneBundle, directory) -> None:
    """Emit the bundle in COLMAP text format (deterministic, roundtrips)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    lines = [
        "# Camera list with one line of data per camera:",
        "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
        f"# Number of cameras: {len(bundle.cameras)}",
    ]
    for cid in sorted(bundle.cameras):
        cam = bundle.cameras[cid]
        params = " ".join(_fmt(p) for p in cam.params)
        lines.append(f"{cid} {cam.model} {cam.width} {cam.height} {params}")
    (directory / "cameras.txt").write_text("\n".join(lines) + "\n")

    n_obs = sum(len(img.points2d) for img in bundle.images.values())
    mean_obs = n_obs / len(bundle.images) if bundle.images else 0.0
    lines = [
        "# Image list with two lines of data per image:",
        "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
        "#   POINTS2D[] as (X, Y, POINT3D_ID)",
        f"# Number of images: {len(bundle.images)}, mean observations per image: {_fmt(mean_obs)}",
    ]
    for iid in sorted(bundle.images):
        img = bundle.images[iid]
        pose = " ".join(_fmt(x) for x in (*img.qvec, *img.tvec))
        lines.append(f"{iid} {pose} {img.camera_id} {img.name}")
        obs = " ".join(
            f"{_fmt(u)} {_fmt(v)} {pid}"
            for (u, v), pid in zip(img.points2d, img.point3d_ids)
        )
        lines.append(obs)
    (directory / "images.txt").write_text("\n".join(lines) + "\n")

    mean_track = (
        sum(len(p.track) for p in bundle.points) / len(bundle.points) if bundle.points else 0.0
    )
    lines = [
        "# 3D point list with one line of data per point:",
        "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)",
        f"# Number of points: {len(bundle.points)}, mean track length: {_fmt(mean_track)}",
    ]
    for p in sorted(bundle.points, key=lambda p: p.point_id):
        xyz = " ".join(_fmt(x) for x in p.xyz)
        rgb = " ".join(str(c) for c in p.rgb)
        track = " ".join(f"{iid} {idx}" for iid, idx in p.track)
        entry = f"{p.point_id} {xyz} {rgb} {_fmt(p.error)}"
        lines.append(f"{entry} {track}" if track else entry)
    (directory / "points3D.txt").write_text("\n".join(lines) + "\n")
