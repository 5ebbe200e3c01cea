"""Core geometric types, SfM-model text ingestion, and projection operators.

Conventions used by every module in this package:
  - poses are world-to-camera: p_cam = R @ p_world + t, camera center = -R^T t
  - pixel origin at the top-left corner, pixel centers at integer coordinates
  - scene units are meters
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DanglingReferenceError,
    MalformedFileError,
    UnsupportedCameraModelError,
)

_ORTHO_TOL = 1e-9


def qvec2rotmat(qvec: np.ndarray) -> np.ndarray:
    """Quaternion (qw, qx, qy, qz) to 3x3 rotation matrix."""
    w, x, y, z = np.asarray(qvec, dtype=np.float64) / np.linalg.norm(qvec)
    return np.array(
        [
            [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
            [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
            [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
        ]
    )


def rotmat2qvec(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion (qw, qx, qy, qz), qw >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def axis_angle_to_matrix(omega: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map; omega is an axis-angle 3-vector in radians."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        K = skew(omega)
        return np.eye(3) + K
    k = omega / theta
    K = skew(k)
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
    """World-to-camera pose for a camera at eye looking toward target.

    The camera looks along +z in its own frame with image y pointing down.
    Degenerate when the viewing direction is parallel to up.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ValueError("viewing direction parallel to up vector")
    right /= rnorm
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Pose(R, -R @ eye)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; width/height define the image extent."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image extent")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


class Pose:
    """World-to-camera rigid transform (R, t)."""

    __slots__ = ("R", "t")

    def __init__(self, R: np.ndarray, t: np.ndarray):
        R = np.array(R, dtype=np.float64)
        t = np.array(t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("R is not orthogonal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("det(R) != +1 within 1e-9")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Map world points (3,) or (N,3) into the camera frame."""
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.R.T @ self.t

    @property
    def qvec(self) -> np.ndarray:
        return rotmat2qvec(self.R)

    def __repr__(self):
        return f"Pose(center={np.round(self.center, 4)})"


@dataclass
class TrackPoint:
    """A reconstructed 3D point with its 2D observation track."""

    id: int
    xyz: np.ndarray
    observations: list  # [(image_id, np.ndarray uv)], non-empty
    rgb: tuple | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(3)
        if len(self.observations) == 0:
            raise ValueError(f"track point {self.id} has no observations")

    @property
    def track_length(self) -> int:
        """Number of distinct observing images."""
        return len({iid for iid, _ in self.observations})


@dataclass
class ImageRecord:
    id: int
    pose: Pose
    camera_id: int
    name: str


@dataclass
class SceneModel:
    """Immutable SfM reconstruction: cameras, posed images, and tracks."""

    intrinsics: dict  # camera_id -> Intrinsics
    images: dict      # image_id -> ImageRecord
    points: dict      # point_id -> TrackPoint

    def __post_init__(self):
        for img in self.images.values():
            if img.camera_id not in self.intrinsics:
                raise DanglingReferenceError(
                    f"image {img.id} references unknown camera {img.camera_id}"
                )
        for pt in self.points.values():
            for iid, _ in pt.observations:
                if iid not in self.images:
                    raise DanglingReferenceError(
                        f"point {pt.id} references unknown image {iid}"
                    )

    def camera_of(self, image_id: int) -> Intrinsics:
        return self.intrinsics[self.images[image_id].camera_id]


def project(K: Intrinsics, T: Pose, p: np.ndarray):
    """Project a world point; returns the pixel (u, v) or None if out of view.

    A point is in view when its camera-frame depth is positive and the pixel
    falls inside [0, width) x [0, height).
    """
    x, y, z = T.apply(np.asarray(p, dtype=np.float64))
    if z <= 0:
        return None
    u = K.fx * x / z + K.cx
    v = K.fy * y / z + K.cy
    if 0.0 <= u < K.width and 0.0 <= v < K.height:
        return np.array([u, v])
    return None


def project_many(K: Intrinsics, T: Pose, pts: np.ndarray):
    """Vectorized projection of (N,3) world points.

    Returns (uv, valid): uv is (N,2) with NaN rows where invalid, valid is a
    boolean mask applying the same in-front / in-extent test as project().
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    cam = pts @ T.R.T + T.t
    z = cam[:, 2]
    uv = np.full((len(pts), 2), np.nan)
    front = z > 0
    if front.any():
        uv[front, 0] = K.fx * cam[front, 0] / z[front] + K.cx
        uv[front, 1] = K.fy * cam[front, 1] / z[front] + K.cy
    valid = (
        front
        & (uv[:, 0] >= 0.0)
        & (uv[:, 0] < K.width)
        & (uv[:, 1] >= 0.0)
        & (uv[:, 1] < K.height)
    )
    return uv, valid


def bearing(K: Intrinsics, uv: np.ndarray) -> np.ndarray:
    """Unit camera-frame ray through pixel (u, v)."""
    u, v = np.asarray(uv, dtype=np.float64)
    d = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    return d / np.linalg.norm(d)


def _parse_floats(tokens, path, line_no):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise MalformedFileError(path, line_no, f"expected number: {exc}") from None


def _content_lines(path):
    """Yield (line_no, stripped_line) skipping blanks and # comments."""
    with open(path, "r") as fh:
        for i, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield i, line


def load_scene(path) -> SceneModel:
    """Load a COLMAP-style text reconstruction from a directory.

    Expects cameras.txt, images.txt and points3D.txt. Only PINHOLE and
    SIMPLE_PINHOLE camera models are supported. Quaternions are stored as
    (qw qx qy qz) and converted to rotation matrices.
    """
    path = Path(path)
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (path / name).exists():
            raise FileNotFoundError(f"missing reconstruction file: {path / name}")

    intrinsics = {}
    cam_path = path / "cameras.txt"
    for line_no, line in _content_lines(cam_path):
        tokens = line.split()
        if len(tokens) < 4:
            raise MalformedFileError(cam_path, line_no, "camera line too short")
        cam_id = int(tokens[0])
        model = tokens[1]
        width, height = int(tokens[2]), int(tokens[3])
        params = _parse_floats(tokens[4:], cam_path, line_no)
        if model == "PINHOLE":
            if len(params) != 4:
                raise MalformedFileError(cam_path, line_no, "PINHOLE needs 4 params")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise MalformedFileError(cam_path, line_no, "SIMPLE_PINHOLE needs 3 params")
            fx, cx, cy = params
            fy = fx
        else:
            raise UnsupportedCameraModelError(
                f"{cam_path}:{line_no}: unsupported camera model {model!r}"
            )
        intrinsics[cam_id] = Intrinsics(fx, fy, cx, cy, width, height)

    images = {}
    image_obs = {}  # image_id -> list of (u, v, point3d_id)
    img_path = path / "images.txt"
    pending = None  # header tokens awaiting their observations line
    with open(img_path, "r") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if pending is None:
                if not line or line.startswith("#"):
                    continue
                tokens = line.split()
                if len(tokens) < 10:
                    raise MalformedFileError(img_path, line_no, "image header line too short")
                pending = (tokens, line_no)
            else:
                # The observations line may legitimately be empty.
                tokens, hdr_no = pending
                image_id = int(tokens[0])
                vals = _parse_floats(tokens[1:8], img_path, hdr_no)
                qvec, tvec = vals[:4], vals[4:7]
                camera_id = int(tokens[8])
                name = " ".join(tokens[9:])
                if camera_id not in intrinsics:
                    raise DanglingReferenceError(
                        f"{img_path}:{hdr_no}: image {image_id} references unknown camera {camera_id}"
                    )
                obs_tokens = line.split()
                if len(obs_tokens) % 3 != 0:
                    raise MalformedFileError(img_path, line_no, "observations not in (x y id) triples")
                vals = _parse_floats(obs_tokens, img_path, line_no)
                obs = [
                    (vals[i], vals[i + 1], int(obs_tokens[i + 2]))
                    for i in range(0, len(obs_tokens), 3)
                ]
                images[image_id] = ImageRecord(
                    image_id, Pose(qvec2rotmat(qvec), tvec), camera_id, name
                )
                image_obs[image_id] = obs
                pending = None
    if pending is not None:
        raise MalformedFileError(img_path, pending[1], "image header without observations line")

    points = {}
    pts_path = path / "points3D.txt"
    for line_no, line in _content_lines(pts_path):
        tokens = line.split()
        if len(tokens) < 8 or (len(tokens) - 8) % 2 != 0:
            raise MalformedFileError(pts_path, line_no, "point line has wrong token count")
        pt_id = int(tokens[0])
        xyz = _parse_floats(tokens[1:4], pts_path, line_no)
        rgb = tuple(int(t) for t in tokens[4:7])
        observations = []
        for i in range(8, len(tokens), 2):
            image_id = int(tokens[i])
            p2d_idx = int(tokens[i + 1])
            if image_id not in images:
                raise DanglingReferenceError(
                    f"{pts_path}:{line_no}: point {pt_id} references unknown image {image_id}"
                )
            obs = image_obs[image_id]
            if not (0 <= p2d_idx < len(obs)):
                raise DanglingReferenceError(
                    f"{pts_path}:{line_no}: point {pt_id} references observation "
                    f"{p2d_idx} out of range for image {image_id}"
                )
            u, v, back_ref = obs[p2d_idx]
            if back_ref != -1 and back_ref != pt_id:
                raise DanglingReferenceError(
                    f"{pts_path}:{line_no}: observation {p2d_idx} of image {image_id} "
                    f"belongs to point {back_ref}, not {pt_id}"
                )
            observations.append((image_id, np.array([u, v])))
        points[pt_id] = TrackPoint(pt_id, xyz, observations, rgb)

    return SceneModel(intrinsics, images, points)


def save_scene(model: SceneModel, path) -> None:
    """Write a SceneModel as COLMAP-style text files (load_scene inverse)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    f = lambda x: format(float(x), ".17g")

    with open(path / "cameras.txt", "w") as fh:
        fh.write("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for cam_id in sorted(model.intrinsics):
            K = model.intrinsics[cam_id]
            fh.write(
                f"{cam_id} PINHOLE {K.width} {K.height} "
                f"{f(K.fx)} {f(K.fy)} {f(K.cx)} {f(K.cy)}\n"
            )

    # Per-image 2D observation lists are rebuilt from the tracks.
    per_image = {iid: [] for iid in model.images}
    obs_index = {}  # (point_id, image_id, slot in track) -> index in image list
    for pt_id in sorted(model.points):
        for slot, (iid, uv) in enumerate(model.points[pt_id].observations):
            obs_index[(pt_id, iid, slot)] = len(per_image[iid])
            per_image[iid].append((uv[0], uv[1], pt_id))

    with open(path / "images.txt", "w") as fh:
        fh.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        fh.write("# POINTS2D[] as (X Y POINT3D_ID)\n")
        for iid in sorted(model.images):
            img = model.images[iid]
            q = img.pose.qvec
            t = img.pose.t
            fh.write(
                f"{iid} {f(q[0])} {f(q[1])} {f(q[2])} {f(q[3])} "
                f"{f(t[0])} {f(t[1])} {f(t[2])} {img.camera_id} {img.name}\n"
            )
            fh.write(
                " ".join(f"{f(u)} {f(v)} {pid}" for u, v, pid in per_image[iid]) + "\n"
            )

    with open(path / "points3D.txt", "w") as fh:
        fh.write("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID POINT2D_IDX)\n")
        for pt_id in sorted(model.points):
            pt = model.points[pt_id]
            rgb = pt.rgb if pt.rgb is not None else (128, 128, 128)
            track = " ".join(
                f"{iid} {obs_index[(pt_id, iid, slot)]}"
                for slot, (iid, _) in enumerate(pt.observations)
            )
            fh.write(
                f"{pt_id} {f(pt.xyz[0])} {f(pt.xyz[1])} {f(pt.xyz[2])} "
                f"{rgb[0]} {rgb[1]} {rgb[2]} 0 {track}\n"
            )
