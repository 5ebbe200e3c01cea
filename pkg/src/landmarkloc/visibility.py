"""Mesh-based landmark visibility: depth rasterization, robust affine
registration of dense geometry to the SfM frame, and the per-(landmark,
image) occlusion test.

A landmark is visible in an image when (a) it is in front of the camera and
projects inside the extent, (b) its camera-frame depth matches the rasterized
mesh depth at that pixel within tolerance, and (c) its reference surface
normal agrees with the mesh normal rendered at that pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegeneracyError, EmptyResultError, MalformedFileError, RobustFitError
from .landmarks import LandmarkSet
from .mesh import TriangleMesh, nearest_surface_point
from .scene_model import Intrinsics, Pose, SceneModel, project_many


@dataclass
class VisibilityConfig:
    tol_depth: float = 0.05        # meters, absolute depth tolerance floor
    rel_frac: float = 0.01         # relative depth tolerance, fraction of depth
    tol_normal_deg: float = 30.0
    max_surface_dist: float = 0.2  # landmarks farther from the mesh are excluded
    decimation: int = 1            # depth-map downsampling factor

    def as_dict(self):
        return {
            "tol_depth": self.tol_depth,
            "rel_frac": self.rel_frac,
            "tol_normal_deg": self.tol_normal_deg,
            "max_surface_dist": self.max_surface_dist,
            "decimation": self.decimation,
        }


@dataclass
class DepthMap:
    width: int
    height: int
    depth: np.ndarray    # (H, W), camera-frame z, +inf where no triangle
    normal: np.ndarray   # (H, W, 3), unit camera-frame normals (0 where no hit)
    decimation: int = 1

    def lookup(self, uv: np.ndarray):
        """Nearest-pixel depth and normal for full-resolution pixels (N, 2)."""
        uv = np.atleast_2d(uv)
        px = np.clip(np.rint(uv[:, 0] / self.decimation).astype(int), 0, self.width - 1)
        py = np.clip(np.rint(uv[:, 1] / self.decimation).astype(int), 0, self.height - 1)
        return self.depth[py, px], self.normal[py, px]


@dataclass(frozen=True)
class AffineTransform:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64).reshape(3))
        if abs(np.linalg.det(self.A)) < 1e-12:
            raise ValueError("affine transform is singular")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim == 1:
            return self.A @ pts + self.b
        return pts @ self.A.T + self.b


@dataclass
class VisibilityTable:
    landmark_ids: list
    image_ids: list
    mask: np.ndarray            # (L, N) bool
    tolerances: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)  # landmark ids off the mesh

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (len(self.landmark_ids), len(self.image_ids)):
            raise ValueError("mask shape does not match id lists")
        self._lrow = {lid: i for i, lid in enumerate(self.landmark_ids)}
        self._icol = {iid: j for j, iid in enumerate(self.image_ids)}

    def visible(self, landmark_id: int, image_id: int) -> bool:
        return bool(self.mask[self._lrow[landmark_id], self._icol[image_id]])

    def visible_images(self, landmark_id: int) -> list:
        row = self.mask[self._lrow[landmark_id]]
        return [iid for j, iid in enumerate(self.image_ids) if row[j]]

    def visible_landmarks(self, image_id: int) -> list:
        col = self.mask[:, self._icol[image_id]]
        return [lid for i, lid in enumerate(self.landmark_ids) if col[i]]


def _clip_near(poly: np.ndarray, znear: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-frame polygon against z >= znear."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        a_in, b_in = a[2] >= znear, b[2] >= znear
        if a_in:
            out.append(a)
        if a_in != b_in:
            s = (znear - a[2]) / (b[2] - a[2])
            out.append(a + s * (b - a))
    return np.array(out) if out else np.empty((0, 3))


def rasterize_depth(
    mesh: TriangleMesh,
    K: Intrinsics,
    T: Pose,
    decimation: int = 1,
    znear: float = 1e-6,
) -> DepthMap:
    """Z-buffer rasterization with perspective-correct depth.

    Triangles are clipped against the near plane in camera space, projected,
    and scan-converted with screen-space barycentric weights; depth at a pixel
    interpolates 1/z linearly as perspective requires. The per-pixel normal is
    the winning triangle's unit plane normal rotated into the camera frame.
    """
    W = -(-K.width // decimation)
    H = -(-K.height // decimation)
    fx, fy = K.fx / decimation, K.fy / decimation
    cx, cy = K.cx / decimation, K.cy / decimation

    depth = np.full((H, W), np.inf)
    normal = np.zeros((H, W, 3))

    cam_verts = T.apply(mesh.vertices)
    world_normals = mesh.face_normals()
    for k in range(len(mesh)):
        tri_cam = cam_verts[mesh.triangles[k]]
        if (tri_cam[:, 2] < znear).all():
            continue
        poly = _clip_near(tri_cam, znear) if (tri_cam[:, 2] < znear).any() else tri_cam
        if len(poly) < 3:
            continue
        n_cam = T.R @ world_normals[k]
        for j in range(1, len(poly) - 1):
            _raster_triangle(
                poly[0], poly[j], poly[j + 1], fx, fy, cx, cy, depth, normal, n_cam
            )
    return DepthMap(W, H, depth, normal, decimation)


def _raster_triangle(c0, c1, c2, fx, fy, cx, cy, depth, normal, n_cam):
    H, W = depth.shape
    zs = np.array([c0[2], c1[2], c2[2]])
    us = np.array([c0[0], c1[0], c2[0]]) / zs * fx + cx
    vs = np.array([c0[1], c1[1], c2[1]]) / zs * fy + cy

    area2 = (us[1] - us[0]) * (vs[2] - vs[0]) - (vs[1] - vs[0]) * (us[2] - us[0])
    if abs(area2) < 1e-12:
        return
    x0 = max(0, int(math.ceil(us.min() - 1e-9)))
    x1 = min(W - 1, int(math.floor(us.max() + 1e-9)))
    y0 = max(0, int(math.ceil(vs.min() - 1e-9)))
    y1 = min(H - 1, int(math.floor(vs.max() + 1e-9)))
    if x0 > x1 or y0 > y1:
        return

    px = np.arange(x0, x1 + 1)
    py = np.arange(y0, y1 + 1)
    PX, PY = np.meshgrid(px, py)

    def edge(ax, ay, bx, by):
        return (bx - ax) * (PY - ay) - (by - ay) * (PX - ax)

    l0 = edge(us[1], vs[1], us[2], vs[2]) / area2
    l1 = edge(us[2], vs[2], us[0], vs[0]) / area2
    l2 = edge(us[0], vs[0], us[1], vs[1]) / area2
    inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    if not inside.any():
        return
    inv_z = l0 / zs[0] + l1 / zs[1] + l2 / zs[2]
    with np.errstate(divide="ignore"):
        z = 1.0 / inv_z
    sub = depth[y0 : y1 + 1, x0 : x1 + 1]
    win = inside & (z > 0) & (z < sub)
    sub[win] = z[win]
    normal[y0 : y1 + 1, x0 : x1 + 1][win] = n_cam


def estimate_affine_alignment(
    src: np.ndarray,
    dst: np.ndarray,
    threshold: float,
    max_iter: int = 500,
    seed: int = 0,
):
    """RANSAC fit of dst ~ A @ src + b from 3D point matches.

    Minimal samples of 4 non-coplanar matches solve the 12-parameter linear
    system exactly; the consensus transform is re-fit by least squares on the
    best inlier set. Returns (AffineTransform, inlier mask).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise DegeneracyError("need at least 4 matches")
    if _coplanar(src):
        raise DegeneracyError("source points are coplanar")

    rng = np.random.default_rng(seed)
    design = np.hstack([src, np.ones((n, 1))])
    best_count = 0
    best_err = np.inf
    best_mask = None
    for _ in range(max_iter):
        sample = rng.choice(n, size=4, replace=False)
        if _coplanar(src[sample]):
            continue
        try:
            X = np.linalg.solve(design[sample], dst[sample])
        except np.linalg.LinAlgError:
            continue
        res = np.linalg.norm(design @ X - dst, axis=1)
        mask = res <= threshold
        count = int(mask.sum())
        err = float(res[mask].mean()) if count else np.inf
        if count > best_count or (count == best_count and err < best_err):
            best_count, best_err, best_mask = count, err, mask
            if count == n:
                break
    if best_mask is None or best_count < 4:
        raise RobustFitError("no affine model with >= 4 inliers")

    X, *_ = np.linalg.lstsq(design[best_mask], dst[best_mask], rcond=None)
    transform = AffineTransform(X[:3].T, X[3])
    res = np.linalg.norm(transform.apply(src) - dst, axis=1)
    return transform, res <= threshold


def _coplanar(pts: np.ndarray, tol: float = 1e-9) -> bool:
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    scale = s[0] if s[0] > 0 else 1.0
    return s[-1] / scale < tol


def filter_registration(
    model: SceneModel,
    residuals: dict,
    min_obs: int = 50,
    max_residual: float = 0.05,
):
    """Prune unstable points and badly registered images.

    residuals maps image id -> {point id: depth residual in meters}. Points
    observed in fewer than min_obs images are dropped first; an image is then
    dropped when its mean residual over the surviving points exceeds
    max_residual. Returns (retained image ids, retained point ids) as sets.
    """
    retained_points = {
        pid for pid, pt in model.points.items() if pt.track_length >= min_obs
    }
    retained_images = set()
    for iid in model.images:
        per_point = residuals.get(iid, {})
        vals = [r for pid, r in per_point.items() if pid in retained_points]
        if vals and float(np.mean(vals)) > max_residual:
            continue
        retained_images.add(iid)
    if not retained_images:
        raise EmptyResultError("registration filtering pruned every image")
    return retained_images, retained_points


def is_visible(
    p: np.ndarray,
    K: Intrinsics,
    T: Pose,
    dm: DepthMap,
    ref_normal: np.ndarray,
    cfg: VisibilityConfig = VisibilityConfig(),
) -> bool:
    """Occlusion test for a single landmark against a rasterized depth map.

    ref_normal is the landmark's world-frame reference surface normal,
    assigned at table-build time from the mesh.
    """
    uv, valid = project_many(K, T, np.asarray(p, dtype=np.float64)[None, :])
    if not valid[0]:
        return False
    z = float(T.apply(np.asarray(p, dtype=np.float64))[2])
    d, n_pix = dm.lookup(uv)
    tol = max(cfg.tol_depth, cfg.rel_frac * z)
    if not np.isfinite(d[0]) or abs(d[0] - z) > tol:
        return False
    ref_cam = T.R @ np.asarray(ref_normal, dtype=np.float64)
    cosang = float(np.dot(n_pix[0], ref_cam))
    cosang /= max(np.linalg.norm(n_pix[0]) * np.linalg.norm(ref_cam), 1e-12)
    return cosang >= math.cos(math.radians(cfg.tol_normal_deg))


def landmark_reference_normals(mesh: TriangleMesh, ls: LandmarkSet, max_dist: float):
    """World-frame mesh normal at each landmark's nearest surface point.

    Returns (normals (L,3), excluded landmark ids) where excluded landmarks
    sit farther than max_dist from the surface.
    """
    face_normals = mesh.face_normals()
    normals = np.zeros((len(ls), 3))
    excluded = []
    for i, lm in enumerate(ls):
        dist, _, tri = nearest_surface_point(mesh, lm.xyz)
        if dist > max_dist:
            excluded.append(lm.id)
        else:
            normals[i] = face_normals[tri]
    return normals, excluded


def compute_visibility(
    model: SceneModel,
    mesh: TriangleMesh,
    ls: LandmarkSet,
    cfg: VisibilityConfig = VisibilityConfig(),
) -> VisibilityTable:
    """Visibility of every landmark in every image of the model.

    Each image is rasterized once; all landmarks are then tested against the
    depth map in a vectorized pass. Landmarks farther than
    cfg.max_surface_dist from the mesh are excluded (all-false row) and
    reported in the table's diagnostics.
    """
    landmark_ids = [lm.id for lm in ls]
    image_ids = sorted(model.images)
    mask = np.zeros((len(ls), len(image_ids)), dtype=bool)
    if len(ls) == 0:
        return VisibilityTable(landmark_ids, image_ids, mask, cfg.as_dict(), [])

    ref_normals, excluded = landmark_reference_normals(mesh, ls, cfg.max_surface_dist)
    active = np.array([lm.id not in excluded for lm in ls])
    xyz = ls.xyz
    cos_tol = math.cos(math.radians(cfg.tol_normal_deg))

    for j, iid in enumerate(image_ids):
        img = model.images[iid]
        K = model.intrinsics[img.camera_id]
        T = img.pose
        dm = rasterize_depth(mesh, K, T, cfg.decimation)
        uv, valid = project_many(K, T, xyz)
        valid = valid & active
        if not valid.any():
            continue
        z = (xyz @ T.R.T + T.t)[:, 2]
        d, n_pix = dm.lookup(uv[valid])
        zv = z[valid]
        tol = np.maximum(cfg.tol_depth, cfg.rel_frac * zv)
        ok_depth = np.isfinite(d) & (np.abs(d - zv) <= tol)
        ref_cam = ref_normals[valid] @ T.R.T
        cosang = np.einsum("ij,ij->i", n_pix, ref_cam)
        ok_normal = cosang >= cos_tol
        mask[np.flatnonzero(valid), j] = ok_depth & ok_normal
    return VisibilityTable(landmark_ids, image_ids, mask, cfg.as_dict(), excluded)


def save_visibility(vt: VisibilityTable, path) -> None:
    """Header (dimensions, tolerances) + one line per landmark with its
    visible image ids."""
    with open(path, "w") as fh:
        fh.write(f"# visibility landmarks={len(vt.landmark_ids)} images={len(vt.image_ids)}\n")
        tol = " ".join(f"{k}={v}" for k, v in sorted(vt.tolerances.items()))
        fh.write(f"# tolerances {tol}\n")
        fh.write("# image_ids " + " ".join(str(i) for i in vt.image_ids) + "\n")
        if vt.excluded:
            fh.write("# excluded " + " ".join(str(i) for i in vt.excluded) + "\n")
        for i, lid in enumerate(vt.landmark_ids):
            vis = [str(vt.image_ids[j]) for j in np.flatnonzero(vt.mask[i])]
            fh.write(" ".join([str(lid)] + vis) + "\n")


def load_visibility(path) -> VisibilityTable:
    path = Path(path)
    image_ids = None
    tolerances = {}
    excluded = []
    rows = []
    with open(path, "r") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                tokens = line[1:].split()
                if not tokens:
                    continue
                if tokens[0] == "image_ids":
                    image_ids = [int(t) for t in tokens[1:]]
                elif tokens[0] == "tolerances":
                    for tok in tokens[1:]:
                        k, _, v = tok.partition("=")
                        try:
                            tolerances[k] = float(v)
                        except ValueError:
                            tolerances[k] = v
                elif tokens[0] == "excluded":
                    excluded = [int(t) for t in tokens[1:]]
                continue
            tokens = line.split()
            rows.append((int(tokens[0]), [int(t) for t in tokens[1:]]))
    if image_ids is None:
        raise MalformedFileError(path, 1, "missing image_ids header")
    landmark_ids = [lid for lid, _ in rows]
    col = {iid: j for j, iid in enumerate(image_ids)}
    mask = np.zeros((len(rows), len(image_ids)), dtype=bool)
    for i, (_, vis) in enumerate(rows):
        for iid in vis:
            if iid not in col:
                raise MalformedFileError(path, 0, f"unknown image id {iid} in row {i}")
            mask[i, col[iid]] = True
    return VisibilityTable(landmark_ids, image_ids, mask, tolerances, excluded)
