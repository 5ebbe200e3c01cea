"""Heatmap-based landmark detections: ground-truth rendering, peak extraction
with confidence pruning and 17x17 weighted-mean subpixel refinement, a
detector simulator for end-to-end testing, and ensemble merging.

Heatmaps live on a grid downsampled 8x from image pixels; detections are
reported in full-resolution pixel coordinates with a confidence in (0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DuplicateLandmarkError, MalformedFileError
from .landmarks import LandmarkSet
from .scene_model import Intrinsics, SceneModel, project
from .visibility import VisibilityTable

DOWNSAMPLE = 8
PRUNE_THRESHOLD = 0.3  # detections with peak value <= this are dropped
PATCH_HALF = 8         # 17x17 refinement patch


@dataclass
class Heatmap:
    landmark_id: int
    grid: np.ndarray             # (H/8, W/8) values in [0, 1]
    downsample: int = DOWNSAMPLE

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.min() < 0 or self.grid.max() > 1 + 1e-12:
            raise ValueError("heatmap values must lie in [0, 1]")


@dataclass(frozen=True)
class Detection:
    landmark_id: int
    uv: np.ndarray       # full-resolution pixel coordinates
    confidence: float    # peak heatmap value v in (0, 1]

    def __post_init__(self):
        object.__setattr__(self, "uv", np.asarray(self.uv, dtype=np.float64).reshape(2))
        if not (0 < self.confidence <= 1):
            raise ValueError("confidence must be in (0, 1]")


@dataclass
class DetectionSet:
    image_id: int
    detections: list = field(default_factory=list)

    def __post_init__(self):
        ids = [d.landmark_id for d in self.detections]
        if len(set(ids)) != len(ids):
            raise DuplicateLandmarkError(
                f"image {self.image_id} has duplicate landmark detections"
            )

    def __len__(self):
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)


def grid_shape(extent) -> tuple:
    """Heatmap grid dims for an image extent (Intrinsics or (width, height))."""
    if isinstance(extent, Intrinsics):
        w, h = extent.width, extent.height
    else:
        w, h = extent
    return (-(-h // DOWNSAMPLE), -(-w // DOWNSAMPLE))


def render_gt_heatmap(uv, extent, sigma: float = 1.5, landmark_id: int = 0) -> Heatmap:
    """Peak-normalized Gaussian heatmap around uv (full-res pixels).

    sigma is in low-resolution (grid) pixels. uv=None renders the all-zero
    heatmap used for landmarks that are not visible in the image.
    """
    h, w = grid_shape(extent)
    if uv is None:
        return Heatmap(landmark_id, np.zeros((h, w)))
    u, v = np.asarray(uv, dtype=np.float64)
    gu, gv = u / DOWNSAMPLE, v / DOWNSAMPLE
    cols = np.arange(w)
    rows = np.arange(h)
    d2 = (cols[None, :] - gu) ** 2 + (rows[:, None] - gv) ** 2
    return Heatmap(landmark_id, np.exp(-d2 / (2.0 * sigma * sigma)))


def extract_detection(hm: Heatmap):
    """Peak extraction with confidence pruning and subpixel refinement.

    The global argmax (ties resolved to the smallest row, then column) gives
    the peak value v; detections with v <= 0.3 are pruned. The subpixel
    location is the heatmap-weighted mean over the 17x17 patch centered at
    the peak, clipped at grid borders, mapped back to image pixels.
    """
    grid = hm.grid
    flat = int(np.argmax(grid))               # row-major: smallest row, then column
    r0, c0 = np.unravel_index(flat, grid.shape)
    v = float(grid[r0, c0])
    if v <= PRUNE_THRESHOLD:
        return None
    r_lo, r_hi = max(0, r0 - PATCH_HALF), min(grid.shape[0], r0 + PATCH_HALF + 1)
    c_lo, c_hi = max(0, c0 - PATCH_HALF), min(grid.shape[1], c0 + PATCH_HALF + 1)
    patch = grid[r_lo:r_hi, c_lo:c_hi]
    total = patch.sum()
    rows = np.arange(r_lo, r_hi, dtype=np.float64)
    cols = np.arange(c_lo, c_hi, dtype=np.float64)
    r_mean = float((patch.sum(axis=1) @ rows) / total)
    c_mean = float((patch.sum(axis=0) @ cols) / total)
    uv = np.array([c_mean, r_mean]) * hm.downsample
    return Detection(hm.landmark_id, uv, v)


def default_confidence(rng, is_outlier: bool, noise_norm: float, sigma: float) -> float:
    """Confidence coupled to noise magnitude.

    Inliers: v = clamp(1 - |noise| / (4 sigma), 0.31, 1); exactly 1 when the
    simulator runs noiseless. Outliers draw v ~ Uniform(0.31, 0.7).
    """
    if is_outlier:
        return float(rng.uniform(0.31, 0.7))
    if sigma <= 0:
        return 1.0
    return float(np.clip(1.0 - noise_norm / (4.0 * sigma), 0.31, 1.0))


def simulate_detections_labeled(
    model: SceneModel,
    ls: LandmarkSet,
    vt: VisibilityTable,
    noise_sigma_px: float = 1.0,
    outlier_rate: float = 0.0,
    confidence_model=None,
    seed: int = 0,
):
    """Stand-in detector: noisy projections of visible landmarks.

    For each visible (landmark, image) pair an outlier is emitted with
    probability outlier_rate at a uniform random in-image location; otherwise
    the true projection plus isotropic Gaussian noise. Per-image rng streams
    are derived as seed XOR image id so scheduling cannot change results.

    Returns (detections, outlier_ids): a dict image id -> DetectionSet and a
    dict image id -> set of landmark ids planted as outliers.
    """
    if not (0 <= outlier_rate <= 1):
        raise ValueError("outlier_rate must be in [0, 1]")
    if noise_sigma_px < 0:
        raise ValueError("noise_sigma_px must be >= 0")
    conf = confidence_model or default_confidence

    detections = {}
    outlier_ids = {}
    for iid in sorted(model.images):
        img = model.images[iid]
        K = model.intrinsics[img.camera_id]
        rng = np.random.default_rng(seed ^ iid)
        dets = []
        planted = set()
        for lm in ls:
            if not vt.visible(lm.id, iid):
                continue
            truth = project(K, img.pose, lm.xyz)
            if truth is None:
                continue
            if rng.random() < outlier_rate:
                uv = np.array(
                    [rng.uniform(0, K.width), rng.uniform(0, K.height)]
                )
                v = conf(rng, True, np.nan, noise_sigma_px)
                planted.add(lm.id)
            else:
                noise = rng.normal(0.0, noise_sigma_px, size=2) if noise_sigma_px > 0 else np.zeros(2)
                uv = truth + noise
                uv[0] = np.clip(uv[0], 0.0, np.nextafter(float(K.width), 0.0))
                uv[1] = np.clip(uv[1], 0.0, np.nextafter(float(K.height), 0.0))
                v = conf(rng, False, float(np.linalg.norm(noise)), noise_sigma_px)
            dets.append(Detection(lm.id, uv, v))
        detections[iid] = DetectionSet(iid, dets)
        outlier_ids[iid] = planted
    return detections, outlier_ids


def simulate_detections(
    model: SceneModel,
    ls: LandmarkSet,
    vt: VisibilityTable,
    noise_sigma_px: float = 1.0,
    outlier_rate: float = 0.0,
    confidence_model=None,
    seed: int = 0,
) -> dict:
    """simulate_detections_labeled without the outlier bookkeeping."""
    detections, _ = simulate_detections_labeled(
        model, ls, vt, noise_sigma_px, outlier_rate, confidence_model, seed
    )
    return detections


def merge_ensemble(sets: list, image_id: int | None = None) -> DetectionSet:
    """Union of per-partition detection sets for one image.

    Partitions are disjoint so landmark ids never collide; a collision means
    a broken partition and raises. Output is ordered by landmark id.
    """
    if not sets:
        raise ValueError("nothing to merge")
    if image_id is None:
        image_id = sets[0].image_id
    merged = {}
    for ds in sets:
        if ds.image_id != image_id:
            raise ValueError(
                f"cannot merge image {ds.image_id} into image {image_id}"
            )
        for det in ds:
            if det.landmark_id in merged:
                raise DuplicateLandmarkError(
                    f"landmark {det.landmark_id} appears in multiple partitions"
                )
            merged[det.landmark_id] = det
    return DetectionSet(image_id, [merged[k] for k in sorted(merged)])


CSV_HEADER = ["image_id", "landmark_id", "u", "v_coord", "confidence"]


def save_detections(detections: dict, path) -> None:
    """CSV of all detections, ordered by image id then landmark id."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for iid in sorted(detections):
            for det in sorted(detections[iid], key=lambda d: d.landmark_id):
                writer.writerow(
                    [
                        iid,
                        det.landmark_id,
                        format(det.uv[0], ".17g"),
                        format(det.uv[1], ".17g"),
                        format(det.confidence, ".17g"),
                    ]
                )


def load_detections(path) -> dict:
    path = Path(path)
    per_image = {}
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise MalformedFileError(path, 1, f"expected header {','.join(CSV_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise MalformedFileError(path, row_no, "expected 5 columns")
            try:
                iid = int(row[0])
                det = Detection(int(row[1]), np.array([float(row[2]), float(row[3])]),
                                float(row[4]))
            except ValueError as exc:
                raise MalformedFileError(path, row_no, str(exc)) from None
            per_image.setdefault(iid, []).append(det)
    return {iid: DetectionSet(iid, dets) for iid, dets in per_image.items()}
