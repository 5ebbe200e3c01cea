import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRotation

from landmarkloc.detection import Detection, DetectionSet
from landmarkloc.errors import InvalidRotationError
from landmarkloc.evaluation import (
    PoseErrors,
    RunRecord,
    build_report,
    detection_angular_error,
    per_image_csv,
    per_image_errors,
    position_error,
    recall_at,
    report_from_csv,
    report_to_csv,
    report_to_text,
    rotation_error,
)
from landmarkloc.landmarks import Landmark, LandmarkSet
from landmarkloc.pose import PoseEstimate
from landmarkloc.scene_model import ImageRecord, Pose, SceneModel, project

from conftest import make_intrinsics, random_rotation


def axis_rotation(axis, deg):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return ScipyRotation.from_rotvec(axis * math.radians(deg)).as_matrix()


class TestRotationError:
    def test_identical(self):
        # arccos near argument 1 has a ~1e-6 deg resolution floor in doubles.
        R = random_rotation(np.random.default_rng(80))
        assert rotation_error(R, R) < 1e-5

    def test_ten_degree_rotation(self):
        rng = np.random.default_rng(81)
        for _ in range(20):
            R = random_rotation(rng)
            axis = rng.normal(size=3)
            R_hat = axis_rotation(axis, 10.0) @ R
            assert abs(rotation_error(R, R_hat) - 10.0) < 1e-9

    def test_quaternion_geodesic_oracle(self):
        rng = np.random.default_rng(82)
        for _ in range(10_000):
            R = random_rotation(rng)
            R_hat = random_rotation(rng)
            got = rotation_error(R, R_hat)
            qa = ScipyRotation.from_matrix(R).as_quat()
            qb = ScipyRotation.from_matrix(R_hat).as_quat()
            expected = math.degrees(2.0 * math.acos(min(1.0, abs(float(np.dot(qa, qb))))))
            assert abs(got - expected) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(83)
        for _ in range(100):
            R, R_hat = random_rotation(rng), random_rotation(rng)
            assert abs(rotation_error(R, R_hat) - rotation_error(R_hat, R)) < 1e-12

    def test_left_invariance(self):
        rng = np.random.default_rng(84)
        for _ in range(100):
            R, R_hat, Q = (random_rotation(rng) for _ in range(3))
            assert abs(
                rotation_error(Q @ R, Q @ R_hat) - rotation_error(R, R_hat)
            ) < 1e-8

    def test_non_rotation_rejected(self):
        with pytest.raises(InvalidRotationError):
            rotation_error(np.eye(3) * 1.01, np.eye(3))
        with pytest.raises(InvalidRotationError):
            rotation_error(np.diag([1.0, 1.0, -1.0]), np.eye(3))

    def test_clamping_at_zero(self):
        # A rotation pair whose trace argument drifts just above 1.
        R = random_rotation(np.random.default_rng(85))
        R_hat = R @ axis_rotation([0, 0, 1], 1e-9)
        err = rotation_error(R, R_hat)
        assert 0.0 <= err < 1e-6


class TestPositionError:
    def test_identical(self):
        T = Pose(np.eye(3), np.array([1.0, 2.0, 3.0]))
        assert position_error(T, T) == 0.0

    def test_unit_offset(self):
        a = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        b = Pose(np.eye(3), np.zeros(3))
        assert abs(position_error(a, b) - 1.0) < 1e-15

    def test_camera_center_oracle(self):
        rng = np.random.default_rng(86)
        for _ in range(500):
            Ra, Rb = random_rotation(rng), random_rotation(rng)
            ta, tb = rng.normal(size=3), rng.normal(size=3)
            got = position_error(Pose(Ra, ta), Pose(Rb, tb))
            expected = np.linalg.norm((-Ra.T @ ta) - (-Rb.T @ tb))
            assert abs(got - expected) < 1e-12

    def test_metric_properties(self):
        rng = np.random.default_rng(87)
        for _ in range(100):
            poses = [Pose(random_rotation(rng), rng.normal(size=3)) for _ in range(3)]
            d01 = position_error(poses[0], poses[1])
            d10 = position_error(poses[1], poses[0])
            d02 = position_error(poses[0], poses[2])
            d12 = position_error(poses[1], poses[2])
            assert abs(d01 - d10) < 1e-12
            assert d02 <= d01 + d12 + 1e-12


class TestRecall:
    def test_all_exact(self):
        errs = [PoseErrors(0.0, 0.0)] * 5
        assert recall_at(errs) == 1.0

    def test_one_of_three_passes(self):
        errs = [PoseErrors(1.0, 0.01), PoseErrors(10.0, 0.01), PoseErrors(1.0, 0.10)]
        assert abs(recall_at(errs, 5.0, 0.05) - 1 / 3) < 1e-15

    def test_failures_count_as_misses(self):
        errs = [PoseErrors(0.0, 0.0), None, None, None]
        assert recall_at(errs) == 0.25

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            recall_at([])

    def test_monotone_in_thresholds(self):
        rng = np.random.default_rng(88)
        errs = [PoseErrors(rng.uniform(0, 10), rng.uniform(0, 0.1)) for _ in range(200)]
        grid = [(2.0, 0.02), (5.0, 0.05), (10.0, 0.10)]
        vals = [recall_at(errs, r, t) for r, t in grid]
        assert vals[0] <= vals[1] <= vals[2]

    def test_monte_carlo_closed_form(self):
        # dR ~ U(0, 10), dt ~ U(0, 0.10) independent: recall@5/0.05 = 0.25.
        rng = np.random.default_rng(89)
        n = 500
        errs = [PoseErrors(rng.uniform(0, 10), rng.uniform(0, 0.10)) for _ in range(n)]
        got = recall_at(errs, 5.0, 0.05)
        p = 0.25
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(got - p) < 3 * sigma


class TestDetectionAngularError:
    def test_exact_detection_zero(self):
        K = make_intrinsics()
        T = Pose(np.eye(3), np.zeros(3))
        p = np.array([0.3, -0.2, 2.0])
        uv = project(K, T, p)
        det = Detection(0, uv, 1.0)
        assert detection_angular_error(det, T, K, p) < 1e-9

    def test_offset_by_focal_is_45_degrees(self):
        K = make_intrinsics(f=100.0, c=50.0)
        T = Pose(np.eye(3), np.zeros(3))
        p = np.array([0.0, 0.0, 3.0])  # projects to the principal point
        det = Detection(0, np.array([150.0, 50.0]), 1.0)
        assert abs(detection_angular_error(det, T, K, p) - 45.0) < 1e-9

    def test_behind_camera_raises(self):
        K = make_intrinsics()
        T = Pose(np.eye(3), np.zeros(3))
        det = Detection(0, np.array([50.0, 50.0]), 1.0)
        with pytest.raises(ValueError):
            detection_angular_error(det, T, K, np.array([0.0, 0.0, -2.0]))

    def test_median_matches_recomputation(self):
        rng = np.random.default_rng(90)
        K = make_intrinsics(f=200.0, c=50.0)
        T = Pose(random_rotation(rng), rng.normal(size=3))
        angles_direct = []
        dets = []
        pts = []
        n = 0
        while n < 200:
            p = T.inverse().apply(
                np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(1, 4)])
            )
            uv = project(K, T, p)
            if uv is None:
                continue
            uv_noisy = uv + rng.normal(0, 1.0, 2)
            dets.append(Detection(n, uv_noisy, 0.9))
            pts.append(p)
            n += 1
        for det, p in zip(dets, pts):
            angles_direct.append(detection_angular_error(det, T, K, p))
        # Independent recomputation via explicit ray trigonometry.
        recomputed = []
        for det, p in zip(dets, pts):
            ray = np.array(
                [(det.uv[0] - K.cx) / K.fx, (det.uv[1] - K.cy) / K.fy, 1.0]
            )
            ray /= np.linalg.norm(ray)
            cam = T.apply(p)
            cam /= np.linalg.norm(cam)
            recomputed.append(
                math.degrees(math.acos(np.clip(np.dot(ray, cam), -1, 1)))
            )
        assert abs(np.median(angles_direct) - np.median(recomputed)) < 1e-9


def small_gt_model(n_images=4):
    K = make_intrinsics()
    rng = np.random.default_rng(91)
    images = {
        i: ImageRecord(i, Pose(random_rotation(rng), rng.normal(size=3)), 1, f"{i}.png")
        for i in range(n_images)
    }
    return SceneModel({1: K}, images, {})


class TestReport:
    def test_exact_run_has_full_recall(self):
        model = small_gt_model()
        estimates = {
            iid: PoseEstimate(img.pose, frozenset({1}), 1, 0.0, "ok")
            for iid, img in model.images.items()
        }
        report = build_report([RunRecord("exact", estimates, model)])
        assert report.rows[0].recall == 1.0
        assert report.rows[0].n_ok == 4
        assert report.rows[0].median_rot_deg < 1e-9

    def test_mismatched_images_raise(self):
        model = small_gt_model()
        estimates = {99: PoseEstimate(None, frozenset(), 0, float("nan"), "no_consensus")}
        with pytest.raises(ValueError):
            per_image_errors(estimates, model)

    def test_csv_roundtrip_identical(self):
        model = small_gt_model()
        estimates = {
            iid: PoseEstimate(img.pose, frozenset(), 1, 0.1, "ok")
            for iid, img in model.images.items()
        }
        estimates[0] = PoseEstimate(None, frozenset(), 2, float("nan"), "no_consensus")
        report = build_report([RunRecord("run-a", estimates, model)])
        text = report_to_csv(report)
        again = report_to_csv(report_from_csv(text))
        assert text == again

    def test_text_table_lists_rows(self):
        model = small_gt_model()
        estimates = {
            iid: PoseEstimate(img.pose, frozenset(), 1, 0.1, "ok")
            for iid, img in model.images.items()
        }
        report = build_report(
            [RunRecord("a", estimates, model), RunRecord("b", estimates, model)]
        )
        text = report_to_text(report)
        assert "a" in text and "b" in text
        assert len(text.splitlines()) == 4

    def test_per_image_csv(self):
        model = small_gt_model(2)
        estimates = {
            0: PoseEstimate(model.images[0].pose, frozenset(), 1, 0.0, "ok"),
            1: PoseEstimate(None, frozenset(), 1, float("nan"), "insufficient"),
        }
        text = per_image_csv(estimates, model)
        lines = text.splitlines()
        assert lines[0] == "image_id,rot_err_deg,pos_err_m,status"
        assert lines[1].startswith("0,") and lines[1].endswith(",ok")
        assert lines[2] == "1,nan,nan,insufficient"

    def test_angular_error_column(self):
        model = small_gt_model(1)
        K = model.intrinsics[1]
        T = model.images[0].pose
        p_world = T.inverse().apply(np.array([0.0, 0.0, 2.0]))
        ls = LandmarkSet([Landmark(0, 0, p_world, 1.0)])
        uv = project(K, T, p_world)
        dets = {0: DetectionSet(0, [Detection(0, uv, 1.0)])}
        estimates = {0: PoseEstimate(T, frozenset(), 1, 0.0, "ok")}
        report = build_report(
            [RunRecord("run", estimates, model, detections=dets, landmarks=ls)]
        )
        assert report.rows[0].median_angular_deg < 1e-9
