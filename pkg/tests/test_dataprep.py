import numpy as np
import pytest

from meatkit.dataprep import (
    CropSpec,
    apply_crop_to_intrinsics,
    compute_crop,
    load_keypoints,
    project_keypoints,
    render_keypoint_image,
    save_keypoints,
)
from meatkit.errors import MeatkitError, NonPositiveDepth, ZeroExtent
from meatkit.geometry import Camera, project_point
from meatkit.synthetic import HUMAN_BONES, human_keypoints

from conftest import random_camera


class TestComputeCrop:
    def test_radius_is_1p3_times_max_dy(self, unit_camera):
        pelvis = (0, 0, 2)
        kp = [(0.1, 0.2, 2.0), (0, -0.05, 2.0)]  # dy = 100 px and 25 px
        crop = compute_crop(unit_camera, kp, pelvis, 512)
        assert np.allclose(crop.center, (512, 512))
        assert crop.radius == pytest.approx(130.0, abs=1e-12)

    def test_center_is_projected_pelvis(self, unit_camera):
        pelvis = (0.376, -0.224, 2.0)
        crop = compute_crop(unit_camera, [(0.3, 0.1, 2.0)], pelvis, 256)
        assert np.allclose(crop.center, project_point(unit_camera, pelvis))

    def test_zero_extent(self, unit_camera):
        with pytest.raises(ZeroExtent):
            compute_crop(unit_camera, [(0.4, 0.0, 2.0), (-0.2, 0.0, 2.0)], (0, 0, 2), 256)

    def test_behind_camera_propagates(self, unit_camera):
        with pytest.raises(NonPositiveDepth):
            compute_crop(unit_camera, [(0, 0.1, 2.0)], (0, 0, -2), 256)

    def test_keypoint_order_invariance(self, unit_camera):
        rng = np.random.default_rng(2)
        kp = rng.normal(0, 0.3, (12, 3)) + (0, 0, 2)
        a = compute_crop(unit_camera, kp, (0, 0, 2), 256)
        b = compute_crop(unit_camera, kp[::-1], (0, 0, 2), 256)
        assert a.radius == b.radius

    def test_radius_scales_linearly(self, unit_camera):
        kp = np.array([(0.0, 0.1, 2.0), (0.0, -0.07, 2.0)])
        a = compute_crop(unit_camera, kp, (0, 0, 2), 256)
        kp2 = kp.copy()
        kp2[:, 1] *= 2.0
        b = compute_crop(unit_camera, kp2, (0, 0, 2), 256)
        assert b.radius == pytest.approx(2.0 * a.radius, rel=1e-12)


class TestApplyCrop:
    def test_pelvis_lands_on_center(self, unit_camera):
        pelvis = (0.21, -0.17, 2.0)
        crop = compute_crop(unit_camera, [(0.2, 0.23, 2.1)], pelvis, 512)
        adjusted = apply_crop_to_intrinsics(unit_camera, crop)
        assert np.abs(project_point(adjusted, pelvis) - (256, 256)).max() < 1e-9
        assert adjusted.width == adjusted.height == 512

    def test_identity_crop_keeps_intrinsics(self, unit_camera):
        crop = CropSpec(view=0, center=(512, 512), radius=512, output_size=1024)
        adjusted = apply_crop_to_intrinsics(unit_camera, crop)
        assert np.allclose(adjusted.K, unit_camera.K)

    def test_projection_commutes_with_crop(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            cam = random_camera(rng)
            crop = CropSpec(
                view=0,
                center=rng.uniform([100, 100], [cam.width - 100, cam.height - 100]),
                radius=float(rng.uniform(40, 300)),
                output_size=int(rng.integers(64, 1024)),
            )
            adjusted = apply_crop_to_intrinsics(cam, crop)
            scale = crop.output_size / (2 * crop.radius)
            origin = crop.center - crop.radius
            for _ in range(50):
                p = rng.normal(0, 1.0, 3)
                try:
                    direct = project_point(adjusted, p)
                except MeatkitError:
                    continue
                expected = (project_point(cam, p) - origin) * scale
                denom = np.maximum(np.abs(expected), 1.0)
                assert (np.abs(direct - expected) / denom).max() < 1e-9


class TestProjectKeypoints:
    def test_behind_camera_invisible(self, unit_camera):
        coords, visible = project_keypoints([unit_camera], [(0, 0, 2.0), (0, 0, -2.0)])
        assert visible[0, 0] and not visible[0, 1]
        assert np.isnan(coords[0, 1]).all()

    def test_out_of_image_invisible(self, unit_camera):
        coords, visible = project_keypoints([unit_camera], [(50.0, 0, 2.0)])
        assert not visible[0, 0]

    def test_shape(self, unit_camera):
        rng = np.random.default_rng(4)
        cams = [unit_camera, random_camera(rng)]
        kp = rng.normal(0, 0.3, (17, 3))
        coords, visible = project_keypoints(cams, kp)
        assert coords.shape == (2, 17, 2) and visible.shape == (2, 17)

    def test_cropped_pelvis_at_center_visible(self, unit_camera):
        pelvis = (0.1, -0.1, 2.0)
        crop = compute_crop(unit_camera, [(0.1, 0.25, 2.0)], pelvis, 512)
        adjusted = apply_crop_to_intrinsics(unit_camera, crop)
        coords, visible = project_keypoints([adjusted], [pelvis])
        assert visible[0, 0]
        assert np.abs(coords[0, 0] - (256, 256)).max() < 1e-9


class TestRenderKeypointImage:
    def test_disc_painted_with_joint_color(self):
        img = render_keypoint_image([(32.0, 32.0)], [True], 64, 64)
        assert img.shape == (3, 64, 64)
        assert img[:, 32, 32].any()
        # disc radius 4: pixel at distance 6 stays black
        assert not img[:, 32, 39].any()

    def test_invisible_joint_skipped(self):
        img = render_keypoint_image([(32.0, 32.0)], [False], 64, 64)
        assert not img.any()

    def test_bones_drawn_between_visible_joints(self):
        img = render_keypoint_image([(8.0, 32.0), (56.0, 32.0)], [True, True], 64, 64, bones=[(0, 1)])
        assert img[:, 32, 30].any()  # midpoint on the bone
        img2 = render_keypoint_image([(8.0, 32.0), (56.0, 32.0)], [True, False], 64, 64, bones=[(0, 1)])
        assert not img2[:, 32, 30].any()

    def test_full_skeleton_smoke(self, unit_camera):
        joints, _, _ = human_keypoints()
        coords, visible = project_keypoints([unit_camera], joints + (0, 0, 2))
        img = render_keypoint_image(coords[0], visible[0], 1024, 1024, bones=HUMAN_BONES)
        assert img.max() <= 1.0 and (img > 0).any()


class TestKeypointsIo:
    def test_round_trip(self, tmp_path):
        joints, pelvis_idx, names = human_keypoints()
        path = tmp_path / "kp.json"
        save_keypoints(path, joints, pelvis_idx, names)
        j2, p2, n2 = load_keypoints(path)
        assert np.allclose(j2, joints) and p2 == pelvis_idx and n2 == names

    def test_bad_pelvis_index(self, tmp_path):
        path = tmp_path / "kp.json"
        save_keypoints(path, np.zeros((3, 3)), 5)
        with pytest.raises(MeatkitError):
            load_keypoints(path)
