import json

import numpy as np
import pytest

from meatkit.errors import DegenerateRotation, MeatkitError, NonPositiveDepth
from meatkit.geometry import (
    Camera,
    SimilarityTransform,
    camera_center,
    camera_from_lookat,
    harmonic_embed,
    load_rig,
    matrix_to_rot6d,
    normalize_to_ndc,
    pixel_ray,
    pixel_to_ndc,
    project_point,
    rot6d_to_matrix,
    save_rig,
)

from conftest import random_camera


class TestProjectPoint:
    def test_principal_point_ray(self, unit_camera):
        assert np.allclose(project_point(unit_camera, (0, 0, 2)), (512, 512))

    def test_off_axis(self, unit_camera):
        assert np.allclose(project_point(unit_camera, (0.2, 0, 2)), (612, 512))

    def test_behind_camera(self, unit_camera):
        with pytest.raises(NonPositiveDepth):
            project_point(unit_camera, (0, 0, -1))

    def test_no_clamping_out_of_image(self, unit_camera):
        pix = project_point(unit_camera, (10.0, 0, 2))
        assert pix[0] > 1024  # legal, handled downstream

    def test_ray_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            cam = random_camera(rng)
            pixel = rng.uniform([0, 0], [cam.width, cam.height])
            origin, direction = pixel_ray(cam, pixel)
            depth = rng.uniform(0.5, 10.0)
            back = project_point(cam, origin + depth * direction)
            assert np.abs(back - pixel).max() < 1e-6


class TestCameraCenter:
    def test_identity_rotation(self):
        cam = Camera(K=np.eye(3) + np.diag([99, 99, 0]), R=np.eye(3), T=[1, 2, 3], width=4, height=4)
        assert np.allclose(camera_center(cam), (-1, -2, -3))

    def test_rotated(self):
        r = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        cam = Camera(K=np.eye(3) + np.diag([99, 99, 0]), R=r, T=[1, 0, 0], width=4, height=4)
        assert np.allclose(camera_center(cam), (0, 1, 0))

    def test_zero_translation(self):
        cam = Camera(K=np.eye(3) + np.diag([99, 99, 0]), R=np.eye(3), T=[0, 0, 0], width=4, height=4)
        assert np.allclose(camera_center(cam), (0, 0, 0))


class TestRot6d:
    def test_identity(self):
        assert np.allclose(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))

    def test_scale_invariance(self):
        assert np.allclose(rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3))

    def test_parallel_inputs(self):
        with pytest.raises(DegenerateRotation):
            rot6d_to_matrix([1, 0, 0, 1, 0, 0])

    def test_zero_first_vector(self):
        with pytest.raises(DegenerateRotation):
            rot6d_to_matrix([0, 0, 0, 0, 1, 0])

    def test_orthonormal_on_random_inputs(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            v = rng.normal(0, 1, 6)
            m = rot6d_to_matrix(v)
            assert np.abs(m.T @ m - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(m) - 1.0) < 1e-9

    def test_round_trip_through_rot6d(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            m = rot6d_to_matrix(rng.normal(0, 1, 6))
            assert np.allclose(rot6d_to_matrix(matrix_to_rot6d(m)), m, atol=1e-12)


class TestHarmonicEmbed:
    def test_zeros(self):
        e = harmonic_embed((0, 0, 0), 4).values
        assert len(e) == 27
        assert np.allclose(e[:3], 0)
        sines = e[3::6], e[4::6], e[5::6]
        # layout is [v, sin, cos] per band: check sin blocks zero, cos blocks one
        for level in range(4):
            block = e[3 + 6 * level : 9 + 6 * level]
            assert np.allclose(block[:3], 0)
            assert np.allclose(block[3:], 1)

    def test_half_pi_single_band(self):
        e = harmonic_embed((np.pi / 2,), 1).values
        assert len(e) == 3
        assert np.allclose(e, [np.pi / 2, 1.0, np.cos(np.pi / 2)])

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    @pytest.mark.parametrize("bands", [1, 2, 3, 4, 5, 6, 7, 8])
    def test_length_formula(self, k, bands):
        rng = np.random.default_rng(k * 10 + bands)
        assert len(harmonic_embed(rng.normal(0, 2, k), bands)) == (2 * bands + 1) * k

    def test_bands_must_be_positive(self):
        with pytest.raises(MeatkitError):
            harmonic_embed((1.0,), 0)


class TestNdc:
    def test_principal_point_maps_to_origin(self, unit_camera):
        ndc = normalize_to_ndc(unit_camera)
        assert np.allclose(ndc.K[:2, 2], 0.0)

    def test_corners(self):
        assert np.allclose(pixel_to_ndc((1024, 1024), 1024, 1024), (1, 1))
        assert np.allclose(pixel_to_ndc((0, 0), 1024, 1024), (-1, -1))

    def test_projection_commutes(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            cam = random_camera(rng)
            ndc_cam = normalize_to_ndc(cam)
            for _ in range(50):
                p = rng.normal(0, 0.5, 3)
                try:
                    via_pixels = pixel_to_ndc(project_point(cam, p), cam.width, cam.height)
                except NonPositiveDepth:
                    continue
                direct = project_point(ndc_cam, p)
                denom = np.maximum(np.abs(via_pixels), 1e-300)
                assert (np.abs(direct - via_pixels) / denom).max() < 1e-12


class TestCameraValidation:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(MeatkitError):
            Camera(K=np.eye(3), R=np.eye(3) * 1.01, T=np.zeros(3), width=8, height=8)

    def test_rejects_lower_triangular_k(self):
        k = np.array([[100.0, 0, 4], [5.0, 100.0, 4], [0, 0, 1]])
        with pytest.raises(MeatkitError):
            Camera(K=k, R=np.eye(3), T=np.zeros(3), width=8, height=8)

    def test_rejects_negative_focal(self):
        k = np.array([[-100.0, 0, 4], [0, 100.0, 4], [0, 0, 1]])
        with pytest.raises(MeatkitError):
            Camera(K=k, R=np.eye(3), T=np.zeros(3), width=8, height=8)

    def test_rejects_zero_size(self, unit_camera):
        with pytest.raises(MeatkitError):
            Camera(K=unit_camera.K, R=unit_camera.R, T=unit_camera.T, width=0, height=8)

    def test_immutable(self, unit_camera):
        with pytest.raises(ValueError):
            unit_camera.K[0, 0] = 5.0


class TestSimilarityTransform:
    def test_identity(self):
        tf = SimilarityTransform.identity()
        pts = np.random.default_rng(0).normal(0, 1, (10, 3))
        assert np.allclose(tf.apply(pts), pts)

    def test_apply_matches_composition(self):
        rng = np.random.default_rng(5)
        tf = SimilarityTransform(
            scale=rng.uniform(0.5, 2, 3), rot6d=rng.normal(0, 1, 6), translation=rng.normal(0, 1, 3)
        )
        p = rng.normal(0, 1, 3)
        expected = tf.rotation() @ (tf.scale * p) + tf.translation
        assert np.allclose(tf.apply(p), expected)

    def test_vector_round_trip(self):
        rng = np.random.default_rng(6)
        tf = SimilarityTransform(
            scale=rng.uniform(0.5, 2, 3), rot6d=rng.normal(0, 1, 6), translation=rng.normal(0, 1, 3)
        )
        tf2 = SimilarityTransform.from_vector(tf.as_vector())
        assert np.allclose(tf2.as_vector(), tf.as_vector())

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(MeatkitError):
            SimilarityTransform(scale=(1, 0, 1), rot6d=(1, 0, 0, 0, 1, 0), translation=np.zeros(3))


class TestRigIo:
    def test_round_trip_sorted_by_id(self, tmp_path, unit_camera):
        cam2 = camera_from_lookat((0, 0, 3), (0, 0, 0), 0.9, 640, 480)
        path = tmp_path / "rig.json"
        save_rig(path, [7, 2], [unit_camera, cam2])
        ids, cams = load_rig(path)
        assert ids == [2, 7]
        assert cams[0].width == 640 and cams[1].width == 1024
        assert np.allclose(cams[1].K, unit_camera.K)

    def test_duplicate_ids_rejected(self, tmp_path, unit_camera):
        path = tmp_path / "rig.json"
        save_rig(path, [1, 1], [unit_camera, unit_camera])
        with pytest.raises(MeatkitError):
            load_rig(path)
