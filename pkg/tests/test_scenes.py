"""Camera math, dataset round trips and synthetic scene generation."""

import json

import numpy as np
import pytest

from voxelmark.cameras import Camera, InvalidCamera, camera_rays, look_at
from voxelmark.field import RenderSettings
from voxelmark.scenes import (Box, DatasetError, SceneDataset, Sphere,
                              SyntheticSceneSpec, bilinear_resize,
                              generate_synthetic_scene, load_dataset,
                              load_payload_image, make_test_payload,
                              save_dataset)
from voxelmark.storage import write_png


class TestCameraRays:
    def test_center_pixel_down_minus_z(self):
        # odd dimensions put one pixel center exactly on the optical axis
        cam = Camera(3, 3, 0.8, np.eye(4))
        _, dirs = camera_rays(cam)
        np.testing.assert_allclose(dirs[1, 1], [0.0, 0.0, -1.0], atol=1e-15)

    def test_unit_norm(self):
        cam = Camera(8, 6, 1.1, look_at((2.0, 1.0, 0.5), (0.0, 0.0, 0.0)))
        _, dirs = camera_rays(cam)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0,
                                   atol=1e-12)

    def test_corner_angle_matches_fov(self):
        w = 32
        fov = 0.9
        cam = Camera(w, w, fov, np.eye(4))
        _, dirs = camera_rays(cam)
        # horizontal angle of the corner pixel center vs half field of view
        d = dirs[w // 2, -1]
        angle = np.arctan2(d[0], -d[2])
        pitch = fov / w
        assert abs(angle - fov / 2.0) <= pitch

    def test_origins_at_camera_position(self):
        pose = look_at((1.0, 2.0, 3.0), (0.0, 0.0, 0.0))
        cam = Camera(4, 4, 0.7, pose)
        origins, _ = camera_rays(cam)
        np.testing.assert_allclose(origins, np.broadcast_to([1.0, 2.0, 3.0],
                                                            (4, 4, 3)))


class TestCameraValidation:
    def test_rejects_non_orthonormal(self):
        pose = np.eye(4)
        pose[0, 0] = 1.5
        with pytest.raises(InvalidCamera, match="orthonormal"):
            Camera(4, 4, 0.8, pose)

    def test_rejects_improper_rotation(self):
        pose = np.eye(4)
        pose[0, 0] = -1.0     # reflection: determinant -1
        with pytest.raises(InvalidCamera, match="improper"):
            Camera(4, 4, 0.8, pose)

    def test_rejects_bad_fov(self):
        with pytest.raises(InvalidCamera):
            Camera(4, 4, 4.0, np.eye(4))

    def test_look_at_is_valid_pose(self):
        pose = look_at((2.0, -1.0, 0.5), (0.1, 0.2, 0.0))
        r = pose[:3, :3]
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) > 0
        # camera -z axis points from eye toward target
        fwd = -r[:, 2]
        expect = np.array([0.1, 0.2, 0.0]) - np.array([2.0, -1.0, 0.5])
        np.testing.assert_allclose(fwd, expect / np.linalg.norm(expect),
                                   atol=1e-12)


def small_spec(seed=7, **overrides):
    kwargs = dict(
        primitives=[Sphere((0.0, 0.0, 0.0), 0.5, 8.0, (0.8, 0.2, 0.1))],
        resolution=(16, 16, 16), n_train_views=8, n_test_views=2,
        image_size=16, seed=seed,
        render=RenderSettings(n_samples=24, t_near=1.2, t_far=5.2,
                              background=(1.0, 1.0, 1.0)))
    kwargs.update(overrides)
    return SyntheticSceneSpec(**kwargs)


class TestSyntheticScene:
    def test_red_sphere_visible_from_all_views(self):
        _, train, _ = generate_synthetic_scene(small_spec())
        for _, img in train.frames:
            non_bg = np.any(np.abs(img - 1.0) > 0.05, axis=0)
            assert non_bg.any()
            # red channel dominates where the sphere is
            assert img[0][non_bg].mean() > img[2][non_bg].mean()
            bg = ~non_bg
            np.testing.assert_allclose(img[:, bg], 1.0, atol=0.05)

    def test_deterministic(self):
        spec = small_spec()
        g1, tr1, te1 = generate_synthetic_scene(spec)
        g2, tr2, te2 = generate_synthetic_scene(small_spec())
        np.testing.assert_array_equal(g1.sigma_raw, g2.sigma_raw)
        for (c1, i1), (c2, i2) in zip(tr1.frames + te1.frames,
                                      tr2.frames + te2.frames):
            np.testing.assert_array_equal(i1, i2)
            np.testing.assert_array_equal(c1.pose, c2.pose)

    def test_half_bbox_sphere_coverage(self):
        spec = small_spec(primitives=[
            Sphere((0.0, 0.0, 0.0), 1.0, 10.0, (0.8, 0.2, 0.1))],
            image_size=64, n_train_views=2, n_test_views=2)
        _, train, _ = generate_synthetic_scene(spec)
        img = train.images[0]
        frac = float(np.mean(np.any(np.abs(img - 1.0) > 0.05, axis=0)))
        assert 0.1 < frac < 0.9

    def test_box_primitive_and_hemisphere(self):
        spec = small_spec(primitives=[
            Box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), 9.0, (0.1, 0.7, 0.2))],
            layout="hemisphere")
        _, train, _ = generate_synthetic_scene(spec)
        img = train.images[0]
        assert np.any(np.abs(img - 1.0) > 0.05)

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="primitive"):
            SyntheticSceneSpec(primitives=[])


class TestDatasetRoundTrip:
    def test_save_load(self, tmp_path):
        _, train, _ = generate_synthetic_scene(small_spec())
        save_dataset(tmp_path / "scene", train)
        loaded = load_dataset(tmp_path / "scene")
        assert len(loaded) == len(train)
        for (c1, i1), (c2, i2) in zip(train.frames, loaded.frames):
            np.testing.assert_array_equal(c1.pose, c2.pose)   # poses exact
            assert np.max(np.abs(i1 - i2)) <= 1.0 / 510.0 + 1e-12

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            load_dataset(tmp_path)

    def test_empty_dataset_errors(self, tmp_path):
        (tmp_path / "manifest.json").write_text(
            json.dumps({"fov_x": 0.8, "frames": []}))
        with pytest.raises(DatasetError, match="empty dataset"):
            load_dataset(tmp_path)
        with pytest.raises(DatasetError, match="empty"):
            SceneDataset([])

    def test_missing_image_file(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps(
            {"fov_x": 0.8,
             "frames": [{"file": "nope.png",
                         "transform": np.eye(4).tolist()}]}))
        with pytest.raises(DatasetError, match="missing image"):
            load_dataset(tmp_path)

    def test_improper_rotation_rejected(self, tmp_path):
        bad = np.eye(4)
        bad[0, 0] = -1.0
        write_png(tmp_path / "f.png", np.zeros((3, 8, 8)))
        (tmp_path / "manifest.json").write_text(json.dumps(
            {"fov_x": 0.8,
             "frames": [{"file": "f.png", "transform": bad.tolist()}]}))
        with pytest.raises(DatasetError, match="improper"):
            load_dataset(tmp_path)

    def test_malformed_json(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(DatasetError, match="malformed"):
            load_dataset(tmp_path)


class TestPayloads:
    def test_make_test_payload_palette(self):
        img = make_test_payload(32)
        levels = np.unique(np.round(img * 255).astype(int))
        assert set(levels.tolist()) <= {0, 64, 128, 192, 255 // 64 * 64}
        assert img.shape == (3, 32, 32)

    def test_bilinear_resize_constant(self):
        img = np.full((3, 8, 8), 0.4)
        out = bilinear_resize(img, 16, 16)
        np.testing.assert_allclose(out, 0.4, atol=1e-12)

    def test_bilinear_resize_identity(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(3, 9, 7))
        np.testing.assert_allclose(bilinear_resize(img, 9, 7), img,
                                   atol=1e-12)

    def test_load_payload_resizes(self, tmp_path):
        img = make_test_payload(32)
        write_png(tmp_path / "p.png", img)
        out = load_payload_image(tmp_path / "p.png", 16, 16)
        assert out.shape == (3, 16, 16)
        assert out.min() >= 0.0 and out.max() <= 1.0
