"""Synthetic body generation, projection/augmentation, streams, serialization."""

import numpy as np
import pytest

from crossmesh.config import AugmentConfig, DataSpec
from crossmesh.mesh_head import JointRegressor, regress_joints
from crossmesh.synth import (Articulation, OrthoCamera, PoseSample, apply_2d_augment,
                             draw_rotation, generate_synthetic_body, image_sample,
                             load_samples, make_dataset, make_sample, mocap_to_sample,
                             render_synthetic_image, rotation_matrix, sample_kinds,
                             save_samples)
from crossmesh.template import make_template, make_joint_regressor, make_keypoint_regressor


@pytest.fixture(scope="module")
def template():
    return make_template(coarse_count=8, full_count=40)


@pytest.fixture(scope="module")
def joint_w(template):
    return make_joint_regressor(template)


@pytest.fixture(scope="module")
def world(template, joint_w):
    from crossmesh.synth import SynthWorld

    return SynthWorld(template, joint_w, make_keypoint_regressor(template), (64, 64),
                      body_scale=18.0)


class TestBody:
    def test_zero_articulation_reproduces_template(self, template, joint_w):
        v, j = generate_synthetic_body(template, joint_w, articulation=Articulation.zero(),
                                       body_scale=18.0)
        np.testing.assert_allclose(v, template.full * 18.0, atol=1e-12)

    def test_same_seed_bitwise_identical(self, template, joint_w):
        a = generate_synthetic_body(template, joint_w, rng=np.random.default_rng(5))
        b = generate_synthetic_body(template, joint_w, rng=np.random.default_rng(5))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_joints_consistent_with_regressor(self, template, joint_w):
        v, j = generate_synthetic_body(template, joint_w, rng=np.random.default_rng(3))
        np.testing.assert_allclose(j, regress_joints(v, JointRegressor(joint_w)), atol=1e-12)


class TestRotation:
    def test_yaw_90_rotates_x_into_depth(self):
        r = rotation_matrix(0.0, 0.0, np.pi / 2.0)
        out = np.array([1.0, 0.0, 0.0]) @ r.T
        np.testing.assert_allclose(out[:2], [0.0, 0.0], atol=1e-12)

    def test_identity(self):
        np.testing.assert_allclose(rotation_matrix(0, 0, 0), np.eye(3), atol=1e-15)

    def test_proper_rotations(self, rng):
        for _ in range(20):
            angles = rng.uniform(-1, 1, size=3)
            r = rotation_matrix(*angles)
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)

    def test_draws_stay_within_ranges_over_1e5(self):
        aug = AugmentConfig()
        rng = np.random.default_rng(0)
        to_deg = 180.0 / np.pi
        for _ in range(100_000):
            roll, pitch, yaw = draw_rotation(rng, aug)
            assert -30.0 <= roll * to_deg <= 30.0
            assert -30.0 <= pitch * to_deg <= 30.0
            assert -60.0 <= yaw * to_deg <= 60.0


class TestMocapSamples:
    def _still(self):
        return AugmentConfig(roll_range=(0, 0), pitch_range=(0, 0), yaw_range=(0, 0),
                             shift_range=(0, 0), scale_range=(1, 1))

    def test_identity_augment_projects_keypoint_anchors(self, world, template, joint_w):
        v, j = generate_synthetic_body(template, joint_w, articulation=Articulation.zero(),
                                       body_scale=18.0)
        s = mocap_to_sample(v, j, world, self._still(), np.random.default_rng(0))
        np.testing.assert_allclose(s.joints_2d, j[:, :2], atol=1e-12)
        np.testing.assert_allclose(s.kp2d.coords, (world.keypoint_w @ v)[:, :2], atol=1e-12)
        np.testing.assert_array_equal(s.joints_3d, j)

    def test_yaw_90_sends_x_axis_point_to_origin(self, world, template, joint_w):
        aug = AugmentConfig(roll_range=(0, 0), pitch_range=(0, 0), yaw_range=(90, 90),
                            shift_range=(0, 0), scale_range=(1, 1))
        v, j = generate_synthetic_body(template, joint_w, articulation=Articulation.zero(),
                                       body_scale=18.0)
        s = mocap_to_sample(v, j, world, aug, np.random.default_rng(0))
        r = rotation_matrix(0, 0, np.pi / 2.0)
        np.testing.assert_allclose(s.joints_2d, (j @ r.T)[:, :2], atol=1e-10)

    def test_exact_shift_applied_to_every_keypoint(self):
        pts = np.random.default_rng(1).normal(size=(6, 2))
        out = apply_2d_augment(pts, 1.0, np.array([20.0, -20.0]))
        np.testing.assert_array_equal(out, pts + [20.0, -20.0])

    def test_augment_is_exactly_scale_then_shift(self, world, template, joint_w):
        aug = AugmentConfig(roll_range=(0, 0), pitch_range=(0, 0), yaw_range=(0, 0),
                            shift_range=(-20, 20), scale_range=(0.9, 1.1))
        v, j = generate_synthetic_body(template, joint_w, articulation=Articulation.zero(),
                                       body_scale=18.0)
        rng = np.random.default_rng(7)
        s = mocap_to_sample(v, j, world, aug, rng)
        # replay the draws: rotation first, then scale, then the two shifts
        rng2 = np.random.default_rng(7)
        draw_rotation(rng2, aug)
        scale = rng2.uniform(0.9, 1.1)
        shift = rng2.uniform(-20, 20, size=2)
        np.testing.assert_allclose(s.joints_2d, scale * j[:, :2] + shift, atol=1e-12)

    def test_mocap_never_carries_image(self, world):
        spec = DataSpec(counts={"mocap": 10}, seed=4, body_scale=18.0)
        for s in make_dataset(spec, world):
            assert s.image is None
            assert s.kp2d is not None and s.joints_3d is not None and s.vertices_3d is not None
            s.validate()

    def test_type_invariants_enforced(self):
        with pytest.raises(ValueError):
            PoseSample("mocap", 0, 0, image=np.zeros((4, 4, 3))).validate()
        with pytest.raises(ValueError):
            PoseSample("image_2d_only", 0, 0, image=np.zeros((4, 4, 3)),
                       joints_3d=np.zeros((3, 3))).validate()


class TestImages:
    def test_empty_body_pure_background(self):
        rng = np.random.default_rng(0)
        img = render_synthetic_image(np.zeros((0, 3)), OrthoCamera(1.0, (32, 32)), (64, 64), rng)
        rng2 = np.random.default_rng(0)
        bg = 0.06 * rng2.random((64, 64))
        np.testing.assert_allclose(img[:, :, 0], np.clip(bg, 0, 1) * 1.0, atol=1e-12)

    def test_deterministic_under_fixed_seed(self, world, template, joint_w):
        v, _ = generate_synthetic_body(template, joint_w, rng=np.random.default_rng(3))
        cam = OrthoCamera(1.0, world.center)
        a = render_synthetic_image(v, cam, (64, 64), np.random.default_rng(9))
        b = render_synthetic_image(v, cam, (64, 64), np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_foreground_mass_concentrates_in_bbox(self, world, template, joint_w):
        v, _ = generate_synthetic_body(template, joint_w, rng=np.random.default_rng(3),
                                       body_scale=18.0)
        cam = OrthoCamera(1.0, world.center)
        rng_img = np.random.default_rng(9)
        img = render_synthetic_image(v, cam, (64, 64), rng_img)
        bg = render_synthetic_image(np.zeros((0, 3)), cam, (64, 64), np.random.default_rng(9))
        fg = np.clip(img - bg, 0.0, None)[:, :, 0]
        pts = cam.project(v)
        x0, y0 = np.floor(pts.min(axis=0)).astype(int)
        x1, y1 = np.ceil(pts.max(axis=0)).astype(int)
        inside = fg[max(0, y0):y1 + 1, max(0, x0):x1 + 1].sum()
        assert inside >= 0.9 * fg.sum()

    def test_image_samples_have_annotations_inside(self, world):
        spec = DataSpec(counts={"image_3d": 6, "image_2d_only": 2}, seed=4, body_scale=18.0)
        for s in make_dataset(spec, world):
            assert s.image.shape == (64, 64, 3)
            assert (s.image >= 0).all() and (s.image <= 1).all()
            assert (s.kp2d.coords >= 0).all()
            assert (s.kp2d.coords[:, 0] < 64).all() and (s.kp2d.coords[:, 1] < 64).all()


class TestStreams:
    def test_counts_exact_and_interleaved(self):
        spec = DataSpec(counts={"image_3d": 4, "mocap": 8, "image_2d_only": 2}, seed=0)
        kinds = sample_kinds(spec)
        assert len(kinds) == 14
        assert kinds.count("image_3d") == 4 and kinds.count("mocap") == 8
        assert kinds.count("image_2d_only") == 2
        # proportional interleave: no type exhausts early
        first_half = kinds[:7]
        assert first_half.count("mocap") == 4

    def test_mocap_only_stream(self, world):
        spec = DataSpec(counts={"mocap": 10}, seed=1, body_scale=18.0)
        samples = make_dataset(spec, world)
        assert len(samples) == 10 and all(s.image is None for s in samples)

    def test_same_seed_identical_streams(self, world):
        spec = DataSpec(counts={"image_3d": 3, "mocap": 3}, seed=5, body_scale=18.0)
        a = make_dataset(spec, world)
        b = make_dataset(spec, world)
        for sa, sb in zip(a, b):
            assert sa.dataset_type == sb.dataset_type
            np.testing.assert_array_equal(sa.joints_3d, sb.joints_3d)
            if sa.image is not None:
                np.testing.assert_array_equal(sa.image, sb.image)

    def test_pure_function_of_index(self, world):
        spec = DataSpec(counts={"mocap": 5}, seed=9, body_scale=18.0)
        s3 = make_sample(spec, world, "mocap", 3)
        again = make_sample(spec, world, "mocap", 3)
        np.testing.assert_array_equal(s3.kp2d.coords, again.kp2d.coords)


class TestSerialization:
    def test_exact_roundtrip(self, world, tmp_path):
        spec = DataSpec(counts={"image_3d": 2, "mocap": 2, "image_2d_only": 1}, seed=2,
                        body_scale=18.0)
        samples = make_dataset(spec, world)
        path = str(tmp_path / "stream.xfs")
        save_samples(path, samples)
        loaded = load_samples(path)
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            assert a.dataset_type == b.dataset_type
            assert a.sequence_id == b.sequence_id and a.frame_id == b.frame_id
            for field in ("image", "joints_2d", "joints_3d", "vertices_3d"):
                fa, fb = getattr(a, field), getattr(b, field)
                assert (fa is None) == (fb is None)
                if fa is not None:
                    np.testing.assert_array_equal(fa, fb)
            np.testing.assert_array_equal(a.kp2d.coords, b.kp2d.coords)
            np.testing.assert_array_equal(a.kp2d.visibility, b.kp2d.visibility)

    def test_magic_header(self, world, tmp_path):
        path = str(tmp_path / "stream.xfs")
        save_samples(path, [])
        with open(path, "rb") as fh:
            assert fh.read(4) == b"XFS1"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.xfs"
        path.write_bytes(b"NOPE\x00\x00\x00\x00")
        with pytest.raises(ValueError, match="bad magic"):
            load_samples(str(path))
