import math

import numpy as np
import pytest

from mvcond.camera import (
    BoundsError,
    Intrinsics,
    PoleError,
    RelativePose,
    RigidTransform,
    SphericalPose,
    azimuth_gap,
    embed_relative,
    generate_rays,
    relative_pose,
    relative_transform,
    spherical_to_pose,
    transform_point,
)


def deg(theta, phi, r=1.5):
    return SphericalPose.from_degrees(theta, phi, r)


def random_pose(rng):
    return SphericalPose(rng.uniform(-1.4, 1.4), rng.uniform(0, 2 * math.pi), rng.uniform(1.2, 3.0))


class TestSphericalToPose:
    @pytest.mark.parametrize(
        "sp, center",
        [
            (SphericalPose(0.0, 0.0, 1.5), [1.5, 0.0, 0.0]),
            (SphericalPose(0.0, math.pi / 2, 2.0), [0.0, 2.0, 0.0]),
        ],
    )
    def test_centers(self, sp, center):
        np.testing.assert_allclose(spherical_to_pose(sp).center, center, atol=1e-12)

    def test_oblique_center_and_orthonormal(self):
        sp = SphericalPose(math.pi / 6, math.pi / 4, 1.5)
        pose = spherical_to_pose(sp)
        ct = math.cos(math.pi / 6)
        expected = [1.5 * ct * math.cos(math.pi / 4), 1.5 * ct * math.sin(math.pi / 4), 1.5 * 0.5]
        np.testing.assert_allclose(pose.center, expected, atol=1e-12)
        R = pose.rotation
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    def test_optical_axis_hits_origin(self, rng):
        for _ in range(20):
            pose = spherical_to_pose(random_pose(rng))
            origin_cam = pose.extrinsic.apply(np.zeros(3))
            # origin sits on the +z axis of the camera
            np.testing.assert_allclose(origin_cam[:2], 0.0, atol=1e-12)
            assert origin_cam[2] > 0

    def test_up_is_image_up(self):
        pose = spherical_to_pose(SphericalPose(0.0, 0.0, 2.0))
        # world +z projects to negative image y (rows grow downward)
        assert (pose.rotation @ np.array([0.0, 0.0, 1.0]))[1] < 0

    @pytest.mark.parametrize("theta", [math.pi / 2, -math.pi / 2, 2.0])
    def test_pole_rejected(self, theta):
        with pytest.raises(PoleError):
            SphericalPose(theta, 0.0, 1.0)

    def test_radius_must_be_positive(self):
        with pytest.raises(ValueError):
            SphericalPose(0.0, 0.0, 0.0)

    def test_phi_wrapped(self):
        assert SphericalPose(0.0, -math.pi / 2, 1.0).phi == pytest.approx(1.5 * math.pi)
        assert 0.0 <= SphericalPose(0.0, 2 * math.pi, 1.0).phi < 2 * math.pi


class TestRelativePose:
    def test_identical(self):
        rp = relative_pose(deg(30, 10), deg(30, 10))
        assert (rp.d_theta, rp.d_phi, rp.d_radius) == (0.0, 0.0, 0.0)

    def test_quarter_turn(self):
        rp = relative_pose(deg(30, 10), deg(30, 100))
        assert rp.d_theta == pytest.approx(0.0)
        assert rp.d_phi == pytest.approx(math.pi / 2)
        assert rp.d_radius == 0.0

    def test_wraps_across_zero(self):
        rp = relative_pose(deg(0, 350), deg(0, 10))
        assert math.degrees(rp.d_phi) == pytest.approx(20.0)


class TestEmbedRelative:
    @pytest.mark.parametrize(
        "rp, expected",
        [
            (RelativePose(0.0, 0.0, 0.0), [0, 0, 1, 0]),
            (RelativePose(0.0, math.pi / 2, 0.0), [0, 1, 0, 0]),
            (RelativePose(math.pi / 6, math.pi, 0.5), [math.pi / 6, 0, -1, 0.5]),
        ],
    )
    def test_values(self, rp, expected):
        np.testing.assert_allclose(embed_relative(rp), expected, atol=1e-12)

    def test_unit_circle_and_periodicity(self, rng):
        for _ in range(100):
            d_phi = rng.uniform(-10, 10)
            v = embed_relative(RelativePose(0.1, d_phi, 0.0))
            assert v[1] ** 2 + v[2] ** 2 == pytest.approx(1.0, abs=1e-12)
            np.testing.assert_allclose(v, embed_relative(RelativePose(0.1, d_phi + 2 * math.pi, 0.0)), atol=1e-9)


class TestRelativeTransform:
    def test_self_is_identity(self, rng):
        pose = spherical_to_pose(random_pose(rng))
        T = relative_transform(pose, pose)
        np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(T.translation, 0.0, atol=1e-12)

    def test_inverse_pair(self, rng):
        for _ in range(50):
            a, b = spherical_to_pose(random_pose(rng)), spherical_to_pose(random_pose(rng))
            T = relative_transform(a, b).compose(relative_transform(b, a))
            np.testing.assert_allclose(T.matrix(), np.eye(4), atol=1e-9)

    def test_matches_homogeneous_matrices(self):
        t = spherical_to_pose(deg(0, 0, 2.0))
        i = spherical_to_pose(deg(0, 90, 2.0))
        origin_t = t.extrinsic.apply(np.zeros(3))
        # independent oracle: 4x4 products
        M = i.extrinsic.matrix() @ np.linalg.inv(t.extrinsic.matrix())
        expected = (M @ np.append(origin_t, 1.0))[:3]
        np.testing.assert_allclose(transform_point(relative_transform(t, i), origin_t), expected, atol=1e-12)
        # and the world origin lands where camera i sees it
        np.testing.assert_allclose(expected, [0.0, 0.0, 2.0], atol=1e-12)


class TestTransformPoint:
    def test_identity(self):
        p = np.array([0.3, -1.0, 2.0])
        np.testing.assert_array_equal(transform_point(RigidTransform.identity(), p), p)

    def test_translation(self):
        T = RigidTransform(np.eye(3), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(transform_point(T, np.zeros(3)), [1.0, 2.0, 3.0])

    def test_quarter_turn_about_z(self):
        Rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(transform_point(RigidTransform(Rz, np.zeros(3)), [1.0, 0.0, 0.0]), [0, 1, 0], atol=1e-15)


class TestAzimuthGap:
    @pytest.mark.parametrize("a, b, gap", [(40, 40, 0), (350, 10, 20), (0, 180, 180), (10, 350, 20)])
    def test_values(self, a, b, gap):
        assert math.degrees(azimuth_gap(deg(0, a), deg(0, b))) == pytest.approx(gap)

    def test_symmetric_and_bounded(self, rng):
        for _ in range(200):
            a, b = random_pose(rng), random_pose(rng)
            g = azimuth_gap(a, b)
            assert 0.0 <= g <= math.pi
            assert g == pytest.approx(azimuth_gap(b, a), abs=1e-12)


class TestGenerateRays:
    def test_center_ray_through_origin(self, rng):
        # an odd latent grid has a pixel centred exactly on the principal point
        for _ in range(10):
            pose = spherical_to_pose(random_pose(rng), resolution=63)
            rays = generate_rays(pose, 0.5, 5.0, 9)
            o, d = rays.origins[40], rays.directions[40]
            closest = o - np.dot(o, d) * d
            np.testing.assert_allclose(closest, 0.0, atol=1e-9)

    def test_unit_directions(self, rng):
        rays = generate_rays(spherical_to_pose(random_pose(rng)), 1.0, 3.0, 16)
        np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-12)
        assert rays.num_rays == 256

    def test_corner_matches_pinhole(self):
        res = 16
        pose = spherical_to_pose(deg(10, 30, 2.2), resolution=64)
        rays = generate_rays(pose, 1.2, 3.2, res)
        intr = Intrinsics.from_fov(res)
        f = (res / 2) / math.tan(math.radians(20))
        assert intr.focal == pytest.approx(f)
        u, v = 0.5, 0.5
        d_cam = np.array([(u - res / 2) / f, (v - res / 2) / f, 1.0])
        d_cam /= np.linalg.norm(d_cam)
        np.testing.assert_allclose(rays.directions[0], pose.rotation.T @ d_cam, atol=1e-12)

    def test_bounds(self):
        pose = spherical_to_pose(deg(0, 0, 2.0))
        with pytest.raises(BoundsError):
            generate_rays(pose, 3.0, 1.0, 4)
        with pytest.raises(ValueError):
            generate_rays(pose, 1.0, 3.0, 0)

    def test_depths_stratified(self, rng):
        rays = generate_rays(spherical_to_pose(deg(0, 0, 2.0)), 1.0, 3.0, 4, samples_per_ray=8)
        mid = rays.depths()
        np.testing.assert_allclose(mid[0], 1.0 + (np.arange(8) + 0.5) * 0.25)
        jit = rays.depths(rng)
        edges = np.linspace(1.0, 3.0, 9)
        assert np.all(jit >= edges[:-1]) and np.all(jit <= edges[1:])
