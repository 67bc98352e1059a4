import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from triground.geometry import (CameraView, OrientedBox9, PointCloud, box_corners, iou9, look_at, project,
                                ray_box_depth, unproject)

# plain Monte Carlo, 10^7 uniform samples (seed 20261015): unit cube vs the same cube turned 45 deg about z
MC_IOU_45 = 0.7072150

angles = st.floats(-math.pi, math.pi, allow_nan=False)


def camera(R=np.eye(3), t=np.zeros(3), f=16.0, size=32, depth=None):
    if depth is None:
        return CameraView(f, f, 16.0, 16.0, R, t, width=size, height=size)
    return CameraView(f, f, 16.0, 16.0, R, t, depth=depth)


def random_pose(rng):
    eye = rng.uniform(-3, 3, 3) + np.array([0, 0, 4.0])
    return look_at(eye, rng.uniform(-0.5, 0.5, 3))


def rx(a):
    return np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])


def ry(a):
    return np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])


def rz(a):
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])


class TestCamera:
    def test_optical_axis_unprojects_to_axis(self):
        depth = np.zeros((33, 33))
        depth[16, 16] = 2.0
        pc = unproject(camera(depth=depth))
        np.testing.assert_allclose(pc.positions, [[0, 0, 2]])

    def test_project_on_axis(self):
        p = project(np.array([[0.0, 0, 2]]), camera())
        assert (p.u[0], p.v[0], bool(p.visible[0])) == (16.0, 16.0, True)

    def test_behind_camera_invisible(self):
        assert not project(np.array([[0.0, 0, -1]]), camera()).visible[0]

    def test_out_of_bounds_invisible(self):
        assert not project(np.array([[10.0, 0, 1]]), camera()).visible[0]

    def test_unproject_matches_scalar_path(self, rng):
        R, t = random_pose(rng)
        depth = np.zeros((32, 32))
        pix = rng.choice(32 * 32, 16, replace=False)
        depth.flat[pix] = rng.uniform(0.5, 5, 16)
        pc = unproject(camera(R, t, depth=depth))
        ref = []
        for v in range(32):
            for u in range(32):
                d = depth[v, u]
                if d > 0:
                    cam = [(u - 16.0) / 16.0 * d, (v - 16.0) / 16.0 * d, d]
                    ref.append([sum(R[k][i] * (cam[k] - t[k]) for k in range(3)) for i in range(3)])
        np.testing.assert_allclose(pc.positions, ref, atol=1e-12)

    def test_project_matches_scalar_oracle(self, rng):
        for _ in range(100):
            R, t = random_pose(rng)
            cam = camera(R, t)
            x = rng.uniform(-1, 1, 3)
            p = project(x[None], cam)
            c = [sum(R[i][k] * x[k] for k in range(3)) + t[i] for i in range(3)]
            vis = c[2] > cam.near and -0.5 <= 16 * c[0] / c[2] + 16 < 31.5 and -0.5 <= 16 * c[1] / c[2] + 16 < 31.5
            assert bool(p.visible[0]) == vis
            if vis:
                assert abs(p.u[0] - (16 * c[0] / c[2] + 16)) <= 1e-5
                assert abs(p.v[0] - (16 * c[1] / c[2] + 16)) <= 1e-5

    @given(st.integers(0, 2 ** 31))
    def test_round_trip(self, seed):
        r = np.random.default_rng(seed)
        R, t = random_pose(r)
        depth = np.where(r.uniform(size=(32, 32)) < 0.3, r.uniform(0.3, 6, (32, 32)), 0.0)
        cam = camera(R, t, depth=depth)
        pc = unproject(cam)
        p = project(pc, cam)
        vs, us = np.nonzero(depth > 0)
        assert p.visible.all()
        np.testing.assert_allclose(p.u, us, atol=1e-5)
        np.testing.assert_allclose(p.v, vs, atol=1e-5)

    def test_stride_validation(self):
        with pytest.raises(ValueError):
            unproject(camera(depth=np.ones((4, 4))), stride=0)

    def test_non_finite_cloud_rejected(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0, np.nan, 0]]))


class TestBoxes:
    def test_unit_cube_corners(self):
        c = box_corners(OrientedBox9(np.zeros(3), np.ones(3)))
        assert sorted(map(tuple, c)) == sorted((x, y, z) for x in (-.5, .5) for y in (-.5, .5) for z in (-.5, .5))

    def test_full_turn_periodic(self):
        a = box_corners(OrientedBox9(np.ones(3), (1, 2, 3), (2 * math.pi, 0, 0)))
        b = box_corners(OrientedBox9(np.ones(3), (1, 2, 3)))
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_corners_match_explicit_matrices(self, rng):
        for _ in range(10):
            center, size, ang = rng.normal(size=3), rng.uniform(0.2, 2, 3), rng.uniform(-3, 3, 3)
            R = rz(ang[0]) @ rx(ang[1]) @ ry(ang[2])
            box = OrientedBox9(center, size, ang)
            ref = [center + R @ (np.array(s) * size / 2) for s in
                   [(x, y, z) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]]
            np.testing.assert_allclose(box_corners(box), ref, atol=1e-12)

    @given(angles, angles, angles, st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0.1, 3))
    def test_edge_lengths(self, a, b, c, l, w, h):
        cs = box_corners(OrientedBox9(np.zeros(3), (l, w, h), (a, b, c)))
        # corners 0/4, 0/2, 0/1 differ in exactly one local axis
        for j, size in ((4, l), (2, w), (1, h)):
            assert np.linalg.norm(cs[j] - cs[0]) == pytest.approx(size, abs=1e-6)

    def test_nonpositive_size_rejected(self):
        with pytest.raises(ValueError):
            OrientedBox9(np.zeros(3), (1, 0, 1))


class TestIoU:
    def test_identical(self):
        b = OrientedBox9((0.3, 0.1, 0.2), (1, 2, 0.5), (0.4, 0.1, 0))
        assert iou9(b, b) == 1.0

    def test_axis_aligned_offset(self):
        a = OrientedBox9(np.zeros(3), np.ones(3))
        b = OrientedBox9((0.5, 0, 0), np.ones(3))
        assert iou9(a, b) == 1 / 3

    def test_rotated_against_monte_carlo(self):
        a = OrientedBox9(np.zeros(3), np.ones(3))
        b = OrientedBox9(np.zeros(3), np.ones(3), (math.pi / 4, 0, 0))
        assert abs(iou9(a, b) - MC_IOU_45) <= 0.02

    def test_rotated_against_analytic(self):
        # the overlap is a regular octagon prism of area 2(sqrt 2 - 1)
        a = OrientedBox9(np.zeros(3), np.ones(3))
        b = OrientedBox9(np.zeros(3), np.ones(3), (math.pi / 4, 0, 0))
        inter = 2 * (math.sqrt(2) - 1)
        assert abs(iou9(a, b) - inter / (2 - inter)) <= 0.01

    def test_too_few_samples(self):
        a = OrientedBox9(np.zeros(3), np.ones(3), (0.1, 0, 0))
        with pytest.raises(ValueError):
            iou9(a, a, samples=100)

    @given(st.floats(-1, 1), st.floats(-1, 1), angles, angles, st.floats(0.3, 2), st.floats(0.3, 2))
    def test_symmetric_and_bounded(self, dx, dy, ya, yb, sa, sb):
        a = OrientedBox9((0, 0, 0), (sa, 1, 0.7), (ya, 0.1, 0))
        b = OrientedBox9((dx, dy, 0.1), (1, sb, 0.9), (yb, 0, -0.1))
        v = iou9(a, b)
        assert 0.0 <= v <= 1.0
        assert abs(v - iou9(b, a)) <= 0.01

    @given(st.floats(1.1, 5), angles)
    def test_disjoint(self, gap, yaw):
        a = OrientedBox9((0, 0, 0), np.ones(3), (yaw, 0, 0))
        b = OrientedBox9((gap + 0.8, 0, 0), (0.5, 0.5, 0.5), (0, 0.3, 0))
        assert iou9(a, b) == 0.0

    @given(angles, st.floats(-2, 2), st.floats(-2, 2))
    def test_rigid_yaw_invariance(self, yaw, tx, ty):
        a = OrientedBox9((0.1, 0.2, 0), (1, 0.8, 0.6), (0.3, 0, 0))
        b = OrientedBox9((0.4, 0.0, 0.1), (0.9, 1.1, 0.5), (-0.2, 0, 0))
        before = iou9(a, b)
        Rz, shift = rz(yaw), np.array([tx, ty, 0.0])
        a2 = OrientedBox9(Rz @ a.center + shift, a.size, a.rotation + (yaw, 0, 0))
        b2 = OrientedBox9(Rz @ b.center + shift, b.size, b.rotation + (yaw, 0, 0))
        assert abs(iou9(a2, b2) - before) <= 0.02


class TestRayBox:
    def test_unrotated_face_distance(self):
        box = OrientedBox9((0, 0, 0), (1, 2, 1))
        t, n = ray_box_depth(np.array([0.0, 0, -3]), np.array([[0.0, 0, 1]]), box)
        assert t[0] == pytest.approx(2.5)
        np.testing.assert_allclose(n[0], [0, 0, -1])

    def test_miss(self):
        box = OrientedBox9((0, 0, 0), (1, 1, 1))
        t, _ = ray_box_depth(np.array([3.0, 0, -3]), np.array([[0.0, 0, 1]]), box)
        assert np.isinf(t[0])
