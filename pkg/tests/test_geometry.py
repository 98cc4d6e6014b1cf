from __future__ import annotations

import numpy as np
import pytest

from roadfusion.errors import InputError
from roadfusion.geometry import (
    CameraCalibration,
    DegenerateInput,
    GridSpec,
    OutOfGrid,
    Plane,
    Point3,
    RejectedBehindCamera,
    back_project,
    fit_plane_least_squares,
    grid_index,
    grid_indices,
    project_point,
    project_points,
    read_calibration,
    write_calibration,
)


def identity_calib(width=640, height=480) -> CameraCalibration:
    return CameraCalibration(
        f=1.0, dx=1.0, dy=1.0, u0=0.0, v0=0.0,
        rotation=np.eye(3), translation=np.zeros(3),
        image_width=width, image_height=height,
    )


def random_calib(rng: np.random.Generator) -> CameraCalibration:
    # random rotation via QR of a gaussian matrix, fixed to det +1
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return CameraCalibration(
        f=rng.uniform(0.002, 0.05),
        dx=rng.uniform(1e-6, 1e-5),
        dy=rng.uniform(1e-6, 1e-5),
        u0=rng.uniform(100, 900),
        v0=rng.uniform(100, 700),
        rotation=q,
        translation=rng.normal(scale=5.0, size=3),
        image_width=1920, image_height=1080,
    )


class TestProjectPoint:
    def test_optical_axis_point_maps_to_principal_point(self):
        pix, zc = project_point(Point3(0, 0, 5), identity_calib())
        assert (pix.u, pix.v) == (0.0, 0.0)
        assert zc == 5.0

    def test_off_axis_point(self):
        # independent hand calculation: u = x/z, v = y/z for unit intrinsics
        pix, _ = project_point(Point3(1, 2, 5), identity_calib())
        assert pix.u == pytest.approx(0.2, abs=1e-15)
        assert pix.v == pytest.approx(0.4, abs=1e-15)

    def test_point_behind_camera_rejected(self):
        with pytest.raises(RejectedBehindCamera):
            project_point(Point3(0, 0, -1), identity_calib())

    def test_zero_depth_rejected(self):
        with pytest.raises(RejectedBehindCamera):
            project_point(Point3(1, 1, 0), identity_calib())

    def test_round_trip_recovers_world_point(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            calib = random_calib(rng)
            xyz = rng.normal(scale=10.0, size=(20, 3))
            uv, zc = project_points(xyz, calib)
            ok = zc > 1e-3
            if not ok.any():
                continue
            rec = back_project(uv[ok], zc[ok], calib)
            assert np.max(np.abs(rec - xyz[ok])) < 1e-9

    def test_scalar_and_vector_paths_agree(self):
        rng = np.random.default_rng(5)
        calib = random_calib(rng)
        pts = rng.normal(scale=8.0, size=(100, 3))
        uv, zc = project_points(pts, calib)
        for i in range(len(pts)):
            if zc[i] <= 1e-6:
                with pytest.raises(RejectedBehindCamera):
                    project_point(pts[i], calib)
            else:
                pix, z = project_point(pts[i], calib)
                assert pix.u == pytest.approx(uv[i, 0], rel=1e-11, abs=1e-9)
                assert pix.v == pytest.approx(uv[i, 1], rel=1e-11, abs=1e-9)
                assert z == pytest.approx(zc[i], rel=1e-11, abs=1e-9)


class TestCalibrationValidation:
    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(InputError):
            CameraCalibration(f=1, dx=1, dy=1, u0=0, v0=0,
                              rotation=np.eye(3) * 1.01, translation=np.zeros(3),
                              image_width=10, image_height=10)

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(InputError):
            CameraCalibration(f=1, dx=1, dy=1, u0=0, v0=0,
                              rotation=r, translation=np.zeros(3),
                              image_width=10, image_height=10)

    def test_rejects_bad_scalars(self):
        for bad in ({"f": -1}, {"dx": 0}, {"image_width": 0}):
            kwargs = dict(f=1.0, dx=1.0, dy=1.0, u0=0.0, v0=0.0,
                          rotation=np.eye(3), translation=np.zeros(3),
                          image_width=10, image_height=10)
            kwargs.update(bad)
            with pytest.raises(InputError):
                CameraCalibration(**kwargs)

    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        calib = random_calib(rng)
        path = tmp_path / "calib.json"
        write_calibration(calib, path)
        loaded = read_calibration(path)
        assert np.allclose(loaded.rotation, calib.rotation)
        assert np.allclose(loaded.translation, calib.translation)
        assert loaded.f == calib.f
        assert loaded.image_width == calib.image_width


class TestGridIndex:
    def test_first_cell(self):
        spec = GridSpec(0.0, 0.0, 0.01, 0.01, 100, 100)
        assert grid_index(Point3(0.005, 0.005, 0), spec) == (0, 0)

    def test_boundary_goes_to_upper_cell(self):
        spec = GridSpec(0.0, 0.0, 0.01, 0.01, 100, 100)
        assert grid_index(Point3(0.01, 0.0, 0), spec)[0] == 1

    def test_negative_origin(self):
        # brute-force scan of cell boundaries: x=0.3 with x_min=-1, cell=0.5
        # falls in [0.0, 0.5) which is the third cell
        spec = GridSpec(-1.0, -1.0, 0.5, 0.5, 10, 10)
        assert grid_index(Point3(0.3, -1.0 + 0.25, 0), spec) == (2, 0)

    def test_out_of_grid_raises(self):
        spec = GridSpec(0.0, 0.0, 1.0, 1.0, 4, 4)
        for p in ((-0.1, 0), (0, -0.1), (4.0, 0), (0, 4.0)):
            with pytest.raises(OutOfGrid):
                grid_index(Point3(p[0], p[1], 0), spec)

    def test_translation_consistency(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            cell = rng.uniform(0.01, 2.0)
            x_min, y_min = rng.uniform(-50, 50, size=2)
            spec = GridSpec(x_min, y_min, cell, cell, 50, 50)
            x = x_min + rng.uniform(0, 49) * cell
            y = y_min + rng.uniform(0, 49) * cell
            base = grid_index(Point3(x, y, 0), spec)
            shift = rng.uniform(-100, 100)
            spec2 = GridSpec(x_min + shift, y_min + shift, cell, cell, 50, 50)
            assert grid_index(Point3(x + shift, y + shift, 0), spec2) == base

    def test_membership_invariant(self):
        rng = np.random.default_rng(4)
        spec = GridSpec(-3.0, 2.0, 0.25, 0.75, 40, 20)
        xy = np.column_stack([
            rng.uniform(-3, -3 + 40 * 0.25, 500),
            rng.uniform(2, 2 + 20 * 0.75, 500),
        ])
        xi, yi, inside = grid_indices(xy, spec)
        for j in np.flatnonzero(inside):
            assert spec.x_min + xi[j] * spec.cell_size_x <= xy[j, 0]
            assert xy[j, 0] < spec.x_min + (xi[j] + 1) * spec.cell_size_x + 1e-12
            assert spec.y_min + yi[j] * spec.cell_size_y <= xy[j, 1]
            assert xy[j, 1] < spec.y_min + (yi[j] + 1) * spec.cell_size_y + 1e-12

    def test_vector_scalar_agreement(self):
        rng = np.random.default_rng(8)
        spec = GridSpec(-1.0, -1.0, 0.1, 0.2, 30, 15)
        xy = rng.uniform(-2, 3, size=(300, 2))
        xi, yi, inside = grid_indices(xy, spec)
        for j in range(len(xy)):
            if inside[j]:
                assert grid_index((xy[j, 0], xy[j, 1], 0.0), spec) == (xi[j], yi[j])
            else:
                with pytest.raises(OutOfGrid):
                    grid_index((xy[j, 0], xy[j, 1], 0.0), spec)


class TestFitPlane:
    def test_exact_horizontal_plane(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(-5, 5, (50, 2)), np.zeros(50)])
        plane = fit_plane_least_squares(pts)
        assert np.allclose(plane.normal, [0, 0, 1], atol=1e-12)
        assert plane.d == pytest.approx(0.0, abs=1e-12)

    def test_offset_plane(self):
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.uniform(-5, 5, (50, 2)), np.full(50, 2.0)])
        plane = fit_plane_least_squares(pts)
        assert np.allclose(plane.normal, [0, 0, 1], atol=1e-12)
        assert plane.d == pytest.approx(-2.0, abs=1e-9)

    def test_noisy_tilted_plane_close_to_eigen_oracle(self):
        # plane z = 0.5 x, sigma = 0.001; compare to the closed-form normal
        rng = np.random.default_rng(42)
        xy = rng.uniform(-5, 5, (2000, 2))
        z = 0.5 * xy[:, 0] + rng.normal(0, 0.001, 2000)
        pts = np.column_stack([xy, z])
        plane = fit_plane_least_squares(pts)
        expected = np.array([-0.5, 0.0, 1.0])
        expected /= np.linalg.norm(expected)
        angle = np.degrees(np.arccos(np.clip(abs(plane.normal @ expected), -1, 1)))
        assert angle < 0.1

    def test_too_few_points(self):
        with pytest.raises(DegenerateInput):
            fit_plane_least_squares(np.array([[0, 0, 0], [1, 1, 1]]))

    def test_collinear_points(self):
        pts = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateInput):
            fit_plane_least_squares(pts)

    def test_rotation_invariance_as_geometric_plane(self):
        rng = np.random.default_rng(9)
        xy = rng.uniform(-3, 3, (200, 2))
        pts = np.column_stack([xy, 0.3 * xy[:, 0] - 0.1 * xy[:, 1] + 1.0])
        base = fit_plane_least_squares(pts)
        for _ in range(10):
            q, r = np.linalg.qr(rng.normal(size=(3, 3)))
            q = q @ np.diag(np.sign(np.diag(r)))
            if np.linalg.det(q) < 0:
                q[:, 0] = -q[:, 0]
            rotated = fit_plane_least_squares(pts @ q.T)
            # the rotated fit must describe the rotated plane
            n_expected = q @ base.normal
            assert min(np.linalg.norm(rotated.normal - n_expected),
                       np.linalg.norm(rotated.normal + n_expected)) < 1e-6
            # offset is preserved up to normal sign
            assert abs(abs(rotated.d) - abs(base.d)) < 1e-6

    def test_normal_orientation_is_deterministic(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
        p1 = fit_plane_least_squares(pts)
        p2 = fit_plane_least_squares(pts[::-1])
        assert np.allclose(p1.normal, p2.normal)
        assert p1.normal[2] > 0


class TestPlane:
    def test_distance(self):
        plane = Plane(normal=np.array([0.0, 0.0, 2.0]), d=-1.0)
        # normal normalised on construction
        assert np.allclose(plane.normal, [0, 0, 1])
        assert plane.signed_distance(np.array([[0, 0, 3.0]]))[0] == pytest.approx(2.0)
        assert plane.distance(np.array([[0, 0, -1.0]]))[0] == pytest.approx(2.0)
