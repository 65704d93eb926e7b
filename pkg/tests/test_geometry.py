import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rvk.geometry import (BoundingBox, CameraIntrinsics, backproject, distance_from_extent,
                          geometric_clue, project, velocity_closed_form)

CAM = CameraIntrinsics(1000.0, 1000.0, 640.0, 360.0, 1280, 720)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1000.0, 640.0, 360.0, 1280, 720)
    with pytest.raises(ValueError):
        CameraIntrinsics(1000.0, 1000.0, 1280.0, 360.0, 1280, 720)
    assert CameraIntrinsics.from_dict(CAM.to_dict()) == CAM


def test_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(10, 0, 10, 5)
    with pytest.raises(ValueError):
        BoundingBox(0, 5, 10, 4)


def test_project_examples():
    np.testing.assert_allclose(project(CAM, (0, 0, 12.0)), [640, 360])
    np.testing.assert_allclose(project(CAM, (1, 0.5, 10)), [740, 410])
    with pytest.raises(ValueError):
        project(CAM, (1, 1, 0))
    with pytest.raises(ValueError):
        project(CAM, (1, 1, -2))


def test_backproject_examples():
    np.testing.assert_allclose(backproject(CAM, (640, 360), 7.0), [0, 0, 7])
    assert backproject(CAM, (740, 360), 10.0)[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        backproject(CAM, (0, 0), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-20, 20), st.floats(0.5, 200))
def test_project_backproject_inverse(x, y, z):
    p = np.array([x, y, z])
    np.testing.assert_allclose(backproject(CAM, project(CAM, p), z), p, rtol=0, atol=1e-12 * max(1, z))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1280), st.floats(0, 720), st.floats(0.5, 200))
def test_backproject_project_inverse(u, v, d):
    np.testing.assert_allclose(project(CAM, backproject(CAM, (u, v), d)), [u, v], atol=1e-9)


def test_distance_from_extent():
    assert distance_from_extent(1000.0, 1.5, 100.0) == pytest.approx(15.0)
    assert distance_from_extent(1000.0, 1.5, 200.0) == pytest.approx(7.5)
    for bad in (0.0, -3.0):
        with pytest.raises(ValueError):
            distance_from_extent(1000.0, 1.5, bad)


def test_geometric_clue_example():
    g = geometric_clue(CAM, BoundingBox(600, 300, 700, 400))
    np.testing.assert_allclose(g, [10, 10, -0.04, -0.06, 0.06, 0.04], atol=1e-15)


def test_geometric_clue_symmetry():
    g = geometric_clue(CAM, BoundingBox(640 - 37, 360 - 11, 640 + 37, 360 + 11))
    assert g[2] == pytest.approx(-g[4])
    assert g[3] == pytest.approx(-g[5])


@given(st.floats(5, 400), st.floats(5, 300), st.floats(1.1, 4.0))
def test_geometric_clue_inverse_size(w, h, k):
    g1 = geometric_clue(CAM, BoundingBox(100, 100, 100 + w, 100 + h))
    g2 = geometric_clue(CAM, BoundingBox(100, 100, 100 + k * w, 100 + k * h))
    np.testing.assert_allclose(g1[:2] / g2[:2], [k, k], rtol=1e-9)


def test_velocity_examples():
    np.testing.assert_array_equal(velocity_closed_form(CAM, 20, 20, (700, 400), (700, 400), 0.05),
                                  [0, 0, 0])
    np.testing.assert_allclose(velocity_closed_form(CAM, 20, 21, (640, 360), (640, 360), 0.05),
                               [0, 0, -20], atol=1e-12)
    with pytest.raises(ValueError):
        velocity_closed_form(CAM, 20, 21, (640, 360), (640, 360), 0.0)


@given(st.floats(1, 100), st.floats(1, 100), st.floats(0.01, 1.0))
def test_velocity_z_component_exact(d, d_prev, dt):
    v = velocity_closed_form(CAM, d, d_prev, (300, 200), (900, 500), dt)
    assert v[2] == (d - d_prev) / dt
