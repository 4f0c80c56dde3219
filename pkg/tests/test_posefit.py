import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from totemcheck.geomcore import PinholeCamera
from totemcheck.posefit import (
    BBox, TotemMask, golden_section, init_totem_pose, iou_loss, iou_loss_center_grad,
    predicted_bbox, trace_boundary,
)
from totemcheck.simcam import default_camera


def analytic_mask(cam, center, radius):
    """Pixels whose center ray meets the sphere, from the ray-sphere discriminant."""
    u, v = cam.pixel_centers()
    d = cam.directions(u, v)
    P = np.asarray(center, float)
    dp = d @ P
    return (dp > 0) & (P @ P - dp ** 2 <= radius ** 2)


def direction_at(angle_deg, azimuth_deg=0.0):
    a, b = math.radians(angle_deg), math.radians(azimuth_deg)
    return np.array([math.sin(a) * math.cos(b), math.sin(a) * math.sin(b), math.cos(a)])


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - b) / np.linalg.norm(b)


def test_boundary_is_outer_contour():
    m = np.zeros((20, 20), bool)
    m[5:12, 4:15] = True
    b = trace_boundary(m)
    uu, vv = b[:, 0], b[:, 1]
    assert np.all(m[vv, uu])
    on_edge = (uu == 4) | (uu == 14) | (vv == 5) | (vv == 11)
    assert on_edge.all()
    assert len({tuple(p) for p in b}) == 2 * (11 + 7) - 4


def test_on_axis_center_stays_on_axis():
    cam = PinholeCamera(160.0, 160.0, 128.0, 128.0, 256, 256)
    P = np.array([0, 0, 1.5])
    est = init_totem_pose(cam, TotemMask(0, analytic_mask(cam, P, 0.25)), 0.25)
    assert abs(est[0]) < 1e-6 * 2 and abs(est[1]) < 1e-6 * 2
    assert rel_err(est, P) < 0.02


def test_similarity_scaling():
    cam = default_camera(256)
    P, R = np.array([0.2, 0.1, 1.5]), 0.25
    m1 = analytic_mask(cam, P, R)
    m2 = analytic_mask(cam, 2 * P, 2 * R)
    assert np.array_equal(m1, m2)
    e1 = init_totem_pose(cam, TotemMask(0, m1), R)
    e2 = init_totem_pose(cam, TotemMask(0, m2), 2 * R)
    np.testing.assert_allclose(e2, 2 * e1, rtol=1e-9)


@pytest.mark.parametrize("angle", [0, 5, 10, 15, 20])
@pytest.mark.parametrize("azimuth", [0, 135])
def test_init_accuracy_by_off_axis_angle(angle, azimuth):
    cam = default_camera(256)
    P = direction_at(angle, azimuth) * 1.5
    est = init_totem_pose(cam, TotemMask(0, analytic_mask(cam, P, 0.25)), 0.25)
    assert rel_err(est, P) < (0.02 if angle == 0 else 0.08)


@pytest.mark.parametrize("depth", [1.5, 1.6, 2.5])
def test_edge_offset_removes_rasterization_bias(depth):
    cam = default_camera(256)
    for angle in (0, 10, 20):
        P = direction_at(angle, 135) * depth
        m = TotemMask(0, analytic_mask(cam, P, 0.25))
        plain = rel_err(init_totem_pose(cam, m, 0.25), P)
        shifted = rel_err(init_totem_pose(cam, m, 0.25, edge_offset=0.5), P)
        assert shifted < 0.01
        assert shifted < plain


def test_roll_equivariance():
    cam = PinholeCamera(160.0, 160.0, 128.0, 128.0, 256, 256)
    P = np.array([0.3, -0.15, 1.8])
    m = analytic_mask(cam, P, 0.25)
    e = init_totem_pose(cam, TotemMask(0, m), 0.25)
    # rotating the image by 90 degrees about the principal point: (x, y) -> (-y, x)
    er = init_totem_pose(cam, TotemMask(0, np.rot90(m, k=-1)), 0.25)
    np.testing.assert_allclose(er, [-e[1], e[0], e[2]], rtol=1e-6, atol=1e-9)


def test_degenerate_masks_rejected():
    cam = default_camera(64)
    m = np.zeros((64, 64), bool)
    m[10, 10:13] = True
    with pytest.raises(ValueError, match="degenerate"):
        init_totem_pose(cam, TotemMask(0, m), 0.25)


def test_predicted_bbox_symmetry_sampling_and_iou_with_mask():
    cam = PinholeCamera(160.0, 160.0, 128.0, 128.0, 256, 256)
    b = predicted_bbox(cam, [0, 0, 2.0], 0.25)
    assert (b.u_min + b.u_max) / 2 == pytest.approx(128, abs=0.5)
    assert (b.v_min + b.v_max) / 2 == pytest.approx(128, abs=0.5)
    assert b.u_max - b.u_min == pytest.approx(b.v_max - b.v_min, rel=1e-9)
    b4 = predicted_bbox(cam, [0, 0, 2.0], 0.25, n_samples=4)
    np.testing.assert_allclose(b4.as_array(), b.as_array(), rtol=0.01)

    cam = default_camera(256)
    for P in ([0.3, 0.35, 1.5], [-0.6, 0.4, 1.6]):
        m = TotemMask(0, analytic_mask(cam, P, 0.25))
        est = init_totem_pose(cam, m, 0.25)
        assert 1 - iou_loss(predicted_bbox(cam, est, 0.25), m.bbox()) > 0.95


def test_iou_loss_values():
    a = BBox(0, 2, 0, 2)
    assert iou_loss(a, a) == 0
    assert iou_loss(a, BBox(5, 6, 5, 6)) == 1
    assert iou_loss(a, BBox(1, 3, 1, 3)) == pytest.approx(6 / 7)


boxes = st.tuples(st.floats(0, 50), st.floats(0.5, 30), st.floats(0, 50), st.floats(0.5, 30)).map(
    lambda t: BBox(t[0], t[0] + t[1], t[2], t[2] + t[3]))


@given(boxes, boxes)
def test_iou_loss_symmetric_and_zero_iff_equal(a, b):
    assert iou_loss(a, b) == pytest.approx(iou_loss(b, a), abs=1e-12)
    assert (iou_loss(a, b) == 0) == (a == b) or iou_loss(a, b) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 0.5))
def test_bbox_monotone_in_radius(r):
    cam = default_camera(256)
    P = [0.2, 0.3, 1.8]
    small = predicted_bbox(cam, P, r)
    big = predicted_bbox(cam, P, r * 1.1)
    assert big.u_min <= small.u_min + 1e-9 and big.v_min <= small.v_min + 1e-9
    assert big.u_max >= small.u_max - 1e-9 and big.v_max >= small.v_max - 1e-9


def test_center_gradient_matches_finite_differences():
    cam = default_camera(256)
    target = BBox(150.0, 190.0, 160.0, 200.0)
    P = np.array([0.35, 0.45, 1.6])
    _, g = iou_loss_center_grad(cam, P, 0.25, target)
    h = 1e-5
    num = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        num[k] = (iou_loss(predicted_bbox(cam, P + e, 0.25), target)
                  - iou_loss(predicted_bbox(cam, P - e, 0.25), target)) / (2 * h)
    np.testing.assert_allclose(g, num, rtol=1e-3)


def test_golden_section_finds_minimum():
    assert golden_section(lambda t: (t - 1.234) ** 2, 0, 10) == pytest.approx(1.234, abs=1e-7)
