import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from totemcheck.geomcore import (
    PinholeCamera, Ray, SphereTotem, intersect, intersect_sphere, pixel_to_ray, project_point,
    refract, refract_dirs, totem_pixel_to_scene_ray, trace_totem_pixels,
)

from oracles import check_snell, critical_angle, quadratic_sphere_hit, snell_refract_scalar

CAM = PinholeCamera(100.0, 100.0, 50.0, 50.0, 100, 100)


def test_ray_normalizes():
    r = Ray([0, 0, 0], [3, 0, 4])
    assert abs(np.linalg.norm(r.direction) - 1) < 1e-12
    with pytest.raises(ValueError):
        Ray([0, 0, 0], [0, 0, 0])


def test_totem_and_camera_validation():
    with pytest.raises(ValueError):
        SphereTotem([0, 0, 5], -1.0)
    with pytest.raises(ValueError):
        SphereTotem([0, 0, 5], 1.0, ior=1.0)
    with pytest.raises(ValueError):
        SphereTotem([0, 0, 0.5], 1.0)
    with pytest.raises(ValueError):
        PinholeCamera(100, 100, 120, 50, 100, 100)


def test_intersect_axis_and_miss():
    tot = SphereTotem([0, 0, 5], 1.0)
    hit = intersect(tot, Ray([0, 0, 0], [0, 0, 1]))
    assert hit is not None
    np.testing.assert_allclose(hit[0], [0, 0, 4], atol=1e-12)
    assert hit[1] == pytest.approx(4.0)
    assert intersect(tot, Ray([0, 0, 0], [0, 1, 0])) is None


def test_intersect_off_center_matches_quadratic():
    tot = SphereTotem([0.5, 0, 5], 1.0)
    x, t = intersect(tot, Ray([0, 0, 0], [0, 0, 1]))
    assert t == pytest.approx(quadratic_sphere_hit([0, 0, 0], [0, 0, 1], tot.center, 1.0), abs=1e-12)
    assert abs(np.linalg.norm(x - tot.center) - 1.0) < 1e-9


def test_refract_trivial_cases():
    np.testing.assert_allclose(refract(1.0, 1.5, [0, 0, -1], [0, 0, 1]), [0, 0, 1], atol=1e-15)
    d = np.array([0.3, -0.2, 0.9])
    d /= np.linalg.norm(d)
    np.testing.assert_allclose(refract(1.5, 1.5, [0, 0, -1], d), d, atol=1e-15)


def test_refract_45_degrees_against_scalar_snell():
    d = np.array([math.sin(math.pi / 4), 0, math.cos(math.pi / 4)])
    out = refract(1.0, 1.5, [0, 0, -1], d)
    theta_t = math.atan2(out[0], out[2])
    assert theta_t == pytest.approx(math.asin(math.sin(math.pi / 4) / 1.5), abs=1e-9)
    np.testing.assert_allclose(out, snell_refract_scalar(1.0, 1.5, [0, 0, -1], d), atol=1e-12)


def test_total_internal_reflection_past_critical_angle():
    assert math.radians(45) > critical_angle(1.5)
    d = np.array([math.sin(math.pi / 4), 0, math.cos(math.pi / 4)])
    assert refract(1.5, 1.0, [0, 0, -1], d) is None
    # just inside the critical angle still transmits
    a = critical_angle(1.5) - 1e-6
    assert refract(1.5, 1.0, [0, 0, -1], [math.sin(a), 0, math.cos(a)]) is not None


def test_projection_and_pixel_rays():
    assert project_point(CAM, [0, 0, 3.0]) == pytest.approx((50, 50))
    assert project_point(CAM, [1, 2, 4]) == pytest.approx((75, 100))
    np.testing.assert_allclose(pixel_to_ray(CAM, (50, 50)).direction, [0, 0, 1])
    d = pixel_to_ray(CAM, (150, 50)).direction
    np.testing.assert_allclose(d, np.array([1, 0, 1]) / math.sqrt(2), atol=1e-15)
    with pytest.raises(ValueError, match="behind camera"):
        project_point(CAM, [0, 0, -1])


@given(st.floats(0, 99.99), st.floats(0, 99.99), st.floats(0.01, 100))
def test_pixel_ray_project_round_trip(u, v, depth):
    r = pixel_to_ray(CAM, (u, v))
    X = r.direction / r.direction[2] * depth
    uu, vv = project_point(CAM, X)
    assert abs(uu - u) < 1e-9 and abs(vv - v) < 1e-9


unit3 = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: 0.1 < np.linalg.norm(v))


@settings(max_examples=300)
@given(unit3, unit3, st.floats(1.0, 2.5), st.floats(1.0, 2.5))
def test_snell_reversible_and_coplanar(n_raw, d_raw, n1, n2):
    n = np.array(n_raw) / np.linalg.norm(n_raw)
    d = np.array(d_raw) / np.linalg.norm(d_raw)
    if n @ d > -1e-3:
        n = -n
    if n @ d > -1e-3:
        return
    out = refract(n1, n2, n, d)
    if out is None:
        # TIR only from the denser side, past the critical angle
        assert n1 > n2
        assert math.acos(-(n @ d)) > critical_angle(n1, n2) - 1e-12
        return
    snell, plane = check_snell(n1, n2, n, d, out)
    assert snell < 1e-9 and plane < 1e-9
    back = refract(n2, n1, -n, -out)
    np.testing.assert_allclose(-back, d, atol=1e-9)


def test_batched_refract_marks_tir_with_nan():
    a = np.radians([10, 60])
    d = np.stack([np.sin(a), 0 * a, np.cos(a)], axis=1)
    out = refract_dirs(1.5, 1.0, np.tile([0, 0, -1.0], (2, 1)), d)
    assert np.all(np.isfinite(out[0])) and np.all(np.isnan(out[1]))


def test_intersect_sphere_batch_residual():
    rng = np.random.default_rng(0)
    c, r = np.array([0.2, -0.1, 3.0]), 0.7
    d = rng.normal(size=(5000, 3)) * [0.2, 0.2, 0] + [0, 0, 1]
    t = intersect_sphere(np.zeros((5000, 3)), d, c, r)
    hit = ~np.isnan(t)
    assert hit.sum() > 100
    x = t[hit, None] * d[hit]
    assert np.max(np.abs(np.linalg.norm(x - c, axis=1) - r)) < 1e-9
    for i in np.nonzero(hit)[0][:50]:
        assert t[i] == pytest.approx(quadratic_sphere_hit([0, 0, 0], d[i], c, r), rel=1e-12)


def _mapper_oracle(cam, tot, pixel):
    """Both refractions re-simulated with the angle-based Snell construction."""
    d = pixel_to_ray(cam, pixel).direction
    t1 = quadratic_sphere_hit([0, 0, 0], d, tot.center, tot.radius)
    if t1 is None:
        return None
    D = t1 * d
    n1 = (D - tot.center) / tot.radius
    d2 = snell_refract_scalar(1.0, tot.ior, n1, d)
    t2 = quadratic_sphere_hit(D, d2, tot.center, tot.radius)
    E = D + t2 * d2
    n2 = (E - tot.center) / tot.radius
    d3 = snell_refract_scalar(tot.ior, 1.0, -n2, d2)
    return None if d3 is None else (E, d3)


def test_central_pixel_passes_straight_through():
    cam = PinholeCamera(200.0, 200.0, 100.0, 100.0, 200, 200)
    tot = SphereTotem([0, 0, 4], 0.5)
    r = totem_pixel_to_scene_ray(cam, tot, (100.0, 100.0))
    np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(r.origin, [0, 0, 4.5], atol=1e-12)


def test_mapper_matches_per_surface_snell_and_is_mirror_symmetric():
    cam = PinholeCamera(200.0, 200.0, 100.0, 100.0, 200, 200)
    tot = SphereTotem([0, 0, 4], 0.5)
    for du in (3.0, 10.0, 20.0):
        a = totem_pixel_to_scene_ray(cam, tot, (100 + du, 100.0))
        b = totem_pixel_to_scene_ray(cam, tot, (100 - du, 100.0))
        E, d = _mapper_oracle(cam, tot, (100 + du, 100.0))
        np.testing.assert_allclose(a.direction, d, atol=1e-9)
        np.testing.assert_allclose(a.origin, E, atol=1e-9)
        dev_a = math.acos(a.direction @ pixel_to_ray(cam, (100 + du, 100)).direction)
        dev_b = math.acos(b.direction @ pixel_to_ray(cam, (100 - du, 100)).direction)
        assert dev_a > 1e-3
        assert dev_a == pytest.approx(dev_b, abs=1e-12)
        # exit on the sphere, heading away from the camera
        assert abs(np.linalg.norm(a.origin - tot.center) - tot.radius) < 1e-9
        assert a.direction[2] > 0


def test_mapper_covers_silhouette_minus_tir():
    cam = PinholeCamera(200.0, 200.0, 100.0, 100.0, 200, 200)
    tot = SphereTotem([0.3, -0.2, 3.0], 0.5, 1.5)
    u, v = cam.pixel_centers()
    d = cam.directions(u, v).reshape(-1, 3)
    inside = ~np.isnan(intersect_sphere(np.zeros_like(d), d, tot.center, tot.radius))
    _, _, ok = trace_totem_pixels(cam, tot, u, v)
    assert not np.any(ok & ~inside)
    uu, vv = u.ravel(), v.ravel()
    for i in np.nonzero(inside)[0][::7]:
        oracle = _mapper_oracle(cam, tot, (uu[i], vv[i]))
        assert ok[i] == (oracle is not None)
