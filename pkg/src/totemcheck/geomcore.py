"""
Refractive optics for spherical totems.

Camera space: pinhole at the origin looking down +z, image u to the right
(+x) and v downward (+y). All lengths are meters.

The scalar functions (``intersect``, ``refract``, ``totem_pixel_to_scene_ray``)
are thin wrappers over numba kernels that are also used in batched form by the
renderer and the trainer, so both paths run the exact same arithmetic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

N_AIR = 1.0
T_EPS = 1e-9


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("ray direction must be finite and non-zero")
        self.direction = d / n

    def at(self, t):
        return self.origin + t * self.direction


@dataclass
class SphereTotem:
    center: np.ndarray
    radius: float
    ior: float = 1.5

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.radius = float(self.radius)
        self.ior = float(self.ior)
        if not np.all(np.isfinite(self.center)):
            raise ValueError("totem center must be finite")
        if self.radius <= 0:
            raise ValueError(f"totem radius must be positive, got {self.radius}")
        if self.ior <= 1:
            raise ValueError(f"totem ior must exceed 1, got {self.ior}")
        if self.center[2] <= self.radius:
            raise ValueError("totem must lie entirely in front of the camera (center.z > radius)")

    def moved(self, center) -> "SphereTotem":
        return SphereTotem(center, self.radius, self.ior)


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"camera resolution must be positive, got {self.width}x{self.height}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) coordinates of every pixel center, each shaped (height, width)."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        return u, v

    def directions(self, u, v) -> np.ndarray:
        """Unit camera-space directions for arrays of pixel coordinates, shape (..., 3)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, points) -> np.ndarray:
        """Perspective projection of (..., 3) points; depth is the z coordinate."""
        p = np.asarray(points, dtype=np.float64)
        z = p[..., 2]
        if np.any(z <= 0):
            raise ValueError("behind camera: point has non-positive depth")
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1)


def pixel_to_ray(camera: PinholeCamera, pixel) -> Ray:
    u, v = pixel
    return Ray(np.zeros(3), camera.directions(u, v))


def project_point(camera: PinholeCamera, X) -> tuple[float, float]:
    uv = camera.project(np.asarray(X, dtype=np.float64).reshape(1, 3))[0]
    return float(uv[0]), float(uv[1])


# ---------------------------------------------------------------------------
# numba kernels (scalar component form)


@numba.njit(cache=True)
def _sphere_t(ox, oy, oz, dx, dy, dz, px, py, pz, r):
    lx = ox - px
    ly = oy - py
    lz = oz - pz
    a = dx * dx + dy * dy + dz * dz
    b = 2.0 * (lx * dx + ly * dy + lz * dz)
    c = lx * lx + ly * ly + lz * lz - r * r
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return np.nan
    sq = math.sqrt(disc)
    # numerically stable root pair
    if b >= 0.0:
        q = -0.5 * (b + sq)
    else:
        q = -0.5 * (b - sq)
    if q == 0.0:
        t0 = 0.0
        t1 = 0.0
    else:
        t0 = q / a
        t1 = c / q
    if t0 > t1:
        t0, t1 = t1, t0
    if t0 > T_EPS:
        return t0
    if t1 > T_EPS:
        return t1
    return np.nan


@numba.njit(cache=True)
def _refract(n1, n2, nx, ny, nz, dx, dy, dz):
    eta = n1 / n2
    cos_i = -(nx * dx + ny * dy + nz * dz)
    # |N x d|^2
    cx = ny * dz - nz * dy
    cy = nz * dx - nx * dz
    cz = nx * dy - ny * dx
    s2 = cx * cx + cy * cy + cz * cz
    k = 1.0 - eta * eta * s2
    if k < 0.0:
        return np.nan, np.nan, np.nan
    sk = math.sqrt(k)
    # N x (-N x d) = d - N (N.d) = d + N cos_i
    rx = eta * (dx + nx * cos_i) - nx * sk
    ry = eta * (dy + ny * cos_i) - ny * sk
    rz = eta * (dz + nz * cos_i) - nz * sk
    rn = math.sqrt(rx * rx + ry * ry + rz * rz)
    return rx / rn, ry / rn, rz / rn


@numba.njit(cache=True)
def _trace_one(ox, oy, oz, dx, dy, dz, px, py, pz, r, ior, out):
    """Two-refraction mapping. Writes (E, d_out) into out[0:6]; returns success."""
    t = _sphere_t(ox, oy, oz, dx, dy, dz, px, py, pz, r)
    if math.isnan(t):
        return False
    Dx = ox + t * dx
    Dy = oy + t * dy
    Dz = oz + t * dz
    nx = Dx - px
    ny = Dy - py
    nz = Dz - pz
    nn = math.sqrt(nx * nx + ny * ny + nz * nz)
    nx /= nn
    ny /= nn
    nz /= nn
    if nx * dx + ny * dy + nz * dz > 0.0:
        nx, ny, nz = -nx, -ny, -nz
    ax, ay, az = _refract(N_AIR, ior, nx, ny, nz, dx, dy, dz)
    if math.isnan(ax):
        return False
    t2 = _sphere_t(Dx, Dy, Dz, ax, ay, az, px, py, pz, r)
    if math.isnan(t2):
        return False
    Ex = Dx + t2 * ax
    Ey = Dy + t2 * ay
    Ez = Dz + t2 * az
    mx = Ex - px
    my = Ey - py
    mz = Ez - pz
    mn = math.sqrt(mx * mx + my * my + mz * mz)
    mx /= mn
    my /= mn
    mz /= mn
    if mx * ax + my * ay + mz * az > 0.0:
        mx, my, mz = -mx, -my, -mz
    bx, by, bz = _refract(ior, N_AIR, mx, my, mz, ax, ay, az)
    if math.isnan(bx):
        return False
    out[0] = Ex
    out[1] = Ey
    out[2] = Ez
    out[3] = bx
    out[4] = by
    out[5] = bz
    return True


@numba.njit(cache=True)
def _intersect_many(origins, dirs, center, radius):
    n = origins.shape[0]
    t = np.empty(n)
    for i in range(n):
        t[i] = _sphere_t(origins[i, 0], origins[i, 1], origins[i, 2],
                         dirs[i, 0], dirs[i, 1], dirs[i, 2],
                         center[0], center[1], center[2], radius)
    return t


@numba.njit(cache=True)
def _refract_many(n1, n2, normals, dirs):
    n = dirs.shape[0]
    out = np.empty((n, 3))
    for i in range(n):
        x, y, z = _refract(n1, n2, normals[i, 0], normals[i, 1], normals[i, 2],
                           dirs[i, 0], dirs[i, 1], dirs[i, 2])
        out[i, 0] = x
        out[i, 1] = y
        out[i, 2] = z
    return out


@numba.njit(cache=True, parallel=True)
def _trace_many(origins, dirs, center, radius, ior):
    n = origins.shape[0]
    exit_o = np.full((n, 3), np.nan)
    exit_d = np.full((n, 3), np.nan)
    ok = np.zeros(n, dtype=np.bool_)
    for i in numba.prange(n):
        buf = np.empty(6)
        if _trace_one(origins[i, 0], origins[i, 1], origins[i, 2],
                      dirs[i, 0], dirs[i, 1], dirs[i, 2],
                      center[0], center[1], center[2], radius, ior, buf):
            ok[i] = True
            exit_o[i, 0] = buf[0]
            exit_o[i, 1] = buf[1]
            exit_o[i, 2] = buf[2]
            exit_d[i, 0] = buf[3]
            exit_d[i, 1] = buf[4]
            exit_d[i, 2] = buf[5]
    return exit_o, exit_d, ok


# ---------------------------------------------------------------------------
# batched API


def _as_rows(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 3))


def intersect_sphere(origins, dirs, center, radius) -> np.ndarray:
    """Nearest hit distance t > 1e-9 for each ray, NaN on a miss. Directions need not be unit."""
    return _intersect_many(_as_rows(origins), _as_rows(dirs),
                           np.asarray(center, dtype=np.float64), float(radius))


def refract_dirs(n1: float, n2: float, normals, dirs) -> np.ndarray:
    """Vector Snell refraction; rows of NaN mark total internal reflection.

    ``n1`` is the IoR of the medium the ray travels in, ``n2`` the one it enters.
    Normals must be unit and oppose the incident directions.
    """
    return _refract_many(float(n1), float(n2), _as_rows(normals), _as_rows(dirs))


def trace_totem(origins, dirs, totem: SphereTotem):
    """Map camera rays through a totem. Returns (exit_origins, exit_dirs, valid)."""
    return _trace_many(_as_rows(origins), _as_rows(dirs), totem.center,
                       totem.radius, totem.ior)


def trace_totem_pixels(camera: PinholeCamera, totem: SphereTotem, u, v):
    """Exit rays for arrays of pixel coordinates (camera rays start at the origin)."""
    d = camera.directions(np.ravel(u), np.ravel(v))
    o = np.zeros_like(d)
    return trace_totem(o, d, totem)


# ---------------------------------------------------------------------------
# scalar API


def intersect(totem: SphereTotem, ray: Ray):
    """First intersection in front of the ray origin as (point, t), or None."""
    o, d, p = ray.origin, ray.direction, totem.center
    t = _sphere_t(o[0], o[1], o[2], d[0], d[1], d[2], p[0], p[1], p[2], totem.radius)
    if math.isnan(t):
        return None
    return o + t * d, t


def refract(n_incident: float, n_transmitted: float, normal, d_in):
    x, y, z = _refract(float(n_incident), float(n_transmitted),
                       *np.asarray(normal, dtype=np.float64), *np.asarray(d_in, dtype=np.float64))
    if math.isnan(x):
        return None
    return np.array([x, y, z])


def totem_pixel_to_scene_ray(camera: PinholeCamera, totem: SphereTotem, pixel):
    """Scene light ray seen at ``pixel`` through ``totem``; None on a miss or TIR."""
    cam_ray = pixel_to_ray(camera, pixel)
    buf = np.empty(6)
    d = cam_ray.direction
    p = totem.center
    ok = _trace_one(0.0, 0.0, 0.0, d[0], d[1], d[2], p[0], p[1], p[2],
                    totem.radius, totem.ior, buf)
    if not ok:
        return None
    return Ray(buf[:3], buf[3:])
