"""
Totem center estimation from silhouette masks, and the mask-consistency term.

The boundary rays of a silhouette form the tangent cone of the sphere. Fitting
that cone gives the tangent circle (center C, radius T) and from it the sphere
center by similar triangles. Running the construction backwards from a center
gives the projected silhouette box used by the IoU loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geomcore import PinholeCamera

MIN_BOUNDARY = 16

# Moore neighborhood in clockwise order (image coordinates, v down), as (dv, du)
_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def trace_boundary(mask: np.ndarray) -> np.ndarray:
    """Ordered outer contour of a binary region by Moore-neighbor tracing.

    Returns an (K, 2) int array of (u, v) pixel indices. Tracing stops when the
    walk is about to repeat its first step from the start pixel.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return np.zeros((0, 2), dtype=int)
    padded = np.pad(m, 1)
    rows, cols = np.nonzero(padded)
    # raster-first pixel: topmost, then leftmost
    first = np.lexsort((cols, rows))[0]
    start = (int(rows[first]), int(cols[first]))
    contour = [start]
    cur = start
    # start was entered from its west neighbor, which is background
    backtrack = 6
    limit = 4 * padded.size
    while True:
        nxt = None
        for k in range(8):
            idx = (backtrack + 1 + k) % 8
            dv, du = _MOORE[idx]
            nb = (cur[0] + dv, cur[1] + du)
            if padded[nb]:
                pv, pu = _MOORE[(backtrack + k) % 8]
                nxt = nb, (cur[0] + pv - nb[0], cur[1] + pu - nb[1])
                break
        if nxt is None:
            break  # isolated pixel
        nb, rel = nxt
        if cur == start and len(contour) > 1 and nb == contour[1]:
            contour.pop()
            break
        cur = nb
        backtrack = _MOORE.index(rel)
        contour.append(cur)
        if len(contour) > limit:
            raise RuntimeError("boundary tracing did not terminate")
    pts = np.array(contour) - 1
    return np.stack([pts[:, 1], pts[:, 0]], axis=1)


@dataclass
class TotemMask:
    totem_id: int
    mask: np.ndarray
    boundary: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.boundary is None:
            self.boundary = trace_boundary(self.mask)

    def bbox(self) -> "BBox":
        """Pixel-edge bounding box of the mask."""
        v, u = np.nonzero(self.mask)
        if u.size == 0:
            raise ValueError(f"mask {self.totem_id} is empty")
        return BBox(float(u.min()), float(u.max() + 1), float(v.min()), float(v.max() + 1))


@dataclass(frozen=True)
class BBox:
    u_min: float
    u_max: float
    v_min: float
    v_max: float

    def __post_init__(self):
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValueError(f"invalid box {self}")

    @property
    def area(self) -> float:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.u_min, self.u_max, self.v_min, self.v_max])


def golden_section(f, lo: float, hi: float, tol: float = 1e-9, max_iter: int = 500) -> float:
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def init_totem_pose(camera: PinholeCamera, mask: TotemMask, radius: float,
                    edge_offset: float = 0.0) -> np.ndarray:
    """Estimate a totem center from its silhouette and known radius.

    Boundary rays pass through boundary pixel centers, which sit on average half
    a pixel inside the true edge. ``edge_offset`` (pixels) pushes them outward
    radially from the boundary centroid; 0 keeps plain pixel centers.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    bnd = np.asarray(mask.boundary, dtype=np.float64)
    if len(bnd) < MIN_BOUNDARY:
        raise ValueError(f"mask degenerate: {len(bnd)} boundary pixels (need {MIN_BOUNDARY})")
    if edge_offset:
        radial = bnd - bnd.mean(axis=0)
        norm = np.linalg.norm(radial, axis=1, keepdims=True)
        bnd = bnd + edge_offset * radial / np.where(norm > 0, norm, 1.0)
    # unit boundary rays through pixel centers
    d_k = camera.directions(bnd[:, 0] + 0.5, bnd[:, 1] + 0.5)
    centered = bnd - bnd.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-6) < 2:
        raise ValueError("mask degenerate: collinear boundary")

    d_c = d_k.mean(axis=0)
    d_c /= np.linalg.norm(d_c)
    theta = np.arccos(np.clip(d_k @ d_c, -1.0, 1.0))
    phi = np.pi / 2 - theta
    T = float(np.mean(radius * np.sin(phi)))
    sin_phi_mean = np.sin(np.mean(phi))

    def cone_radius_gap(t):
        C = (d_k * t).mean(axis=0)
        return abs(np.linalg.norm(d_k * t - C, axis=1).mean() - T)

    z_guess = radius / sin_phi_mean
    t_est = golden_section(cone_radius_gap, 0.0, 10.0 * z_guess)

    C = (d_k * t_est).mean(axis=0)
    oc = np.linalg.norm(C)
    pc = T ** 2 / oc
    po = pc + oc
    return d_c * po


def tangent_circle(center, radius: float):
    """Tangent circle (C, T, n) of the camera cone around a sphere at ``center``."""
    P = np.asarray(center, dtype=np.float64)
    L = np.linalg.norm(P)
    if L <= radius:
        raise ValueError("camera at or inside the totem sphere")
    n = P / L
    # |PC| = R^2 / |PO|, T^2 = R^2 - |PC|^2
    pc = radius ** 2 / L
    C = P - n * pc
    T = np.sqrt(radius ** 2 - pc ** 2)
    return C, T, n


def circle_points(center, radius: float, n_samples: int = 1000) -> np.ndarray:
    C, T, n = tangent_circle(center, radius)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    ang = np.arange(n_samples) * (2.0 * np.pi / n_samples)
    return C + T * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)


def predicted_bbox(camera: PinholeCamera, center, radius: float, n_samples: int = 1000) -> BBox:
    P = np.asarray(center, dtype=np.float64)
    if P[2] <= radius:
        raise ValueError("totem must lie in front of the camera (center.z > radius)")
    uv = camera.project(circle_points(P, radius, n_samples))
    return BBox(uv[:, 0].min(), uv[:, 0].max(), uv[:, 1].min(), uv[:, 1].max())


def _overlap(a0, a1, b0, b1):
    return max(0.0, min(a1, b1) - max(a0, b0))


def iou_loss(pred: BBox, target: BBox) -> float:
    """1 - IoU of two axis-aligned boxes."""
    iw = _overlap(pred.u_min, pred.u_max, target.u_min, target.u_max)
    ih = _overlap(pred.v_min, pred.v_max, target.v_min, target.v_max)
    inter = iw * ih
    union = pred.area + target.area - inter
    if union <= 0:
        raise ValueError("zero-area union in IoU loss")
    return 1.0 - inter / union


def iou_loss_grad(pred: BBox, target: BBox) -> np.ndarray:
    """Subgradient of ``iou_loss`` w.r.t. (u_min, u_max, v_min, v_max) of ``pred``."""
    pu0, pu1, pv0, pv1 = pred.as_array()
    tu0, tu1, tv0, tv1 = target.as_array()
    iw = _overlap(pu0, pu1, tu0, tu1)
    ih = _overlap(pv0, pv1, tv0, tv1)
    inter = iw * ih
    pw, ph = pu1 - pu0, pv1 - pv0
    union = pw * ph + target.area - inter
    if union <= 0:
        raise ValueError("zero-area union in IoU loss")
    # d(inter)/d corners: only active when that corner bounds the overlap
    d_iw = np.zeros(4)
    d_ih = np.zeros(4)
    if iw > 0 and ih > 0:
        if pu0 > tu0:
            d_iw[0] = -1.0
        if pu1 < tu1:
            d_iw[1] = 1.0
        if pv0 > tv0:
            d_ih[2] = -1.0
        if pv1 < tv1:
            d_ih[3] = 1.0
    d_inter = d_iw * ih + d_ih * iw
    d_area = np.array([-ph, ph, -pw, pw])
    d_union = d_area - d_inter
    # loss = 1 - inter/union
    return -(d_inter * union - inter * d_union) / union ** 2


def bbox_jacobian(camera: PinholeCamera, center, radius: float, n_samples: int = 1000,
                  step: float = 1e-4) -> np.ndarray:
    """(4, 3) central-difference Jacobian of the predicted box w.r.t. the center."""
    P = np.asarray(center, dtype=np.float64)
    J = np.zeros((4, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        hi = predicted_bbox(camera, P + e, radius, n_samples).as_array()
        lo = predicted_bbox(camera, P - e, radius, n_samples).as_array()
        J[:, k] = (hi - lo) / (2 * step)
    return J


def iou_loss_center_grad(camera: PinholeCamera, center, radius: float, target: BBox,
                         n_samples: int = 1000, step: float = 1e-4):
    """IoU loss and its gradient w.r.t. the totem center (analytic corners x FD box Jacobian)."""
    pred = predicted_bbox(camera, center, radius, n_samples)
    loss = iou_loss(pred, target)
    g = iou_loss_grad(pred, target) @ bbox_jacobian(camera, center, radius, n_samples, step)
    return loss, g
