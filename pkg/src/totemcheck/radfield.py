"""
Voxel-grid radiance field fitted from totem rays, with joint totem-pose refinement.

The field is a dense lattice of raw (r, g, b, sigma) values over an axis-aligned
box in camera space, trilinearly interpolated. Colors go through a sigmoid and
density through a softplus, so queried density is never negative.

Rays are kept in normalized form: origin on the z=0 plane and direction with
unit z component. The ray parameter is then the camera-space depth, so sample
depths are shared between totem rays and camera rays.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .geomcore import PinholeCamera, SphereTotem, trace_totem_pixels
from .posefit import iou_loss, iou_loss_center_grad, predicted_bbox

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    pose_mode: str = "joint"  # init | joint | oracle
    lam: float = 10.0
    iou_weight: float = 1.0
    samples_per_ray: int = 64
    near: float | None = None  # None: just behind the totems
    far: float | None = None  # None: far face of the field box
    warmup_epochs: int = 100
    total_epochs: int = 3000
    lr_field: float = 5e-2
    lr_totem: float = 1e-5
    lr_decay: float = 0.99
    decay_every: int = 100
    batch_size: int = 4096
    cube_overflow_threshold: float = 0.15
    grid_resolution: int = 64
    grid_start: int | None = 16  # coarse-to-fine: first lattice size, doubled at upsample_epochs
    upsample_epochs: tuple = (40, 80)
    tv_weight: float = 3e-7
    sigma_init: float = -3.0
    bbox_samples: int = 1000
    fd_step: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.pose_mode not in ("init", "joint", "oracle"):
            raise ValueError(f"unknown pose_mode {self.pose_mode!r}")
        for name in ("samples_per_ray", "total_epochs", "batch_size", "grid_resolution",
                     "lr_field", "lr_totem", "lr_decay", "decay_every", "fd_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.near is not None and self.far is not None and not self.near < self.far:
            raise ValueError("near must be smaller than far")
        self.upsample_epochs = tuple(int(e) for e in self.upsample_epochs)
        if self.grid_start is not None and self.grid_start < 2:
            raise ValueError("grid_start must be at least 2")

    def resolution_at(self, epoch: int) -> int:
        """Lattice size in effect during ``epoch`` (1-based)."""
        if self.grid_start is None:
            return self.grid_resolution
        res = min(self.grid_start, self.grid_resolution)
        for e in sorted(self.upsample_epochs):
            if epoch > e:
                res = min(2 * res, self.grid_resolution)
        return res

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["upsample_epochs"] = list(self.upsample_epochs)
        return {"version": 1, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        from .schemas import validate

        validate(d, "train")
        return cls(**{k: v for k, v in d.items() if k != "version"})


@dataclass
class RayBatch:
    """Struct-of-arrays set of normalized training rays."""

    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray
    totem_ids: np.ndarray
    pixels: np.ndarray  # (N, 2) int (u, v)

    def __len__(self):
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.colors[idx],
                        self.totem_ids[idx], self.pixels[idx])


def normalize_rays(origins, dirs, min_dz: float = 1e-6):
    """Shift origins to z=0 and scale directions to unit z; returns (o, d, ok)."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    ok = np.isfinite(dirs).all(axis=1) & (dirs[:, 2] > min_dz)
    dz = np.where(ok, dirs[:, 2], 1.0)
    d = dirs / dz[:, None]
    o = origins - origins[:, 2:3] * d
    o[:, 2] = 0.0
    return np.where(ok[:, None], o, np.nan), np.where(ok[:, None], d, np.nan), ok


def field_bounds(lo, hi, margin: float = 0.05):
    """Scene box padded by ``margin`` of its extent on every side."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    pad = margin * (hi - lo)
    return lo - pad, hi + pad


def to_cube(points, lo, hi):
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    return 2.0 * (np.asarray(points) - lo) / (hi - lo) - 1.0


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _softplus(x):
    if x > 20.0:
        return x
    return math.log1p(math.exp(x))


@numba.njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _cell(params, gx, gy, gz):
    """Locate a grid coordinate; returns (ok, i, j, k, fx, fy, fz)."""
    G = params.shape[0]
    if not (gx >= 0.0 and gy >= 0.0 and gz >= 0.0 and gx <= G - 1 and gy <= G - 1 and gz <= G - 1):
        return False, 0, 0, 0, 0.0, 0.0, 0.0
    i = min(int(gx), G - 2)
    j = min(int(gy), G - 2)
    k = min(int(gz), G - 2)
    return True, i, j, k, gx - i, gy - j, gz - k


@numba.njit(cache=True)
def _interp(params, i, j, k, fx, fy, fz, out):
    for c in range(4):
        c00 = params[i, j, k, c] * (1 - fx) + params[i + 1, j, k, c] * fx
        c10 = params[i, j + 1, k, c] * (1 - fx) + params[i + 1, j + 1, k, c] * fx
        c01 = params[i, j, k + 1, c] * (1 - fx) + params[i + 1, j, k + 1, c] * fx
        c11 = params[i, j + 1, k + 1, c] * (1 - fx) + params[i + 1, j + 1, k + 1, c] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out[c] = c0 * (1 - fz) + c1 * fz


@numba.njit(cache=True)
def _interp_grad(params, i, j, k, fx, fy, fz, c):
    """Spatial derivative of the interpolated channel c w.r.t. grid coordinates."""
    p000 = params[i, j, k, c]
    p100 = params[i + 1, j, k, c]
    p010 = params[i, j + 1, k, c]
    p110 = params[i + 1, j + 1, k, c]
    p001 = params[i, j, k + 1, c]
    p101 = params[i + 1, j, k + 1, c]
    p011 = params[i, j + 1, k + 1, c]
    p111 = params[i + 1, j + 1, k + 1, c]
    dx = ((p100 - p000) * (1 - fy) * (1 - fz) + (p110 - p010) * fy * (1 - fz)
          + (p101 - p001) * (1 - fy) * fz + (p111 - p011) * fy * fz)
    dy = ((p010 - p000) * (1 - fx) * (1 - fz) + (p110 - p100) * fx * (1 - fz)
          + (p011 - p001) * (1 - fx) * fz + (p111 - p101) * fx * fz)
    dz = ((p001 - p000) * (1 - fx) * (1 - fy) + (p101 - p100) * fx * (1 - fy)
          + (p011 - p010) * (1 - fx) * fy + (p111 - p110) * fx * fy)
    return dx, dy, dz


@numba.njit(cache=True, parallel=True)
def _forward(params, lo, gscale, origins, dirs, near, delta, jitter, use_jitter, weights_out,
             colors_out):
    n = origins.shape[0]
    S = weights_out.shape[1]
    for r in numba.prange(n):
        raw = np.empty(4)
        dn = math.sqrt(dirs[r, 0] ** 2 + dirs[r, 1] ** 2 + dirs[r, 2] ** 2)
        T = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for s in range(S):
            u = jitter[r, s] if use_jitter else 0.5
            t = near + (s + u) * delta
            gx = (origins[r, 0] + t * dirs[r, 0] - lo[0]) * gscale[0]
            gy = (origins[r, 1] + t * dirs[r, 1] - lo[1]) * gscale[1]
            gz = (origins[r, 2] + t * dirs[r, 2] - lo[2]) * gscale[2]
            ok, i, j, k, fx, fy, fz = _cell(params, gx, gy, gz)
            if not ok:
                weights_out[r, s] = 0.0
                continue
            _interp(params, i, j, k, fx, fy, fz, raw)
            sigma = _softplus(raw[3])
            alpha = 1.0 - math.exp(-sigma * delta * dn)
            w = T * alpha
            weights_out[r, s] = w
            c0 += w * _sigmoid(raw[0])
            c1 += w * _sigmoid(raw[1])
            c2 += w * _sigmoid(raw[2])
            T *= 1.0 - alpha
        colors_out[r, 0] = c0
        colors_out[r, 1] = c1
        colors_out[r, 2] = c2


@numba.njit(cache=True, parallel=True)
def _backward(params, lo, gscale, origins, dirs, targets, near, delta, jitter, use_jitter,
              colors_out, raw_grad, g_origin, g_dir, loss_out, inv_n):
    """Forward + backward of mean_r ||C_hat - C||^2 per ray.

    raw_grad[r, s, :] receives dL/d(raw interpolated value) at each sample; the
    scatter onto the lattice happens serially in ``_scatter`` so accumulation
    order never depends on the worker count.
    """
    n = origins.shape[0]
    S = raw_grad.shape[1]
    for r in numba.prange(n):
        raw = np.empty(4)
        sig = np.zeros(S)
        col = np.zeros((S, 3))
        wts = np.zeros(S)
        trans = np.ones(S + 1)
        tt = np.zeros(S)
        valid = np.zeros(S, dtype=np.bool_)
        dn = math.sqrt(dirs[r, 0] ** 2 + dirs[r, 1] ** 2 + dirs[r, 2] ** 2)
        deff = delta * dn
        T = 1.0
        C = np.zeros(3)
        for s in range(S):
            u = jitter[r, s] if use_jitter else 0.5
            t = near + (s + u) * delta
            tt[s] = t
            gx = (origins[r, 0] + t * dirs[r, 0] - lo[0]) * gscale[0]
            gy = (origins[r, 1] + t * dirs[r, 1] - lo[1]) * gscale[1]
            gz = (origins[r, 2] + t * dirs[r, 2] - lo[2]) * gscale[2]
            ok, i, j, k, fx, fy, fz = _cell(params, gx, gy, gz)
            trans[s] = T
            if not ok:
                continue
            valid[s] = True
            _interp(params, i, j, k, fx, fy, fz, raw)
            sigma = _softplus(raw[3])
            alpha = 1.0 - math.exp(-sigma * deff)
            w = T * alpha
            sig[s] = sigma
            wts[s] = w
            for ch in range(3):
                col[s, ch] = _sigmoid(raw[ch])
                C[ch] += w * col[s, ch]
            T *= 1.0 - alpha
        trans[S] = T
        g = np.empty(3)
        loss = 0.0
        for ch in range(3):
            diff = C[ch] - targets[r, ch]
            loss += diff * diff
            g[ch] = 2.0 * diff * inv_n
            colors_out[r, ch] = C[ch]
        loss_out[r] = loss
        # suffix sums of w*c for samples after s
        suffix = np.zeros(3)
        go0 = 0.0
        go1 = 0.0
        go2 = 0.0
        gd0 = 0.0
        gd1 = 0.0
        gd2 = 0.0
        gdn = 0.0
        for s in range(S - 1, -1, -1):
            if not valid[s]:
                continue
            # dL/dtau where tau = sigma * deff
            dtau = 0.0
            for ch in range(3):
                dtau += g[ch] * (trans[s + 1] * col[s, ch] - suffix[ch])
            # softplus' = sigmoid(raw) = 1 - exp(-sigma)
            gr3 = dtau * deff * -math.expm1(-sig[s])
            raw_grad[r, s, 3] = gr3
            for ch in range(3):
                raw_grad[r, s, ch] = g[ch] * wts[s] * col[s, ch] * (1.0 - col[s, ch])
                suffix[ch] += wts[s] * col[s, ch]
            gdn += dtau * sig[s] * delta
            # position gradient for pose refinement
            t = tt[s]
            gx = (origins[r, 0] + t * dirs[r, 0] - lo[0]) * gscale[0]
            gy = (origins[r, 1] + t * dirs[r, 1] - lo[1]) * gscale[1]
            gz = (origins[r, 2] + t * dirs[r, 2] - lo[2]) * gscale[2]
            ok, i, j, k, fx, fy, fz = _cell(params, gx, gy, gz)
            px = 0.0
            py = 0.0
            pz = 0.0
            for c in range(4):
                ax, ay, az = _interp_grad(params, i, j, k, fx, fy, fz, c)
                gc = raw_grad[r, s, c]
                px += gc * ax
                py += gc * ay
                pz += gc * az
            px *= gscale[0]
            py *= gscale[1]
            pz *= gscale[2]
            go0 += px
            go1 += py
            go2 += pz
            gd0 += px * t
            gd1 += py * t
            gd2 += pz * t
        # path length factor |d|
        g_origin[r, 0] = go0
        g_origin[r, 1] = go1
        g_origin[r, 2] = go2
        g_dir[r, 0] = gd0 + gdn * dirs[r, 0] / dn
        g_dir[r, 1] = gd1 + gdn * dirs[r, 1] / dn
        g_dir[r, 2] = gd2 + gdn * dirs[r, 2] / dn


@numba.njit(cache=True)
def _scatter(grad, lo, gscale, origins, dirs, near, delta, jitter, use_jitter, raw_grad):
    n = origins.shape[0]
    S = raw_grad.shape[1]
    for r in range(n):
        for s in range(S):
            u = jitter[r, s] if use_jitter else 0.5
            t = near + (s + u) * delta
            gx = (origins[r, 0] + t * dirs[r, 0] - lo[0]) * gscale[0]
            gy = (origins[r, 1] + t * dirs[r, 1] - lo[1]) * gscale[1]
            gz = (origins[r, 2] + t * dirs[r, 2] - lo[2]) * gscale[2]
            ok, i, j, k, fx, fy, fz = _cell(grad, gx, gy, gz)
            if not ok:
                continue
            for c in range(4):
                gv = raw_grad[r, s, c]
                if gv == 0.0:
                    continue
                grad[i, j, k, c] += gv * (1 - fx) * (1 - fy) * (1 - fz)
                grad[i + 1, j, k, c] += gv * fx * (1 - fy) * (1 - fz)
                grad[i, j + 1, k, c] += gv * (1 - fx) * fy * (1 - fz)
                grad[i + 1, j + 1, k, c] += gv * fx * fy * (1 - fz)
                grad[i, j, k + 1, c] += gv * (1 - fx) * (1 - fy) * fz
                grad[i + 1, j, k + 1, c] += gv * fx * (1 - fy) * fz
                grad[i, j + 1, k + 1, c] += gv * (1 - fx) * fy * fz
                grad[i + 1, j + 1, k + 1, c] += gv * fx * fy * fz


@numba.njit(cache=True)
def _tv(params, grad, weight):
    """Squared-difference smoothness penalty on the lattice; adds to grad, returns value."""
    G = params.shape[0]
    total = 0.0
    for i in range(G):
        for j in range(G):
            for k in range(G):
                for c in range(4):
                    p = params[i, j, k, c]
                    if i + 1 < G:
                        d = params[i + 1, j, k, c] - p
                        total += d * d
                        grad[i + 1, j, k, c] += 2 * weight * d
                        grad[i, j, k, c] -= 2 * weight * d
                    if j + 1 < G:
                        d = params[i, j + 1, k, c] - p
                        total += d * d
                        grad[i, j + 1, k, c] += 2 * weight * d
                        grad[i, j, k, c] -= 2 * weight * d
                    if k + 1 < G:
                        d = params[i, j, k + 1, c] - p
                        total += d * d
                        grad[i, j, k + 1, c] += 2 * weight * d
                        grad[i, j, k, c] -= 2 * weight * d
    return weight * total


@numba.njit(cache=True)
def _adam_flat(p, g, m, v, lr, b1, b2, eps, step):
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    for i in range(p.size):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)


class Adam:
    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None):
        self.t += 1
        _adam_flat(params.reshape(-1), np.ascontiguousarray(grad).reshape(-1), self.m.reshape(-1),
                   self.v.reshape(-1), self.lr if lr is None else lr, self.beta1, self.beta2,
                   self.eps, self.t)


# ---------------------------------------------------------------------------
# field


class RadianceField:
    def __init__(self, lo, hi, resolution: int = 64, params=None, sigma_init: float = -3.0):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError("field box must have positive extent")
        self.resolution = int(resolution)
        if params is None:
            params = np.zeros((resolution,) * 3 + (4,))
            params[..., 3] = sigma_init
        self.params = np.ascontiguousarray(params, dtype=np.float64)
        if self.params.shape != (self.resolution,) * 3 + (4,):
            raise ValueError(f"params shape {self.params.shape} does not match resolution")

    @property
    def gscale(self) -> np.ndarray:
        return (self.resolution - 1) / (self.hi - self.lo)

    def query(self, points, dirs=None):
        """(rgb, sigma) at camera-space points; outside the box density is zero.

        ``dirs`` is accepted for interface compatibility; the field is view-independent.
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        g = (p - self.lo) * self.gscale
        inside = np.all((g >= 0) & (g <= self.resolution - 1), axis=1)
        raw = self.raw_at(p)
        rgb = 1.0 / (1.0 + np.exp(-raw[:, :3]))
        sigma = np.where(inside, np.logaddexp(0.0, raw[:, 3]), 0.0)
        return rgb, sigma

    def raw_at(self, points) -> np.ndarray:
        """Trilinear raw lattice values at points (clamped to the box)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        G = self.resolution
        g = np.clip((p - self.lo) * self.gscale, 0.0, G - 1)
        i0 = np.clip(np.floor(g).astype(np.int64), 0, G - 2)
        f = g - i0
        raw = np.zeros((len(p), 4))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = ((f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1])
                         * (f[:, 2] if dz else 1 - f[:, 2]))
                    raw += w[:, None] * self.params[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        return raw

    def resampled(self, resolution: int) -> "RadianceField":
        """Same field on a finer (or coarser) lattice, by interpolating raw values."""
        axes = [np.linspace(self.lo[k], self.hi[k], resolution) for k in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        params = self.raw_at(grid).reshape((resolution,) * 3 + (4,))
        return RadianceField(self.lo, self.hi, resolution, params)

    def copy(self) -> "RadianceField":
        return RadianceField(self.lo, self.hi, self.resolution, self.params.copy())


def sample_depths(near: float, far: float, n_samples: int, jitter=None) -> np.ndarray:
    delta = (far - near) / n_samples
    u = 0.5 if jitter is None else jitter
    return near + (np.arange(n_samples) + u) * delta


def render_rays(field: RadianceField, origins, dirs, near: float, far: float, n_samples: int,
                jitter=None):
    """Volume-render normalized rays. Returns (colors (N,3), weights (N,S))."""
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    delta = (far - near) / n_samples
    use_j = jitter is not None
    jit = np.ascontiguousarray(jitter, dtype=np.float64) if use_j else np.zeros((1, 1))
    weights = np.zeros((n, n_samples))
    colors = np.zeros((n, 3))
    _forward(field.params, field.lo, field.gscale, o, d, float(near), float(delta), jit, use_j,
             weights, colors)
    return colors, weights


def volume_render(field: RadianceField, ray, cfg: TrainConfig, near: float, far: float):
    """Color and per-sample weights of a single normalized ray (origin, direction)."""
    origin, direction = ray
    c, w = render_rays(field, np.asarray(origin)[None], np.asarray(direction)[None], near, far,
                       cfg.samples_per_ray)
    return c[0], w[0]


def loss_and_grad(field: RadianceField, origins, dirs, targets, near: float, far: float,
                  n_samples: int, jitter=None):
    """Mean squared color error and its gradients.

    Returns (loss, grad_params, grad_origins, grad_dirs, colors).
    """
    o = np.ascontiguousarray(origins, dtype=np.float64)
    d = np.ascontiguousarray(dirs, dtype=np.float64)
    tg = np.ascontiguousarray(targets, dtype=np.float64)
    n = len(o)
    delta = (far - near) / n_samples
    use_j = jitter is not None
    jit = np.ascontiguousarray(jitter, dtype=np.float64) if use_j else np.zeros((1, 1))
    colors = np.zeros((n, 3))
    raw_grad = np.zeros((n, n_samples, 4))
    g_o = np.zeros((n, 3))
    g_d = np.zeros((n, 3))
    losses = np.zeros(n)
    _backward(field.params, field.lo, field.gscale, o, d, tg, float(near), float(delta), jit,
              use_j, colors, raw_grad, g_o, g_d, losses, 1.0 / max(n, 1))
    grad = np.zeros_like(field.params)
    _scatter(grad, field.lo, field.gscale, o, d, float(near), float(delta), jit, use_j, raw_grad)
    return float(losses.sum() / max(n, 1)), grad, g_o, g_d, colors


# ---------------------------------------------------------------------------
# ray preparation


def derive_rays(camera: PinholeCamera, totem: SphereTotem, pixels):
    """Normalized exit rays for integer pixels (u, v) of one totem; returns (o, d, ok)."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    eo, ed, ok = trace_totem_pixels(camera, totem, px[:, 0] + 0.5, px[:, 1] + 0.5)
    o, d, ok2 = normalize_rays(eo, ed)
    return o, d, ok & ok2


def overflow_ok(origins, lo, hi, threshold: float):
    c = to_cube(origins, lo, hi)
    return np.all(np.abs(c) <= 1.0 + threshold, axis=1)


def preprocess_rays(camera: PinholeCamera, totems, masks, image, lo, hi,
                    threshold: float = 0.15) -> RayBatch:
    """Training rays from every mask pixel whose exit ray survives the cube filter."""
    parts = []
    for j, (tot, m) in enumerate(zip(totems, masks)):
        mask = m.mask if hasattr(m, "mask") else np.asarray(m, dtype=bool)
        v, u = np.nonzero(mask)
        pix = np.stack([u, v], axis=1)
        o, d, ok = derive_rays(camera, tot, pix)
        ok &= overflow_ok(np.nan_to_num(o), lo, hi, threshold)
        sel = np.nonzero(ok)[0]
        parts.append(RayBatch(o[sel], d[sel], image[v[sel], u[sel]].astype(np.float64),
                              np.full(len(sel), j), pix[sel]))
    if not parts or sum(len(p) for p in parts) == 0:
        raise ValueError("no trainable rays")
    return RayBatch(*(np.concatenate([getattr(p, f.name) for p in parts])
                      for f in dataclasses.fields(RayBatch)))


def default_near(totems) -> float:
    return max(float(t.center[2] + t.radius) for t in totems) + 0.05


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    field: RadianceField
    centers: np.ndarray
    history: list = field(default_factory=list)
    near: float = 0.0
    far: float = 0.0
    rng_state: dict | None = None


def pose_error(centers, gt) -> float:
    """Mean absolute coordinate error over all totem centers (meters)."""
    return float(np.mean(np.abs(np.asarray(centers) - np.asarray(gt))))


def train(rays: RayBatch, totems_init, masks, camera: PinholeCamera, cfg: TrainConfig, lo, hi,
          gt_poses=None, callback=None) -> TrainResult:
    """Fit a field to totem rays, optionally refining totem centers after warm-up.

    ``totems_init`` are the starting totems; in ``oracle`` mode the caller passes
    ground-truth totems. Only ``joint`` mode updates centers.
    """
    if len(rays) == 0:
        raise ValueError("no trainable rays")
    rng = np.random.default_rng(cfg.seed)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    fld = RadianceField(lo, hi, cfg.resolution_at(1), sigma_init=cfg.sigma_init)
    base = np.array([t.center for t in totems_init], dtype=np.float64)
    offsets = np.zeros_like(base)
    radii = [t.radius for t in totems_init]
    iors = [t.ior for t in totems_init]
    near = cfg.near if cfg.near is not None else default_near(totems_init)
    far = cfg.far if cfg.far is not None else float(hi[2])
    if not near < far:
        raise ValueError(f"near {near} must be smaller than far {far}")
    S = cfg.samples_per_ray
    box_mask = [m.bbox() for m in masks]

    opt_field = Adam(fld.params.shape, cfg.lr_field)
    opt_pose = Adam(offsets.shape, cfg.lr_totem)
    n = len(rays)
    history = []
    for epoch in range(1, cfg.total_epochs + 1):
        res = cfg.resolution_at(epoch)
        if res != fld.resolution:
            fld = fld.resampled(res)
            opt_field = Adam(fld.params.shape, cfg.lr_field)
        decay = cfg.lr_decay ** ((epoch - 1) // cfg.decay_every)
        joint = cfg.pose_mode == "joint" and epoch > cfg.warmup_epochs
        perm = rng.permutation(n)
        ep_loss = 0.0
        ep_count = 0
        for b0 in range(0, n, cfg.batch_size):
            idx = np.sort(perm[b0:b0 + cfg.batch_size])
            batch = rays.subset(idx)
            jitter = rng.random((len(idx), S))
            if joint:
                centers = base + offsets
                o, d, keep, jac = _rederive(camera, batch, centers, radii, iors, lo, hi, cfg)
                if not keep.any():
                    continue
                o, d = o[keep], d[keep]
                tgt = batch.colors[keep]
                tid = batch.totem_ids[keep]
                jitter = jitter[keep]
                jac = jac[keep]
            else:
                o, d, tgt = batch.origins, batch.dirs, batch.colors
            loss, grad, g_o, g_d, _ = loss_and_grad(fld, o, d, tgt, near, far, S, jitter)
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"training diverged: L_rec is {loss} at epoch {epoch}, batch {b0 // cfg.batch_size}")
            grad *= cfg.lam
            if cfg.tv_weight > 0:
                _tv(fld.params, grad, cfg.tv_weight)
            opt_field.step(fld.params, grad, cfg.lr_field * decay)
            if joint:
                g_pose = cfg.lam * _chain_pose(g_o, g_d, jac, tid, len(base))
                if cfg.iou_weight > 0:
                    for j in range(len(base)):
                        _, g_iou = iou_loss_center_grad(camera, base[j] + offsets[j], radii[j],
                                                        box_mask[j], cfg.bbox_samples, cfg.fd_step)
                        g_pose[j] += cfg.iou_weight * g_iou
                opt_pose.step(offsets, g_pose, cfg.lr_totem * decay)
            ep_loss += loss * len(o)
            ep_count += len(o)
        centers = base + offsets
        l_iou = sum(iou_loss(predicted_bbox(camera, centers[j], radii[j], cfg.bbox_samples),
                             box_mask[j]) for j in range(len(base)))
        rec = {"epoch": epoch, "L_rec": ep_loss / max(ep_count, 1), "L_IoU": l_iou,
               "pose_error": pose_error(centers, gt_poses) if gt_poses is not None else float("nan")}
        history.append(rec)
        if callback is not None:
            callback(rec, fld, centers)
        if epoch % 100 == 0 or epoch == cfg.total_epochs:
            log.info("epoch %d L_rec %.5f L_IoU %.4f pose_err %.4f", epoch, rec["L_rec"],
                     rec["L_IoU"], rec["pose_error"])
    return TrainResult(fld, base + offsets, history, near, far,
                       rng.bit_generator.state)


def _chain_pose(g_o, g_d, jac, totem_ids, n_totems):
    """dL/d(center): chain dL/d(ray) with the finite-difference ray Jacobian."""
    per_ray = (np.einsum("nc,nck->nk", g_o, jac[:, :3])
               + np.einsum("nc,nck->nk", g_d, jac[:, 3:]))
    g = np.zeros((n_totems, 3))
    np.add.at(g, totem_ids, per_ray)
    return g


def rec_loss_at_centers(field: RadianceField, rays: RayBatch, camera: PinholeCamera, centers,
                        totems, lo, hi, cfg: TrainConfig, near: float, far: float):
    """L_rec of ``rays`` re-traced through totems at ``centers`` and its gradient per center.

    Rays that do not survive re-tracing at ``centers`` are left out of the mean.
    """
    centers = np.asarray(centers, dtype=np.float64)
    radii = [t.radius for t in totems]
    iors = [t.ior for t in totems]
    o, d, keep, jac = _rederive(camera, rays, centers, radii, iors, lo, hi, cfg)
    loss, _, g_o, g_d, _ = loss_and_grad(field, o[keep], d[keep], rays.colors[keep], near, far,
                                         cfg.samples_per_ray)
    return loss, _chain_pose(g_o, g_d, jac[keep], rays.totem_ids[keep], len(centers))


def _rederive(camera, batch: RayBatch, centers, radii, iors, lo, hi, cfg):
    """Re-trace a batch at the current centers plus a central-difference ray Jacobian.

    Returns (origins, dirs, keep, jac) with jac shaped (N, 6, 3): rows 0-2 are
    d(origin)/d(center), rows 3-5 d(direction)/d(center).
    """
    n = len(batch)
    o = np.zeros((n, 3))
    d = np.zeros((n, 3))
    keep = np.zeros(n, dtype=bool)
    jac = np.zeros((n, 6, 3))
    h = cfg.fd_step
    for j in np.unique(batch.totem_ids):
        sel = np.nonzero(batch.totem_ids == j)[0]
        pix = batch.pixels[sel]
        tot = SphereTotem(centers[j], radii[j], iors[j])
        oj, dj, ok = derive_rays(camera, tot, pix)
        ok &= overflow_ok(np.nan_to_num(oj), lo, hi, cfg.cube_overflow_threshold)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            op, dp, okp = derive_rays(camera, SphereTotem(centers[j] + e, radii[j], iors[j]), pix)
            om, dm, okm = derive_rays(camera, SphereTotem(centers[j] - e, radii[j], iors[j]), pix)
            ok &= okp & okm
            jac[sel, :3, k] = (op - om) / (2 * h)
            jac[sel, 3:, k] = (dp - dm) / (2 * h)
        o[sel] = oj
        d[sel] = dj
        keep[sel] = ok
    return o, d, keep, np.nan_to_num(jac)


def render_camera_view(field: RadianceField, camera: PinholeCamera, near: float, far: float,
                       n_samples: int = 64, return_weights: bool = False):
    """Render the camera viewpoint through the field (pixel-center rays)."""
    u, v = camera.pixel_centers()
    dirs = camera.directions(u, v).reshape(-1, 3)
    o, d, _ = normalize_rays(np.zeros_like(dirs), dirs)
    colors, weights = render_rays(field, o, d, near, far, n_samples)
    img = colors.reshape(camera.height, camera.width, 3)
    if return_weights:
        return img, weights
    return img


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, result: TrainResult, cfg: TrainConfig, init_centers=None):
    meta = {"config": cfg.to_dict(), "near": result.near, "far": result.far,
            "rng_state": result.rng_state}
    np.savez_compressed(
        path,
        params=result.field.params,
        lo=result.field.lo,
        hi=result.field.hi,
        centers=np.asarray(result.centers),
        init_centers=np.asarray(init_centers if init_centers is not None else result.centers),
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    )


def load_checkpoint(path):
    """Returns (field, centers, init_centers, meta)."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        fld = RadianceField(z["lo"], z["hi"], z["params"].shape[0], z["params"])
        return fld, z["centers"], z["init_centers"], meta


def write_history_csv(path, history):
    with open(path, "w") as f:
        f.write("epoch,L_rec,L_IoU,pose_error\n")
        for h in history:
            f.write(f"{h['epoch']},{h['L_rec']:.9g},{h['L_IoU']:.9g},{h['pose_error']:.9g}\n")
