"""
Manipulation synthesis, protected regions, inconsistency heatmaps and patch AP.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.spatial import ConvexHull, QhullError

from .geomcore import PinholeCamera
from .radfield import RadianceField, render_rays, sample_depths


@dataclass
class Manipulation:
    kind: str  # color_patch | splice
    region: tuple  # (u0, u1, v0, v1), half-open pixel ranges
    color: tuple | None = None
    source: np.ndarray | None = field(default=None, repr=False)  # splice source image

    def __post_init__(self):
        if self.kind not in ("color_patch", "splice"):
            raise ValueError(f"unknown manipulation kind {self.kind!r}")
        if self.kind == "splice" and self.source is None:
            raise ValueError("splice manipulation needs a source image")


def apply_manipulation(image, manip: Manipulation, seed: int = 0, totem_mask=None):
    """Return (manipulated image, gt_mask of changed pixels)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    u0, u1, v0, v1 = (int(x) for x in manip.region)
    if not (0 <= u0 <= u1 <= w and 0 <= v0 <= v1 <= h):
        raise ValueError(f"region {manip.region} outside image bounds {w}x{h}")
    region = np.zeros((h, w), dtype=bool)
    region[v0:v1, u0:u1] = True
    if totem_mask is not None and (region & np.asarray(totem_mask, dtype=bool)).any():
        raise ValueError("would tamper totem view: region overlaps a totem mask")
    out = img.copy()
    if manip.kind == "color_patch":
        color = manip.color
        if color is None:
            color = np.random.default_rng(seed).random(3)
        out[region] = np.asarray(color, dtype=np.float64)
    else:
        src = np.asarray(manip.source, dtype=np.float64)
        if src.shape != img.shape:
            raise ValueError("splice source must match the image size")
        out[region] = src[region]
    gt = np.any(out != img, axis=2)
    return out, gt


@dataclass
class ProtectedRegion:
    mask: np.ndarray
    hull: np.ndarray  # (K, 2) polygon vertices (u, v), counter-clockwise
    density: np.ndarray = field(default=None, repr=False)  # box-filtered point counts


def max_weight_points(field_: RadianceField, origins, dirs, near, far, n_samples):
    """Point of highest rendering weight along each ray; rays with no weight are dropped."""
    _, w = render_rays(field_, origins, dirs, near, far, n_samples)
    best = np.argmax(w, axis=1)
    has = w[np.arange(len(w)), best] > 0
    t = sample_depths(near, far, n_samples)[best]
    pts = np.asarray(origins) + t[:, None] * np.asarray(dirs)
    return pts[has]


def fill_convex(hull: np.ndarray, shape) -> np.ndarray:
    """Pixels whose centers lie inside a counter-clockwise convex polygon."""
    h, w = shape
    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    inside = np.ones((h, w), dtype=bool)
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        cross = (b[0] - a[0]) * (v - a[1]) - (b[1] - a[1]) * (u - a[0])
        inside &= cross >= -1e-9
    return inside


def protected_region(field_: RadianceField, rays, camera: PinholeCamera, near: float,
                     far: float, n_samples: int = 64, box_width: int = 30,
                     threshold: float = 0.10) -> ProtectedRegion:
    """Image area densely covered by the max-weight points of the totem rays."""
    pts = max_weight_points(field_, rays.origins, rays.dirs, near, far, n_samples)
    if len(pts) == 0:
        raise ValueError("field untrained: all rendering weights are zero")
    return region_from_points(pts, camera, box_width, threshold)


def region_from_points(pts, camera: PinholeCamera, box_width: int = 30,
                       threshold: float = 0.10) -> ProtectedRegion:
    h, w = camera.height, camera.width
    pts = pts[pts[:, 2] > 0]
    uv = camera.project(pts) if len(pts) else np.zeros((0, 2))
    iu = np.floor(uv[:, 0]).astype(np.int64)
    iv = np.floor(uv[:, 1]).astype(np.int64)
    ok = (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    counts = np.zeros((h, w))
    np.add.at(counts, (iv[ok], iu[ok]), 1.0)
    dens = uniform_filter(counts, size=box_width, mode="constant", cval=0.0) * box_width ** 2
    peak = dens.max()
    if peak <= 0:
        raise ValueError("no max-weight points project into the image")
    keep = dens > threshold * peak
    vv, uu = np.nonzero(keep)
    cand = np.stack([uu + 0.5, vv + 0.5], axis=1)
    try:
        hull = cand[ConvexHull(cand).vertices]
        # qhull returns counter-clockwise order in a y-up frame; flip for v-down fill test
        area2 = np.sum(hull[:, 0] * np.roll(hull[:, 1], -1) - np.roll(hull[:, 0], -1) * hull[:, 1])
        if area2 < 0:
            hull = hull[::-1]
        mask = fill_convex(hull, (h, w))
    except QhullError:
        # degenerate (collinear) support: the thresholded pixels themselves
        hull = cand
        mask = keep
    return ProtectedRegion(mask | keep, hull, dens)


def box_sum(img2d: np.ndarray, half: int) -> np.ndarray:
    """Sum over the (2*half-1)^2 window centered at each pixel, clipped to the image."""
    h, w = img2d.shape
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = np.cumsum(np.cumsum(img2d, axis=0), axis=1)
    r = half - 1
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w) - r, 0, w)
    x1 = np.clip(np.arange(w) + r + 1, 0, w)
    return (ii[y1][:, x1] - ii[y0][:, x1] - ii[y1][:, x0] + ii[y0][:, x0])


def patch_l1(image, reconstruction, K: int = 64, exclude=None) -> np.ndarray:
    """Patch-summed absolute color difference (all channels) at every pixel."""
    diff = np.abs(np.asarray(image, float) - np.asarray(reconstruction, float)).sum(axis=2)
    if exclude is not None:
        diff = np.where(exclude, 0.0, diff)
    return box_sum(diff, K)


def inconsistency_heatmap(image, reconstruction, region, K: int = 64, exclude=None,
                          metric=patch_l1, return_raw: bool = False):
    """Min-max normalized patch metric inside the protected region (zero outside).

    ``metric(image, reconstruction, K, exclude)`` is pluggable; only patch L1 ships.
    """
    rmask = region.mask if hasattr(region, "mask") else np.asarray(region, dtype=bool)
    raw = metric(image, reconstruction, K, exclude)
    raw = np.where(rmask, raw, 0.0)
    heat = np.zeros_like(raw)
    if rmask.any():
        vals = raw[rmask]
        lo, hi = vals.min(), vals.max()
        if hi > lo:
            heat[rmask] = (vals - lo) / (hi - lo)
    if return_raw:
        return heat, raw
    return heat


def average_precision(scores, labels) -> float:
    """Step-wise AP: every distinct score is a threshold; ties are ranked together."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = labels.sum()
    if n_pos == 0:
        raise ValueError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    # last index of each tie group
    ends = np.nonzero(np.r_[s[1:] != s[:-1], True])[0]
    tp = np.cumsum(l)[ends]
    npred = ends + 1
    precision = tp / npred
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


@dataclass
class PatchResult:
    center: tuple
    score: float
    label: bool


def patch_grid(band_height: int, width: int, patch: int = 64, n: int = 30):
    """Top-left corners of an n x n grid of patches spanning the band."""
    ys = np.round(np.linspace(0, max(band_height - patch, 0), n)).astype(int)
    xs = np.round(np.linspace(0, max(width - patch, 0), n)).astype(int)
    return [(int(y), int(x)) for y in ys for x in xs]


def totem_band(totem_mask) -> int:
    """Number of image rows fully above the highest totem pixel."""
    rows = np.nonzero(np.asarray(totem_mask, dtype=bool).any(axis=1))[0]
    return int(rows.min()) if len(rows) else int(np.asarray(totem_mask).shape[0])


def score_patches(heatmap, region, band_height: int, gt_mask=None, patch: int = 64, n: int = 30,
                  label_frac: float = 0.10):
    rmask = region.mask if hasattr(region, "mask") else np.asarray(region, dtype=bool)
    h, w = heatmap.shape
    out = []
    for y, x in patch_grid(min(band_height, h), w, patch, n):
        win = (slice(y, y + patch), slice(x, x + patch))
        if not rmask[win].any():
            continue
        label = bool(gt_mask[win].mean() > label_frac) if gt_mask is not None else False
        out.append(PatchResult((x + patch / 2, y + patch / 2), float(heatmap[win].mean()), label))
    return out


def patch_ap(heatmap, gt_mask, region, band_height: int, patch: int = 64, n: int = 30,
             label_frac: float = 0.10):
    """Returns (ap, naive_baseline, patches); ap is None when no patch is manipulated."""
    patches = score_patches(heatmap, region, band_height, gt_mask, patch, n, label_frac)
    if not patches:
        raise ValueError("no patches overlap the protected region")
    labels = np.array([p.label for p in patches])
    naive = float(labels.mean())
    if not labels.any():
        return None, naive, patches
    ap = average_precision([p.score for p in patches], labels)
    return ap, naive, patches


@dataclass
class DetectionReport:
    heatmap: np.ndarray = field(repr=False)
    raw: np.ndarray = field(repr=False)  # pre-normalization patch scores
    region: ProtectedRegion = field(repr=False)
    patches: list
    ap: float | None = None
    naive_baseline: float | None = None

    def to_dict(self) -> dict:
        inside = self.raw[self.region.mask]
        d = {
            "n_patches": len(self.patches),
            "region_pixels": int(self.region.mask.sum()),
            "max_raw_score": float(inside.max()) if inside.size else 0.0,
            "per_patch": [{"center": [float(c) for c in p.center], "score": p.score,
                           "label": p.label} for p in self.patches],
        }
        if self.ap is not None:
            d["ap"] = self.ap
            d["naive_baseline"] = self.naive_baseline
        return d


def detect(image, reconstruction, region: ProtectedRegion, totem_mask, gt_mask=None,
           K: int = 64, metric=patch_l1) -> DetectionReport:
    """Heatmap plus patch scores; AP is filled in only when a gt mask with positives is given."""
    heat, raw = inconsistency_heatmap(image, reconstruction, region, K, exclude=totem_mask,
                                      metric=metric, return_raw=True)
    band = totem_band(totem_mask)
    if gt_mask is None:
        patches = score_patches(heat, region, band)
        if not patches:
            raise ValueError("no patches overlap the protected region")
        return DetectionReport(heat, raw, region, patches)
    ap, naive, patches = patch_ap(heat, gt_mask, region, band)
    return DetectionReport(heat, raw, region, patches, ap, naive)
