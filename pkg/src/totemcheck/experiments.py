"""End-to-end pipelines shared by the CLI, the scripts and the acceptance tests."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import posefit, radfield, simcam, verify
from .geomcore import trace_totem_pixels


def recon_l1(image, reference, exclude=None) -> float:
    """Mean absolute per-channel error, ignoring ``exclude`` pixels (the totems)."""
    diff = np.abs(np.asarray(image, float) - np.asarray(reference, float))
    if exclude is not None:
        diff = diff[~np.asarray(exclude, dtype=bool)]
    return float(diff.mean())


def visible_region(spec: simcam.SceneSpec, masks=None) -> np.ndarray:
    """Protected region built from exact geometry: true first hits of every totem exit ray.

    Independent of any fitted field, so runs on the same scene are scored on the same pixels.
    """
    if masks is None:
        masks = simcam.render(spec).totem_masks
    u, v = spec.camera.pixel_centers()
    bare = spec.without_totems()
    pts = []
    for tot, m in zip(spec.totems, masks):
        eo, ed, ok = trace_totem_pixels(spec.camera, tot, u[m.mask], v[m.mask])
        t, _, p = simcam.scene_hit(bare, eo[ok], ed[ok])
        pts.append(p[np.isfinite(t)])
    return verify.region_from_points(np.concatenate(pts), spec.camera).mask


def ground_truth_view(spec: simcam.SceneSpec) -> np.ndarray:
    """Camera view of the scene with the totems taken out."""
    return simcam.render_novel_view(spec.without_totems(), spec.camera)


def initial_totems(spec: simcam.SceneSpec, masks) -> list:
    return [t.moved(posefit.init_totem_pose(spec.camera, m, t.radius))
            for t, m in zip(spec.totems, masks)]


def relative_pose_error(centers, gt) -> float:
    c, g = np.asarray(centers), np.asarray(gt)
    return float(np.mean(np.linalg.norm(c - g, axis=1) / np.linalg.norm(g, axis=1)))


def scene_box(spec: simcam.SceneSpec, margin: float = 0.05):
    return radfield.field_bounds(spec.room.lo, spec.room.hi, margin)


@dataclass
class Reconstruction:
    result: radfield.TrainResult
    init_centers: np.ndarray
    totems: list  # totems at the final centers
    rays: radfield.RayBatch = field(repr=False)
    image: np.ndarray = field(repr=False)
    l1: float | None = None  # inside the totem-visible region
    pose_l1: float | None = None
    l1_full: float | None = None  # every non-totem pixel
    eval_mask: np.ndarray | None = field(default=None, repr=False)

    def metrics(self) -> dict:
        last = self.result.history[-1]
        m = {"L_rec": last["L_rec"], "L_IoU": last["L_IoU"],
             "centers": np.asarray(self.result.centers).tolist()}
        if self.l1 is not None:
            m["recon_l1"] = self.l1
        if self.l1_full is not None:
            m["recon_l1_full"] = self.l1_full
        if self.pose_l1 is not None:
            m["pose_l1"] = self.pose_l1
        return m


def reconstruct(spec: simcam.SceneSpec, image, masks, cfg: radfield.TrainConfig,
                gt_view=None, callback=None, eval_mask=None) -> Reconstruction:
    """Initialize poses (unless oracle), fit the field, and render the camera view.

    With ``gt_view`` the view is scored by L1 over ``eval_mask`` (default: the
    totem-visible region of ``spec`` minus totem pixels) and over all non-totem pixels.
    """
    gt_centers = np.array([t.center for t in spec.totems])
    if cfg.pose_mode == "oracle":
        start = list(spec.totems)
    else:
        start = initial_totems(spec, masks)
    lo, hi = scene_box(spec)
    rays = radfield.preprocess_rays(spec.camera, start, masks, image, lo, hi,
                                    cfg.cube_overflow_threshold)
    res = radfield.train(rays, start, masks, spec.camera, cfg, lo, hi, gt_poses=gt_centers,
                         callback=callback)
    final = [t.moved(c) for t, c in zip(start, res.centers)]
    if cfg.pose_mode == "joint":
        # training rays at the refined centers, used downstream by the detector
        rays = radfield.preprocess_rays(spec.camera, final, masks, image, lo, hi,
                                        cfg.cube_overflow_threshold)
    img = radfield.render_camera_view(res.field, spec.camera, res.near, res.far,
                                      cfg.samples_per_ray)
    union = np.zeros(img.shape[:2], dtype=bool)
    for m in masks:
        union |= m.mask
    l1 = l1_full = None
    if gt_view is not None:
        if eval_mask is None:
            eval_mask = visible_region(spec, masks) & ~union
        l1 = recon_l1(img, gt_view, ~eval_mask)
        l1_full = recon_l1(img, gt_view, union)
    return Reconstruction(res, np.array([t.center for t in start]), final, rays, img, l1,
                          radfield.pose_error(res.centers, gt_centers), l1_full, eval_mask)


# ---------------------------------------------------------------------------
# manipulations


def _band_candidates(region_mask, band: int):
    m = np.zeros_like(region_mask)
    m[:band] = region_mask[:band]
    return m


def random_color_patch(region_mask, band: int, rng, side=(40, 72)) -> verify.Manipulation:
    """A random solid rectangle inside the band, mostly within the protected region."""
    h, w = region_mask.shape
    cand = _band_candidates(region_mask, band)
    vv, uu = np.nonzero(cand)
    if len(vv) == 0:
        raise ValueError("protected region does not reach above the totems")
    best, best_cov = None, -1.0
    for _ in range(200):
        sw = int(rng.integers(side[0], side[1] + 1))
        sh = int(rng.integers(side[0], side[1] + 1))
        sh = min(sh, band)
        k = int(rng.integers(len(vv)))
        u0 = int(np.clip(uu[k] - sw // 2, 0, w - sw))
        v0 = int(np.clip(vv[k] - sh // 2, 0, band - sh))
        cov = region_mask[v0:v0 + sh, u0:u0 + sw].mean()
        if cov > best_cov:
            best, best_cov = (u0, u0 + sw, v0, v0 + sh), cov
        if cov >= 0.9:
            break
    color = tuple(float(c) for c in rng.random(3))
    return verify.Manipulation("color_patch", best, color)


def random_added_object(spec: simcam.SceneSpec, region_mask, band: int, rng):
    """A textured object placed so it projects into the band of the protected region."""
    cand = _band_candidates(region_mask, band)
    vv, uu = np.nonzero(cand)
    if len(vv) == 0:
        raise ValueError("protected region does not reach above the totems")
    z_min = max(t.center[2] + t.radius for t in spec.totems) + 0.6
    lo, hi = spec.room.lo, spec.room.hi
    for _ in range(200):
        k = int(rng.integers(len(vv)))
        d = spec.camera.directions(uu[k] + 0.5, vv[k] + 0.5)
        t_wall, _, _ = simcam.scene_hit(spec.without_totems(), np.zeros((1, 3)), d[None])
        z_wall = float(t_wall[0] * d[2]) if np.isfinite(t_wall[0]) else hi[2]
        if z_wall - 0.3 <= z_min:
            continue
        z = float(rng.uniform(z_min, z_wall - 0.3))
        p = d / d[2] * z
        r = float(rng.uniform(0.2, 0.4))
        if np.any(p - r <= lo) or np.any(p + r >= hi):
            continue
        tex = simcam._random_texture(rng)
        if rng.random() < 0.5:
            return simcam.SphereObject(p, r, tex)
        return simcam.BoxObject(p - r, p + r, tex)
    raise ValueError("could not place a splice object inside the protected region")


def splice_source(spec: simcam.SceneSpec, add_objects=(), remove_objects=()) -> np.ndarray:
    """Camera view (totems excluded) of a modified copy of the scene."""
    mod = copy.deepcopy(spec)
    drop = set(remove_objects)
    mod.objects = [o for i, o in enumerate(mod.objects) if i not in drop] + list(add_objects)
    return simcam.render_novel_view(mod.without_totems(), mod.camera)


def splice_region(image, source, band: int, totem_mask):
    """Bounding rectangle (u0, u1, v0, v1) of the changed pixels above the totems."""
    diff = np.any(np.asarray(source) != np.asarray(image), axis=2) & ~np.asarray(totem_mask)
    diff[band:] = False
    vv, uu = np.nonzero(diff)
    if len(vv) == 0:
        return (0, 0, 0, 0)
    return (int(uu.min()), int(uu.max()) + 1, int(vv.min()), int(vv.max()) + 1)


def random_splice(spec, image, region_mask, totem_mask, rng):
    band = verify.totem_band(totem_mask)
    obj = random_added_object(spec, region_mask, band, rng)
    src = splice_source(spec, add_objects=[obj])
    manip = verify.Manipulation("splice", splice_region(image, src, band, totem_mask), source=src)
    out, gt = verify.apply_manipulation(image, manip, totem_mask=totem_mask)
    return manip, obj, out, gt


# ---------------------------------------------------------------------------
# detection


def protected_region_for(recon: Reconstruction, camera, n_samples: int = 64) -> verify.ProtectedRegion:
    r = recon.result
    return verify.protected_region(r.field, recon.rays, camera, r.near, r.far, n_samples)


@dataclass
class DetectionTrial:
    seed: int
    kind: str
    report: verify.DetectionReport
    control: verify.DetectionReport  # same scene, untampered
    recon_l1: float | None = None


def detection_trial(seed: int, kinds=("color_patch", "splice"), cfg: radfield.TrainConfig | None = None,
                    n_totems: int = 4, size: int = 256, patch_side=(32, 56)) -> list:
    """Render a random scene, reconstruct it once, and score each manipulation kind."""
    cfg = cfg or radfield.TrainConfig(pose_mode="init", total_epochs=300,
                                      seed=seed)
    spec = simcam.random_scene(seed, n_totems=n_totems, size=size)
    bundle = simcam.render(spec)
    gt_view = ground_truth_view(spec)
    recon = reconstruct(spec, bundle.image, bundle.totem_masks, cfg, gt_view)
    region = protected_region_for(recon, spec.camera, cfg.samples_per_ray)
    union = bundle.union_mask
    band = verify.totem_band(union)
    control = verify.detect(bundle.image, recon.image, region, union)
    rng = np.random.default_rng(seed + 7919)
    out = []
    for kind in kinds:
        # a draw that labels no patch positive (e.g. a splice hidden behind furniture) is redrawn
        for _ in range(10):
            if kind == "color_patch":
                manip = random_color_patch(region.mask, band, rng, patch_side)
                img, gt = verify.apply_manipulation(bundle.image, manip, seed, union)
            else:
                _, _, img, gt = random_splice(spec, bundle.image, region.mask, union, rng)
            rep = verify.detect(img, recon.image, region, union, gt)
            if rep.ap is not None:
                break
        else:
            raise ValueError(f"seed {seed}: no {kind} manipulation produced a positive patch")
        out.append(DetectionTrial(seed, kind, rep, control, recon.l1))
    return out


BENCHMARK_SIZE = 512


def benchmark_config(seed: int) -> radfield.TrainConfig:
    """Training schedule of the detection benchmark (short; longer runs do not raise AP)."""
    return radfield.TrainConfig(pose_mode="init", total_epochs=60, upsample_epochs=(8, 16), seed=seed)


def benchmark_trial(seed: int, kinds=("color_patch", "splice")) -> list:
    """One scene of the detection benchmark: 512^2, 4 totems, 28-48 px color patches."""
    return detection_trial(seed, kinds, benchmark_config(seed), size=BENCHMARK_SIZE,
                           patch_side=(28, 48))


def patch_raw_scores(report: verify.DetectionReport, patch: int = 64):
    """Pre-normalization mean score of every kept patch, with its label."""
    out = []
    for p in report.patches:
        x0, y0 = int(p.center[0] - patch / 2), int(p.center[1] - patch / 2)
        out.append((float(report.raw[y0:y0 + patch, x0:x0 + patch].mean()), p.label))
    return out


# ---------------------------------------------------------------------------
# reconstruction comparisons


def pose_mode_runs(spec: simcam.SceneSpec, total_epochs: int = 3000, seed: int = 0,
                   modes=("init", "joint", "oracle")) -> dict:
    """Reconstruct one scene under each pose mode; returns {mode: Reconstruction}."""
    bundle = simcam.render(spec)
    gt_view = ground_truth_view(spec)
    return {m: reconstruct(spec, bundle.image, bundle.totem_masks,
                           radfield.TrainConfig(pose_mode=m, total_epochs=total_epochs, seed=seed),
                           gt_view)
            for m in modes}


def totem_count_runs(seed: int = 0, counts=(2, 4), total_epochs: int = 3000,
                     pose_mode: str = "oracle", ref_count: int = 4) -> dict:
    """Same room and objects seen through different numbers of totems; {count: Reconstruction}.

    Every run is scored on the same pixels: the region visible through ``ref_count`` totems,
    minus the totem pixels of every configuration.
    """
    specs = {n: simcam.random_scene(seed, n_totems=n) for n in set(counts) | {ref_count}}
    bundles = {n: simcam.render(s) for n, s in specs.items()}
    mask = visible_region(specs[ref_count], bundles[ref_count].totem_masks)
    for b in bundles.values():
        mask &= ~b.union_mask
    out = {}
    for n in counts:
        cfg = radfield.TrainConfig(pose_mode=pose_mode, total_epochs=total_epochs, seed=seed)
        out[n] = reconstruct(specs[n], bundles[n].image, bundles[n].totem_masks, cfg,
                             ground_truth_view(specs[n]), eval_mask=mask)
    return out
