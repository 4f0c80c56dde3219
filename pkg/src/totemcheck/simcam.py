"""
Emissive ray-cast renderer for totem scenes.

A scene is a Cornell-box-like room (open toward the camera) with textured
walls, a few textured boxes and spheres on the floor, and glass sphere totems
floating between the camera and the objects. Shading is a pure texture lookup
at the first surface hit, so the only effect of a totem is to redirect rays.
Rays leaving a totem ignore the other totems.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .geomcore import PinholeCamera, SphereTotem, intersect_sphere, trace_totem
from .posefit import TotemMask

ROOM_FACES = ("back", "left", "right", "floor", "ceiling")
HIT_EPS = 1e-9
_NOISE_LATTICE = 32


@dataclass
class Texture:
    kind: str = "solid"
    colors: list = field(default_factory=lambda: [[0.5, 0.5, 0.5]])
    scale: float = 0.5
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("solid", "checker", "noise", "image"):
            raise ValueError(f"unknown texture kind {self.kind!r}")
        if self.kind == "checker" and len(self.colors) < 2:
            raise ValueError("checker texture needs two colors")
        if self.kind == "image" and not self.path:
            raise ValueError("image texture needs a path")
        if self.scale <= 0:
            raise ValueError("texture scale must be positive")
        self._cache = None

    def lattice(self) -> np.ndarray:
        if self._cache is None:
            if self.kind == "noise":
                rng = np.random.default_rng(self.seed)
                lo, hi = np.asarray(self.colors[0]), np.asarray(self.colors[-1])
                mix = rng.random((_NOISE_LATTICE, _NOISE_LATTICE, 3))
                self._cache = lo + (hi - lo) * mix
            elif self.kind == "image":
                from .imageio import read_rgb

                self._cache = read_rgb(self.path)
        return self._cache

    def __call__(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        n = len(uv)
        if self.kind == "solid":
            return np.broadcast_to(np.asarray(self.colors[0], dtype=np.float64), (n, 3)).copy()
        s = uv / self.scale
        if self.kind == "checker":
            parity = (np.floor(s[:, 0]).astype(np.int64) + np.floor(s[:, 1]).astype(np.int64)) % 2
            c = np.asarray(self.colors[:2], dtype=np.float64)
            return c[parity]
        if self.kind == "noise":
            lat = self.lattice()
            g = _NOISE_LATTICE
            i0 = np.floor(s).astype(np.int64)
            f = s - i0
            x0, y0 = i0[:, 0] % g, i0[:, 1] % g
            x1, y1 = (x0 + 1) % g, (y0 + 1) % g
            fx, fy = f[:, :1], f[:, 1:]
            return ((1 - fx) * (1 - fy) * lat[y0, x0] + fx * (1 - fy) * lat[y0, x1]
                    + (1 - fx) * fy * lat[y1, x0] + fx * fy * lat[y1, x1])
        img = self.lattice()
        h, w = img.shape[:2]
        px = np.floor(s[:, 0] * w).astype(np.int64) % w
        py = np.floor(s[:, 1] * w).astype(np.int64) % h
        return img[py, px]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "colors": [list(map(float, c)) for c in self.colors],
             "scale": float(self.scale)}
        if self.kind == "noise":
            d["seed"] = int(self.seed)
        if self.kind == "image":
            d["path"] = self.path
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Texture":
        return cls(kind=d["kind"], colors=d.get("colors", [[0.5, 0.5, 0.5]]),
                   scale=d.get("scale", 0.5), seed=d.get("seed", 0), path=d.get("path"))


@dataclass
class Room:
    width: float
    height: float
    depth: float
    textures: dict

    def __post_init__(self):
        if min(self.width, self.height, self.depth) <= 0:
            raise ValueError("room dimensions must be positive")
        missing = set(ROOM_FACES) - set(self.textures)
        if missing:
            raise ValueError(f"room textures missing faces: {sorted(missing)}")

    @property
    def lo(self) -> np.ndarray:
        return np.array([-self.width / 2, -self.height / 2, 0.0])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.width / 2, self.height / 2, self.depth])


@dataclass
class BoxObject:
    lo: np.ndarray
    hi: np.ndarray
    texture: Texture

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError("box max must exceed min on every axis")

    @property
    def z_min(self) -> float:
        return float(self.lo[2])


@dataclass
class SphereObject:
    center: np.ndarray
    radius: float
    texture: Texture

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    @property
    def z_min(self) -> float:
        return float(self.center[2] - self.radius)


def object_to_dict(o) -> dict:
    if isinstance(o, BoxObject):
        return {"type": "box", "min": o.lo.tolist(), "max": o.hi.tolist(),
                "texture": o.texture.to_dict()}
    return {"type": "sphere", "center": o.center.tolist(), "radius": float(o.radius),
            "texture": o.texture.to_dict()}


def object_from_dict(d: dict):
    tex = Texture.from_dict(d["texture"])
    if d["type"] == "box":
        return BoxObject(d["min"], d["max"], tex)
    return SphereObject(d["center"], d["radius"], tex)


@dataclass
class SceneSpec:
    room: Room
    objects: list
    totems: list
    camera: PinholeCamera
    seed: int = 0

    def validate(self):
        if self.totems and self.objects:
            nearest = min(o.z_min for o in self.objects)
            far_totem = max(t.center[2] + t.radius for t in self.totems)
            if far_totem >= nearest:
                raise ValueError(
                    f"totems must lie between camera and objects: totem z-extent {far_totem:.3f} "
                    f">= nearest object z {nearest:.3f}")
        lo, hi = self.room.lo, self.room.hi
        for t in self.totems:
            if np.any(t.center - t.radius <= lo) or np.any(t.center + t.radius >= hi):
                raise ValueError("totem must lie inside the room")

    def without_totems(self, keep=()) -> "SceneSpec":
        spec = copy.deepcopy(self)
        spec.totems = [t for i, t in enumerate(self.totems) if i in set(keep)]
        return spec

    def to_dict(self) -> dict:
        cam = self.camera
        objs = [object_to_dict(o) for o in self.objects]
        return {
            "version": 1,
            "seed": int(self.seed),
            "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                       "width": cam.width, "height": cam.height},
            "room": {"width": self.room.width, "height": self.room.height,
                     "depth": self.room.depth,
                     "textures": {k: self.room.textures[k].to_dict() for k in ROOM_FACES}},
            "objects": objs,
            "totems": [{"center": t.center.tolist(), "radius": t.radius, "ior": t.ior}
                       for t in self.totems],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        from .schemas import validate

        validate(d, "scene")
        room = Room(d["room"]["width"], d["room"]["height"], d["room"]["depth"],
                    {k: Texture.from_dict(v) for k, v in d["room"]["textures"].items()})
        objs = [object_from_dict(o) for o in d["objects"]]
        totems = [SphereTotem(t["center"], t["radius"], t.get("ior", 1.5)) for t in d["totems"]]
        spec = cls(room, objs, totems, PinholeCamera(**d["camera"]), d.get("seed", 0))
        spec.validate()
        return spec


@dataclass
class RenderBundle:
    image: np.ndarray
    totem_masks: list
    gt_poses: list
    spec: SceneSpec

    @property
    def union_mask(self) -> np.ndarray:
        m = np.zeros(self.image.shape[:2], dtype=bool)
        for tm in self.totem_masks:
            m |= tm.mask
        return m


# ---------------------------------------------------------------------------
# scene intersection


def _surfaces(spec: SceneSpec):
    """(kind, params, texture) for every shaded surface; index = surface id."""
    r = spec.room
    w2, h2 = r.width / 2, r.height / 2
    room = [
        ("plane", (2, r.depth, 0, 1), r.textures["back"]),
        ("plane", (0, -w2, 2, 1), r.textures["left"]),
        ("plane", (0, w2, 2, 1), r.textures["right"]),
        ("plane", (1, h2, 0, 2), r.textures["floor"]),
        ("plane", (1, -h2, 0, 2), r.textures["ceiling"]),
    ]
    objs = []
    for o in spec.objects:
        if isinstance(o, BoxObject):
            objs.append(("box", (o.lo, o.hi), o.texture))
        else:
            objs.append(("sphere", (o.center, o.radius), o.texture))
    return room + objs


def _plane_t(spec, origins, dirs, axis, value):
    lo, hi = spec.room.lo, spec.room.hi
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (value - origins[:, axis]) / dirs[:, axis]
        p = origins + t[:, None] * dirs
    inside = np.ones(len(t), dtype=bool)
    for k in range(3):
        if k != axis:
            inside &= (p[:, k] >= lo[k]) & (p[:, k] <= hi[k])
    ok = np.isfinite(t) & (t > HIT_EPS) & inside
    return np.where(ok, t, np.inf)


def _box_t(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    ok = (tmax >= tmin) & (tmin > HIT_EPS)
    return np.where(ok, tmin, np.inf)


def scene_hit(spec: SceneSpec, origins, dirs):
    """First surface hit along each ray, ignoring totems.

    Returns (t, surface_id, points); surface_id is -1 for rays that escape.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    surfs = _surfaces(spec)
    ts = np.full((len(surfs), len(origins)), np.inf)
    for i, (kind, params, _) in enumerate(surfs):
        if kind == "plane":
            ts[i] = _plane_t(spec, origins, dirs, params[0], params[1])
        elif kind == "box":
            ts[i] = _box_t(origins, dirs, *params)
        else:
            t = intersect_sphere(origins, dirs, params[0], params[1])
            ts[i] = np.where(np.isnan(t), np.inf, t)
    sid = np.argmin(ts, axis=0)
    t = ts[sid, np.arange(len(origins))]
    sid = np.where(np.isfinite(t), sid, -1)
    points = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    return t, sid, points


def surface_uv(kind, params, points):
    if kind == "plane":
        _, _, a, b = params
        return points[:, [a, b]]
    if kind == "box":
        lo, hi = params
        # face = axis whose bound the point sits on
        dist = np.minimum(np.abs(points - lo), np.abs(points - hi))
        axis = np.argmin(dist, axis=1)
        uv = np.empty((len(points), 2))
        for k, (a, b) in enumerate(((2, 1), (0, 2), (0, 1))):
            sel = axis == k
            uv[sel] = points[sel][:, [a, b]]
        return uv
    center, radius = params
    q = points - center
    az = np.arctan2(q[:, 0], q[:, 2])
    pol = np.arccos(np.clip(q[:, 1] / radius, -1.0, 1.0))
    return np.stack([radius * az, radius * pol], axis=1)


def shade(spec: SceneSpec, surface_id, points) -> np.ndarray:
    """Emissive color of each hit; escaped rays (id -1) are black."""
    surfs = _surfaces(spec)
    out = np.zeros((len(surface_id), 3))
    for i, (kind, params, tex) in enumerate(surfs):
        sel = surface_id == i
        if sel.any():
            out[sel] = tex(surface_uv(kind, params, points[sel]))
    return np.clip(out, 0.0, 1.0)


def trace_scene(spec: SceneSpec, origins, dirs) -> np.ndarray:
    _, sid, pts = scene_hit(spec, origins, dirs)
    return shade(spec, sid, pts)


# ---------------------------------------------------------------------------
# rendering


def totem_silhouettes(spec: SceneSpec, origins, dirs) -> np.ndarray:
    """(n_totems, n_rays) bool: whether each camera ray intersects each totem."""
    hits = np.zeros((len(spec.totems), len(origins)), dtype=bool)
    for j, tot in enumerate(spec.totems):
        hits[j] = np.isfinite(intersect_sphere(origins, dirs, tot.center, tot.radius))
    return hits


def _render_rays(spec: SceneSpec, origins, dirs):
    hits = totem_silhouettes(spec, origins, dirs)
    if hits.sum(axis=0).max(initial=0) > 1:
        raise ValueError("totem silhouettes overlap in image space")
    colors = trace_scene(spec, origins, dirs)
    for j, tot in enumerate(spec.totems):
        sel = np.nonzero(hits[j])[0]
        if len(sel) == 0:
            continue
        eo, ed, ok = trace_totem(origins[sel], dirs[sel], tot)
        c = np.zeros((len(sel), 3))
        if ok.any():
            c[ok] = trace_scene(spec, eo[ok], ed[ok])
        colors[sel] = c
    return colors, hits


def render(spec: SceneSpec) -> RenderBundle:
    """Render the camera view with exact totem masks and poses."""
    spec.validate()
    cam = spec.camera
    u, v = cam.pixel_centers()
    dirs = cam.directions(u, v).reshape(-1, 3)
    origins = np.zeros_like(dirs)
    colors, hits = _render_rays(spec, origins, dirs)
    image = colors.reshape(cam.height, cam.width, 3)
    masks = []
    for j in range(len(spec.totems)):
        m = hits[j].reshape(cam.height, cam.width)
        if not m.any():
            raise ValueError(f"totem {j} is not visible in the image")
        masks.append(TotemMask(j, m))
    poses = [t.center.copy() for t in spec.totems]
    return RenderBundle(image, masks, poses, spec)


def render_novel_view(spec: SceneSpec, camera: PinholeCamera, position=(0.0, 0.0, 0.0),
                      rotation=None) -> np.ndarray:
    """Render from an arbitrary pinhole pose (``rotation`` maps camera to scene axes)."""
    if camera.width <= 0 or camera.height <= 0:
        raise ValueError("camera has zero resolution")
    R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    u, v = camera.pixel_centers()
    dirs = camera.directions(u, v).reshape(-1, 3) @ R.T
    origins = np.broadcast_to(np.asarray(position, dtype=np.float64), dirs.shape).copy()
    colors, _ = _render_rays(spec, origins, dirs)
    return colors.reshape(camera.height, camera.width, 3)


def depth_map(spec: SceneSpec, camera: PinholeCamera, position=(0.0, 0.0, 0.0), rotation=None):
    """Distance along each pixel ray to the first scene surface (totems ignored)."""
    R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    u, v = camera.pixel_centers()
    dirs = camera.directions(u, v).reshape(-1, 3) @ R.T
    origins = np.broadcast_to(np.asarray(position, dtype=np.float64), dirs.shape).copy()
    t, _, _ = scene_hit(spec, origins, dirs)
    return t.reshape(camera.height, camera.width)


# ---------------------------------------------------------------------------
# scene generation


def default_camera(size: int = 256) -> PinholeCamera:
    f = 160.0 * size / 256
    return PinholeCamera(f, f, size / 2, size / 2, size, size)


def _random_texture(rng) -> Texture:
    base = rng.uniform(0.1, 0.9, size=3)
    other = np.clip(base + rng.uniform(-0.5, 0.5, size=3), 0.0, 1.0)
    if rng.random() < 0.5:
        return Texture("checker", [base.tolist(), other.tolist()], scale=float(rng.uniform(0.3, 0.7)))
    return Texture("noise", [base.tolist(), other.tolist()], scale=float(rng.uniform(0.25, 0.6)),
                   seed=int(rng.integers(2 ** 31)))


def totem_row(n: int, z: float = 1.5, y: float = 0.42, radius: float = 0.25, ior: float = 1.5,
              spread: float = 0.84, jitter: float = 0.0, rng=None) -> list:
    """Totems in a row below the image center, evenly spaced in x."""
    xs = np.linspace(-spread, spread, n) if n > 1 else np.zeros(1)
    out = []
    for x in xs:
        dz = rng.uniform(-jitter, jitter) if (rng is not None and jitter) else 0.0
        dy = rng.uniform(-jitter, jitter) if (rng is not None and jitter) else 0.0
        out.append(SphereTotem([float(x), y + dy, z + dz], radius, ior))
    return out


def random_scene(seed: int = 0, n_totems: int = 4, size: int = 256, n_objects=(2, 4)) -> SceneSpec:
    """A random textured room with objects on the floor and a row of totems."""
    rng = np.random.default_rng(seed)
    W = float(rng.uniform(3.6, 4.4))
    H = float(rng.uniform(2.6, 3.2))
    D = float(rng.uniform(4.0, 8.0))
    room = Room(W, H, D, {f: _random_texture(rng) for f in ROOM_FACES})
    objects = []
    for _ in range(int(rng.integers(n_objects[0], n_objects[1] + 1))):
        s = float(rng.uniform(0.5, 1.2))
        x = float(rng.uniform(-W / 2 + s, W / 2 - s))
        z = float(rng.uniform(2.7 + s, max(2.8 + s, D - s - 0.2)))
        if rng.random() < 0.5:
            h = float(rng.uniform(0.8, 2.0))
            lo = [x - s / 2, H / 2 - h, z - s / 2]
            hi = [x + s / 2, H / 2, z + s / 2]
            objects.append(BoxObject(lo, hi, _random_texture(rng)))
        else:
            objects.append(SphereObject([x, H / 2 - s / 2, z], s / 2, _random_texture(rng)))
    totems = totem_row(n_totems, jitter=0.03, rng=rng)
    spec = SceneSpec(room, objects, totems, default_camera(size), seed)
    spec.validate()
    return spec


def default_scene() -> SceneSpec:
    return random_scene(0)
