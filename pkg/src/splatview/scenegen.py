"""Procedural ray-traced scenes used as ground truth.

Scenes are built from analytic primitives (planes, spheres, capsules) with
procedural albedo textures and no lighting, so a surface point has the same
color from every viewpoint. Every primitive has a part id and a surface
parameterization (U, V) in [0, 1]^2, which yields exact IUV maps.

The world is z-up. The default subject is a seated "body proxy" (torso,
head, arms) at the origin facing +y, seen by a low input camera in front
of it, as in a desk-side video call.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .cloud import RGBDFrame
from .geometry import Camera, RigidTransform, look_at, pitch_roll, rotation_about

SHAPES = ("plane", "sphere", "capsule")
TEXTURES = ("checker", "gradient", "image")
OCCLUDER_PART = 24

SUBJECT_CENTROID = (0.0, 0.0, 1.1)
# frontal-hemisphere viewpoint box (meters) and angular limits (radians)
RANGE_X = (-1.8, 1.8)
RANGE_Y = (1.8, 2.7)
RANGE_Z = (0.1, 2.7)
MAX_PITCH = math.radians(45.0)
MAX_ROLL = math.radians(45.0)

DEFAULT_SIZE = 128
DEFAULT_FOCAL = 180.0
INPUT_EYE = (0.0, 2.0, 0.9)


@dataclass(frozen=True)
class Texture:
    kind: str = "checker"
    colors: tuple = ((0.6, 0.5, 0.4), (0.5, 0.4, 0.35))
    scale: tuple = (8.0, 8.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TEXTURES:
            raise ValueError(f"unknown texture {self.kind!r}")
        object.__setattr__(self, "colors", tuple(tuple(float(x) for x in c) for c in self.colors))
        object.__setattr__(self, "scale", tuple(float(x) for x in self.scale))

    def _grid(self) -> np.ndarray:
        n = max(2, int(self.scale[0])), max(2, int(self.scale[1]))
        t = np.random.default_rng(self.seed).random((n[1], n[0]))
        c0, c1 = np.array(self.colors[0]), np.array(self.colors[1])
        return c0 + t[..., None] * (c1 - c0)

    def evaluate(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Albedo at surface coordinates ``(u, v)``; U wraps around."""
        c0, c1 = np.array(self.colors[0]), np.array(self.colors[1])
        if self.kind == "checker":
            k = (np.floor(u * self.scale[0]) + np.floor(v * self.scale[1])) % 2
            return np.where(k[..., None] > 0, c1, c0)
        if self.kind == "gradient":
            t = 0.5 * v + 0.25 * (1.0 + np.sin(2 * np.pi * u * max(1.0, round(self.scale[0] / 4))))
            return c0 + t[..., None] * (c1 - c0)
        # "image": a seeded random grid, bilinear, periodic in U
        g = self._grid()
        gh, gw = g.shape[:2]
        x = (u % 1.0) * gw
        y = np.clip(v * (gh - 1), 0, gh - 1)
        x0 = np.floor(x).astype(int) % gw
        y0 = np.clip(np.floor(y).astype(int), 0, gh - 2)
        fx = (x - np.floor(x))[..., None]
        fy = (y - y0)[..., None]
        x1 = (x0 + 1) % gw
        top = g[y0, x0] * (1 - fx) + g[y0, x1] * fx
        bot = g[y0 + 1, x0] * (1 - fx) + g[y0 + 1, x1] * fx
        return top * (1 - fy) + bot * fy

    def to_dict(self) -> dict:
        return {"kind": self.kind, "colors": [list(c) for c in self.colors],
                "scale": list(self.scale), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "Texture":
        return cls(d["kind"], tuple(tuple(c) for c in d["colors"]), tuple(d["scale"]), int(d["seed"]))


@dataclass(frozen=True, eq=False)
class Primitive:
    """An analytic shape in world space.

    ``axes`` holds the local frame as columns. ``size`` is ``(half_x,
    half_y)`` for a plane (normal along local z), ``(radius,)`` for a
    sphere and ``(radius, half_length)`` for a capsule along local z.
    """

    shape: str
    center: np.ndarray
    size: tuple
    part_id: int
    texture: Texture = field(default_factory=Texture)
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))
    occluder: bool = False

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if not 1 <= int(self.part_id) <= 24:
            raise ValueError("part_id must be in 1..24")
        need = {"plane": 2, "sphere": 1, "capsule": 2}[self.shape]
        size = tuple(float(s) for s in self.size)
        if len(size) != need or min(size) <= 0:
            raise ValueError(f"{self.shape} needs {need} positive size values")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "part_id", int(self.part_id))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "axes", np.asarray(self.axes, dtype=np.float64).reshape(3, 3))

    def to_dict(self) -> dict:
        return {"shape": self.shape, "center": self.center.tolist(), "size": list(self.size),
                "part_id": self.part_id, "texture": self.texture.to_dict(),
                "axes": self.axes.ravel().tolist(), "occluder": self.occluder}

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(d["shape"], d["center"], tuple(d["size"]), d["part_id"],
                   Texture.from_dict(d["texture"]), np.reshape(d["axes"], (3, 3)),
                   bool(d.get("occluder", False)))


@dataclass(frozen=True, eq=False)
class SceneSpec:
    primitives: tuple = ()
    background: tuple = (0.2, 0.22, 0.25)
    seed: int = 0

    def __post_init__(self):
        prims = tuple(self.primitives)
        ids = [p.part_id for p in prims]
        if len(set(ids)) != len(ids):
            raise ValueError("part ids must be unique per primitive")
        object.__setattr__(self, "primitives", prims)
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))

    def without_occluders(self) -> "SceneSpec":
        return SceneSpec(tuple(p for p in self.primitives if not p.occluder), self.background, self.seed)

    def to_json(self) -> str:
        return json.dumps({"primitives": [p.to_dict() for p in self.primitives],
                           "background": list(self.background), "seed": self.seed},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        return cls(tuple(Primitive.from_dict(p) for p in d["primitives"]),
                   tuple(d["background"]), int(d.get("seed", 0)))


# ---------------------------------------------------------------------------
# ray casting

def _sphere_hit(o, d, c, r):
    oc = o - c
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * (d @ oc)
    cc = oc @ oc - r * r
    disc = b * b - 4 * a * cc
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, t1)
    return np.where(ok & (t > 0), t, np.inf)


def _intersect(prim: Primitive, o, d):
    """Ray parameter of the nearest hit (inf if none) and surface (U, V)."""
    loc_o = (o - prim.center) @ prim.axes
    loc_d = d @ prim.axes
    n = d.shape[0]
    if prim.shape == "plane":
        hx, hy = prim.size
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -loc_o[2] / loc_d[:, 2]
        p = loc_o + t[:, None] * loc_d
        ok = np.isfinite(t) & (t > 0) & (np.abs(p[:, 0]) <= hx) & (np.abs(p[:, 1]) <= hy)
        u = (p[:, 0] + hx) / (2 * hx)
        v = (p[:, 1] + hy) / (2 * hy)
        return np.where(ok, t, np.inf), u, v
    if prim.shape == "sphere":
        (r,) = prim.size
        t = _sphere_hit(np.zeros(3) + loc_o, loc_d, np.zeros(3), r)
        p = loc_o + np.where(np.isfinite(t), t, 0.0)[:, None] * loc_d
        u = (np.arctan2(p[:, 1], p[:, 0]) / (2 * np.pi)) % 1.0
        v = np.arccos(np.clip(p[:, 2] / r, -1, 1)) / np.pi
        return t, u, v

    r, h = prim.size
    # infinite cylinder about local z
    a = loc_d[:, 0] ** 2 + loc_d[:, 1] ** 2
    b = 2 * (loc_o[0] * loc_d[:, 0] + loc_o[1] * loc_d[:, 1])
    c = loc_o[0] ** 2 + loc_o[1] ** 2 - r * r
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cyl = (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a)
    z_cyl = loc_o[2] + t_cyl * loc_d[:, 2]
    t_cyl = np.where(ok & (t_cyl > 0) & (np.abs(z_cyl) <= h), t_cyl, np.inf)
    best = t_cyl
    which = np.zeros(n, dtype=np.int8)
    for k, sgn in ((1, -1.0), (2, 1.0)):
        cap = np.array([0.0, 0.0, sgn * h])
        t_cap = _sphere_hit(loc_o, loc_d, cap, r)
        zc = loc_o[2] + np.where(np.isfinite(t_cap), t_cap, 0.0) * loc_d[:, 2]
        t_cap = np.where(sgn * zc > h, t_cap, np.inf)
        closer = t_cap < best
        best = np.where(closer, t_cap, best)
        which = np.where(closer, k, which)
    p = loc_o + np.where(np.isfinite(best), best, 0.0)[:, None] * loc_d
    u = (np.arctan2(p[:, 1], p[:, 0]) / (2 * np.pi)) % 1.0
    v_body = 0.1 + 0.8 * (p[:, 2] + h) / (2 * h)
    # polar angle measured from the cap's pole, 0..pi/2 at the rim
    rho = np.hypot(p[:, 0], p[:, 1])
    theta_lo = np.arctan2(rho, np.maximum(-(p[:, 2] + h), 0.0))
    theta_hi = np.arctan2(rho, np.maximum(p[:, 2] - h, 0.0))
    v = np.where(which == 0, v_body,
                 np.where(which == 1, 0.1 * theta_lo / (np.pi / 2), 1.0 - 0.1 * theta_hi / (np.pi / 2)))
    return best, u, np.clip(v, 0.0, 1.0)


@dataclass
class RayHits:
    depth: np.ndarray
    rgb: np.ndarray
    iuv: np.ndarray
    primitive: np.ndarray  # index into scene.primitives, -1 for background


def cast_rays(scene: SceneSpec, cam: Camera, u, v, include_occluders: bool = True) -> RayHits:
    """Trace rays through continuous pixel coordinates ``(u, v)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    shape = np.broadcast_shapes(u.shape, v.shape)
    u, v = np.broadcast_to(u, shape).ravel(), np.broadcast_to(v, shape).ravel()
    dirs_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=1)
    # camera z of the hit equals the ray parameter because dirs have unit z
    dirs = dirs_cam @ cam.rotation
    origin = cam.center
    n = u.size
    best = np.full(n, np.inf)
    prim_idx = np.full(n, -1, dtype=np.int64)
    uu = np.zeros(n)
    vv = np.zeros(n)
    for k, prim in enumerate(scene.primitives):
        if prim.occluder and not include_occluders:
            continue
        t, pu, pv = _intersect(prim, origin, dirs)
        closer = (t < best) & (t >= cam.z_near) & (t <= cam.z_far)
        best = np.where(closer, t, best)
        prim_idx = np.where(closer, k, prim_idx)
        uu = np.where(closer, pu, uu)
        vv = np.where(closer, pv, vv)
    hit = prim_idx >= 0
    rgb = np.broadcast_to(np.asarray(scene.background), (n, 3)).copy()
    iuv = np.zeros((n, 3))
    for k, prim in enumerate(scene.primitives):
        sel = prim_idx == k
        if np.any(sel):
            rgb[sel] = prim.texture.evaluate(uu[sel], vv[sel])
            iuv[sel] = np.stack([np.full(sel.sum(), prim.part_id), uu[sel], vv[sel]], axis=1)
    depth = np.where(hit, best, 0.0)
    return RayHits(depth.reshape(shape), np.clip(rgb, 0, 1).reshape(shape + (3,)),
                   iuv.reshape(shape + (3,)), prim_idx.reshape(shape))


def raytrace(scene: SceneSpec, cam: Camera, include_occluders: bool = True) -> RGBDFrame:
    """Dense ground-truth frame: rgb, depth (0 = background), fg mask, IUV."""
    uu, vv = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    hits = cast_rays(scene, cam, uu, vv, include_occluders)
    return RGBDFrame(hits.rgb, hits.depth, iuv=hits.iuv, fg_mask=hits.primitive >= 0)


# ---------------------------------------------------------------------------
# cameras

def default_camera(size: int = DEFAULT_SIZE, focal: float = DEFAULT_FOCAL,
                   eye=INPUT_EYE, target=SUBJECT_CENTROID) -> Camera:
    scale = size / DEFAULT_SIZE
    return Camera(focal * scale, focal * scale, size / 2, size / 2, size, size, look_at(eye, target))


def sample_target_camera(base: Camera, seed: int, target=SUBJECT_CENTROID) -> Camera:
    """Random camera in the frontal viewpoint box, looking at ``target``.

    Position is uniform in the box and roll uniform in +-45 degrees; pitch
    follows from looking at the target and stays within +-45 degrees for the
    default subject.
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    eye = np.array([rng.uniform(*RANGE_X), rng.uniform(*RANGE_Y), rng.uniform(*RANGE_Z)])
    roll = rng.uniform(-MAX_ROLL, MAX_ROLL)
    return base.with_pose(look_at(eye, target, roll=roll))


def viewpoint_valid(cam: Camera, target=SUBJECT_CENTROID, tol: float = 1e-9) -> bool:
    """True when ``cam`` lies in the viewpoint box, aims at ``target`` and
    respects the pitch and roll limits."""
    c = cam.center
    for val, (lo, hi) in zip(c, (RANGE_X, RANGE_Y, RANGE_Z)):
        if not lo - tol <= val <= hi + tol:
            return False
    to_target = np.asarray(target, dtype=np.float64) - c
    fwd = cam.rotation[2]
    if fwd @ to_target < (1 - 1e-9) * np.linalg.norm(to_target):
        return False
    pitch, roll = pitch_roll(cam.pose)
    return abs(pitch) <= MAX_PITCH + tol and abs(roll) <= MAX_ROLL + tol


def stereo_pair(cam: Camera, baseline: float = 0.065):
    """Left/right cameras displaced by ``baseline`` along the camera x axis."""
    rot = cam.rotation
    offset = 0.5 * baseline * rot[0]
    return tuple(cam.with_pose(RigidTransform(rot, -rot @ (cam.center + sgn * offset)))
                 for sgn in (-1.0, 1.0))


# ---------------------------------------------------------------------------
# fixtures

def _random_texture(rng: np.random.Generator) -> Texture:
    kind = TEXTURES[int(rng.integers(len(TEXTURES)))]
    base = rng.uniform(0.25, 0.75, 3)
    delta = rng.uniform(0.1, 0.2) * rng.choice([-1.0, 1.0], 3)
    return Texture(kind, (tuple(base), tuple(np.clip(base + delta, 0, 1))),
                   (float(rng.integers(4, 9)), float(rng.integers(4, 9))), int(rng.integers(2**31)))


def body_proxy(rng: np.random.Generator) -> List[Primitive]:
    """Seated upper body: torso, head and two arms with random proportions."""
    cx, cy, cz = SUBJECT_CENTROID
    torso_r = rng.uniform(0.14, 0.18)
    torso_h = rng.uniform(0.16, 0.22)
    head_r = rng.uniform(0.09, 0.12)
    arm_r = rng.uniform(0.045, 0.06)
    arm_h = rng.uniform(0.18, 0.24)
    spread = rng.uniform(0.1, 0.3)
    prims = [
        Primitive("capsule", (cx, cy, cz - 0.1), (torso_r, torso_h), 1, _random_texture(rng)),
        Primitive("sphere", (cx, cy, cz - 0.1 + torso_h + torso_r + head_r * 0.9), (head_r,), 2,
                  _random_texture(rng), rotation_about((1, 0, 0), -np.pi / 2)),
    ]
    for k, side in ((3, -1.0), (4, 1.0)):
        axes = rotation_about((0, 1, 0), side * spread)
        center = (cx + side * (torso_r + arm_r + 0.02 + arm_h * math.sin(spread) * 0.5),
                  cy + rng.uniform(0.0, 0.08), cz - 0.1 + rng.uniform(-0.05, 0.05))
        prims.append(Primitive("capsule", center, (arm_r, arm_h), k, _random_texture(rng), axes))
    return prims


def _occluded_fraction(scene: SceneSpec, cam: Camera) -> float:
    subject = raytrace(scene, cam, include_occluders=False).fg_mask
    if not subject.any():
        return 0.0
    occ_ids = [i for i, p in enumerate(scene.primitives) if p.occluder]
    uu, vv = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    blocked = subject & np.isin(cast_rays(scene, cam, uu, vv).primitive, occ_ids)
    return float(blocked.sum() / subject.sum())


@dataclass
class Fixture:
    scene: SceneSpec
    input_camera: Camera
    target_cameras: List[Camera]
    occlusion_free_camera: Camera

    def to_dict(self) -> dict:
        return {"scene": json.loads(self.scene.to_json()),
                "input_camera": self.input_camera.to_dict(),
                "target_cameras": [c.to_dict() for c in self.target_cameras],
                "occlusion_free_camera": self.occlusion_free_camera.to_dict()}


def make_fixture(seed: int, n_targets: int = 4, size: int = DEFAULT_SIZE,
                 occluder: bool = True) -> Fixture:
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    prims = body_proxy(rng)
    bg = tuple(rng.uniform(0.05, 0.3, 3))
    cam = default_camera(size)
    if occluder:
        # a ball floating between the input camera and a point on the torso
        aim = np.array(SUBJECT_CENTROID) + np.array([rng.uniform(-0.12, 0.12), 0.0,
                                                     rng.uniform(-0.2, 0.15)])
        eye = cam.center
        dist = rng.uniform(0.45, 0.65)
        ray = (eye - aim) / np.linalg.norm(eye - aim)
        prims.append(Primitive("sphere", aim + dist * ray, (rng.uniform(0.09, 0.13),),
                               OCCLUDER_PART, _random_texture(rng), occluder=True))
    scene = SceneSpec(tuple(prims), bg, int(seed))

    targets = [sample_target_camera(cam, int(rng.integers(2**31))) for _ in range(n_targets)]

    free = cam
    if occluder:
        best = None
        for dx, dz in ((0.9, 0.0), (-0.9, 0.0), (0.0, 0.9), (1.3, 0.5), (-1.3, 0.5),
                       (0.6, 1.2), (-0.6, 1.2), (1.7, 1.0), (-1.7, 1.0)):
            eye = np.array(INPUT_EYE) + np.array([dx, 0.0, dz])
            c = cam.with_pose(look_at(eye, SUBJECT_CENTROID))
            frac = _occluded_fraction(scene, c)
            if best is None or frac < best[0]:
                best = (frac, c)
            if frac < 0.005:
                break
        free = best[1]
    return Fixture(scene, cam, targets, free)


def make_fixture_suite(count: int, seed: int, **kw) -> List[Fixture]:
    """``count`` deterministic fixtures; fixture ``k`` depends only on
    ``(seed, k)``."""
    if count < 0:
        raise ValueError("count must be non-negative")
    ss = np.random.SeedSequence(int(seed))
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(count)]
    return [make_fixture(s, **kw) for s in seeds]


def occluded_fraction(fixture: Fixture) -> float:
    """Share of subject pixels hidden by the occluder in the input view."""
    return _occluded_fraction(fixture.scene, fixture.input_camera)


def visible_from(scene: SceneSpec, view: RGBDFrame, cam: Camera, other: Camera,
                 tol: float = 1e-6, include_occluders: bool = True) -> np.ndarray:
    """Pixels of ``view`` (seen by ``cam``) whose surface point ``other`` also sees."""
    from .geometry import camera_to_world, unproject_pixel
    rows, cols = np.nonzero(view.depth > 0)
    out = np.zeros(view.depth.shape, dtype=bool)
    if rows.size == 0:
        return out
    world = camera_to_world(unproject_pixel(cols + 0.5, rows + 0.5, view.depth[rows, cols], cam),
                            cam.pose)
    p = other.pose.apply(world)
    z = p[:, 2]
    front = z > other.z_near
    zs = np.where(front, z, 1.0)
    u = other.fx * p[:, 0] / zs + other.cx
    v = other.fy * p[:, 1] / zs + other.cy
    inside = front & (u >= 0) & (u < other.width) & (v >= 0) & (v < other.height)
    hits = cast_rays(scene, other, np.where(inside, u, 0.5), np.where(inside, v, 0.5),
                     include_occluders)
    ok = inside & (np.abs(hits.depth - z) < tol * np.maximum(1.0, z))
    out[rows[ok], cols[ok]] = True
    return out
