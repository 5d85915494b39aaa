"""Procedural toy scenes with part labels, plus an analytic ray tracer.

Four templates (stool, table, lamp, plane-toy), each decomposed into K=4
labeled parts built from axis-aligned boxes and cylinders inside the unit
cube.  The tracer is the rendering ground truth for fitting: nearest-hit,
flat shading albedo * (0.4 + 0.6 |n.l|), white background, part id per pixel
(255 = background).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .imgio import write_pgm, write_ppm
from .render import Camera, all_pixels, generate_rays, look_at_camera, save_cameras

TEMPLATES = ("stool", "table", "lamp", "plane-toy")
K_PARTS = 4
LIGHT_DIR = np.array([0.5, 1.0, 0.3]) / np.linalg.norm([0.5, 1.0, 0.3])
_AXES = {"x": 0, "y": 1, "z": 2}

# albedo families keyed by part index so color correlates with part identity
_PART_HUES = (
    ((0.55, 0.85), (0.08, 0.30), (0.08, 0.30)),   # reds
    ((0.08, 0.30), (0.25, 0.55), (0.55, 0.85)),   # blues
    ((0.10, 0.30), (0.55, 0.80), (0.15, 0.40)),   # greens
    ((0.60, 0.85), (0.45, 0.70), (0.05, 0.25)),   # ambers
)


@dataclass
class Primitive:
    kind: str                  # "box" | "cylinder"
    center: np.ndarray
    half: np.ndarray | None = None        # box half extents
    axis: str = "y"                       # cylinder axis
    radius: float = 0.0
    half_height: float = 0.0

    def to_dict(self):
        d = {"kind": self.kind, "center": [float(v) for v in self.center]}
        if self.kind == "box":
            d["half"] = [float(v) for v in self.half]
        else:
            d.update(axis=self.axis, radius=float(self.radius),
                     half_height=float(self.half_height))
        return d

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == "box":
            return cls("box", np.asarray(d["center"]), half=np.asarray(d["half"]))
        return cls("cylinder", np.asarray(d["center"]), axis=d["axis"],
                   radius=d["radius"], half_height=d["half_height"])

    def aabb(self):
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "box":
            h = np.asarray(self.half, dtype=np.float64)
        else:
            h = np.full(3, self.radius, dtype=np.float64)
            h[_AXES[self.axis]] = self.half_height
        return c - h, c + h


@dataclass
class ScenePart:
    index: int
    name: str
    albedo: np.ndarray
    primitives: list[Primitive]


@dataclass
class SceneSpec:
    template: str
    seed: int
    parts: list[ScenePart]

    def to_dict(self):
        return {
            "template": self.template,
            "seed": self.seed,
            "parts": [
                {"index": p.index, "name": p.name,
                 "albedo": [float(v) for v in p.albedo],
                 "primitives": [pr.to_dict() for pr in p.primitives]}
                for p in self.parts
            ],
        }

    @classmethod
    def from_dict(cls, d):
        parts = [
            ScenePart(p["index"], p["name"], np.asarray(p["albedo"]),
                      [Primitive.from_dict(pr) for pr in p["primitives"]])
            for p in d["parts"]
        ]
        return cls(d["template"], d["seed"], parts)

    @property
    def part_names(self):
        return [p.name for p in self.parts]


def save_scene(path, scene: SceneSpec):
    with open(path, "w") as f:
        json.dump(scene.to_dict(), f, indent=1, sort_keys=True)


def load_scene(path) -> SceneSpec:
    try:
        with open(path) as f:
            return SceneSpec.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise DataError(f"cannot read scene {path}: {e}") from e


def _albedo(rng, part_index):
    lo_hi = _PART_HUES[part_index % K_PARTS]
    return np.array([rng.uniform(lo, hi) for lo, hi in lo_hi])


def _box(center, half):
    return Primitive("box", np.asarray(center, float), half=np.asarray(half, float))


def _cyl(center, axis, radius, half_height):
    return Primitive("cylinder", np.asarray(center, float), axis=axis,
                     radius=float(radius), half_height=float(half_height))


def _stool(rng):
    w = rng.uniform(0.17, 0.24)
    seat_y = rng.uniform(0.02, 0.09)
    seat_t = rng.uniform(0.018, 0.03)
    leg_r = rng.uniform(0.027, 0.038)
    floor = -0.3
    leg_h = (seat_y - seat_t - floor) / 2
    off = w - leg_r - 0.015
    legs = [_cyl((sx * off, floor + leg_h, sz * off), "y", leg_r, leg_h)
            for sx in (-1, 1) for sz in (-1, 1)]
    bar_y = floor + rng.uniform(0.08, 0.14)
    bar_t = rng.uniform(0.018, 0.026)
    stretch = [
        _box((0, bar_y, 0), (off, bar_t, bar_t)),
        _box((0, bar_y, 0), (bar_t, bar_t, off)),
    ]
    cush_h = rng.uniform(0.02, 0.032)
    return [
        ("seat", [_box((0, seat_y, 0), (w, seat_t, w))]),
        ("legs", legs),
        ("stretcher", stretch),
        ("cushion", [_box((0, seat_y + seat_t + cush_h, 0), (w * 0.75, cush_h, w * 0.75))]),
    ]


def _table(rng):
    top_y = rng.uniform(0.12, 0.2)
    wx = rng.uniform(0.24, 0.3)
    wz = rng.uniform(0.16, 0.22)
    top_t = rng.uniform(0.015, 0.025)
    leg_w = rng.uniform(0.024, 0.034)
    floor = -0.3
    leg_h = (top_y - top_t - floor) / 2
    ox, oz = wx - leg_w - 0.02, wz - leg_w - 0.02
    legs = [_box((sx * ox, floor + leg_h, sz * oz), (leg_w, leg_h, leg_w))
            for sx in (-1, 1) for sz in (-1, 1)]
    apron_t = rng.uniform(0.018, 0.028)
    shelf_y = floor + rng.uniform(0.09, 0.15)
    return [
        ("top", [_box((0, top_y, 0), (wx, top_t, wz))]),
        ("legs", legs),
        ("apron", [_box((0, top_y - top_t - apron_t, 0), (wx * 0.8, apron_t, wz * 0.8))]),
        ("shelf", [_box((0, shelf_y, 0), (wx * 0.7, apron_t, wz * 0.7))]),
    ]


def _lamp(rng):
    base_r = rng.uniform(0.1, 0.15)
    base_h = rng.uniform(0.015, 0.03)
    floor = -0.3
    pole_r = rng.uniform(0.03, 0.042)
    shade_y = rng.uniform(0.14, 0.22)
    shade_r = rng.uniform(0.11, 0.16)
    shade_h = rng.uniform(0.045, 0.075)
    pole_h = (shade_y - floor) / 2
    bulb_r = pole_r + rng.uniform(0.025, 0.04)
    return [
        ("base", [_cyl((0, floor + base_h, 0), "y", base_r, base_h)]),
        ("pole", [_cyl((0, floor + base_h + pole_h, 0), "y", pole_r, pole_h)]),
        ("shade", [_cyl((0, shade_y + shade_h, 0), "y", shade_r, shade_h)]),
        ("bulb", [_cyl((0, shade_y - bulb_r, 0), "y", bulb_r, bulb_r)]),
    ]


def _plane_toy(rng):
    fus_r = rng.uniform(0.04, 0.06)
    fus_l = rng.uniform(0.24, 0.3)
    span = rng.uniform(0.24, 0.3)
    wing_t = rng.uniform(0.016, 0.024)
    wing_c = rng.uniform(0.05, 0.08)
    tail_h = rng.uniform(0.07, 0.1)
    eng_r = rng.uniform(0.026, 0.036)
    wings_z = -fus_l * rng.uniform(0.1, 0.3)
    return [
        ("fuselage", [_cyl((0, 0, 0), "z", fus_r, fus_l)]),
        ("wings", [_box((0, 0, wings_z), (span, wing_t, wing_c))]),
        ("tail", [
            _box((0, tail_h * 0.6, fus_l * 0.85), (wing_t, tail_h * 0.6, wing_c * 0.7)),
            _box((0, fus_r * 0.4, fus_l * 0.85), (span * 0.35, wing_t, wing_c * 0.6)),
        ]),
        ("engines", [
            _cyl((-span * 0.45, -fus_r * 0.9, wings_z), "z", eng_r, wing_c * 1.1),
            _cyl((span * 0.45, -fus_r * 0.9, wings_z), "z", eng_r, wing_c * 1.1),
        ]),
    ]


_BUILDERS = {"stool": _stool, "table": _table, "lamp": _lamp, "plane-toy": _plane_toy}


def generate_scene(template: str, seed: int) -> SceneSpec:
    if template not in _BUILDERS:
        raise DataError(f"unknown template '{template}' (have: {', '.join(TEMPLATES)})")
    rng = np.random.default_rng(np.random.SeedSequence([TEMPLATES.index(template), seed]))
    parts = []
    for idx, (name, prims) in enumerate(_BUILDERS[template](rng)):
        parts.append(ScenePart(idx, name, _albedo(rng, idx), prims))
    return SceneSpec(template, seed, parts)


# --- analytic ray tracing ----------------------------------------------------

def _hit_box(origins, dirs, prim):
    lo, hi = prim.aabb()
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tlo = np.minimum(t0, t1)
    thi = np.maximum(t0, t1)
    par = dirs == 0.0
    inside = (origins >= lo) & (origins <= hi)
    tlo = np.where(par, np.where(inside, -np.inf, np.inf), tlo)
    thi = np.where(par, np.where(inside, np.inf, -np.inf), thi)
    axis = np.argmax(tlo, axis=-1)
    t_near = tlo.max(axis=-1)
    t_far = thi.min(axis=-1)
    hit = (t_far >= t_near) & (t_near > 1e-9)
    n = np.zeros_like(dirs)
    rows = np.arange(len(dirs))
    n[rows, axis] = -np.sign(dirs[rows, axis])
    return np.where(hit, t_near, np.inf), n


def _hit_cylinder(origins, dirs, prim):
    k = _AXES[prim.axis]
    u, v = [a for a in range(3) if a != k]
    c = prim.center
    ou = origins[:, u] - c[u]
    ov = origins[:, v] - c[v]
    du, dv = dirs[:, u], dirs[:, v]
    a = du * du + dv * dv
    b = ou * du + ov * dv
    cc = ou * ou + ov * ov - prim.radius ** 2
    disc = b * b - a * cc
    t_best = np.full(len(origins), np.inf)
    normals = np.zeros_like(dirs)

    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.sqrt(np.maximum(disc, 0.0))
        for sign in (-1.0, 1.0):
            t = (-b + sign * root) / a
            pk = origins[:, k] + t * dirs[:, k] - c[k]
            ok = (disc > 0) & (a > 0) & (t > 1e-9) & (np.abs(pk) <= prim.half_height) & (t < t_best)
            if ok.any():
                pu = ou[ok] + t[ok] * du[ok]
                pv = ov[ok] + t[ok] * dv[ok]
                n = np.zeros((ok.sum(), 3))
                n[:, u] = pu / prim.radius
                n[:, v] = pv / prim.radius
                t_best[ok] = t[ok]
                normals[ok] = n
        # caps
        for side in (-1.0, 1.0):
            denom = dirs[:, k]
            t = (c[k] + side * prim.half_height - origins[:, k]) / denom
            pu = ou + t * du
            pv = ov + t * dv
            ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (pu * pu + pv * pv <= prim.radius ** 2) & (t < t_best)
            if ok.any():
                n = np.zeros((ok.sum(), 3))
                n[:, k] = side
                t_best[ok] = t[ok]
                normals[ok] = n
    return t_best, normals


def trace_rays(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest-hit trace: returns (t [R], normals [R,3], part_id [R] with 255=miss)."""
    r = len(origins)
    t_best = np.full(r, np.inf)
    normals = np.zeros((r, 3))
    part_id = np.full(r, 255, dtype=np.int64)
    for part in scene.parts:
        for prim in part.primitives:
            t, n = (_hit_box if prim.kind == "box" else _hit_cylinder)(origins, dirs, prim)
            closer = t < t_best
            t_best[closer] = t[closer]
            normals[closer] = n[closer]
            part_id[closer] = part.index
    return t_best, normals, part_id


def raytrace_reference(scene: SceneSpec, camera: Camera):
    """Flat-shaded reference render: (rgb [H,W,3] in [0,1], part map [H,W])."""
    rays = generate_rays(camera, all_pixels(camera))
    t, normals, part_id = trace_rays(scene, rays.origins, rays.dirs)
    h, w = camera.height, camera.width
    rgb = np.ones((h * w, 3))
    shade = 0.4 + 0.6 * np.abs(normals @ LIGHT_DIR)
    albedos = np.stack([p.albedo for p in scene.parts])
    hit = part_id != 255
    rgb[hit] = albedos[part_id[hit]] * shade[hit, None]
    return rgb.reshape(h, w, 3).clip(0, 1), part_id.reshape(h, w).astype(np.uint8)


# --- dataset packaging -------------------------------------------------------

def ring_cameras(n_views: int, size: int, radius: float = 2.0, fx: float | None = None,
                 elevations=(22.0, 48.0)) -> list[Camera]:
    """Cameras on a sphere looking at the origin: uniform azimuths, 2 elevations."""
    fx = fx if fx is not None else size * 1.05
    cams = []
    per = [(n_views + 1) // 2, n_views // 2]
    for row, (elev, count) in enumerate(zip(elevations, per)):
        el = math.radians(elev)
        for i in range(count):
            az = 2 * math.pi * i / max(count, 1) + row * math.pi / max(n_views, 1)
            eye = (radius * math.cos(el) * math.sin(az),
                   radius * math.sin(el),
                   radius * math.cos(el) * math.cos(az))
            cams.append(look_at_camera(eye, (0, 0, 0), fx, size, size))
    return cams


def make_dataset(out_dir, n_objects: int, n_views: int, size: int = 64, seed: int = 0,
                 n_test_views: int = 0, n_test_objects: int = 0) -> dict:
    """Generate scenes, trace all views, write images/cameras/manifest.

    Returns the manifest dict.  Regeneration with the same arguments is
    byte-identical.
    """
    if n_objects < 1:
        raise DataError("need at least one object")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total_views = n_views + n_test_views
    cams = ring_cameras(total_views, size)
    save_cameras(out / "cameras.json", cams)
    stride = total_views // n_test_views if n_test_views else 0

    total_objects = n_objects + n_test_objects
    objects = []
    for oi in range(total_objects):
        template = TEMPLATES[oi % len(TEMPLATES)]
        scene = generate_scene(template, seed * 1000 + oi)
        oid = f"obj_{oi:03d}"
        odir = out / oid
        odir.mkdir(exist_ok=True)
        save_scene(odir / "scene.json", scene)
        views = []
        for vi, cam in enumerate(cams):
            rgb, part = raytrace_reference(scene, cam)
            write_ppm(odir / f"rgb_{vi:03d}.ppm", rgb)
            write_pgm(odir / f"part_{vi:03d}.pgm", part)
            split = "test" if (stride and vi % stride == stride - 1) else "train"
            views.append({"rgb": f"{oid}/rgb_{vi:03d}.ppm", "part": f"{oid}/part_{vi:03d}.pgm",
                          "camera": vi, "split": split})
        objects.append({
            "id": oid, "template": template, "scene": f"{oid}/scene.json",
            "split": "train" if oi < n_objects else "test",
            "views": views,
        })
    manifest = {
        "seed": seed, "image_size": size, "part_count": K_PARTS,
        "cameras": "cameras.json", "objects": objects,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read dataset manifest {path}: {e}") from e
