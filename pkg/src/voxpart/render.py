"""Pinhole cameras, ray generation, stratified sampling and alpha compositing.

Cameras look along their local -z axis (right-handed frame, +x right, +y up in
camera space; image row 0 is the top of the frame).  All rendering happens
inside the fixed unit cube.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .fields import WORLD_HI, WORLD_LO, FieldBundle, activate_density, query_bundle
from .tensor import (Tensor, add, concat, cumprod, exp, mse, mul, narrow,
                     nll_probs, reduce_sum, reshape, scale, shift, sigmoid)

BACKGROUND_LABEL = 255


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray  # [4,4]

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("camera focal lengths must be positive")
        r = self.cam_to_world[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise DataError("camera rotation is not orthonormal")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "cam_to_world": [float(v) for v in self.cam_to_world.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.asarray(d["cam_to_world"], dtype=np.float64).reshape(4, 4))


def save_cameras(path, cameras: list[Camera]) -> None:
    with open(path, "w") as f:
        json.dump([c.to_dict() for c in cameras], f, indent=1)


def load_cameras(path) -> list[Camera]:
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read cameras {path}: {e}") from e
    return [Camera.from_dict(d) for d in raw]


def look_at_camera(eye, target, fx: float, width: int, height: int,
                   up=(0.0, 1.0, 0.0), fy: float | None = None) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = eye - target
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    n = np.linalg.norm(x)
    if n < 1e-9:
        x = np.cross(np.array([0.0, 0.0, 1.0]), z)
        n = np.linalg.norm(x)
    x = x / n
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, eye
    return Camera(fx, fy if fy is not None else fx, width / 2.0, height / 2.0,
                  width, height, c2w)


@dataclass
class RayBatch:
    origins: np.ndarray   # [R,3]
    dirs: np.ndarray      # [R,3] unit
    t_near: np.ndarray    # [R]
    t_far: np.ndarray     # [R]
    valid: np.ndarray     # [R] bool; False = ray misses the unit cube


def intersect_unit_cube(origins: np.ndarray, dirs: np.ndarray):
    """Slab test against [-0.5, 0.5]^3; returns (t_near, t_far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (WORLD_LO - origins) * inv
        t1 = (WORLD_HI - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # rays parallel to an axis: inside the slab -> (-inf, inf), outside -> miss
    par = dirs == 0.0
    inside = (origins >= WORLD_LO) & (origins <= WORLD_HI)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    t_near = np.maximum(t_near, 0.0)
    hit = t_far > t_near
    return t_near, t_far, hit


def generate_rays(camera: Camera, pixels: np.ndarray) -> RayBatch:
    """Rays through pixel centers; pixels are integer (col,row) pairs."""
    pixels = np.asarray(pixels)
    px = pixels[:, 0].astype(np.float64) + 0.5
    py = pixels[:, 1].astype(np.float64) + 0.5
    d_cam = np.stack([
        (px - camera.cx) / camera.fx,
        (camera.cy - py) / camera.fy,
        -np.ones_like(px),
    ], axis=-1)
    d_world = d_cam @ camera.cam_to_world[:3, :3].T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.cam_to_world[:3, 3], d_world.shape).copy()
    t_near, t_far, hit = intersect_unit_cube(origins, d_world)
    t_near = np.where(hit, t_near, 0.0)
    t_far = np.where(hit, t_far, 0.0)
    return RayBatch(origins, d_world, t_near, t_far, hit)


def all_pixels(camera: Camera) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


def sample_along_ray(origin, direction, t_near: float, t_far: float, m: int,
                     jitter: bool = False, rng: np.random.Generator | None = None):
    """Stratified samples for one ray: (t [m], delta [m], points [m,3]).

    Bin midpoints when jitter is off; uniform draws within bins otherwise.
    delta_i = t_{i+1} - t_i, with the last delta closed by t_far.
    A ray that misses (t_near >= t_far) yields empty arrays.
    """
    if t_near >= t_far:
        return np.zeros(0), np.zeros(0), np.zeros((0, 3))
    edges = np.linspace(t_near, t_far, m + 1)
    if jitter:
        if rng is None:
            raise ValueError("jitter sampling needs an rng")
        u = rng.uniform(size=m)
    else:
        u = np.full(m, 0.5)
    t = edges[:-1] + u * (edges[1:] - edges[:-1])
    delta = np.empty(m)
    delta[:-1] = t[1:] - t[:-1]
    delta[-1] = t_far - t[-1]
    points = np.asarray(origin)[None, :] + t[:, None] * np.asarray(direction)[None, :]
    return t, delta, points


def sample_batch(rays: RayBatch, m: int, jitter: bool = False,
                 rng: np.random.Generator | None = None):
    """Vectorized stratified sampling: (t [R,m], delta [R,m], points [R,m,3]).

    Invalid rays receive all-zero deltas so they composite to nothing.
    """
    r = rays.origins.shape[0]
    span = rays.t_far - rays.t_near
    if jitter:
        if rng is None:
            raise ValueError("jitter sampling needs an rng")
        u = rng.uniform(size=(r, m))
    else:
        u = np.full((r, m), 0.5)
    idx = np.arange(m)
    t = rays.t_near[:, None] + (idx[None, :] + u) * (span / m)[:, None]
    delta = np.empty((r, m))
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = rays.t_far - t[:, -1]
    delta[~rays.valid] = 0.0
    points = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
    return t, delta, points


def composite(values: Tensor, sigmas: Tensor, deltas: np.ndarray):
    """Alpha-composite per-point values along each ray.

    values [R,M,C], sigmas [R,M] (non-negative), deltas [R,M] constants.
    Returns (out [R,C], acc [R]); out is NOT renormalized — white-background
    targets are formed as out + (1-acc).
    """
    if sigmas.data.min() < 0:
        raise ValueError("negative sigma")
    r, m = sigmas.data.shape
    dt = Tensor(np.asarray(deltas, dtype=sigmas.dtype))
    one_minus_alpha = exp(scale(mul(sigmas, dt), -1.0))
    alpha = shift(scale(one_minus_alpha, -1.0), 1.0)
    # exclusive cumulative transmittance: T_i = prod_{j<i} (1 - alpha_j)
    ones = Tensor(np.ones((r, 1), dtype=sigmas.dtype))
    trans = narrow(cumprod(concat([ones, one_minus_alpha], axis=1), axis=1), 1, 0, m)
    w = mul(alpha, trans)
    out = reduce_sum(mul(reshape(w, (r, m, 1)), values), axis=1)
    acc = reduce_sum(w, axis=1)
    return out, acc


def white_background(out: Tensor, acc: Tensor):
    """out [R,C] over white: out + (1-acc)."""
    r = acc.data.shape[0]
    return add(out, reshape(shift(scale(acc, -1.0), 1.0), (r, 1)))


def render_pixels_fit(bundle: FieldBundle, rays: RayBatch, m: int,
                      jitter: bool = False, rng=None):
    """Fit-mode rendering: density + sigmoid(logit-RGB) straight from the grids.

    Returns (rgb [R,3] over white, acc [R]).
    """
    r = rays.origins.shape[0]
    _, delta, points = sample_batch(rays, m, jitter=jitter, rng=rng)
    d_log, f_log = query_bundle(bundle, points.reshape(-1, 3))
    sig = reshape(activate_density(d_log), (r, m))
    rgb = reshape(sigmoid(f_log), (r, m, 3))
    out, acc = composite(rgb, sig, delta)
    return white_background(out, acc), acc


def part_distribution(part_probs: Tensor, acc: Tensor) -> Tensor:
    """Append the background slot (1 - acc) to composited part probabilities."""
    r, k = part_probs.data.shape
    bg = reshape(shift(scale(acc, -1.0), 1.0), (r, 1))
    return concat([part_probs, bg], axis=1)


def rendering_loss(rgb: Tensor, gt_rgb: np.ndarray,
                   part_probs: Tensor | None = None, acc: Tensor | None = None,
                   labels: np.ndarray | None = None) -> Tensor:
    """MSE on rgb (+ cross entropy on the part distribution when labels given).

    Labels use part ids 0..K-1 with 255 for background (mapped to slot K).
    """
    loss = mse(rgb, Tensor(np.asarray(gt_rgb, dtype=rgb.dtype)))
    if labels is not None:
        if part_probs is None or acc is None:
            raise ValueError("part labels given without part probabilities")
        k = part_probs.data.shape[1]
        labels = np.asarray(labels).copy()
        bg = labels == BACKGROUND_LABEL
        if not np.all(bg | ((labels >= 0) & (labels < k))):
            raise ValueError("label out of range")
        labels[bg] = k
        dist = part_distribution(part_probs, acc)
        loss = add(loss, nll_probs(dist, labels.astype(np.int64)))
    return loss


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0,1]; inf when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr operands must share a shape")
    err = float(((a - b) ** 2).mean())
    if err == 0.0:
        return math.inf
    return -10.0 * math.log10(err)


def format_psnr(value: float) -> str:
    return "exact" if math.isinf(value) else f"{value:.2f}"
