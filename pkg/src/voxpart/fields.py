"""Neural voxel fields: a density-logit grid plus logit-RGB feature grid.

World bounds are the fixed unit cube [-0.5, 0.5]^3; voxel centers sit at
(i + 0.5)/X - 0.5 per axis and queries outside the cube clamp to the boundary.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .tensor import (Tensor, concat, narrow, reduce_sum, shift, softplus,
                     sqrt, trilinear_sample)

VXF_MAGIC = b"VXF1"
CHANNELS = 4          # 1 density logit + 3 logit-RGB
DENSITY_SHIFT = -2.0  # softplus shift: activation = softplus(logit - 2)
WORLD_LO = -0.5
WORLD_HI = 0.5


@dataclass
class FieldBundle:
    density: Tensor   # [1,X,Y,Z] logits
    features: Tensor  # [3,X,Y,Z] logit-RGB

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.density.data.shape[1:]

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.density.data, self.features.data], axis=0)


def make_bundle(extents: tuple[int, int, int], init_density: float = 0.0,
                requires_grad: bool = False, dtype=np.float64) -> FieldBundle:
    x, y, z = extents
    return FieldBundle(
        density=Tensor(np.full((1, x, y, z), init_density, dtype=dtype), requires_grad=requires_grad),
        features=Tensor(np.zeros((3, x, y, z), dtype=dtype), requires_grad=requires_grad),
    )


def bundle_from_array(arr, requires_grad: bool = False) -> FieldBundle:
    arr = np.asarray(arr)
    if arr.ndim != 4 or arr.shape[0] != CHANNELS:
        raise DataError(f"field array must be [{CHANNELS},X,Y,Z]")
    return FieldBundle(
        density=Tensor(arr[:1].copy(), requires_grad=requires_grad),
        features=Tensor(arr[1:].copy(), requires_grad=requires_grad),
    )


def concat_channels(bundle: FieldBundle) -> Tensor:
    """Stack density + features into a single [4,X,Y,Z] tensor (autodiff-aware)."""
    return concat([bundle.density, bundle.features], axis=0)


def activate_density(logits: Tensor) -> Tensor:
    """Non-negative density via shifted softplus."""
    return softplus(shift(logits, DENSITY_SHIFT))


def world_to_grid(points: np.ndarray, extents: tuple[int, int, int]) -> np.ndarray:
    """World positions [N,3] -> fractional grid coordinates (cell-centered)."""
    points = np.asarray(points, dtype=np.float64)
    ext = np.asarray(extents, dtype=np.float64)
    return (points - WORLD_LO) * ext - 0.5


def grid_to_world(extents: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-axis world coordinates of voxel centers."""
    return tuple((np.arange(n) + 0.5) / n + WORLD_LO for n in extents)


def voxel_center_array(extents: tuple[int, int, int]) -> np.ndarray:
    """All voxel centers as [X*Y*Z, 3] in x-major, z-fastest order."""
    xs, ys, zs = grid_to_world(extents)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def query(grid: Tensor, points: np.ndarray) -> Tensor:
    """Trilinear channel values of grid [C,X,Y,Z] at world points [N,3]."""
    coords = world_to_grid(points, grid.data.shape[1:])
    return trilinear_sample(grid, coords)


def query_bundle(bundle: FieldBundle, points: np.ndarray) -> tuple[Tensor, Tensor]:
    """(density logits [N,1], feature logits [N,3]) at world points."""
    coords = world_to_grid(points, bundle.extents)
    return trilinear_sample(bundle.density, coords), trilinear_sample(bundle.features, coords)


def tv_loss(grid: Tensor, eps: float = 0.0) -> Tensor:
    """Per-channel sqrt of total squared forward differences, summed over channels.

    eps is an optional stabilizer inside the sqrt for training on flat fields.
    """
    c, x, y, z = grid.data.shape
    if min(x, y, z) < 2:
        raise ValueError("field too small for TV")
    total = None
    for axis in (1, 2, 3):
        n = grid.data.shape[axis]
        hi = narrow(grid, axis, 1, n - 1)
        lo = narrow(grid, axis, 0, n - 1)
        d = hi - lo
        per_channel = reduce_sum((d * d).reshape(c, -1), axis=1)
        total = per_channel if total is None else total + per_channel
    if eps:
        total = shift(total, eps)
    return reduce_sum(sqrt(total))


def save_vxf(path, bundle_or_array) -> None:
    """Write a field as VXF1: header + f32 LE values, channel-major, x fastest."""
    arr = bundle_or_array.as_array() if isinstance(bundle_or_array, FieldBundle) else np.asarray(bundle_or_array)
    if arr.ndim != 4:
        raise DataError("field array must be [C,X,Y,Z]")
    c, x, y, z = arr.shape
    with open(path, "wb") as f:
        f.write(VXF_MAGIC)
        f.write(struct.pack("<IIII", x, y, z, c))
        # [C,X,Y,Z] -> (c,z,y,x) ordering so x varies fastest on disk
        f.write(arr.transpose(0, 3, 2, 1).astype("<f4").tobytes(order="C"))


def load_vxf(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read field {path}: {e}") from e
    if raw[:4] != VXF_MAGIC:
        raise DataError(f"not a field file: {path}")
    x, y, z, c = struct.unpack_from("<IIII", raw, 4)
    n = c * x * y * z
    try:
        vals = np.frombuffer(raw, dtype="<f4", count=n, offset=20)
    except ValueError as e:
        raise DataError(f"truncated field file: {path}") from e
    if raw[20 + 4 * n:]:
        raise DataError(f"trailing bytes in field file: {path}")
    return vals.reshape(c, z, y, x).transpose(0, 3, 2, 1).astype(np.float64)


def load_bundle(path, requires_grad: bool = False) -> FieldBundle:
    return bundle_from_array(load_vxf(path), requires_grad=requires_grad)
