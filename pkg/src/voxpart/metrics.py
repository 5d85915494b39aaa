"""Point-set geometry metrics: extraction, Chamfer distance, MMD / COV.

Chamfer here is the squared-distance, symmetric-sum convention:
CD(A,B) = mean_a min_b ||a-b||^2 + mean_b min_a ||a-b||^2.  Reported values
are multiplied by 100.
"""

import csv

import numpy as np

from . import fields as F
from .errors import DataError

POINTS_PER_CLOUD = 512


def default_tau(extents):
    """Density threshold making sigma * voxel-diagonal exceed 0.5."""
    diag = float(np.linalg.norm([1.0 / n for n in extents]))
    return 0.5 / diag


def extract_points(field, n=POINTS_PER_CLOUD, rng=None, tau=None):
    """Uniform sample of n voxel centers whose activated density clears tau.

    Sampling is with replacement, so n may exceed the occupied-voxel count.
    """
    if hasattr(field, "as_array"):
        field = field.as_array()
    field = np.asarray(field)
    if field.ndim != 4:
        raise DataError("field must be [C,X,Y,Z]")
    if rng is None:
        rng = np.random.default_rng(0)
    extents = field.shape[1:]
    if tau is None:
        tau = default_tau(extents)
    sigma = np.logaddexp(0.0, field[0] + F.DENSITY_SHIFT).reshape(-1)
    mask = sigma > tau
    if not mask.any():
        raise DataError("empty shape")
    centers = F.voxel_center_array(extents)[mask]
    return centers[rng.integers(0, centers.shape[0], size=n)]


def _directional_mean(d2, axis):
    mins = d2.min(axis=axis)
    total = 0.0
    for v in mins:            # sequential sum keeps parity with plain loops
        total += float(v)
    return total / mins.size


def chamfer(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DataError("point clouds must be [N,3]-like")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DataError("empty point cloud")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return _directional_mean(d2, 1) + _directional_mean(d2, 0)


def mmd_cov(gen, ref):
    """(mmd, cov) of a generated set against a reference set.

    mmd: mean over ref of its best (minimum) CD against gen.
    cov: fraction of ref claimed as nearest match by at least one gen cloud.
    """
    if not gen or not ref:
        raise DataError("metric sets must be nonempty")
    cd = np.empty((len(gen), len(ref)))
    for i, g in enumerate(gen):
        for j, r in enumerate(ref):
            cd[i, j] = chamfer(g, r)
    total = 0.0
    for j in range(len(ref)):
        total += float(cd[:, j].min())
    mmd = total / len(ref)
    matched = {int(np.argmin(cd[i])) for i in range(len(gen))}
    return mmd, len(matched) / len(ref)


def write_metrics_csv(path, rows):
    """rows: iterables of (set_name, mmd, cov, n_gen, n_ref); x100 applied."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("set_name", "mmd_x100", "cov_x100", "n_gen",
                         "n_ref"))
        for name, mmd, cov, n_gen, n_ref in rows:
            writer.writerow((name, repr(100.0 * mmd), repr(100.0 * cov),
                             int(n_gen), int(n_ref)))
