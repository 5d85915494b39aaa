import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import voxpart.fields as F
import voxpart.metrics as M
from oracles import chamfer_loops
from voxpart.errors import DataError


def _field_with(occupied, extents=(4, 4, 4), logit=12.0):
    arr = np.full((4,) + extents, -10.0)
    for ijk in occupied:
        arr[0][ijk] = logit
    return arr


def test_default_tau_value():
    # sigma * voxel diagonal > 0.5 with diagonal sqrt(3)/X
    assert M.default_tau((24, 24, 24)) == pytest.approx(0.5 * 24 / np.sqrt(3))
    assert M.default_tau((4, 4, 4)) == pytest.approx(0.5 * 4 / np.sqrt(3))


def test_extract_points_single_voxel():
    arr = _field_with([(1, 2, 3)])
    pts = M.extract_points(arr, n=50, rng=np.random.default_rng(0))
    expected = F.voxel_center_array((4, 4, 4))[1 * 16 + 2 * 4 + 3]
    assert pts.shape == (50, 3)
    assert np.array_equal(pts, np.tile(expected, (50, 1)))


def test_extract_points_all_above_tau():
    rng = np.random.default_rng(1)
    arr = np.full((4, 5, 5, 5), -10.0)
    arr[0][rng.uniform(size=(5, 5, 5)) < 0.4] = 14.0
    tau = M.default_tau((5, 5, 5))
    pts = M.extract_points(arr, n=200, rng=rng, tau=tau)
    d, _ = F.query_bundle(F.bundle_from_array(arr), pts)
    sigma = np.logaddexp(0.0, d.data + F.DENSITY_SHIFT)
    assert (sigma > tau).all()


def test_extract_points_uniform_histogram():
    arr = _field_with([(0, 0, 0), (1, 1, 1), (2, 2, 2), (3, 3, 3)])
    pts = M.extract_points(arr, n=10000, rng=np.random.default_rng(3))
    centers = F.voxel_center_array((4, 4, 4))
    counts = [(pts == centers[i * 16 + i * 4 + i]).all(axis=1).sum()
              for i in range(4)]
    # binomial(1e4, 1/4): sd = sqrt(n p (1-p)) ~ 43.3
    assert sum(counts) == 10000
    for c in counts:
        assert abs(c - 2500) < 3 * np.sqrt(10000 * 0.25 * 0.75)


def test_extract_points_empty_shape_error():
    with pytest.raises(DataError, match="empty shape"):
        M.extract_points(np.full((4, 4, 4, 4), -10.0), n=8)


def test_extract_points_accepts_bundle():
    bundle = F.bundle_from_array(_field_with([(0, 0, 0)]))
    pts = M.extract_points(bundle, n=4, rng=np.random.default_rng(0))
    assert pts.shape == (4, 3)


def test_chamfer_identical_zero():
    a = np.random.default_rng(0).standard_normal((16, 3))
    assert M.chamfer(a, a) == 0.0


def test_chamfer_unit_offset_pair():
    a = np.zeros((1, 3))
    b = np.array([[1.0, 0.0, 0.0]])
    assert M.chamfer(a, b) == 2.0


def test_chamfer_symmetric_and_matches_oracle():
    rng = np.random.default_rng(5)
    for na, nb in [(1, 1), (3, 7), (32, 32), (17, 29)]:
        a = rng.standard_normal((na, 3))
        b = rng.standard_normal((nb, 3))
        ours = M.chamfer(a, b)
        assert ours == M.chamfer(b, a)
        assert ours == chamfer_loops(a, b)


def test_chamfer_empty_cloud_error():
    with pytest.raises(DataError, match="empty"):
        M.chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_chamfer_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((10, 3))
    b = rng.standard_normal((12, 3))
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    t = rng.standard_normal(3)
    assert abs(M.chamfer(a @ q.T + t, b @ q.T + t)
               - M.chamfer(a, b)) < 1e-9


def _cloud_set(rng, count, n=8):
    return [rng.standard_normal((n, 3)) for _ in range(count)]


def test_mmd_cov_identity():
    ref = _cloud_set(np.random.default_rng(2), 5)
    mmd, cov = M.mmd_cov(ref, ref)
    assert mmd == 0.0
    assert cov == 1.0


def test_mmd_cov_single_generated():
    rng = np.random.default_rng(3)
    ref = _cloud_set(rng, 6)
    _, cov = M.mmd_cov(_cloud_set(rng, 1), ref)
    assert cov == pytest.approx(1 / 6)


def test_mmd_cov_matches_double_loop_oracle():
    rng = np.random.default_rng(7)
    for n_gen, n_ref in [(4, 4), (8, 8), (3, 8)]:
        gen = _cloud_set(rng, n_gen)
        ref = _cloud_set(rng, n_ref)
        mmd, cov = M.mmd_cov(gen, ref)
        # brute force, element by element
        cd = [[chamfer_loops(g, r) for r in ref] for g in gen]
        o_total = 0.0
        for j in range(n_ref):
            best = cd[0][j]
            for i in range(1, n_gen):
                if cd[i][j] < best:
                    best = cd[i][j]
            o_total += best
        matched = set()
        for i in range(n_gen):
            arg, best = 0, cd[i][0]
            for j in range(1, n_ref):
                if cd[i][j] < best:
                    arg, best = j, cd[i][j]
            matched.add(arg)
        assert mmd == o_total / n_ref
        assert cov == len(matched) / n_ref
        assert 0.0 < cov <= 1.0
        assert mmd >= 0.0


def test_mmd_cov_empty_error():
    with pytest.raises(DataError, match="nonempty"):
        M.mmd_cov([], _cloud_set(np.random.default_rng(0), 2))


def test_metrics_csv_report(tmp_path):
    path = tmp_path / "metrics.csv"
    M.write_metrics_csv(path, [("desk", 0.0123, 0.875, 16, 8)])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "set_name,mmd_x100,cov_x100,n_gen,n_ref"
    name, mmd, cov, n_gen, n_ref = lines[1].split(",")
    assert name == "desk"
    assert float(mmd) == pytest.approx(1.23)
    assert float(cov) == pytest.approx(87.5)
    assert (n_gen, n_ref) == ("16", "8")
