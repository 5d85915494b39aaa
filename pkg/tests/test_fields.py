import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxpart import fields as F
from voxpart import tensor as T
from voxpart.errors import DataError

from oracles import tv_loops


def random_bundle(rng, extents=(4, 5, 6)):
    b = F.make_bundle(extents)
    b.density.data[:] = rng.standard_normal(b.density.shape)
    b.features.data[:] = rng.standard_normal(b.features.shape)
    return b


def test_activate_density_reference_values():
    logits = T.Tensor(np.array([0.0, 2.0, -10.0, 10.0]))
    sigma = F.activate_density(logits).data
    # softplus(x - 2)
    assert np.allclose(sigma[0], np.log1p(np.exp(-2.0)), atol=1e-12)
    assert np.allclose(sigma[1], np.log(2.0), atol=1e-12)
    assert sigma[2] < 1e-5
    assert np.allclose(sigma[3], 8.0, atol=1e-3)
    assert np.all(sigma >= 0)


def test_query_at_voxel_center_returns_stored_value():
    rng = np.random.default_rng(0)
    b = random_bundle(rng)
    x, y, z = b.extents
    i, j, k = 2, 3, 1
    center = np.array([[(i + 0.5) / x - 0.5, (j + 0.5) / y - 0.5, (k + 0.5) / z - 0.5]])
    d, f = F.query_bundle(b, center)
    assert np.allclose(d.data[0, 0], b.density.data[0, i, j, k], atol=1e-12)
    assert np.allclose(f.data[0], b.features.data[:, i, j, k], atol=1e-12)


def test_query_outside_bounds_clamps():
    rng = np.random.default_rng(1)
    b = random_bundle(rng)
    far = np.array([[5.0, 5.0, 5.0], [-5.0, 0.0, 0.0]])
    d, _ = F.query_bundle(b, far)
    assert np.isfinite(d.data).all()
    corner = b.density.data[0, -1, -1, -1]
    assert np.allclose(d.data[0, 0], corner, atol=1e-12)


def test_query_is_convex_combination_of_neighbours():
    rng = np.random.default_rng(2)
    b = random_bundle(rng)
    pts = rng.uniform(-0.5, 0.5, size=(40, 3))
    d, _ = F.query_bundle(b, pts)
    lo, hi = b.density.data.min(), b.density.data.max()
    assert np.all(d.data >= lo - 1e-12) and np.all(d.data <= hi + 1e-12)


def test_tv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    arr = rng.standard_normal((4, 3, 4, 5))
    got = F.tv_loss(T.Tensor(arr)).item()
    assert abs(got - tv_loops(arr)) < 1e-12


def test_tv_single_hot_voxel():
    # one unit voxel in a 2x2x2 grid: one forward difference per axis
    arr = np.zeros((1, 2, 2, 2))
    arr[0, 0, 0, 0] = 1.0
    got = F.tv_loss(T.Tensor(arr)).item()
    assert abs(got - np.sqrt(3.0)) < 1e-12


def test_tv_positive_homogeneity():
    rng = np.random.default_rng(4)
    arr = rng.standard_normal((2, 4, 4, 4))
    base = F.tv_loss(T.Tensor(arr)).item()
    assert abs(F.tv_loss(T.Tensor(3.5 * arr)).item() - 3.5 * base) < 1e-9
    assert abs(F.tv_loss(T.Tensor(np.zeros((2, 4, 4, 4)))).item()) == 0.0


def test_tv_too_small():
    with pytest.raises(ValueError, match="field too small for TV"):
        F.tv_loss(T.Tensor(np.zeros((1, 1, 4, 4))))


def test_tv_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    g = T.Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
    assert T.grad_check(lambda x: F.tv_loss(x), [g]) < 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_query_gradients_flow_to_grids(seed):
    rng = np.random.default_rng(seed)
    b = F.make_bundle((3, 3, 3), requires_grad=True)
    b.density.data[:] = rng.standard_normal(b.density.shape)
    pts = rng.uniform(-0.6, 0.6, size=(5, 3))
    with T.Tape():
        d, _ = F.query_bundle(b, pts)
        loss = T.reduce_sum(d)
    gm = T.backward(loss)
    g = gm.grad(b.density)
    assert g is not None and g.shape == b.density.shape
    # interpolation weights per point sum to 1
    assert abs(g.sum() - len(pts)) < 1e-9


# --- vxf files ---------------------------------------------------------------

def test_vxf_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    b = random_bundle(rng, extents=(3, 4, 5))
    p = tmp_path / "f.vxf"
    F.save_vxf(p, b)
    back = F.load_vxf(p)
    assert back.shape == (4, 3, 4, 5)
    assert np.allclose(back, b.as_array().astype(np.float32), atol=0)


def test_vxf_layout_is_channel_major_x_fastest(tmp_path):
    arr = np.zeros((4, 2, 2, 2), dtype=np.float64)
    arr[0, 1, 0, 0] = 7.0   # second value when x varies fastest
    p = tmp_path / "f.vxf"
    F.save_vxf(p, arr)
    raw = p.read_bytes()
    assert raw[:4] == b"VXF1"
    import struct
    assert struct.unpack_from("<IIII", raw, 4) == (2, 2, 2, 4)
    vals = np.frombuffer(raw, dtype="<f4", offset=20)
    assert vals[1] == 7.0
    assert vals.size == 4 * 8


def test_vxf_write_is_deterministic(tmp_path):
    rng = np.random.default_rng(7)
    b = random_bundle(rng)
    p1, p2 = tmp_path / "a.vxf", tmp_path / "b.vxf"
    F.save_vxf(p1, b)
    F.save_vxf(p2, b)
    assert p1.read_bytes() == p2.read_bytes()


def test_vxf_rejects_garbage(tmp_path):
    p = tmp_path / "junk.vxf"
    p.write_bytes(b"AAAA" + b"\0" * 40)
    with pytest.raises(DataError, match="not a field file"):
        F.load_vxf(p)
    p2 = tmp_path / "short.vxf"
    import struct
    p2.write_bytes(b"VXF1" + struct.pack("<IIII", 4, 4, 4, 4) + b"\0" * 8)
    with pytest.raises(DataError, match="truncated"):
        F.load_vxf(p2)


def test_bundle_from_array_validates_channels():
    with pytest.raises(DataError):
        F.bundle_from_array(np.zeros((3, 2, 2, 2)))
