import numpy as np
import pytest

import voxpart.ae as A
import voxpart.tensor as T
from voxpart.checkpoint import save_tensors, load_tensors
from voxpart.errors import DataError
from voxpart.optim import Adam


def toy_ae(seed=0):
    return A.AutoEncoder(channels=2, widths=(3, 4, 5), latent_channels=2, seed=seed)


def test_latent_shape_64x_compression():
    ae = A.AutoEncoder(seed=0)
    field = np.random.default_rng(0).standard_normal((4, 24, 24, 24))
    L0, mean, logvar = ae.encode(field)
    assert L0.shape == (4, 6, 6, 6)
    assert mean.shape == logvar.shape == (4, 6, 6, 6)
    # 64x fewer voxels
    assert (24 ** 3) // (6 ** 3) == 64


def test_non_cubic_extents():
    ae = A.AutoEncoder(seed=1)
    field = np.zeros((4, 8, 12, 16))
    L0, _, _ = ae.encode(field)
    assert L0.shape == (4, 2, 3, 4)
    assert ae.decode(L0).shape == (4, 8, 12, 16)


def test_encode_rejects_bad_input():
    ae = A.AutoEncoder(seed=0)
    with pytest.raises(DataError, match="divisible by 4"):
        ae.encode(np.zeros((4, 10, 12, 12)))
    with pytest.raises(DataError):
        ae.encode(np.zeros((3, 12, 12, 12)))


def test_mean_encode_deterministic():
    ae = toy_ae()
    field = np.random.default_rng(2).standard_normal((2, 8, 8, 8))
    a, mean, _ = ae.encode(field, sample=False)
    b, _, _ = ae.encode(field, sample=False)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(a.data, mean.data)


def test_sampled_encode_uses_reparameterization():
    ae = toy_ae()
    field = np.random.default_rng(3).standard_normal((2, 8, 8, 8))
    L0, mean, logvar = ae.encode(field, sample=True, rng=np.random.default_rng(7))
    again, _, _ = ae.encode(field, sample=True, rng=np.random.default_rng(7))
    assert np.array_equal(L0.data, again.data)
    noise = np.random.default_rng(7).standard_normal(mean.shape)
    want = mean.data + np.exp(logvar.data / 2) * noise
    assert np.allclose(L0.data, want, atol=1e-12)
    with pytest.raises(DataError):
        ae.encode(field, sample=True)


def test_zero_variance_limit():
    mean = T.Tensor(np.array([1.0, -2.0, 3.0]))
    logvar = T.Tensor(np.full(3, -1e6))
    noise = np.array([10.0, -10.0, 5.0])
    out = A.reparameterize(mean, logvar, noise)
    assert np.allclose(out.data, mean.data, atol=1e-15)


def test_decode_roundtrip_shape_and_finite():
    ae = A.AutoEncoder(seed=4)
    field = np.random.default_rng(4).standard_normal((4, 12, 12, 12))
    L0, _, _ = ae.encode(field)
    out = ae.decode(L0)
    assert out.shape == field.shape
    zero = ae.decode(np.zeros((4, 3, 3, 3)))
    assert np.all(np.isfinite(zero.data))


# ---------------------------------------------------------------- KL

def test_kl_standard_normal_is_zero():
    assert float(A.kl_loss(np.zeros((3, 2)), np.zeros((3, 2))).data) == 0.0


def test_kl_unit_mean():
    assert float(A.kl_loss(np.ones(5), np.zeros(5)).data) == pytest.approx(0.5)


def test_kl_nonnegative_and_permutation_invariant():
    rng = np.random.default_rng(5)
    for _ in range(20):
        m = rng.standard_normal(16)
        lv = rng.standard_normal(16)
        v = float(A.kl_loss(m, lv).data)
        assert v >= 0.0
        perm = rng.permutation(16)
        assert float(A.kl_loss(m[perm], lv[perm]).data) == pytest.approx(v)


def test_kl_gradients():
    err = T.grad_check(
        lambda m, lv: A.kl_loss(m, lv),
        [T.Tensor(np.random.default_rng(6).standard_normal(8), requires_grad=True),
         T.Tensor(np.random.default_rng(7).standard_normal(8) * 0.3, requires_grad=True)])
    assert err < 1e-4


# ---------------------------------------------------------------- training

def composite_loss(ae, field, noise, beta=1e-4):
    target = T.Tensor(field)
    L0, mean, logvar = ae.encode(target, sample=False)
    L0 = A.reparameterize(mean, logvar, noise)
    recon = T.mse(ae.decode(L0), target)
    return T.add(recon, T.scale(A.kl_loss(mean, logvar), beta))


def test_composite_gradient_check():
    ae = toy_ae(seed=8)
    field = np.random.default_rng(8).standard_normal((2, 4, 4, 4)) * 0.5
    noise = np.random.default_rng(9).standard_normal((2, 1, 1, 1))
    picks = [ae.params["enc1.b"], ae.params["head.b"], ae.params["out.w"]]
    for p in picks:
        assert p.requires_grad
    err = T.grad_check(lambda *ps: composite_loss(ae, field, noise), picks, eps=1e-5)
    assert err < 1e-3


def test_pretrain_smoke_loss_decreases():
    ae = toy_ae(seed=10)
    rng = np.random.default_rng(10)
    # smooth fields the bottleneck can actually represent
    g = np.linspace(-1, 1, 4)
    base = np.stack([np.add.outer(np.add.outer(g, g), g),
                     np.multiply.outer(np.multiply.outer(np.ones(4), g), np.ones(4))])
    fields = [c * base + d
              for c, d in [(0.5, 0.0), (1.0, 0.3), (1.5, -0.3), (2.0, 0.1)]]
    opt = Adam(ae.params, lr=1e-2)
    losses = []
    for _ in range(200):
        rep = A.pretrain_step(ae, opt, fields, rng, beta=1e-4, augment=False)
        losses.append(rep["total"])
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < smooth[0]
    assert smooth[-1] < 0.5 * smooth[0]  # should fall well below the start


def test_beta_zero_is_pure_reconstruction():
    ae = toy_ae(seed=11)
    rng = np.random.default_rng(11)
    fields = [rng.standard_normal((2, 4, 4, 4))]
    opt = Adam(ae.params, lr=0.0)
    rep = A.pretrain_step(ae, opt, fields, np.random.default_rng(3), beta=0.0,
                          augment=False)
    assert rep["total"] == pytest.approx(rep["recon"], abs=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    ae = toy_ae(seed=12)
    path = tmp_path / "ae.tnsr"
    save_tensors(path, ae.state_dict())
    other = toy_ae(seed=99)
    other.load_state(load_tensors(path))
    # disk format is f32, so reload the source too before comparing
    ae.load_state(load_tensors(path))
    field = np.random.default_rng(12).standard_normal((2, 8, 8, 8))
    a, _, _ = ae.encode(field)
    b, _, _ = other.encode(field)
    assert np.array_equal(a.data, b.data)
    names = set(load_tensors(path))
    assert all(n.startswith("ae.") for n in names)
    bad = {k: v for k, v in load_tensors(path).items()}
    bad["ae.enc1.w"] = bad["ae.enc1.w"][:, :1]
    with pytest.raises(DataError, match="shape mismatch"):
        other.load_state(bad)
    del bad["ae.enc1.w"]
    with pytest.raises(DataError, match="missing"):
        other.load_state(bad)
