import numpy as np
import pytest

import voxpart.diffusion as D
import voxpart.tensor as T
from voxpart.errors import DataError


def oracle_predict(L0):
    """Predictor that knows the clean latent; eps implied by the marginal."""

    def predict(Lt, t, z, e):
        eps = (Lt - (1.0 - t) * L0) / np.sqrt(t)
        return L0, eps

    return predict


# ---------------------------------------------------------------- forward

def test_forward_endpoints():
    rng = np.random.default_rng(0)
    L0 = rng.standard_normal((4, 6, 6, 6))
    eps = rng.standard_normal(L0.shape)
    assert np.array_equal(D.forward_sample(L0, 0.0, eps), L0)
    assert np.array_equal(D.forward_sample(L0, 1.0, eps), eps)


def test_forward_scalar_example():
    # 0.75*2 + 0.5*(-1) = 1
    out = D.forward_sample(np.array(2.0), 0.25, np.array(-1.0))
    assert out == pytest.approx(1.0, abs=1e-15)


def test_forward_rejects_bad_time_and_shape():
    L0 = np.zeros((2, 2))
    with pytest.raises(DataError):
        D.forward_sample(L0, -0.1, np.zeros((2, 2)))
    with pytest.raises(DataError):
        D.forward_sample(L0, 1.1, np.zeros((2, 2)))
    with pytest.raises(DataError):
        D.forward_sample(L0, 0.5, np.zeros((2, 3)))


def test_forward_marginal_moments():
    rng = np.random.default_rng(7)
    L0 = 1.3
    t = 0.6
    draws = np.array([D.forward_sample(np.array(L0), t, rng.standard_normal())
                      for _ in range(20000)])
    assert abs(draws.mean() - (1 - t) * L0) < 0.02
    assert abs(draws.var() - t) < 0.03


# ---------------------------------------------------------------- reverse

def test_single_full_step_recovers_L0():
    rng = np.random.default_rng(3)
    L0 = rng.standard_normal((4, 3, 3, 3))
    for t in np.arange(0.1, 1.01, 0.1):
        eps = rng.standard_normal(L0.shape)
        Lt = D.forward_sample(L0, t, eps)
        out = D.reverse_step(Lt, t, t, L0, eps, stochastic=False)
        assert np.max(np.abs(out - L0)) < 1e-6


def test_half_step_example():
    # t=1, dt=0.5, Lt=eps: mean = 0.5 L0 + 0.5 eps, std = 0.5
    rng = np.random.default_rng(5)
    L0 = rng.standard_normal((8,))
    eps = rng.standard_normal((8,))
    mean = D.reverse_step(eps, 1.0, 0.5, L0, eps, stochastic=False)
    assert np.allclose(mean, 0.5 * L0 + 0.5 * eps, atol=1e-12)
    noise = rng.standard_normal((8,))
    out = D.reverse_step(eps, 1.0, 0.5, L0, eps, noise=noise, stochastic=True)
    assert np.allclose(out - mean, 0.5 * noise, atol=1e-12)  # sqrt(0.25)


def test_step_exceeding_time_raises():
    with pytest.raises(DataError, match="step exceeds remaining time"):
        D.reverse_step(np.zeros(3), 0.3, 0.4, np.zeros(3), np.zeros(3))


def test_deterministic_step_repeatable():
    a = D.reverse_step(np.ones(4), 0.8, 0.3, np.ones(4), np.ones(4), stochastic=False)
    b = D.reverse_step(np.ones(4), 0.8, 0.3, np.ones(4), np.ones(4), stochastic=False)
    assert np.array_equal(a, b)


def test_one_stochastic_step_matches_forward_marginal():
    # forward to t, oracle step to u: samples must look like N((1-u)L0, u)
    rng = np.random.default_rng(11)
    L0 = 0.7
    t, u = 0.9, 0.4
    n = 10000
    eps = rng.standard_normal(n)
    Lt = (1 - t) * L0 + np.sqrt(t) * eps
    noise = rng.standard_normal(n)
    out = D.reverse_step(Lt, t, t - u, np.full(n, L0), eps, noise, stochastic=True)
    se_mean = np.sqrt(u / n)
    assert abs(out.mean() - (1 - u) * L0) < 3 * se_mean
    se_var = u * np.sqrt(2.0 / (n - 1))
    assert abs(out.var() - u) < 3 * se_var


# ---------------------------------------------------------------- loss

def test_diffusion_loss_values():
    rng = np.random.default_rng(2)
    L0 = rng.standard_normal((4, 2, 2, 2))
    eps = rng.standard_normal(L0.shape)
    assert D.diffusion_loss(L0, L0, eps, eps) == 0.0
    assert D.diffusion_loss(L0 + 1.0, L0, eps, eps) == pytest.approx(1.0, abs=1e-12)
    a = D.diffusion_loss(L0 + 0.5, L0, eps, eps)
    b = D.diffusion_loss(L0, L0, eps + 0.5, eps)
    assert a == pytest.approx(b, abs=1e-12)
    with pytest.raises(DataError):
        D.diffusion_loss(L0[:2], L0, eps, eps)


def test_diffusion_loss_tensor_gradients():
    rng = np.random.default_rng(4)
    L0 = rng.standard_normal((3, 2))
    eps = rng.standard_normal((3, 2))
    with T.Tape() as tape:
        L_pred = T.Tensor(L0 + 0.25, requires_grad=True)
        eps_pred = T.Tensor(eps - 0.5, requires_grad=True)
        loss = D.diffusion_loss(L_pred, L0, eps_pred, eps)
        grads = T.backward(loss)
    # d/dx mean((x-c)^2) = 2(x-c)/N
    assert np.allclose(grads.grad(L_pred), 2 * 0.25 / L0.size * np.ones_like(L0))
    assert np.allclose(grads.grad(eps_pred), -2 * 0.5 / eps.size * np.ones_like(eps))
    assert loss.data == pytest.approx(0.25 ** 2 + 0.5 ** 2, abs=1e-12)


# ---------------------------------------------------------------- config

def test_uniform_schedule_values():
    assert D.uniform_schedule(4) == [1.0, 0.75, 0.5, 0.25, 0.0]


def test_config_validation():
    cfg = D.DiffusionConfig(steps=10)
    assert len(cfg.schedule) == 11 and cfg.schedule[0] == 1.0 and cfg.schedule[-1] == 0.0
    with pytest.raises(DataError):
        D.DiffusionConfig(steps=2, schedule=[1.0, 0.5, 0.2])  # doesn't end at 0
    with pytest.raises(DataError):
        D.DiffusionConfig(steps=2, schedule=[0.9, 0.5, 0.0])  # doesn't start at 1
    with pytest.raises(DataError):
        D.DiffusionConfig(steps=2, schedule=[1.0, 0.5, 0.5, 0.0])
    with pytest.raises(DataError):
        D.DiffusionConfig(steps=2, t_min=0.0)


# ---------------------------------------------------------------- sampler

@pytest.mark.parametrize("steps", [1, 5, 10, 50])
def test_oracle_sampler_recovers_L0(steps):
    rng = np.random.default_rng(steps)
    L0 = rng.standard_normal((4, 6, 6, 6))
    cfg = D.DiffusionConfig(steps=steps)
    out = D.run_sampler(oracle_predict(L0), None, cfg, np.random.default_rng(0),
                        shape=L0.shape)
    assert np.max(np.abs(out - L0)) < 1e-5


def test_oracle_sampler_nonuniform_schedule():
    rng = np.random.default_rng(9)
    L0 = rng.standard_normal((4, 3, 3, 3))
    cfg = D.DiffusionConfig(schedule=[1.0, 0.93, 0.4, 0.11, 0.005, 0.0])
    out = D.run_sampler(oracle_predict(L0), None, cfg, np.random.default_rng(1),
                        shape=L0.shape)
    assert np.max(np.abs(out - L0)) < 1e-5


def test_single_step_sampler_equals_reverse_step():
    rng = np.random.default_rng(6)
    L0 = rng.standard_normal((4, 2, 2, 2))
    cfg = D.DiffusionConfig(steps=1)
    init = np.random.default_rng(42).standard_normal(L0.shape)
    out = D.run_sampler(oracle_predict(L0), None, cfg, np.random.default_rng(0),
                        init=init)
    eps = (init - 0.0 * L0) / 1.0
    manual = D.reverse_step(init, 1.0, 1.0, L0, eps, stochastic=False)
    assert np.array_equal(out, manual)


def test_sampler_seed_determinism():
    L0 = np.random.default_rng(8).standard_normal((4, 3, 3, 3))
    cfg = D.DiffusionConfig(steps=7)
    a = D.run_sampler(oracle_predict(L0), None, cfg, np.random.default_rng(123),
                      shape=L0.shape)
    b = D.run_sampler(oracle_predict(L0), None, cfg, np.random.default_rng(123),
                      shape=L0.shape)
    assert np.array_equal(a, b)


def test_guidance_extrapolates_predictions():
    # craft a predictor whose outputs differ by a known offset when conditioned
    calls = []

    def predict(Lt, t, z, e):
        calls.append(e)
        base = np.zeros_like(Lt)
        off = 0.0 if e is None else 1.0
        return base + off, base + 2 * off

    cfg = D.DiffusionConfig(steps=1)
    init = np.zeros((2, 2))
    out = D.run_sampler(predict, None, cfg, np.random.default_rng(0),
                        guidance=("emb", 2.0), init=init)
    # combined heads: L = 0 + 2*(1-0) = 2, eps = 0 + 2*(2-0) = 4
    manual = D.reverse_step(init, 1.0, 1.0, np.full_like(init, 2.0),
                            np.full_like(init, 4.0), stochastic=False)
    assert np.array_equal(out, manual)
    assert calls == [None, "emb"]


def test_sampler_requires_init_or_shape():
    cfg = D.DiffusionConfig(steps=1)
    with pytest.raises(DataError):
        D.run_sampler(lambda *a: (0, 0), None, cfg, np.random.default_rng(0))


# ---------------------------------------------------------------- time draw

def test_training_time_range_and_mean():
    rng = np.random.default_rng(10)
    t_min = 1e-3
    draws = np.array([D.draw_training_time(rng, t_min) for _ in range(100000)])
    assert draws.min() >= t_min and draws.max() <= 1.0
    assert abs(draws.mean() - (1 + t_min) / 2) < 0.01


def test_training_time_degenerate():
    rng = np.random.default_rng(0)
    assert D.draw_training_time(rng, 1.0) == 1.0
