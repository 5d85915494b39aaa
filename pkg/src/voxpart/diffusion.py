"""Decoupled diffusion over latent grids.

The forward process is the affine marginal ``L_t = (1 - t) L0 + sqrt(t) eps``
with t in [0, 1].  Because the attenuation is analytic, the reverse transition
can jump an arbitrary interval dt in closed form, which is what makes few-step
sampling exact for a perfect predictor (the mean telescopes back to L0).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from . import tensor as T


def uniform_schedule(steps):
    """Times 1 = t_0 > t_1 > ... > t_N = 0 with equal spacing."""
    if steps < 1:
        raise DataError("sampler needs at least one step")
    return [1.0 - k / steps for k in range(steps + 1)]


@dataclass
class DiffusionConfig:
    steps: int = 50
    t_min: float = 1e-3
    schedule: list = field(default=None)

    def __post_init__(self):
        if self.t_min <= 0:
            raise DataError("t_min must be positive")
        if self.schedule is None:
            self.schedule = uniform_schedule(self.steps)
        sched = [float(t) for t in self.schedule]
        if sched[0] != 1.0 or sched[-1] != 0.0:
            raise DataError("schedule must run from 1 to 0")
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise DataError("schedule must be strictly decreasing")
        self.schedule = sched
        self.steps = len(sched) - 1


def forward_sample(L0, t, eps):
    """Noisy latent at time t: (1 - t) L0 + sqrt(t) eps."""
    if not 0.0 <= t <= 1.0:
        raise DataError("diffusion time must lie in [0, 1]")
    if np.shape(eps) != np.shape(L0):
        raise DataError("noise shape does not match latent")
    return (1.0 - t) * np.asarray(L0) + np.sqrt(t) * np.asarray(eps)


def reverse_step(Lt, t, dt, L_pred, eps_pred, noise=None, stochastic=False):
    """One exact reverse transition from time t to t - dt.

    mean = Lt + dt*L_pred - (dt/sqrt(t))*eps_pred, variance dt*(t-dt)/t.
    """
    if dt <= 0:
        raise DataError("step size must be positive")
    if dt > t + 1e-12:
        raise DataError("step exceeds remaining time")
    if t > 1.0 + 1e-12:
        raise DataError("diffusion time must lie in [0, 1]")
    dt = min(dt, t)
    mean = np.asarray(Lt) + dt * np.asarray(L_pred) - (dt / np.sqrt(t)) * np.asarray(eps_pred)
    if not stochastic:
        return mean
    if noise is None:
        raise DataError("stochastic step needs noise")
    var = dt * (t - dt) / t
    return mean + np.sqrt(max(var, 0.0)) * np.asarray(noise)


def diffusion_loss(L_pred, L0, eps_pred, eps):
    """MSE(L_pred, L0) + MSE(eps_pred, eps); accepts tensors or arrays."""
    if isinstance(L_pred, T.Tensor) or isinstance(eps_pred, T.Tensor):
        return T.mse(L_pred, T.Tensor(np.asarray(L0))) + T.mse(
            eps_pred, T.Tensor(np.asarray(eps)))
    L_pred, L0 = np.asarray(L_pred), np.asarray(L0)
    eps_pred, eps = np.asarray(eps_pred), np.asarray(eps)
    if L_pred.shape != L0.shape or eps_pred.shape != eps.shape:
        raise DataError("prediction shape mismatch")
    return float(np.mean((L_pred - L0) ** 2) + np.mean((eps_pred - eps) ** 2))


def draw_training_time(rng, t_min=1e-3):
    # uniform on [t_min, 1]
    return float(t_min + (1.0 - t_min) * rng.random())


def run_sampler(predict, z, config, rng, guidance=None, init=None, shape=None):
    """Sample L0_hat by walking the schedule from t=1 down to 0.

    predict(Lt, t, z, e) -> (L_pred, eps_pred) as arrays.  With
    guidance = (e, scale) each head is extrapolated as
    null + scale * (cond - null).  The final step is deterministic.
    """
    sched = config.schedule
    if init is not None:
        Lt = np.array(init, dtype=float)
    else:
        if shape is None:
            raise DataError("run_sampler needs init or shape")
        Lt = rng.standard_normal(shape)
    for k in range(len(sched) - 1):
        t, t_next = sched[k], sched[k + 1]
        dt = t - t_next
        if guidance is None:
            L_pred, eps_pred = predict(Lt, t, z, None)
        else:
            e, scale = guidance
            L_null, eps_null = predict(Lt, t, z, None)
            L_cond, eps_cond = predict(Lt, t, z, e)
            L_pred = L_null + scale * (L_cond - L_null)
            eps_pred = eps_null + scale * (eps_cond - eps_null)
        last = k == len(sched) - 2
        noise = None if last else rng.standard_normal(Lt.shape)
        Lt = reverse_step(Lt, t, dt, L_pred, eps_pred, noise, stochastic=not last)
    return Lt
