"""Volume autoencoder: field [C,X,Y,Z] -> latent [C_l, X/4, Y/4, Z/4].

Two stride-2 stages each way give the 64x volume compression; the latent head
is variational (mean / log-variance) so a KL term can keep codes near a unit
Gaussian.  Down/upsampling uses the trilinear resize matrices, whose factor-2
case is exact 2x2x2 average pooling.
"""

import numpy as np

from .errors import DataError
from . import tensor as T

LATENT_STRIDE = 4

# Density logits span roughly +-16; the conv stacks want O(1) activations, so
# encode divides by this and decode multiplies it back.
FIELD_SCALE = 8.0

# Counts reverse passes through decode(); the gradient-skip training path must
# never touch it, so trainers assert this stays put.
DECODE_BACKWARD_CALLS = 0


def _count_decode_backward(x):
    def bw(gs):
        global DECODE_BACKWARD_CALLS
        DECODE_BACKWARD_CALLS += 1
        return [gs[0]]

    return T._emit("ae_decode_mark", x.data, (x,), bw)


def _conv_init(rng, c_out, c_in, k, dtype):
    fan_in = c_in * k ** 3
    w = rng.standard_normal((c_out, c_in, k, k, k)) * np.sqrt(2.0 / fan_in)
    return w.astype(dtype)


class AutoEncoder:
    """Convolutional VAE over voxel fields.  Parameters checkpoint as "ae.*"."""

    def __init__(self, channels=4, widths=(12, 24, 32), latent_channels=4,
                 seed=0, dtype=np.float64):
        self.channels = channels
        self.latent_channels = latent_channels
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        w1, w2, w3 = widths
        p = {}

        def conv(name, c_out, c_in):
            p[name + ".w"] = T.Tensor(_conv_init(rng, c_out, c_in, 3, dtype),
                                      requires_grad=True, name=name + ".w")
            p[name + ".b"] = T.Tensor(np.zeros((c_out, 1, 1, 1), dtype=dtype),
                                      requires_grad=True, name=name + ".b")

        conv("enc1", w1, channels)                  # full res
        conv("enc2", w2, w1)                        # 1/2 res
        conv("enc3", w3, w2)                        # 1/4 res
        conv("head", 2 * latent_channels, w3)       # mean | logvar
        conv("dec1", w3, latent_channels)           # 1/4 res
        conv("dec2", w2, w3)
        conv("dec3", w1, w2)                        # 1/2 res
        conv("out", channels, w1)                   # full res
        self.params = p

    def _conv(self, name, x):
        y = T.conv3d(x, self.params[name + ".w"], stride=1, pad=1)
        return T.add(y, self.params[name + ".b"])

    def encode(self, field, sample=False, rng=None):
        """-> (L0, mean, logvar).  sample=False returns the posterior mean."""
        if not isinstance(field, T.Tensor):
            field = T.Tensor(np.asarray(field, dtype=self.dtype))
        c, x, y, z = field.shape
        if c != self.channels:
            raise DataError("field channel count mismatch")
        if any(e % LATENT_STRIDE for e in (x, y, z)):
            raise DataError("field extents must be divisible by 4")
        h = T.silu(self._conv("enc1", T.scale(field, 1.0 / FIELD_SCALE)))
        h = T.resize_trilinear(h, (x // 2, y // 2, z // 2))
        h = T.silu(self._conv("enc2", h))
        h = T.resize_trilinear(h, (x // 4, y // 4, z // 4))
        h = T.silu(self._conv("enc3", h))
        h = self._conv("head", h)
        cl = self.latent_channels
        mean = T.narrow(h, 0, 0, cl)
        logvar = T.narrow(h, 0, cl, cl)
        if sample:
            if rng is None:
                raise DataError("sampling the posterior needs an rng")
            noise = rng.standard_normal(mean.shape).astype(self.dtype)
            L0 = reparameterize(mean, logvar, noise)
        else:
            L0 = mean
        return L0, mean, logvar

    def decode(self, L0):
        if not isinstance(L0, T.Tensor):
            L0 = T.Tensor(np.asarray(L0, dtype=self.dtype))
        _, x, y, z = L0.shape
        h = T.silu(self._conv("dec1", L0))
        h = T.silu(self._conv("dec2", h))
        h = T.resize_trilinear(h, (2 * x, 2 * y, 2 * z))
        h = T.silu(self._conv("dec3", h))
        h = T.resize_trilinear(h, (4 * x, 4 * y, 4 * z))
        out = T.scale(self._conv("out", h), FIELD_SCALE)
        return _count_decode_backward(out)

    def state_dict(self):
        return {"ae." + k: v.data for k, v in self.params.items()}

    def load_state(self, tensors):
        for k, v in self.params.items():
            key = "ae." + k
            if key not in tensors:
                raise DataError(f"checkpoint missing {key}")
            if tensors[key].shape != v.data.shape:
                raise DataError(f"checkpoint shape mismatch for {key}")
            v.data = tensors[key].astype(self.dtype)


def reparameterize(mean, logvar, noise):
    """mean + exp(logvar/2) * noise, differentiable through both stats."""
    std = T.exp(T.scale(logvar, 0.5))
    return T.add(mean, T.mul(std, T.Tensor(noise)))


def kl_loss(mean, logvar):
    """0.5 * mean(mean^2 + exp(logvar) - 1 - logvar) against a unit Gaussian."""
    if not isinstance(mean, T.Tensor):
        mean = T.Tensor(np.asarray(mean, dtype=float))
    if not isinstance(logvar, T.Tensor):
        logvar = T.Tensor(np.asarray(logvar, dtype=float))
    term = T.sub(T.add(T.mul(mean, mean), T.exp(logvar)),
                 T.shift(logvar, 1.0))
    return T.scale(T.reduce_mean(term), 0.5)


def _augment(arr, rng):
    # random spatial flips; features are view independent so this is exact
    for axis in (1, 2, 3):
        if rng.random() < 0.5:
            arr = np.flip(arr, axis)
    return np.ascontiguousarray(arr)


def pretrain_step(ae, opt, fields, rng, beta=1e-4, augment=True):
    """One optimizer step of MSE reconstruction + beta * KL over a batch.

    fields: list of [C,X,Y,Z] arrays.  Returns a report dict.
    """
    recon_v = kl_v = 0.0
    with T.Tape() as tape:
        total = None
        for arr in fields:
            arr = np.asarray(arr, dtype=ae.dtype)
            if augment:
                arr = _augment(arr, rng)
            target = T.Tensor(arr)
            L0, mean, logvar = ae.encode(target, sample=True, rng=rng)
            recon = T.mse(ae.decode(L0), target)
            kl = kl_loss(mean, logvar)
            term = T.add(recon, T.scale(kl, beta)) if beta else recon
            total = term if total is None else T.add(total, term)
            recon_v += float(recon.data)
            kl_v += float(kl.data)
        total = T.scale(total, 1.0 / len(fields))
        grads = T.backward(total)
    gnorm = opt.step(grads)
    n = len(fields)
    return {"recon": recon_v / n, "kl": kl_v / n,
            "total": float(total.data), "grad_norm": gnorm}
