"""Denoising 3D UNet over latent grids.

Two heads share one trunk: a clean-latent prediction and a noise prediction.
Conditioning (time embedding, flattened part code, optional extra embedding)
enters every residual block through a per-block affine scale/bias projection;
nothing else sees it, so zeroing those projections makes the net
unconditional.
"""

import numpy as np

from .errors import DataError
from . import tensor as T
from .tensor import time_embedding  # re-export: the conditioning clock

__all__ = ["UNet", "film_modulate", "time_embedding"]


def _groups_for(c):
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


def film_modulate(h, proj):
    """h' = (1 + scale) * h + bias with (scale | bias) = proj, broadcast over space."""
    c = h.shape[0]
    if proj.data.size != 2 * c:
        raise DataError("projection size must be twice the channel count")
    proj = T.reshape(proj, (2 * c, 1, 1, 1))
    s = T.narrow(proj, 0, 0, c)
    b = T.narrow(proj, 0, c, c)
    return T.add(T.mul(h, T.shift(s, 1.0)), b)


class UNet:
    """Checkpoint names are prefixed "unet."."""

    def __init__(self, latent_channels=4, extents=(6, 6, 6), base_width=16,
                 mults=(1, 2, 4), time_dim=32, z_dim=128, e_dim=0,
                 seed=0, dtype=np.float64):
        self.extents = tuple(extents)
        self.latent_channels = latent_channels
        self.time_dim = time_dim
        self.z_dim = z_dim
        self.e_dim = e_dim
        self.dtype = dtype
        self.widths = [base_width * m for m in mults]
        # spatial size halves (rounded up) at each deeper level
        self.level_extents = [self.extents]
        for _ in mults[1:]:
            px, py, pz = self.level_extents[-1]
            self.level_extents.append(
                (max(1, (px + 1) // 2), max(1, (py + 1) // 2), max(1, (pz + 1) // 2)))
        self.cond_len = time_dim + z_dim + (e_dim if e_dim else 0)
        self._rng = np.random.default_rng(seed)
        self.params = {}
        w = self.widths
        self._conv("stem", w[0], latent_channels, k=3)
        for i in range(len(w)):
            cin = w[0] if i == 0 else w[i - 1]
            self._block(f"down{i}", w[i], cin)
        for i in range(len(w) - 2, -1, -1):
            below = w[i + 1]
            self._block(f"up{i}", w[i], below + w[i])
        for head in ("head_L", "head_eps"):
            self._gn(head + ".gn", w[0])
            self._conv(head, latent_channels, w[0], k=3)
        if e_dim:
            self.params["null_e"] = T.Tensor(
                self._rng.standard_normal(e_dim).astype(dtype) * 0.1,
                requires_grad=True, name="null_e")

    # ---------------------------------------------------------- parameters

    def _tensor(self, name, arr):
        t = T.Tensor(arr.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv(self, name, c_out, c_in, k, gain=1.0):
        fan = c_in * k ** 3
        self._tensor(name + ".w",
                     self._rng.standard_normal((c_out, c_in, k, k, k))
                     * gain * np.sqrt(2.0 / fan))
        self._tensor(name + ".b", np.zeros((c_out, 1, 1, 1)))

    def _gn(self, name, c):
        self._tensor(name + ".g", np.ones((c, 1, 1, 1)))
        self._tensor(name + ".b", np.zeros((c, 1, 1, 1)))

    def _block(self, name, c_out, c_in):
        self._gn(name + ".gn1", c_in)
        self._conv(name + ".conv1", c_out, c_in, k=3)
        self._tensor(name + ".film.w",
                     self._rng.standard_normal((self.cond_len, 2 * c_out)) * 0.05)
        self._tensor(name + ".film.b", np.zeros(2 * c_out))
        self._gn(name + ".gn2", c_out)
        self._conv(name + ".conv2", c_out, c_out, k=3, gain=0.5)
        if c_in != c_out:
            self._conv(name + ".skip", c_out, c_in, k=1)

    # ------------------------------------------------------------- forward

    def _apply_conv(self, name, x, pad=1):
        y = T.conv3d(x, self.params[name + ".w"], stride=1, pad=pad)
        return T.add(y, self.params[name + ".b"])

    def _apply_gn(self, name, x):
        c = x.shape[0]
        return T.group_norm(x, _groups_for(c), self.params[name + ".g"],
                            self.params[name + ".b"])

    def _apply_block(self, name, h, cond):
        r = self._apply_conv(name + ".skip", h, pad=0) \
            if name + ".skip.w" in self.params else h
        y = T.silu(self._apply_gn(name + ".gn1", h))
        y = self._apply_conv(name + ".conv1", y)
        proj = T.add(T.matmul(cond, self.params[name + ".film.w"]),
                     self.params[name + ".film.b"])
        y = film_modulate(y, proj)
        y = T.silu(self._apply_gn(name + ".gn2", y))
        y = self._apply_conv(name + ".conv2", y)
        return T.add(y, r)

    def _cond_vector(self, t, z, e):
        te = T.Tensor(time_embedding(float(t), self.time_dim, dtype=self.dtype))
        if not isinstance(z, T.Tensor):
            z = T.Tensor(np.asarray(z, dtype=self.dtype))
        z = T.reshape(z, (-1,))
        if z.data.size != self.z_dim:
            raise DataError("part code size mismatch")
        pieces = [te, z]
        if self.e_dim:
            if e is None:
                e = self.params["null_e"]
            elif not isinstance(e, T.Tensor):
                e = T.Tensor(np.asarray(e, dtype=self.dtype))
            if e.data.size != self.e_dim:
                raise DataError("conditioning embedding size mismatch")
            pieces.append(T.reshape(e, (-1,)))
        elif e is not None:
            raise DataError("model was built without an embedding input")
        return T.reshape(T.concat(pieces, axis=0), (1, self.cond_len))

    def denoise(self, Lt, t, z, e=None):
        """(L_pred, eps_pred), both shaped like Lt."""
        if not isinstance(Lt, T.Tensor):
            Lt = T.Tensor(np.asarray(Lt, dtype=self.dtype))
        if Lt.shape != (self.latent_channels,) + self.extents:
            raise DataError("latent geometry mismatch")
        cond = self._cond_vector(t, z, e)
        h = self._apply_conv("stem", Lt)
        skips = []
        for i in range(len(self.widths)):
            if i > 0:
                h = T.resize_trilinear(h, self.level_extents[i])
            h = self._apply_block(f"down{i}", h, cond)
            skips.append(h)
        for i in range(len(self.widths) - 2, -1, -1):
            h = T.resize_trilinear(h, self.level_extents[i])
            h = T.concat([h, skips[i]], axis=0)
            h = self._apply_block(f"up{i}", h, cond)
        outs = []
        for head in ("head_L", "head_eps"):
            y = T.silu(self._apply_gn(head + ".gn", h))
            outs.append(self._apply_conv(head, y))
        return outs[0], outs[1]

    def predictor(self):
        """Adapter matching the sampler's predict(Lt, t, z, e) contract."""

        def predict(Lt, t, z, e):
            L_pred, eps_pred = self.denoise(Lt, t, z, e)
            return L_pred.data, eps_pred.data

        return predict

    # --------------------------------------------------------- persistence

    def state_dict(self):
        return {"unet." + k: v.data for k, v in self.params.items()}

    def load_state(self, tensors):
        for k, v in self.params.items():
            key = "unet." + k
            if key not in tensors:
                raise DataError(f"checkpoint missing {key}")
            if tensors[key].shape != v.data.shape:
                raise DataError(f"checkpoint shape mismatch for {key}")
            v.data = tensors[key].astype(self.dtype)
