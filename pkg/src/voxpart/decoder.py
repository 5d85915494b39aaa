"""Part-aware decoding of reconstructed fields.

A learnable per-object code z [K, D] carries one row per part.  `refine`
projects the 4-channel field to D-dim tokens, lets every token attend to the
part rows (cross-attention), then lets tokens exchange information
(self-attention, optionally within non-overlapping windows).  Point heads
query the refined grid and emit view-dependent color and a K-way part
distribution.
"""

import numpy as np

from .errors import DataError
from . import fields as F
from . import tensor as T

PENALTY_WEIGHT = 1e-4
DIR_FREQS = 4


def init_part_code(k, d, rng, scale=0.1):
    return rng.standard_normal((k, d)) * scale


def part_code_penalty(z):
    """1e-4 * ||z||_2 over the flattened code."""
    if not isinstance(z, T.Tensor):
        z = T.Tensor(np.asarray(z, dtype=float))
    sq = T.reduce_sum(T.mul(z, z))
    if float(sq.data) == 0.0:
        return T.scale(sq, 0.0)  # exact zero; sqrt'(0) is not finite
    return T.scale(T.sqrt(sq), PENALTY_WEIGHT)


def direction_encoding(dirs):
    """[N,3] unit vectors -> [N, 3*2*DIR_FREQS] sinusoidal features."""
    dirs = np.asarray(dirs, dtype=float)
    norms = np.linalg.norm(dirs, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise DataError("view directions must be unit length")
    out = []
    for k in range(DIR_FREQS):
        ang = (2.0 ** k) * dirs
        out.append(np.sin(ang))
        out.append(np.cos(ang))
    return np.concatenate(out, axis=-1)


def _attention(q, k, v, heads):
    """Rows of q attend to rows of k/v; returns [Nq, D]."""
    d = q.shape[1]
    dh = d // heads
    outs = []
    for h in range(heads):
        qh = T.narrow(q, 1, h * dh, dh)
        kh = T.narrow(k, 1, h * dh, dh)
        vh = T.narrow(v, 1, h * dh, dh)
        logits = T.scale(T.matmul(qh, T.transpose(kh, (1, 0))), 1.0 / np.sqrt(dh))
        outs.append(T.matmul(T.softmax(logits), vh))
    return T.concat(outs, axis=1)


class PartDecoder:
    """Checkpoint names are prefixed "decoder."."""

    def __init__(self, channels=4, k_parts=4, d_model=32, heads=4,
                 sa_window=0, head_hidden=32, seed=0, dtype=np.float64):
        if d_model % heads:
            raise DataError("head count must divide the model width")
        self.channels = channels
        self.k_parts = k_parts
        self.d_model = d_model
        self.heads = heads
        self.sa_window = int(sa_window or 0)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        p = {}

        def lin(name, n_in, n_out, gain=1.0, bias=True):
            p[name + ".w"] = T.Tensor(
                (rng.standard_normal((n_in, n_out)) * gain / np.sqrt(n_in)
                 ).astype(dtype), requires_grad=True, name=name + ".w")
            if bias:
                p[name + ".b"] = T.Tensor(np.zeros(n_out, dtype=dtype),
                                          requires_grad=True, name=name + ".b")

        lin("proj", channels, d_model)
        for blk in ("ca", "sa"):
            for nm in ("q", "k", "v", "o"):
                lin(f"{blk}.{nm}", d_model, d_model, bias=False)
        enc_dim = 3 * 2 * DIR_FREQS
        lin("color.l1", d_model + enc_dim + d_model, head_hidden)
        lin("color.l2", head_hidden, 3)
        lin("part.l1", d_model + d_model, head_hidden)
        lin("part.l2", head_hidden, k_parts)
        self.params = p

    # ------------------------------------------------------------- refine

    def _window_order(self, extents):
        x, y, z = extents
        w = self.sa_window
        if any(e % w for e in extents):
            raise DataError("extents not divisible by attention window")
        lin = np.arange(x * y * z).reshape(x, y, z)
        order = []
        for ix in range(0, x, w):
            for iy in range(0, y, w):
                for iz in range(0, z, w):
                    order.append(lin[ix:ix + w, iy:iy + w, iz:iz + w].reshape(-1))
        order = np.concatenate(order)
        inverse = np.argsort(order)
        return order, inverse, w ** 3

    def _self_attention(self, tokens, extents):
        wq, wk, wv, wo = (self.params[f"sa.{n}.w"] for n in "qkvo")
        n = tokens.shape[0]
        if not self.sa_window:
            q = T.matmul(tokens, wq)
            k = T.matmul(tokens, wk)
            v = T.matmul(tokens, wv)
            # tile queries to bound the logit matrix size
            block = 1024
            outs = []
            for s in range(0, n, block):
                ln = min(block, n - s)
                outs.append(_attention(T.narrow(q, 0, s, ln), k, v, self.heads))
            att = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
            return T.matmul(att, wo)
        order, inverse, wsize = self._window_order(extents)
        gathered = T.gather_rows(tokens, order)
        q = T.matmul(gathered, wq)
        k = T.matmul(gathered, wk)
        v = T.matmul(gathered, wv)
        outs = []
        for s in range(0, n, wsize):
            outs.append(_attention(T.narrow(q, 0, s, wsize),
                                   T.narrow(k, 0, s, wsize),
                                   T.narrow(v, 0, s, wsize), self.heads))
        att = T.concat(outs, axis=0)
        return T.gather_rows(T.matmul(att, wo), inverse)

    def refine(self, field_hat, z):
        """[C,X,Y,Z] + part code [K,D] -> refined [D,X,Y,Z]."""
        if not isinstance(field_hat, T.Tensor):
            field_hat = T.Tensor(np.asarray(field_hat, dtype=self.dtype))
        if not isinstance(z, T.Tensor):
            z = T.Tensor(np.asarray(z, dtype=self.dtype))
        c, x, y, zz = field_hat.shape
        if c != self.channels:
            raise DataError("field channel count mismatch")
        if z.shape != (self.k_parts, self.d_model):
            raise DataError("part code shape mismatch")
        n = x * y * zz
        tokens = T.reshape(T.transpose(field_hat, (1, 2, 3, 0)), (n, c))
        tokens = T.add(T.matmul(tokens, self.params["proj.w"]),
                       self.params["proj.b"])
        # cross-attention to the part rows
        q = T.matmul(tokens, self.params["ca.q.w"])
        k = T.matmul(z, self.params["ca.k.w"])
        v = T.matmul(z, self.params["ca.v.w"])
        ca = T.matmul(_attention(q, k, v, self.heads), self.params["ca.o.w"])
        tokens = T.add(tokens, ca)
        tokens = T.add(tokens, self._self_attention(tokens, (x, y, zz)))
        return T.transpose(T.reshape(tokens, (x, y, zz, self.d_model)),
                           (3, 0, 1, 2))

    # -------------------------------------------------------------- heads

    def _pooled_rows(self, z, n):
        pooled = T.reduce_mean(z, axis=0, keepdims=True)  # [1,D]
        ones = T.Tensor(np.ones((n, 1), dtype=pooled.data.dtype))
        return T.matmul(ones, pooled)

    def _mlp(self, name, x):
        h = T.silu(T.add(T.matmul(x, self.params[name + ".l1.w"]),
                         self.params[name + ".l1.b"]))
        return T.add(T.matmul(h, self.params[name + ".l2.w"]),
                     self.params[name + ".l2.b"])

    def point_color(self, refined, xs, dirs, z):
        """World points [N,3] + unit dirs [N,3] -> rgb in (0,1) [N,3]."""
        if not isinstance(z, T.Tensor):
            z = T.Tensor(np.asarray(z, dtype=self.dtype))
        enc = direction_encoding(dirs).astype(refined.data.dtype)
        feats = self._sample(refined, xs)
        n = feats.shape[0]
        inp = T.concat([feats, T.Tensor(enc), self._pooled_rows(z, n)], axis=1)
        return T.sigmoid(self._mlp("color", inp))

    def point_part_logits(self, refined, xs, z):
        if not isinstance(z, T.Tensor):
            z = T.Tensor(np.asarray(z, dtype=self.dtype))
        feats = self._sample(refined, xs)
        inp = T.concat([feats, self._pooled_rows(z, feats.shape[0])], axis=1)
        return self._mlp("part", inp)

    def point_part_prob(self, refined, xs, z):
        """[N, K] rows on the simplex."""
        return T.softmax(self.point_part_logits(refined, xs, z))

    def _sample(self, refined, xs):
        xs = np.asarray(xs, dtype=float)
        grid = F.world_to_grid(xs, refined.shape[1:])
        return T.trilinear_sample(refined, grid)

    # --------------------------------------------------------- persistence

    def state_dict(self):
        return {"decoder." + k: v.data for k, v in self.params.items()}

    def load_state(self, tensors):
        for k, v in self.params.items():
            key = "decoder." + k
            if key not in tensors:
                raise DataError(f"checkpoint missing {key}")
            if tensors[key].shape != v.data.shape:
                raise DataError(f"checkpoint shape mismatch for {key}")
            v.data = tensors[key].astype(self.dtype)
