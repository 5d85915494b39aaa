"""Reverse-mode automatic differentiation over numpy arrays.

Define-by-run: operations executed while a Tape is active append records
(inputs, outputs, backward rule); `backward(loss)` replays the tape in
reverse and returns a GradMap keyed by node id.  Tensors are thin wrappers
around float32/float64 ndarrays; no general broadcasting is promised beyond
numpy's trailing-axis alignment (covered patterns: equal shapes, scalars,
[C,1,1,1] channel columns).
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
_REAL = (np.dtype(np.float32), np.dtype(np.float64))

_node_ids = itertools.count(1)
_ACTIVE_TAPE: "Tape | None" = None


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN/Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _REAL:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of operations for one forward pass; consumable once."""

    def __init__(self):
        self.records: list[tuple[str, tuple[Tensor, ...], tuple[Tensor, ...], Callable]] = []
        self.consumed = False
        self._outer: Tape | None = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False


class GradMap:
    """Gradients keyed by node id; absent entries mean 'not reached'."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self._grads.get(t.node_id)

    def __contains__(self, t) -> bool:
        key = t.node_id if isinstance(t, Tensor) else t
        return key in self._grads

    def __getitem__(self, t) -> np.ndarray:
        key = t.node_id if isinstance(t, Tensor) else t
        return self._grads[key]

    def __len__(self):
        return len(self._grads)

    def ids(self):
        return self._grads.keys()


def _emit(name: str, out_data, inputs: Sequence[Tensor], backward: Callable, n_out: int = 1):
    """Build output tensor(s); record on the active tape when grads are needed.

    `backward` maps a list of output gradients to per-input gradients
    (None for inputs that need none).
    """
    if n_out == 1:
        out_data = (out_data,)
    outs = []
    for arr in out_data:
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by op '{name}'")
        outs.append(Tensor(arr))
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        for o in outs:
            o.requires_grad = True
            o.tape = tape
        tape.records.append((name, tuple(inputs), tuple(outs), backward))
    return outs[0] if n_out == 1 else tuple(outs)


def backward(loss: Tensor, extra_grads: dict[Tensor, np.ndarray] | None = None) -> GradMap:
    """Reverse sweep from a scalar loss; returns gradients for every
    requires_grad tensor reached.  Consumes the recording tape.

    `extra_grads` seeds additional gradient onto intermediate nodes of the
    same tape (used to inject externally computed gradients).
    """
    if loss.data.size != 1:
        raise ValueError("loss must be scalar")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss was not produced on an active tape")
    if tape.consumed:
        raise TapeError("tape already consumed")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {}
    if extra_grads:
        for t, g in extra_grads.items():
            g = np.asarray(g, dtype=t.dtype)
            if g.shape != t.data.shape:
                raise ValueError("extra gradient shape mismatch")
            grads[t.node_id] = g.copy()
    seed = np.ones_like(loss.data)
    grads[loss.node_id] = grads.get(loss.node_id, 0) + seed

    for name, inputs, outputs, bw in reversed(tape.records):
        outg = [grads.get(o.node_id) for o in outputs]
        if all(g is None for g in outg):
            continue
        outg = [g if g is not None else np.zeros_like(o.data) for g, o in zip(outg, outputs)]
        ing = bw(outg)
        for t, g in zip(inputs, ing):
            if g is None or not t.requires_grad:
                continue
            cur = grads.get(t.node_id)
            grads[t.node_id] = g if cur is None else cur + g

    # only requires_grad nodes are reportable
    keep = {}
    for name, inputs, outputs, bw in tape.records:
        for t in itertools.chain(inputs, outputs):
            if t.requires_grad and t.node_id in grads:
                keep[t.node_id] = np.asarray(grads[t.node_id])
    keep[loss.node_id] = np.asarray(grads[loss.node_id])
    # drop the graph now: records hold closures over large forward buffers,
    # and the tensor->tape->tensor cycle otherwise waits on the gc
    tape.records.clear()
    return GradMap(keep)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(gs):
        g = gs[0]
        return [_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)]

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(gs):
        g = gs[0]
        return [_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)]

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(gs):
        g = gs[0]
        return [_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)]

    return _emit("mul", ad * bd, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(gs):
        g = gs[0]
        return [_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)]

    return _emit("div", ad / bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(gs):
        return [gs[0] * c]

    return _emit("scale", a.data * c, (a,), bw)


def shift(a: Tensor, c: float) -> Tensor:
    """a + scalar constant."""
    def bw(gs):
        return [gs[0]]

    return _emit("shift", a.data + float(c), (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(gs):
        return [gs[0] * out]

    return _emit("exp", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bw(gs):
        return [gs[0] / ad]

    return _emit("log", np.log(ad), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(gs):
        return [gs[0] * 0.5 / out]

    return _emit("sqrt", out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # stable both tails
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(gs):
        return [gs[0] * out * (1.0 - out)]

    return _emit("sigmoid", out, (a,), bw)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = x * s

    def bw(gs):
        return [gs[0] * (s + x * s * (1.0 - s))]

    return _emit("silu", out, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)

    def bw(gs):
        return [gs[0] * s]

    return _emit("softplus", out, (a,), bw)


def clip_min(a: Tensor, lo: float) -> Tensor:
    ad = a.data
    lo = float(lo)

    def bw(gs):
        return [gs[0] * (ad > lo)]

    return _emit("clip_min", np.maximum(ad, lo), (a,), bw)


# ---------------------------------------------------------------------------
# reductions / shape


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def bw(gs):
        g = gs[0]
        if axis is None:
            return [np.broadcast_to(g, ad.shape)]
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(a_ % ad.ndim for a_ in ax)
            g = np.expand_dims(g, ax)
        return [np.broadcast_to(g, ad.shape)]

    return _emit("sum", np.asarray(out), (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    ad = a.data
    out = ad.mean(axis=axis, keepdims=keepdims)
    n = ad.size if axis is None else np.prod([ad.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])

    def bw(gs):
        g = gs[0] / n
        if axis is None:
            return [np.broadcast_to(np.asarray(g), ad.shape)]
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(a_ % ad.ndim for a_ in ax)
            g = np.expand_dims(g, ax)
        return [np.broadcast_to(g, ad.shape)]

    return _emit("mean", np.asarray(out), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bw(gs):
        return [gs[0].reshape(old)]

    return _emit("reshape", a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(gs):
        return [gs[0].transpose(inv)]

    return _emit("transpose", a.data.transpose(axes), (a,), bw)


def concat(ts: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(gs):
        return list(np.split(gs[0], splits, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    ad = a.data
    sl = [slice(None)] * ad.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bw(gs):
        g = np.zeros_like(ad)
        g[sl] = gs[0]
        return [g]

    return _emit("narrow", ad[sl].copy(), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("matmul expects 2-d operands")

    def bw(gs):
        g = gs[0]
        return [g @ bd.T, ad.T @ g]

    return _emit("matmul", ad @ bd, (a, b), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(gs):
        g = gs[0]
        dot = (g * out).sum(axis=-1, keepdims=True)
        return [out * (g - dot)]

    return _emit("softmax", out, (a,), bw)


def cumprod(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    out = np.cumprod(ad, axis=axis)
    ax = axis % ad.ndim

    def bw(gs):
        g = gs[0]
        x = np.moveaxis(ad, ax, -1)
        gg = np.moveaxis(g, ax, -1)
        n = x.shape[-1]
        # exact, zero-safe: grad_i = P_i * H_i with P_i = prod_{k<i} x_k and
        # H_i = g_i + x_{i+1} * H_{i+1}
        pexcl = np.ones_like(x)
        if n > 1:
            pexcl[..., 1:] = np.cumprod(x[..., :-1], axis=-1)
        h = np.empty_like(x)
        h[..., -1] = gg[..., -1]
        for i in range(n - 2, -1, -1):
            h[..., i] = gg[..., i] + x[..., i + 1] * h[..., i + 1]
        return [np.moveaxis(pexcl * h, -1, ax)]

    return _emit("cumprod", out, (a,), bw)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[n] = a[n, idx[n]] for a 2-d tensor."""
    ad = a.data
    idx = np.asarray(idx)
    if idx.ndim != 1 or ad.ndim != 2 or idx.shape[0] != ad.shape[0]:
        raise ValueError("take_rows expects a [N,K] tensor and N indices")
    if idx.min() < 0 or idx.max() >= ad.shape[1]:
        raise ValueError("take_rows index out of range")
    rows = np.arange(ad.shape[0])

    def bw(gs):
        g = np.zeros_like(ad)
        g[rows, idx] = gs[0]
        return [g]

    return _emit("take_rows", ad[rows, idx].copy(), (a,), bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[idx[i], :]; repeated indices accumulate on the way back."""
    ad = a.data
    idx = np.asarray(idx)
    if idx.ndim != 1 or ad.ndim != 2:
        raise ValueError("gather_rows expects a 2-d tensor and 1-d indices")
    if idx.size and (idx.min() < 0 or idx.max() >= ad.shape[0]):
        raise ValueError("gather_rows index out of range")

    def bw(gs):
        g = np.zeros_like(ad)
        np.add.at(g, idx, gs[0])
        return [g]

    return _emit("gather_rows", ad[idx].copy(), (a,), bw)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross entropy; labels are integer class ids."""
    x = logits.data
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ValueError("cross_entropy_logits expects [N,K] logits and N labels")
    if labels.min() < 0 or labels.max() >= x.shape[1]:
        raise ValueError("label out of range")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    n = x.shape[0]
    rows = np.arange(n)
    nll = -(x[rows, labels] - m[:, 0] - np.log(z[:, 0]))
    out = np.asarray(nll.mean())

    def bw(gs):
        g = p.copy()
        g[rows, labels] -= 1.0
        return [gs[0] * g / n]

    return _emit("cross_entropy", out, (logits,), bw)


# ---------------------------------------------------------------------------
# convolution / resampling


def conv3d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 3-d convolution (cross-correlation): x [Cin,X,Y,Z], w [Cout,Cin,k,k,k]."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 5:
        raise ValueError("conv3d expects [Cin,X,Y,Z] input and [Cout,Cin,k,k,k] kernel")
    cout, cin, k = wd.shape[0], wd.shape[1], wd.shape[2]
    if wd.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError("conv3d kernel must be cubic with odd k")
    if cin != xd.shape[0]:
        raise ValueError("conv3d channel mismatch")
    if stride not in (1, 2):
        raise ValueError("conv3d stride must be 1 or 2")
    if pad < 0:
        raise ValueError("conv3d pad must be >= 0")
    dims = xd.shape[1:]
    for d in dims:
        if (d + 2 * pad - k) % stride != 0 or (d + 2 * pad - k) < 0:
            raise ValueError("incompatible geometry")
    od = tuple((d + 2 * pad - k) // stride + 1 for d in dims)

    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else xd
    # patches [X',Y',Z', Cin,k,k,k] -> matrix [N, Cin*k^3]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    patches = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(-1, cin * k * k * k)
    wmat = wd.reshape(cout, -1)
    out = (patches @ wmat.T).T.reshape(cout, *od)

    def bw(gs):
        g = gs[0].reshape(cout, -1).T  # [N, Cout]
        gw = (g.T @ patches).reshape(wd.shape)
        gpatches = g @ wmat  # [N, Cin*k^3]
        gp = gpatches.reshape(*od, cin, k, k, k)
        gxp = np.zeros_like(xp)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    gxp[:, a:a + od[0] * stride:stride, b:b + od[1] * stride:stride, c:c + od[2] * stride:stride] += \
                        gp[:, :, :, :, a, b, c].transpose(3, 0, 1, 2)
        gx = gxp[:, pad:pad + dims[0], pad:pad + dims[1], pad:pad + dims[2]] if pad else gxp
        return [gx, gw]

    return _emit("conv3d", out, (x, w), bw)


def _resize_matrix(n_in: int, n_out: int, dtype, nearest: bool = False) -> np.ndarray:
    """Row-stochastic 1-d resampling matrix with cell-centered geometry."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    if nearest:
        idx = np.rint(pos).astype(int)
        a[np.arange(n_out), idx] = 1.0
        return a
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = pos - i0
    a[np.arange(n_out), i0] += 1.0 - f
    a[np.arange(n_out), i1] += f
    return a


def _apply_axis_matrix(x: Tensor, mat: np.ndarray, axis: int) -> Tensor:
    """Contract `axis` of x [C,X,Y,Z] with a [n_out, n_in] matrix, autodiff-aware."""
    nd = x.data.ndim
    perm = [i for i in range(nd) if i != axis] + [axis]
    t = transpose(x, perm)
    lead = t.data.shape[:-1]
    t = reshape(t, (-1, t.data.shape[-1]))
    t = matmul(t, Tensor(mat.T.astype(x.dtype, copy=False)))
    t = reshape(t, lead + (mat.shape[0],))
    inv = list(np.argsort(perm))
    return transpose(t, inv)


def resize_trilinear(x: Tensor, out_extents: tuple[int, int, int]) -> Tensor:
    """Separable trilinear resize of x [C,X,Y,Z] to [C, *out_extents]."""
    for axis, n_out in zip((1, 2, 3), out_extents):
        n_in = x.data.shape[axis]
        if n_out != n_in:
            x = _apply_axis_matrix(x, _resize_matrix(n_in, n_out, x.dtype), axis)
    return x


def resize_nearest(x: Tensor, out_extents: tuple[int, int, int]) -> Tensor:
    for axis, n_out in zip((1, 2, 3), out_extents):
        n_in = x.data.shape[axis]
        if n_out != n_in:
            x = _apply_axis_matrix(x, _resize_matrix(n_in, n_out, x.dtype, nearest=True), axis)
    return x


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of x [C,X,Y,Z]; gamma/beta are [C,1,1,1]."""
    c = x.data.shape[0]
    if c % groups:
        raise ValueError("channels not divisible by groups")
    spatial = x.data.shape[1:]
    g = reshape(x, (groups, -1))
    mu = reduce_mean(g, axis=1, keepdims=True)
    d = sub(g, mu)
    var = reduce_mean(mul(d, d), axis=1, keepdims=True)
    inv = div(d, sqrt(shift(var, eps)))
    normed = reshape(inv, (c,) + spatial)
    return add(mul(normed, gamma), beta)


def trilinear_sample(grid: Tensor, coords: np.ndarray) -> Tensor:
    """Sample grid [C,X,Y,Z] at fractional grid coords [N,3] (clamped).

    Gradients flow to the grid only; coordinate gradients are defined zero.
    """
    gd = grid.data
    if gd.ndim != 4:
        raise ValueError("trilinear_sample expects a [C,X,Y,Z] grid")
    coords = np.asarray(coords, dtype=gd.dtype)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError("coords must be [N,3]")
    if not np.isfinite(coords).all():
        raise ValueError("non-finite coordinate")
    c, dx, dy, dz = gd.shape
    n = coords.shape[0]
    hi = np.array([dx - 1, dy - 1, dz - 1], dtype=gd.dtype)
    p = np.clip(coords, 0.0, hi)
    i0 = np.floor(p).astype(np.int64)
    i0 = np.minimum(i0, np.array([dx - 2 if dx > 1 else 0, dy - 2 if dy > 1 else 0, dz - 2 if dz > 1 else 0]))
    f = p - i0
    i1 = np.minimum(i0 + 1, np.array([dx - 1, dy - 1, dz - 1]))

    flat = gd.reshape(c, -1)
    idx8 = np.empty((8, n), dtype=np.int64)
    w8 = np.empty((8, n), dtype=gd.dtype)
    m = 0
    for ax in (0, 1):
        wx = (1.0 - f[:, 0]) if ax == 0 else f[:, 0]
        ix = i0[:, 0] if ax == 0 else i1[:, 0]
        for ay in (0, 1):
            wy = (1.0 - f[:, 1]) if ay == 0 else f[:, 1]
            iy = i0[:, 1] if ay == 0 else i1[:, 1]
            for az in (0, 1):
                wz = (1.0 - f[:, 2]) if az == 0 else f[:, 2]
                iz = i0[:, 2] if az == 0 else i1[:, 2]
                idx8[m] = (ix * dy + iy) * dz + iz
                w8[m] = wx * wy * wz
                m += 1
    out = np.zeros((n, c), dtype=gd.dtype)
    for m in range(8):
        out += w8[m][:, None] * flat[:, idx8[m]].T

    idx_cat = idx8.reshape(-1)
    w_cat = w8.reshape(-1)
    nvox = dx * dy * dz

    def bw(gs):
        g = gs[0]  # [N,C]
        gg = np.empty((c, nvox), dtype=gd.dtype)
        for ch in range(c):
            wcol = w_cat * np.tile(g[:, ch], 8)
            gg[ch] = np.bincount(idx_cat, weights=wcol, minlength=nvox)
        return [gg.reshape(gd.shape).astype(gd.dtype, copy=False)]

    return _emit("trilinear_sample", out, (grid,), bw)


# ---------------------------------------------------------------------------
# losses & checks


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("mse operands must share a shape")
    d = sub(a, b)
    return reduce_mean(mul(d, d))


def nll_probs(probs: Tensor, labels: np.ndarray, floor: float = 1e-12) -> Tensor:
    """Mean negative log likelihood from per-row class probabilities."""
    picked = take_rows(probs, labels)
    return scale(reduce_mean(log(clip_min(picked, floor))), -1.0)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Error metric per scalar input: |analytic - numeric| / max(1, |analytic|).
    """
    with Tape():
        out = fn(*inputs)
        if out.data.size != 1:
            raise ValueError("grad_check target must be scalar")
        gm = backward(out)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        ana = gm.grad(t)
        ana = np.zeros_like(t.data) if ana is None else ana
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            f1 = float(fn(*inputs).data)
            flat[i] = keep - eps
            f0 = float(fn(*inputs).data)
            flat[i] = keep
            num = (f1 - f0) / (2.0 * eps)
            err = abs(aflat[i] - num) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst


def time_embedding(t: float, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal embedding of a scalar time fraction; [sin(w_k t), cos(w_k t)]."""
    if dim % 2:
        raise ValueError("time embedding dimension must be even")
    half = dim // 2
    freqs = math.pi * (2.0 ** np.arange(half, dtype=np.float64))
    ang = freqs * float(t)
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(dtype)
