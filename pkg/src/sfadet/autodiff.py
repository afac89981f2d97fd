"""Minimal reverse-mode autodiff on float32 numpy arrays.

Every operation the detection network needs is implemented here as a tape
node. The tape is implicit: nodes carry a monotonically increasing id, so
sorting reachable nodes by id gives the insertion order and the backward
pass walks it in exact reverse. Reductions accumulate in float64 before
casting back to float32 to keep Frobenius norms stable on wide cubes.
"""

from __future__ import annotations

import itertools

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradError(RuntimeError):
    """Raised on backward-pass misuse (missing grad, stale grad buffers)."""


class Tensor:
    """A float32 array node in the computation graph.

    Leaves are created directly; interior nodes are produced by the ops
    below. ``grad`` is populated by :meth:`backward` and must be cleared
    with :meth:`zero_grad` before the next backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_bw", "_id")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = ()
        self._bw = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Reverse-mode sweep from this node.

        Re-running backward while a leaf still holds a grad from a previous
        sweep is an error; call ``zero_grad`` on the leaves first.
        """
        nodes = _reachable(self)
        for t in nodes:
            if t.requires_grad and not t._prev and t.grad is not None:
                raise GradError(
                    "leaf already has a grad from a previous backward; "
                    "call zero_grad() before running backward again"
                )
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=np.float32)
        for t in sorted(nodes, key=lambda n: n._id, reverse=True):
            if t._bw is not None and t.grad is not None:
                t._bw(t.grad)
                if t._prev:
                    # interior grads are transient; free them eagerly
                    if t is not self:
                        t.grad = None


def _reachable(root):
    seen = {id(root): root}
    stack = [root]
    while stack:
        t = stack.pop()
        for p in t._prev:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return list(seen.values())


def _node(data, prev, bw):
    rg = any(p.requires_grad for p in prev)
    t = Tensor(data, requires_grad=rg)
    if rg:
        t._prev = tuple(prev)
        t._bw = bw
    return t


def _acc(t, g):
    if not t.requires_grad:
        return
    g = g.astype(np.float32, copy=False)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum-reduce a broadcasted gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    out = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), bw)


def sub(a, b):
    out = a.data - b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), bw)


def mul(a, b):
    if a.data.shape != b.data.shape and np.broadcast_shapes(a.data.shape, b.data.shape) is None:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bw)


def scale(a, s):
    s = float(s)
    out = a.data * np.float32(s)

    def bw(g):
        _acc(a, g * np.float32(s))

    return _node(out, (a,), bw)


def relu(a):
    out = np.maximum(a.data, 0.0)

    def bw(g):
        _acc(a, g * (a.data > 0))

    return _node(out, (a,), bw)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data.astype(np.float64)))
    out32 = out.astype(np.float32)

    def bw(g):
        _acc(a, g * (out32 * (1.0 - out32)))

    return _node(out32, (a,), bw)


def softplus(a):
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
        _acc(a, g * s.astype(np.float32))

    return _node(out, (a,), bw)


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        _acc(a, g * out)

    return _node(out, (a,), bw)


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log: requires strictly positive inputs")
    out = np.log(a.data)

    def bw(g):
        _acc(a, g / a.data)

    return _node(out, (a,), bw)


def absolute(a):
    out = np.abs(a.data)

    def bw(g):
        _acc(a, g * np.sign(a.data))

    return _node(out, (a,), bw)


def square(a):
    out = a.data * a.data

    def bw(g):
        _acc(a, g * (2.0 * a.data))

    return _node(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(np.float32)

    def bw(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(a, np.broadcast_to(gg, a.data.shape))

    return _node(out, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, dtype=np.float64, keepdims=keepdims).astype(np.float32)
    if axis is None:
        n = a.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for i in ax:
            n *= a.data.shape[i]

    def bw(g):
        gg = np.asarray(g) / np.float32(n)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(a, np.broadcast_to(gg, a.data.shape))

    return _node(out, (a,), bw)


def frobenius_sq(a):
    """Squared Frobenius norm: sum of squared entries, as a scalar tensor."""
    out = np.float32(np.sum(a.data.astype(np.float64) ** 2))

    def bw(g):
        _acc(a, (2.0 * np.asarray(g)) * a.data)

    return _node(out, (a,), bw)


def l1_norm(a):
    out = np.float32(np.sum(np.abs(a.data.astype(np.float64))))

    def bw(g):
        _acc(a, np.asarray(g) * np.sign(a.data))

    return _node(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape / linear algebra


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    return _node(out, (a,), bw)


def transpose(a, axes):
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        _acc(a, np.transpose(g, inv))

    return _node(out, (a,), bw)


def concat(tensors, axis=0):
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(g):
        off = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(off, off + s)
            _acc(t, g[tuple(idx)])
            off += s

    return _node(out, tuple(tensors), bw)


def take_row(a, index):
    """Select one slice along axis 0; backward scatters into that slice."""
    out = a.data[index]

    def bw(g):
        gx = np.zeros_like(a.data)
        gx[index] = g
        _acc(a, gx)

    return _node(out, (a,), bw)


def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dims differ, {a.data.shape} vs {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _acc(a, _unbroadcast(ga, a.data.shape))
        _acc(b, _unbroadcast(gb, b.data.shape))

    return _node(out, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution / pooling / resampling


def _im2col(x, k, stride, padding):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    s = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, k, k, ho, wo),
        strides=(s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
        writeable=False,
    )
    return np.ascontiguousarray(cols).reshape(n, c * k * k, ho * wo), ho, wo


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation of NCHW input with OIkk weights plus per-channel bias."""
    n, c, h, wd = x.data.shape
    o, ci, k, k2 = w.data.shape
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {w.data.shape}")
    if c != ci:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape} do not match weight {w.data.shape}"
        )
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError(
            f"conv2d: spatial dims {x.data.shape} too small for kernel {k} "
            f"with padding {padding}"
        )
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = w.data.reshape(o, c * k * k)
    out = np.matmul(wmat, cols) + b.data.reshape(1, o, 1)
    out = out.reshape(n, o, ho, wo)

    def bw(g):
        gout = g.reshape(n, o, ho * wo)
        if w.requires_grad:
            gw = np.einsum("nop,ncp->oc", gout, cols, optimize=True)
            _acc(w, gw.reshape(o, c, k, k))
        if b.requires_grad:
            _acc(b, gout.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gout)  # (n, ckk, p)
            gcols = gcols.reshape(n, c, k, k, ho, wo)
            hp, wp = h + 2 * padding, wd + 2 * padding
            gx = np.zeros((n, c, hp, wp), dtype=np.float32)
            for ki in range(k):
                for kj in range(k):
                    gx[:, :, ki : ki + stride * ho : stride,
                       kj : kj + stride * wo : stride] += gcols[:, :, ki, kj]
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            _acc(x, gx)

    return _node(out, (x, w, b), bw)


def avg_pool2d(x, k):
    """Non-overlapping k-by-k average pooling (stride == k)."""
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: dims {x.data.shape} not divisible by {k}")
    r = x.data.reshape(n, c, h // k, k, w // k, k)
    out = r.mean(axis=(3, 5), dtype=np.float64).astype(np.float32)

    def bw(g):
        gg = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / np.float32(k * k)
        _acc(x, gg)

    return _node(out, (x,), bw)


def max_pool2d(x, k):
    """Non-overlapping k-by-k max pooling (stride == k)."""
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: dims {x.data.shape} not divisible by {k}")
    r = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    flat = r.reshape(n, c, h // k, w // k, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gg = gflat.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        _acc(x, gg.reshape(n, c, h, w))

    return _node(out, (x,), bw)


def upsample_nearest2d(x, factor):
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    n, c, h, w = x.data.shape

    def bw(g):
        gg = g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        _acc(x, gg.astype(np.float32))

    return _node(out, (x,), bw)


def grad_reverse(x, factor):
    """Identity forward; backward multiplies the incoming gradient by ``factor``."""
    if not np.isfinite(factor):
        raise ValueError("grad_reverse: factor must be finite")

    def bw(g):
        _acc(x, g * np.float32(factor))

    return _node(x.data, (x,), bw)


# ---------------------------------------------------------------------------
# losses on logits


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy; ``targets`` is a plain 0/1 array."""
    t = np.asarray(targets, dtype=np.float32)
    x = logits.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = (1.0 / (1.0 + np.exp(-x.astype(np.float64)))).astype(np.float32)
        _acc(logits, g * (s - t))

    return _node(out, (logits,), bw)


def cross_entropy_logits(logits, labels):
    """Per-row softmax cross-entropy for (N, C) logits and integer labels."""
    lab = np.asarray(labels, dtype=np.int64)
    x = logits.data.astype(np.float64)
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    out = (lse - x[np.arange(len(lab)), lab]).astype(np.float32)

    def bw(g):
        p = np.exp(x - lse[:, None]).astype(np.float32)
        p[np.arange(len(lab)), lab] -= 1.0
        _acc(logits, p * np.asarray(g)[:, None])

    return _node(out, (logits,), bw)


def smooth_l1(pred, target, beta=1.0):
    """Elementwise Huber-style loss against a constant target array."""
    t = np.asarray(target, dtype=np.float32)
    d = pred.data - t
    ad = np.abs(d)
    out = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta).astype(np.float32)

    def bw(g):
        _acc(pred, g * np.clip(d / beta, -1.0, 1.0))

    return _node(out, (pred,), bw)


def roi_pool_bilinear(feat, rois, out_size):
    """Bilinear ROI pooling: one sample at each of out_size^2 bin centers.

    ``rois`` is a plain (R, 5) array of [image_index, x1, y1, x2, y2] in
    feature-map coordinates. Returns an (R, C, s, s) tensor.
    """
    rois = np.asarray(rois, dtype=np.float32)
    n, c, h, w = feat.data.shape
    s = out_size
    r = len(rois)
    out = np.zeros((r, c, s, s), dtype=np.float32)
    # cached bilinear taps for the backward scatter
    taps = []
    grid = (np.arange(s, dtype=np.float32) + 0.5) / s
    for i, (bi, x1, y1, x2, y2) in enumerate(rois):
        bi = int(bi)
        xs = x1 + grid * max(x2 - x1, 1e-3)
        ys = y1 + grid * max(y2 - y1, 1e-3)
        xs = np.clip(xs, 0.0, w - 1.0)
        ys = np.clip(ys, 0.0, h - 1.0)
        x0 = np.floor(xs).astype(np.int64)
        y0 = np.floor(ys).astype(np.int64)
        x1i = np.minimum(x0 + 1, w - 1)
        y1i = np.minimum(y0 + 1, h - 1)
        fx = xs - x0
        fy = ys - y0
        f = feat.data[bi]
        v = (
            f[:, y0[:, None], x0[None, :]] * ((1 - fy)[:, None] * (1 - fx)[None, :])
            + f[:, y0[:, None], x1i[None, :]] * ((1 - fy)[:, None] * fx[None, :])
            + f[:, y1i[:, None], x0[None, :]] * (fy[:, None] * (1 - fx)[None, :])
            + f[:, y1i[:, None], x1i[None, :]] * (fy[:, None] * fx[None, :])
        )
        out[i] = v
        taps.append((bi, x0, y0, x1i, y1i, fx, fy))

    def bw(g):
        gx = np.zeros_like(feat.data)
        for i, (bi, x0, y0, x1i, y1i, fx, fy) in enumerate(taps):
            gi = g[i]
            w00 = (1 - fy)[:, None] * (1 - fx)[None, :]
            w01 = (1 - fy)[:, None] * fx[None, :]
            w10 = fy[:, None] * (1 - fx)[None, :]
            w11 = fy[:, None] * fx[None, :]
            np.add.at(gx[bi], (slice(None), y0[:, None], x0[None, :]), gi * w00)
            np.add.at(gx[bi], (slice(None), y0[:, None], x1i[None, :]), gi * w01)
            np.add.at(gx[bi], (slice(None), y1i[:, None], x0[None, :]), gi * w10)
            np.add.at(gx[bi], (slice(None), y1i[:, None], x1i[None, :]), gi * w11)
        _acc(feat, gx)

    return _node(out, (feat,), bw)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam with bias correction over a list of leaf tensors."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise GradError("Adam.step: parameter has no gradient")
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(
                np.float32
            )

    def zero_grad(self):
        for p in self.params:
            p.grad = None
