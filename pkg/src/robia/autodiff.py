"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: each op returns a Tensor holding the forward value, the parent
tensors, and a closure that scatters the incoming gradient to the parents.
``backward()`` walks the tape in reverse topological order. Only the ops the
stereo pipeline needs are implemented; everything runs on single samples
(channel-first feature maps), so there is no batch axis.

Gradients accumulate in float buffers of the same dtype as the forward data.
Run the model in float32 for speed and in float64 for finite-difference
checks.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad and _grad_enabled
        self._backward = None
        self._parents = ()
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(data, name=None):
        return Tensor(np.asarray(data), requires_grad=True, name=name)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = "grad" if self.requires_grad else "const"
        return f"Tensor({flag}, shape={self.data.shape}, dtype={self.data.dtype})"

    # -- backward -------------------------------------------------------------

    def backward(self, grad=None):
        """Backpropagate from this tensor (default seed: ones)."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free the tape as we go; grads on leaves survive
                node._backward = None
                node._parents = ()
                if not node.requires_grad:
                    node.grad = None

    def _accumulate(self, grad):
        # gradients are never mutated in place, so sharing references is safe
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_tape(*tensors):
    return _grad_enabled and any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, backward, track):
    out = Tensor(data)
    if track:
        out.requires_grad = False
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ------------------------------------------------------


def add(a, b):
    b = _as_tensor(b, a.dtype)
    track = _needs_tape(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, track)


def sub(a, b):
    b = _as_tensor(b, a.dtype)
    track = _needs_tape(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(-_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, track)


def mul(a, b):
    b = _as_tensor(b, a.dtype)
    track = _needs_tape(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, track)


def div(a, b):
    b = _as_tensor(b, a.dtype)
    track = _needs_tape(a, b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward, track)


def exp(a):
    track = _needs_tape(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward, track)


def sqrt(a):
    track = _needs_tape(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * (0.5 / out_data))

    return _make(out_data, (a,), backward, track)


def sigmoid(a):
    track = _needs_tape(a)
    # numerically stable two-sided form
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, track)


def relu(a):
    track = _needs_tape(a)
    out_data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(out_data, (a,), backward, track)


def leaky_relu(a, slope=0.1):
    track = _needs_tape(a)
    pos = a.data > 0
    out_data = np.where(pos, a.data, a.data * slope).astype(a.dtype, copy=False)

    def backward(g):
        a._accumulate(g * np.where(pos, 1.0, slope).astype(g.dtype, copy=False))

    return _make(out_data, (a,), backward, track)


def abs_(a):
    track = _needs_tape(a)
    out_data = np.abs(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _make(out_data, (a,), backward, track)


def clip(a, lo, hi):
    """Clamp with pass-through gradient strictly inside the interval."""
    track = _needs_tape(a)
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        a._accumulate(g * inside)

    return _make(out_data, (a,), backward, track)


def smooth_l1(a, beta=1.0):
    """Elementwise Huber penalty: quadratic below ``beta``, linear above."""
    track = _needs_tape(a)
    x = a.data
    absx = np.abs(x)
    quad = absx < beta
    out_data = np.where(quad, 0.5 * x * x / beta, absx - 0.5 * beta)
    out_data = out_data.astype(x.dtype, copy=False)

    def backward(g):
        d = np.where(quad, x / beta, np.sign(x)).astype(g.dtype, copy=False)
        a._accumulate(g * d)

    return _make(out_data, (a,), backward, track)


# -- shape ops -----------------------------------------------------------------


def reshape(a, shape):
    track = _needs_tape(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward, track)


def transpose(a, axes):
    track = _needs_tape(a)
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return _make(out_data, (a,), backward, track)


def slice_(a, idx):
    track = _needs_tape(a)
    out_data = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a._accumulate(buf)

    return _make(out_data, (a,), backward, track)


def concat(tensors, axis=0):
    track = _needs_tape(*tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad or t._parents:
                t._accumulate(p)

    return _make(out_data, tensors, backward, track)


def pad2d(a, pad):
    """Zero-pad the last two axes by ``pad`` on each side."""
    track = _needs_tape(a)
    width = [(0, 0)] * (a.data.ndim - 2) + [(pad, pad), (pad, pad)]
    out_data = np.pad(a.data, width)

    def backward(g):
        sl = (Ellipsis, slice(pad, g.shape[-2] - pad), slice(pad, g.shape[-1] - pad))
        a._accumulate(g[sl])

    return _make(out_data, (a,), backward, track)


# -- reductions ------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    track = _needs_tape(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), backward, track)


def mean_(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def matmul(a, b):
    """Matrix product; supports stacked (leading-axis) operands like numpy."""
    track = _needs_tape(a, b)
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad or a._parents:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward, track)


def softmax(a, axis=-1):
    track = _needs_tape(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), backward, track)


# -- convolution and resampling ---------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    """(C,H,W) -> (C*kh*kw, Ho*Wo) patch matrix via strided window slices."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = np.empty((c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i:i + ho * stride:stride, j:j + wo * stride:stride]
    return cols.reshape(c * kh * kw, ho * wo), ho, wo


def _col2im(gcols, c, h, w, kh, kw, stride, pad):
    """Scatter-add patch-matrix gradients back to the (C,H,W) input."""
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    gcols = gcols.reshape(c, kh, kw, ho, wo)
    gx = np.zeros((c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + ho * stride:stride, j:j + wo * stride:stride] += gcols[:, i, j]
    if pad:
        gx = gx[:, pad:hp - pad, pad:wp - pad]
    return gx


def conv2d(x, w, b=None, stride=1, pad=1):
    """2-D convolution on a single (C,H,W) sample, weights (Cout,Cin,kh,kw)."""
    track = _needs_tape(x, w) or (b is not None and _needs_tape(b))
    cout, cin, kh, kw = w.data.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out_data = wmat @ cols
    if b is not None:
        out_data = out_data + b.data[:, None]
    out_data = out_data.reshape(cout, ho, wo)

    def backward(g):
        gmat = g.reshape(cout, ho * wo)
        if w.requires_grad or w._parents:
            w._accumulate((gmat @ cols.T).reshape(w.data.shape))
        if b is not None and (b.requires_grad or b._parents):
            b._accumulate(gmat.sum(axis=1))
        if x.requires_grad or x._parents:
            gcols = wmat.T @ gmat
            x._accumulate(_col2im(gcols, cin, x.data.shape[1], x.data.shape[2],
                                  kh, kw, stride, pad))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward, track)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Per-channel normalization of a (C,H,W) map.

    In training mode the statistics come from the current sample (and the
    running buffers are updated in place); in eval mode the running buffers
    are constants, so the op reduces to a per-channel affine map.
    """
    track = _needs_tape(x, gamma, beta)
    xd = x.data
    c = xd.shape[0]
    if training:
        mean = xd.mean(axis=(1, 2))
        var = xd.var(axis=(1, 2))
        n = xd.shape[1] * xd.shape[2]
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        # unbiased variance in the running buffer, biased in the normalizer
        running_var *= (1.0 - momentum)
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[:, None, None]) * inv[:, None, None]
    out_data = (xhat * gamma.data[:, None, None] + beta.data[:, None, None]).astype(
        xd.dtype, copy=False)

    def backward(g):
        if gamma.requires_grad or gamma._parents:
            gamma._accumulate((g * xhat).sum(axis=(1, 2)))
        if beta.requires_grad or beta._parents:
            beta._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad or x._parents:
            gi = g * gamma.data[:, None, None]
            if training:
                n = float(xd.shape[1] * xd.shape[2])
                gsum = gi.sum(axis=(1, 2), keepdims=True)
                gdot = (gi * xhat).sum(axis=(1, 2), keepdims=True)
                gx = (gi - gsum / n - xhat * gdot / n) * inv[:, None, None]
            else:
                gx = gi * inv[:, None, None]
            x._accumulate(gx.astype(xd.dtype, copy=False))

    return _make(out_data, (x, gamma, beta), backward, track)


def upsample_nearest2(x):
    """Nearest-neighbor 2x upsampling of a (C,H,W) map."""
    track = _needs_tape(x)
    out_data = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g):
        c, h2, w2 = g.shape
        gx = g.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))
        x._accumulate(gx)

    return _make(out_data, (x,), backward, track)


def _interp_matrix(n_out, n_in, dtype):
    """1-D bilinear resampling matrix with half-pixel centers, edges clamped."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


_interp_cache = {}


def resize_bilinear(x, out_hw):
    """Bilinear resize of a (C,H,W) or (H,W) map (half-pixel convention)."""
    track = _needs_tape(x)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    c, h, w = xd.shape
    ho, wo = out_hw
    key = (ho, h, wo, w, xd.dtype.str)
    if key not in _interp_cache:
        _interp_cache[key] = (_interp_matrix(ho, h, xd.dtype),
                              _interp_matrix(wo, w, xd.dtype).T)
    rows, colsT = _interp_cache[key]
    out_data = np.matmul(np.matmul(rows, xd), colsT)
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        gd = g[None] if squeeze else g
        gx = np.matmul(np.matmul(rows.T, gd), colsT.T)
        x._accumulate(gx[0] if squeeze else gx)

    return _make(out_data, (x,), backward, track)


def warp_horizontal(img, disp):
    """Sample ``img`` (C,H,W) at column ``c - disp`` with linear interpolation.

    Returns the warped image and a constant in-bounds mask (H,W). Gradients
    flow to ``disp`` (and to ``img`` if it requires them); out-of-bounds
    samples are zero with zero gradient.
    """
    track = _needs_tape(img, disp)
    imd, dd = img.data, disp.data
    c, h, w = imd.shape
    cols = np.arange(w, dtype=dd.dtype)
    src = cols[None, :] - dd
    valid = (src >= 0.0) & (src <= w - 1.0)
    srcc = np.clip(src, 0.0, w - 1.0)
    lo = np.floor(srcc).astype(int)
    hi = np.minimum(lo + 1, w - 1)
    frac = (srcc - lo).astype(imd.dtype)
    rows = np.arange(h)[:, None]
    g_lo = imd[:, rows, lo]
    g_hi = imd[:, rows, hi]
    out_data = ((1.0 - frac) * g_lo + frac * g_hi) * valid
    out_data = out_data.astype(imd.dtype, copy=False)

    def backward(g):
        if disp.requires_grad or disp._parents:
            # d out / d disp = -(d out / d src); linear interp slope is hi - lo
            slope = (g_hi - g_lo) * valid
            gd = -(g * slope).sum(axis=0)
            disp._accumulate(gd.astype(dd.dtype, copy=False))
        if img.requires_grad or img._parents:
            gbuf = np.zeros_like(imd)
            gv = g * valid
            wl = gv * (1.0 - frac)
            wh = gv * frac
            for ch in range(c):
                np.add.at(gbuf, (ch, rows, lo), wl[ch])
                np.add.at(gbuf, (ch, rows, hi), wh[ch])
            img._accumulate(gbuf)

    out = _make(out_data, (img, disp), backward, track)
    return out, valid
