"""Minimal deterministic tensor engine with reverse-mode autodiff.

Tensors wrap row-major numpy float32/float64 buffers. Running ops inside a
`with Tape() as tape:` block records each produced tensor in execution order
(which is already a topological order); `tape.backward(loss)` replays the
records in reverse and *accumulates* gradients into every `requires_grad`
tensor that the loss reaches. Callers zero gradients between steps.

Without an active tape, ops compute forward only; that is inference mode.
Forward/backward on one tape is single-threaded; independent tapes may run
concurrently (the active-tape stack is thread-local).

float32 is the working precision; build tensors as float64 for tight
finite-difference gradient checks.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-d float array plus optional gradient accumulator.

    `data` is always a C-contiguous ndarray; `grad`, once populated, has the
    same shape and dtype. Tensors are treated as immutable once produced by
    an op, hence safe to read-share across threads.
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        """The underlying buffer (not a copy); treat it as read-only."""
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")


class Tape:
    """Ordered record of op outputs; execution order == topological order.

    `backward` seeds d(loss)/d(loss)=1 and replays records newest-first,
    accumulating into `.grad` of everything reachable. A tape is consumed by
    its backward pass; build a new one per step.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss, params=None):
        """Populate gradients for everything `loss` reaches.

        `params`, when given, is a collection of tensors whose `.grad` is
        guaranteed non-None afterwards (zeros if unreachable from the loss).
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ShapeError("backward requires a scalar loss tensor")
        self._consumed = True
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward_fn is not None:
                node._backward_fn(node.grad)
        if params is not None:
            for p in params:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)


def backward(loss, tape, params=None):
    """Free-function form of :meth:`Tape.backward`."""
    tape.backward(loss, params=params)


def _record(data, parents, backward_fn):
    """Wrap an op result; register on the active tape when grads are needed."""
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    tape = active_tape()
    if req and tape is not None:
        out._parents = parents
        out._backward_fn = backward_fn
        tape._nodes.append(out)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        # own a writable copy: g may be a view or get reused upstream
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape))
                 if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_pair(x, y):
    """Coerce scalars/arrays so binary ops see (Tensor-or-array, Tensor-or-array)."""
    if not isinstance(x, Tensor):
        x = np.asarray(x, dtype=y.dtype if isinstance(y, Tensor) else np.float32)
    if not isinstance(y, Tensor):
        y = np.asarray(y, dtype=x.dtype if isinstance(x, Tensor) else np.float32)
    return x, y


def _dat(x):
    return x.data if isinstance(x, Tensor) else x


# ---------------------------------------------------------------------------
# element-wise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_pair(a, b)
    out = _dat(a) + _dat(b)
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def bwd(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g, a.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(g, b.shape))

    return _record(out, parents, bwd)


def sub(a, b):
    a, b = _as_pair(a, b)
    out = _dat(a) - _dat(b)
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def bwd(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g, a.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(-g, b.shape))

    return _record(out, parents, bwd)


def mul(a, b):
    a, b = _as_pair(a, b)
    ad, bd = _dat(a), _dat(b)
    out = ad * bd
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def bwd(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g * bd, a.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(g * ad, b.shape))

    return _record(out, parents, bwd)


def div(a, b):
    a, b = _as_pair(a, b)
    ad, bd = _dat(a), _dat(b)
    out = ad / bd
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def bwd(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g / bd, a.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _record(out, parents, bwd)


def neg(a):
    def bwd(g):
        _accum(a, -g)

    return _record(-a.data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a):
    def bwd(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _record(a.data.sum(dtype=a.dtype).reshape(()), (a,), bwd)


def mean_all(a):
    n = a.size

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=False))

    return _record(a.data.mean(dtype=a.dtype).reshape(()), (a,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a, shape):
    old = a.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _record(a.data.reshape(shape), (a,), bwd)


def permute(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, gpart in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, gpart)

    return _record(np.concatenate([t.data for t in tensors], axis=axis),
                   tensors, bwd)


def narrow(a, axis, start, length):
    """Contiguous slice `[start, start+length)` along one axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} "
            f"of shape {a.shape}")
    idx = tuple(slice(None) if d != axis else slice(start, start + length)
                for d in range(a.ndim))

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _record(np.ascontiguousarray(a.data[idx]), (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def gelu(a):
    """x * Phi(x) with the exact (erf-based) standard normal CDF."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accum(a, g * (phi + x * pdf))

    return _record(out, (a,), bwd)


def sigmoid(a):
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * s * (1.0 - s))

    return _record(s, (a,), bwd)


def softmax(a, axis=-1):
    """Max-stabilized softmax; slices along `axis` sum to 1."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _record(y, (a,), bwd)


def layer_norm_channel(x, gamma, beta, eps=1e-6):
    """Normalize over the channel axis per (b, h, w) location, then affine."""
    if x.ndim != 4:
        raise ShapeError(f"layer_norm_channel expects [B,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm_channel: gamma/beta must have shape ({c},), "
            f"got {gamma.shape} and {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    d = xd - mu
    var = (d * d).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv
    gam = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gam + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        _accum(beta, g.sum(axis=(0, 2, 3)))
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        dxhat = g * gam
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _record(out, (x, gamma, beta), bwd)


def global_avg_pool(x):
    """Spatial mean per channel: [B,C,H,W] -> [B,C,1,1]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        _accum(x, np.broadcast_to(g / hw, x.shape).astype(x.dtype, copy=False))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product; leading dims broadcast numpy-style."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul expects >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution (explicit cross-correlation over sliding windows)
# ---------------------------------------------------------------------------

def _zero_pad(x, p):
    if p == 0:
        return x
    bsz, c, h, w = x.shape
    out = np.zeros((bsz, c, h + 2 * p, w + 2 * p), x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    return out


def _tap_slices(k, stride, ho, wo):
    """The (dy, dx, row-slice, col-slice) of each kernel tap's input window."""
    for dy in range(k):
        for dx in range(k):
            yield (dy, dx,
                   slice(dy, dy + (ho - 1) * stride + 1, stride),
                   slice(dx, dx + (wo - 1) * stride + 1, stride))


def _im2col(x, k, stride, groups):
    """Sliding windows of padded input as [groups, B*Ho*Wo, Cin_g*k*k]."""
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    bsz, cin, ho, wo = win.shape[:4]
    cin_g = cin // groups
    cols = win.reshape(bsz, groups, cin_g, ho, wo, k, k)
    cols = np.ascontiguousarray(cols.transpose(1, 0, 3, 4, 2, 5, 6))
    return cols.reshape(groups, bsz * ho * wo, cin_g * k * k), ho, wo


def _corr2d(x, w, stride, padding, groups):
    """Plain cross-correlation on ndarrays; the one true conv kernel here.

    Same sliding-window arithmetic on every path; the point-wise and
    depth-wise cases skip the im2col copy (channel GEMM and per-tap
    shift-and-add respectively) since those dominate the network."""
    bsz, cin = x.shape[:2]
    cout, cin_g, k, _ = w.shape
    cout_g = cout // groups
    x = _zero_pad(x, padding)
    h, wd = x.shape[2], x.shape[3]
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1

    if k == 1 and groups == 1 and stride == 1:
        out = w.reshape(cout, cin) @ x.reshape(bsz, cin, h * wd)
        return np.ascontiguousarray(out.reshape(bsz, cout, h, wd))

    if groups == cin and cin_g == 1 and cout == cin:
        out = np.zeros((bsz, cin, ho, wo), x.dtype)
        for dy, dx, rows, cols in _tap_slices(k, stride, ho, wo):
            out += w[:, 0, dy, dx].reshape(1, cin, 1, 1) * x[:, :, rows, cols]
        return out

    cols, ho, wo = _im2col(x, k, stride, groups)
    wmat = w.reshape(groups, cout_g, cin_g * k * k)
    out = cols @ wmat.transpose(0, 2, 1)              # [g, B*Ho*Wo, Cout_g]
    out = out.reshape(groups, bsz, ho, wo, cout_g).transpose(1, 0, 4, 2, 3)
    return np.ascontiguousarray(out.reshape(bsz, cout, ho, wo))


def _dilate(g, stride):
    if stride == 1:
        return g
    bsz, c, h, w = g.shape
    out = np.zeros((bsz, c, (h - 1) * stride + 1, (w - 1) * stride + 1), g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def _corr2d_grad_input(gy, w, stride, padding, groups, x_shape):
    bsz, cin, h, wd = x_shape
    cout, cin_g, k, _ = w.shape
    cout_g = cout // groups

    if k == 1 and groups == 1 and stride == 1 and padding == 0:
        gx = w.reshape(cout, cin).T @ gy.reshape(bsz, cout, h * wd)
        return np.ascontiguousarray(gx.reshape(x_shape))

    if groups == cin and cin_g == 1 and cout == cin:
        # scatter each tap's contribution back onto the padded input
        ho, wo = gy.shape[2], gy.shape[3]
        gx = np.zeros((bsz, cin, h + 2 * padding, wd + 2 * padding), gy.dtype)
        for dy, dx, rows, cols in _tap_slices(k, stride, ho, wo):
            gx[:, :, rows, cols] += w[:, 0, dy, dx].reshape(1, cin, 1, 1) * gy
        return np.ascontiguousarray(
            gx[:, :, padding:padding + h, padding:padding + wd])

    rh = (h + 2 * padding - k) % stride
    rw = (wd + 2 * padding - k) % stride
    z = _dilate(gy, stride)
    z = np.pad(z, ((0, 0), (0, 0), (k - 1, k - 1 + rh), (k - 1, k - 1 + rw)))
    wt = w.reshape(groups, cout_g, cin_g, k, k).transpose(0, 2, 1, 3, 4)
    wt = np.ascontiguousarray(wt[:, :, :, ::-1, ::-1])
    wt = wt.reshape(groups * cin_g, cout_g, k, k)
    gx = _corr2d(z, wt, 1, 0, groups)
    return gx[:, :, padding:padding + h, padding:padding + wd]


def _corr2d_grad_weight(x, gy, stride, padding, groups, w_shape):
    bsz, cin = x.shape[:2]
    cout, cin_g, k, _ = w_shape
    cout_g = cout // groups
    x = _zero_pad(x, padding)
    ho, wo = gy.shape[2], gy.shape[3]

    if k == 1 and groups == 1 and stride == 1:
        hw = x.shape[2] * x.shape[3]
        gw = (gy.reshape(bsz, cout, hw)
              @ x.reshape(bsz, cin, hw).transpose(0, 2, 1)).sum(axis=0)
        return np.ascontiguousarray(gw.reshape(w_shape))

    if groups == cin and cin_g == 1 and cout == cin:
        gw = np.empty(w_shape, gy.dtype)
        for dy, dx, rows, cols in _tap_slices(k, stride, ho, wo):
            gw[:, 0, dy, dx] = (gy * x[:, :, rows, cols]).sum(axis=(0, 2, 3))
        return gw

    cols, ho, wo = _im2col(x, k, stride, groups)
    gym = gy.reshape(bsz, groups, cout_g, ho, wo).transpose(1, 0, 3, 4, 2)
    gym = np.ascontiguousarray(gym).reshape(groups, bsz * ho * wo, cout_g)
    gw = gym.transpose(0, 2, 1) @ cols                # [g, Cout_g, Cin_g*k*k]
    return np.ascontiguousarray(gw.reshape(w_shape))


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation. Point-wise: k=1, groups=1; depth-wise: groups=C."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and weight, got {x.shape} / {weight.shape}")
    cin = x.shape[1]
    cout, cin_g, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k}x{k2}")
    if cin % groups or cout % groups:
        raise ShapeError(
            f"conv2d: channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"conv2d: input has {cin} channels but weight expects "
            f"{cin_g * groups} (groups={groups})")
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(
            f"conv2d: kernel {k}x{k} larger than padded input "
            f"{x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")

    out = _corr2d(x.data, weight.data, stride, padding, groups)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    x_shape, w_shape = x.shape, weight.shape
    xd, wd = x.data, weight.data

    def bwd(g):
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        _accum(weight, _corr2d_grad_weight(xd, g, stride, padding, groups, w_shape))
        _accum(x, _corr2d_grad_input(g, wd, stride, padding, groups, x_shape))

    return _record(out, parents, bwd)


# ---------------------------------------------------------------------------
# pixel shuffle (depth-to-space) and its inverse
# ---------------------------------------------------------------------------

def _shuffle_fwd(d, r):
    bsz, crr, h, w = d.shape
    c = crr // (r * r)
    y = d.reshape(bsz, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(bsz, c, h * r, w * r))


def _unshuffle_fwd(d, r):
    bsz, c, hr, wr = d.shape
    h, w = hr // r, wr // r
    y = d.reshape(bsz, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(bsz, c * r * r, h, w))


def pixel_shuffle(x, r):
    """[B, C*r*r, H, W] -> [B, C, r*H, r*W] depth-to-space rearrangement."""
    if x.ndim != 4 or x.shape[1] % (r * r):
        raise ShapeError(
            f"pixel_shuffle: channels {x.shape} not divisible by r^2={r * r}")

    def bwd(g):
        _accum(x, _unshuffle_fwd(g, r))

    return _record(_shuffle_fwd(x.data, r), (x,), bwd)


def pixel_unshuffle(x, r):
    """Exact inverse of :func:`pixel_shuffle`."""
    if x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(
            f"pixel_unshuffle: spatial dims of {x.shape} not divisible by r={r}")

    def bwd(g):
        _accum(x, _shuffle_fwd(g, r))

    return _record(_unshuffle_fwd(x.data, r), (x,), bwd)
