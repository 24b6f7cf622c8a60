"""Minimal reverse-mode automatic differentiation on NCHW arrays.

Tensors wrap numpy arrays and record the operation graph as they are
combined; `backward` walks that graph in reverse topological order.
Production paths store float32 and accumulate in float64 inside each
op; gradients are kept in float64 throughout. The engine is just big
enough for the codec: convolutions (plain and transposed), PReLU,
channel softmax, elementwise arithmetic, the normal CDF, and full
reductions.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, ndtr

from .errors import GraphError, NumericError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        a = np.asarray(data)
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(np.float32)
        self.data = a
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return "Tensor(shape=%r, dtype=%s, grad=%s)" % (
            self.shape, self.data.dtype, self.requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, bwd, dtype=None):
    """Wrap an op result; requires_grad propagates from any parent."""
    if dtype is None:
        dtype = np.result_type(*[p.data.dtype for p in parents])
    rg = any(p.requires_grad for p in parents)
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=rg,
                  _parents=tuple(parents), _bwd=bwd if rg else None)


def _accum(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64)
    if t.grad is None:
        t.grad = g.reshape(t.data.shape).copy()
    else:
        t.grad += g.reshape(t.data.shape)


def backward(root):
    """Propagate gradients from a scalar tensor through its graph."""
    if root.data.size != 1:
        raise GraphError("backward needs a scalar, got shape %r" % (root.shape,))
    topo = []
    state = {}  # id -> 0 visiting, 1 done
    stack = [root]
    while stack:
        t = stack[-1]
        s = state.get(id(t))
        if s is None:
            state[id(t)] = 0
            for p in t._parents:
                if state.get(id(p)) is None:
                    stack.append(p)
        else:
            stack.pop()
            if s == 0:
                state[id(t)] = 1
                topo.append(t)
    root.grad = np.ones(root.data.shape, dtype=np.float64)
    for t in reversed(topo):
        if t._bwd is not None and t.grad is not None:
            t._bwd(t.grad)


# ---------------------------------------------------------------------------
# Elementwise and scalar ops.

def _check_same_shape(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError("elementwise op on %r vs %r" % (a.data.shape, b.data.shape))


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)
    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)
    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _make(a.data * b.data, (a, b), bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b)

    def bwd(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data.astype(np.float64) ** 2))
    return _make(a.data / b.data, (a, b), bwd)


def add_const(x, c):
    def bwd(g):
        _accum(x, g)
    return _make(x.data + x.data.dtype.type(c), (x,), bwd)


def mul_const(x, c):
    def bwd(g):
        _accum(x, g * c)
    return _make(x.data * x.data.dtype.type(c), (x,), bwd)


def neg(x):
    return mul_const(x, -1.0)


def square(x):
    def bwd(g):
        _accum(x, 2.0 * g * x.data)
    return _make(x.data * x.data, (x,), bwd)


def sqrt(x):
    y = np.sqrt(x.data)

    def bwd(g):
        _accum(x, g / (2.0 * np.maximum(y.astype(np.float64), 1e-300)))
    return _make(y, (x,), bwd)


def log(x):
    if np.any(x.data <= 0.0):
        raise NumericError("log of non-positive value")
    def bwd(g):
        _accum(x, g / x.data)
    return _make(np.log(x.data), (x,), bwd)


def exp(x):
    y = np.exp(x.data)

    def bwd(g):
        _accum(x, g * y)
    return _make(y, (x,), bwd)


def abs_(x):
    def bwd(g):
        _accum(x, g * np.sign(x.data))
    return _make(np.abs(x.data), (x,), bwd)


def clamp_min(x, c):
    def bwd(g):
        _accum(x, g * (x.data > c))
    return _make(np.maximum(x.data, c), (x,), bwd)


def softplus(x):
    def bwd(g):
        _accum(x, g * expit(x.data.astype(np.float64)))
    return _make(np.logaddexp(0.0, x.data.astype(np.float64)), (x,), bwd,
                 dtype=x.data.dtype)


def normal_cdf(x):
    def bwd(g):
        xd = x.data.astype(np.float64)
        _accum(x, g * np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi))
    return _make(ndtr(x.data.astype(np.float64)), (x,), bwd, dtype=x.data.dtype)


def prelu(x, slope):
    """PReLU with per-channel slope on NCHW input; x >= 0 takes the
    positive branch (so the gradient at exactly zero is 1)."""
    if slope.data.ndim != 1 or slope.data.shape[0] != x.data.shape[1]:
        raise ShapeError("prelu slope %r does not match channels of %r"
                         % (slope.data.shape, x.data.shape))
    s = slope.data.reshape(1, -1, 1, 1)
    pos = x.data >= 0

    def bwd(g):
        _accum(x, g * np.where(pos, 1.0, s))
        _accum(slope, (g * np.where(pos, 0.0, x.data)).sum(axis=(0, 2, 3)))
    return _make(np.where(pos, x.data, s * x.data), (x, slope), bwd)


def channel_softmax(x):
    """Softmax over the channel axis of an NCHW tensor (max-subtracted)."""
    xd = x.data.astype(np.float64)
    e = np.exp(xd - xd.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g - dot))
    return _make(y, (x,), bwd, dtype=x.data.dtype)


def concat(a, b):
    """Concatenate two NCHW tensors along channels."""
    ca = a.data.shape[1]

    def bwd(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), bwd)


def slice_channels(x, start, stop):
    """View of channels [start, stop) of an NCHW tensor."""
    if not 0 <= start < stop <= x.data.shape[1]:
        raise ShapeError("channel slice [%d, %d) of %r" % (start, stop, x.shape))

    def bwd(g):
        gx = np.zeros(x.data.shape, dtype=np.float64)
        gx[:, start:stop] = g
        _accum(x, gx)
    return _make(x.data[:, start:stop].copy(), (x,), bwd)


def sum_all(x):
    def bwd(g):
        _accum(x, np.broadcast_to(g, x.data.shape))
    return _make(x.data.astype(np.float64).sum(), (x,), bwd, dtype=x.data.dtype)


def mean_all(x):
    n = x.data.size

    def bwd(g):
        _accum(x, np.broadcast_to(g / n, x.data.shape))
    return _make(x.data.astype(np.float64).mean(), (x,), bwd, dtype=x.data.dtype)


def broadcast_channel(p, like_shape):
    """(C,) parameter -> full NCHW shape by broadcast."""
    if p.data.ndim != 1 or p.data.shape[0] != like_shape[1]:
        raise ShapeError("cannot broadcast %r over channels of %r"
                         % (p.data.shape, like_shape))

    def bwd(g):
        _accum(p, g.sum(axis=(0, 2, 3)))
    return _make(np.broadcast_to(p.data.reshape(1, -1, 1, 1), like_shape).copy(),
                 (p,), bwd)


# ---------------------------------------------------------------------------
# Convolutions. All three linear maps (forward conv, its input gradient,
# its weight gradient) are shared between conv2d and tconv2d: the
# transposed convolution is exactly the adjoint of the strided
# convolution with the same weights.

def _conv_out_hw(h, w, kh, kw, s, p):
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv output would be empty for input %dx%d kernel %dx%d"
                         % (h, w, kh, kw))
    return ho, wo


def _im2col(x, kh, kw, s, p):
    b, c, h, w = x.shape
    ho, wo = _conv_out_hw(h, w, kh, kw, s, p)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols, dtype=np.float64), (ho, wo)


def _conv_forward(x, w, s, p):
    b = x.shape[0]
    cout, cin, kh, kw = w.shape
    if x.shape[1] != cin:
        raise ShapeError("conv input has %d channels, weight wants %d"
                         % (x.shape[1], cin))
    cols, (ho, wo) = _im2col(x, kh, kw, s, p)
    y = cols @ w.reshape(cout, -1).astype(np.float64).T
    return y.transpose(0, 2, 1).reshape(b, cout, ho, wo)


def _conv_input_grad(gy, w, s, p, in_hw):
    b, cout, ho, wo = gy.shape
    _, cin, kh, kw = w.shape
    h, wd = in_hw
    gcols = (gy.transpose(0, 2, 3, 1).reshape(b, ho * wo, cout).astype(np.float64)
             @ w.reshape(cout, -1).astype(np.float64))
    g6 = gcols.reshape(b, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    gx = np.zeros((b, cin, h + 2 * p, wd + 2 * p), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + s * ho:s, j:j + s * wo:s] += g6[:, :, :, :, i, j]
    return gx[:, :, p:p + h, p:p + wd] if p else gx


def _conv_weight_grad(x, gy, s, p, kh, kw):
    b, cout, ho, wo = gy.shape
    cols, _ = _im2col(x, kh, kw, s, p)
    gy2 = gy.transpose(0, 2, 3, 1).reshape(b, ho * wo, cout).astype(np.float64)
    gw = np.tensordot(gy2, cols, axes=([0, 1], [0, 1]))
    return gw.reshape(cout, x.shape[1], kh, kw)


def conv2d(x, w, b=None, stride=1, padding=0):
    """Strided 2d convolution, NCHW; weight (Cout, Cin, kh, kw)."""
    s, p = stride, padding
    cout, cin, kh, kw = w.data.shape
    y = _conv_forward(x.data, w.data, s, p)
    if b is not None:
        if b.data.shape != (cout,):
            raise ShapeError("conv bias %r, want (%d,)" % (b.data.shape, cout))
        y = y + b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    in_hw = x.data.shape[2:]

    def bwd(g):
        _accum(x, _conv_input_grad(g, w.data, s, p, in_hw))
        if w.requires_grad:
            _accum(w, _conv_weight_grad(x.data, g, s, p, kh, kw))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
    return _make(y, parents, bwd)


def tconv2d(x, w, b=None, stride=1, padding=0, output_padding=None):
    """Transposed 2d convolution, NCHW; weight (Cin, Cout, kh, kw).

    Computed as the exact adjoint of conv2d with the same weights.
    output_padding defaults to stride - 1, which makes a kernel-3
    stride-2 layer exactly double the spatial size.
    """
    s, p = stride, padding
    op = s - 1 if output_padding is None else output_padding
    if not 0 <= op < s:
        raise ShapeError("output_padding %d must be in [0, %d)" % (op, s))
    cin, cout, kh, kw = w.data.shape
    if x.data.shape[1] != cin:
        raise ShapeError("tconv input has %d channels, weight wants %d"
                         % (x.data.shape[1], cin))
    hin, win = x.data.shape[2:]
    out_hw = ((hin - 1) * s - 2 * p + kh + op, (win - 1) * s - 2 * p + kw + op)
    y = _conv_input_grad(x.data, w.data, s, p, out_hw)
    if b is not None:
        if b.data.shape != (cout,):
            raise ShapeError("tconv bias %r, want (%d,)" % (b.data.shape, cout))
        y = y + b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        _accum(x, _conv_forward(g, w.data, s, p))
        if w.requires_grad:
            _accum(w, _conv_weight_grad(g, x.data.astype(np.float64), s, p, kh, kw))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
    return _make(y, parents, bwd)


def dict_reconstruct(planes, dict_data, block=16):
    """Differentiable reconstruction of NCHW coefficient planes against
    fixed per-channel dictionaries (a linear map, gradient flows to the
    planes only)."""
    from .sparse import reconstruct_planes
    d = np.asarray(dict_data, dtype=np.float64)
    dt = np.ascontiguousarray(d.transpose(0, 2, 1))

    def apply(batch, mats):
        return np.stack([reconstruct_planes(img, mats) for img in batch])

    def bwd(g):
        _accum(planes, apply(g, dt))
    return _make(apply(planes.data.astype(np.float64), d), (planes,), bwd)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.

def grad_check(fn, inputs, h=1e-3, prepared=None):
    """Compare analytic gradients of a scalar function to central
    differences.

    fn takes len(inputs) Tensors and returns a scalar Tensor; inputs
    are numpy arrays used as leaf values. Returns the worst relative
    error max|analytic - numeric| / (max|numeric| + 1e-8) over all
    inputs.
    """
    tensors = [Tensor(np.array(a, copy=True), requires_grad=True) for a in inputs]
    loss = fn(*tensors)
    backward(loss)
    worst = 0.0
    for t in tensors:
        numeric = np.zeros(t.data.shape, dtype=np.float64).reshape(-1)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*tensors).data)
            flat[i] = orig - h
            fm = float(fn(*tensors).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        numeric = numeric.reshape(t.data.shape)
        analytic = np.zeros_like(numeric) if t.grad is None else t.grad
        err = np.abs(analytic - numeric).max() / (np.abs(numeric).max() + 1e-8)
        worst = max(worst, float(err))
    return worst
