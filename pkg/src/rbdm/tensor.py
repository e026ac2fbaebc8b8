"""Minimal reverse-mode differentiable array engine on top of numpy.

Only the primitives the bridge model needs are provided. Binary operations
require equal shapes; the only broadcasting allowed is against Python scalars
and 0-d tensors.
"""
import contextlib
import numbers

import numpy as np
from scipy.ndimage import convolve1d, correlate1d

from rbdm.errors import NumericsError, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    # make numpy defer to our reflected operators (ndarray + Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------ info
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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -------------------------------------------------------------- autograd
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that
        requires a gradient."""
        if self.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ShapeError("backward called on a tensor that does not require grad")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, finished = stack.pop()
            if finished:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg

    # ------------------------------------------------------------- operators
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
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if req:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _is_scalar(x):
    return isinstance(x, numbers.Number) and not isinstance(x, bool)


def _check_same(a, b, op):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    for axis, (sa, sb) in enumerate(zip(a.shape, b.shape)):
        if sa != sb:
            raise ShapeError(f"{op}: axis {axis} differs ({sa} vs {sb}); shapes {a.shape} and {b.shape}")
    raise ShapeError(f"{op}: rank differs, shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    # only 0-d operands are ever broadcast
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# ---------------------------------------------------------------- elementwise
def add(a, b):
    if _is_scalar(b):
        return add_scalar(as_tensor(a), b)
    if _is_scalar(a):
        return add_scalar(as_tensor(b), a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    if _is_scalar(b):
        return add_scalar(as_tensor(a), -b)
    if _is_scalar(a):
        return add_scalar(scale(as_tensor(b), -1.0), a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    if _is_scalar(b):
        return scale(as_tensor(a), b)
    if _is_scalar(a):
        return scale(as_tensor(b), a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    if _is_scalar(b):
        return scale(as_tensor(a), 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "div")
    out = a.data / b.data

    def backward(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

    return _result(out, (a, b), backward)


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x, c):
    x = as_tensor(x)
    c = float(c)
    return _result(x.data + c, (x,), lambda g: (g,))


def power(x, p):
    if not _is_scalar(p):
        raise ShapeError("power: exponent must be a Python scalar")
    x = as_tensor(x)
    p = float(p)
    return _result(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def clamp_min(x, lo):
    """max(x, lo) with a scalar floor; gradient is zero where the floor is active."""
    x = as_tensor(x)
    mask = x.data > lo
    return _result(np.where(mask, x.data, lo).astype(x.dtype), (x,), lambda g: (g * mask,))


def elementwise(op, *args):
    """Dispatch by name over the elementwise primitives."""
    table = {"tanh": tanh, "relu": relu, "silu": silu, "add": add, "sub": sub, "mul": mul,
             "scale": scale, "div": div}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


# ------------------------------------------------------------------ reductions
def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None):
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("sum of an empty tensor")
    axes = _axis_tuple(axis, x.ndim)
    out = x.data.sum(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x, axis=None):
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    axes = _axis_tuple(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / n, axes), x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward)


def l2norm(x):
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("l2norm of an empty tensor")
    out = np.sqrt(np.sum(x.data * x.data))

    def backward(g):
        if out == 0:
            return (np.zeros_like(x.data),)
        return (g * x.data / out,)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward)


def reduce(op, x):
    table = {"mean": mean, "sum": tsum, "l2norm": l2norm}
    if op not in table:
        raise ValueError(f"unknown reduction {op!r}")
    return table[op](x)


def mse(a, b):
    d = sub(a, b)
    return mean(mul(d, d))


# -------------------------------------------------------------- restructuring
def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, idx):
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        if _fancy(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _result(x.data[idx], (x,), backward)


def _fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise ShapeError(f"concat: rank differs ({ref.shape} vs {t.shape})")
        for a in range(ref.ndim):
            if a != ax and t.shape[a] != ref.shape[a]:
                raise ShapeError(f"concat: axis {a} differs ({ref.shape[a]} vs {t.shape[a]})")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: shapes differ ({shape} vs {t.shape})")

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# --------------------------------------------------------------- convolution
def _conv_out(size, k, stride, padding, axis_name):
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: {axis_name} axis of size {size} with kernel {k}, stride {stride}, "
            f"padding {padding} does not give an integral output size")
    return span // stride + 1


def _im2col(x, k, stride, padding, ho, wo):
    """Patch matrix in (C, k, k, N, Ho, Wo) layout; rows are kernel taps."""
    n, c = x.shape[:2]
    xt = x.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo)


def _conv2d_backward(g, cols, wmat, x_shape, k, stride, padding, need_x=True, need_w=True):
    """Gradients of a convolution given the cached patch matrix.

    Returns (grad_input, grad_kernel_matrix, grad_bias); entries that were
    not requested are None.
    """
    n, c, h, w = x_shape
    o = wmat.shape[0]
    ho, wo = g.shape[2], g.shape[3]
    gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
    gb = gmat.sum(axis=1)
    gw = gmat @ cols.T if need_w else None
    gx = None
    if need_x:
        dcols = (wmat.T @ gmat).reshape(c, k, k, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        gx = dxp.transpose(1, 0, 2, 3)
    return gx, gw, gb


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation.

    ``x`` is C_in x H x W or N x C_in x H x W, ``kernel`` is C_out x C_in x k x k
    with odd k, ``bias`` (optional) has C_out entries.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), kernel, bias, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 3-D or 4-D, got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be C_out x C_in x k x k, got {kernel.shape}")
    o, ci, k, _ = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    n, c, h, w = x.shape
    if c != ci:
        raise ShapeError(f"conv2d: input channel axis (axis 1) has {c} but kernel axis 1 expects {ci}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias axis 0 has {bias.shape} but kernel axis 0 has {o}")
    ho = _conv_out(h, k, stride, padding, "height")
    wo = _conv_out(w, k, stride, padding, "width")

    cols = _im2col(x.data, k, stride, padding, ho, wo)
    wmat = kernel.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gx, gw, gb = _conv2d_backward(g, cols, wmat, x.shape, k, stride, padding,
                                      need_x=x.requires_grad, need_w=kernel.requires_grad)
        grads = (gx, None if gw is None else gw.reshape(kernel.shape))
        return grads if bias is None else grads + (gb,)

    return _result(out, parents, backward)


def bias_add(x, b):
    """Add a per-channel vector (C,) or per-sample-per-channel matrix (N, C)
    to an N x C x H x W feature map."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 4:
        raise ShapeError(f"bias_add: expected N x C x H x W, got {x.shape}")
    n, c = x.shape[:2]
    if b.shape == (c,):
        bb = b.data[None, :, None, None]
        red = (0, 2, 3)
    elif b.shape == (n, c):
        bb = b.data[:, :, None, None]
        red = (2, 3)
    else:
        raise ShapeError(f"bias_add: bias shape {b.shape} matches neither ({c},) nor ({n}, {c})")
    return _result(x.data + bb, (x, b), lambda g: (g, g.sum(axis=red)))


def linear(x, weight, bias=None):
    """x (N, D) @ weight.T (D, K) + bias (K,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is None:
        return _result(out, (x, weight), lambda g: (g @ weight.data, g.T @ x.data))
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs output width {weight.shape[0]}")
    return _result(out + bias.data, (x, weight, bias),
                   lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)))


def avg_pool2d(x):
    """2x2 average pooling over the last two axes; a trailing odd row/column is dropped."""
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    if h < 2 or w < 2:
        raise ShapeError(f"avg_pool2d: spatial size {h}x{w} too small")
    h2, w2 = h // 2, w // 2
    lead = x.shape[:-2]
    core = x.data[..., :2 * h2, :2 * w2]
    out = core.reshape(lead + (h2, 2, w2, 2)).mean(axis=(-3, -1))

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., :2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        return (gx,)

    return _result(out, (x,), backward)


def upsample2d(x):
    """Nearest-neighbour 2x upsampling over the last two axes."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    lead = x.shape[:-2]
    h, w = x.shape[-2], x.shape[-1]
    return _result(out, (x,),
                   lambda g: (g.reshape(lead + (h, 2, w, 2)).sum(axis=(-3, -1)),))


def filter1d(x, weights, axis):
    """Valid 1-D correlation of every line along ``axis`` (-1 or -2) with a
    fixed weight vector. Used for separable Gaussian windows."""
    x = as_tensor(x)
    weights = np.asarray(weights, dtype=x.dtype)
    k = len(weights)
    ax = axis % x.ndim
    size = x.shape[ax]
    if size < k:
        raise ShapeError(f"filter1d: axis {ax} has {size} samples, window needs {k}")
    if k % 2 == 0:
        raise ShapeError(f"filter1d: window length must be odd, got {k}")
    half = k // 2
    keep = [slice(None)] * x.ndim
    keep[ax] = slice(half, size - half)
    out = correlate1d(x.data, weights, axis=ax, mode="constant")[tuple(keep)]

    def backward(g):
        pad = [(0, 0)] * g.ndim
        pad[ax] = (half, half)
        return (convolve1d(np.pad(g, pad), weights, axis=ax, mode="constant"),)

    return _result(np.ascontiguousarray(out), (x,), backward)


def check_finite(x, what="tensor"):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values in {what}")
    return x


def silu(x):
    """x * sigmoid(x)."""
    x = as_tensor(x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * sig
    return _result(out, (x,), lambda g: (g * (sig + out * (1.0 - sig)),))
