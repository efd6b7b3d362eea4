"""Dense tensors with reverse-mode automatic differentiation.

The graph is a dynamically recorded tape: every operation produces a new
Tensor that remembers its parents and a closure that pushes gradients back
to them.  ``Tensor.backward`` replays the tape once, in reverse topological
order.  float64 is used for gradient checking, float32 for training.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import fastops
from .errors import ContractError, DimensionError, DomainError, NumericError, StateError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / frozen forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """n-d array plus optional participation in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if type(data) is np.ndarray and (dtype is None or data.dtype == dtype) \
                and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = ()
        self._backward = None
        self._backward_ran = False

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- tape ------------------------------------------------------------------
    def zero_grad(self):
        self.grad = None
        self._backward_ran = False

    def backward(self):
        """Populate grads of every reachable tensor with requires_grad."""
        if self.size != 1:
            raise ContractError("backward requires a scalar loss, got shape %s" % (self.shape,))
        if self._backward_ran:
            raise StateError("backward already ran for this tensor; rebuild the graph or zero_grad first")

        # Iterative post-order DFS: graphs from a training batch can exceed
        # Python's recursion limit.
        tape = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        self._backward_ran = True

    # -- operator sugar ----------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


@dataclass
class Parameter:
    """Named learnable tensor; frozen parameters never receive updates."""

    tensor: Tensor
    name: str
    frozen: bool = False

    def freeze(self):
        self.frozen = True
        self.tensor.requires_grad = False

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


def _as_tensor(x, like: Tensor = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents, backward) -> Tensor:
    """Record one forward op on the tape (or a constant if grads are off)."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=t.data.dtype)
    else:
        t.grad += g


def _accumulate_owned(t: Tensor, g: np.ndarray):
    """Like _accumulate, but g is a freshly allocated array the caller hands
    over, so the first accumulation can adopt it without copying."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -----------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate_owned(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accumulate_owned(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate_owned(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def div(a, b):
    """Elementwise a / b.  For the temperature node m/t the closed-form
    derivatives are d/dm = 1/t and d/dt = -m/t^2, accumulated over every use."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accumulate_owned(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate_owned(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), backward)


def power(a, exponent: float):
    a = _as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        _accumulate_owned(a, g * exponent * a.data ** (exponent - 1.0))

    return _node(a.data ** exponent, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate_owned(a, g * out_data)

    return _node(out_data, (a,), backward)


def log(a):
    a = _as_tensor(a)

    def backward(g):
        _accumulate_owned(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


def clip(a, lo: float, hi: float):
    """Clamp values to [lo, hi]; gradient passes only where not clipped."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accumulate_owned(a, g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), backward)


def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def backward(g):
        _accumulate_owned(a, g * (out_data > 0))

    return _node(out_data, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate_owned(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


# -- shape ops ---------------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def getitem(a, key):
    a = _as_tensor(a)

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _node(a.data[key], (a,), backward)


def concat(tensors, axis: int = 0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            _accumulate(t, g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate_owned(a, np.broadcast_to(g, a.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate_owned(a, np.broadcast_to(g, a.shape) / count)

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# -- neural primitives --------------------------------------------------------

def linear(x, weight, bias):
    """x: (N, D), weight: (K, D), bias: (K,) -> (N, K)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: got input {x.shape} and weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight rows {weight.shape[0]}")

    def backward(g):
        if x.requires_grad:
            _accumulate_owned(x, g @ weight.data)
        if weight.requires_grad:
            _accumulate_owned(weight, np.ascontiguousarray(g.T) @ x.data)
        if bias.requires_grad:
            _accumulate_owned(bias, g.sum(axis=0))

    return _node(x.data @ weight.data.T + bias.data, (x, weight, bias), backward)


def conv2d(x, weight, bias, stride: int = 1, pad: int = 0):
    """2-d convolution, NCHW x OIkk -> NOhw, via im2col + GEMM."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {i}")
    if bias.shape != (o,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("conv2d: non-finite values in input")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if fastops.AVAILABLE and stride == 1 and kh == kw:
        cols = np.empty((n, oh * ow, c * kh * kw), dtype=x.dtype)
        fastops.im2col(xp, cols, kh)
        cols = cols.reshape(n * oh * ow, c * kh * kw)
    else:
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # (N, oh, ow, C*kh*kw), contiguous for the GEMM
        cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        if weight.requires_grad:
            _accumulate_owned(weight, (np.ascontiguousarray(gmat.T) @ cols).reshape(weight.shape))
        if bias.requires_grad:
            _accumulate_owned(bias, gmat.sum(axis=0))
        if x.requires_grad:
            hp, wp = h + 2 * pad, w + 2 * pad
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            dcols = gmat @ wmat
            if fastops.AVAILABLE and stride == 1 and kh == kw:
                fastops.col2im_add(dcols.reshape(n, oh * ow, c * kh * kw), dxp, kh)
            else:
                dcols = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
                for a in range(kh):
                    for b in range(kw):
                        dxp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += dcols[:, :, :, :, a, b]
            _accumulate_owned(x, dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

    return _node(np.ascontiguousarray(out), (x, weight, bias), backward)


def max_pool2d(x, k: int, stride: int):
    """Max pooling; the gradient routes to the argmax cell (lowest flat index on ties)."""
    x = _as_tensor(x)
    if k < 1 or stride < 1:
        raise DimensionError(f"max_pool2d: k and stride must be >= 1, got {k}, {stride}")
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"max_pool2d: window {k} exceeds input {h}x{w}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1

    if fastops.AVAILABLE:
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        arg = np.empty((n, c, oh, ow), dtype=np.int64)
        fastops.maxpool_forward(x.data, out, arg, k, stride)

        def backward(g):
            if not x.requires_grad:
                return
            dx = np.zeros(x.shape, dtype=x.dtype)
            fastops.maxpool_backward(np.ascontiguousarray(g), arg, dx, k, stride)
            _accumulate_owned(x, dx)

        return _node(out, (x,), backward)

    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, oh, ow, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        dx = np.zeros(x.shape, dtype=x.dtype)
        ni, ci, yi, xi = np.indices((n, c, oh, ow))
        iy = yi * stride + arg // k
        ix = xi * stride + arg % k
        np.add.at(dx, (ni, ci, iy, ix), g)
        _accumulate_owned(x, dx)

    return _node(np.ascontiguousarray(out), (x,), backward)


def softmax(x, axis: int):
    """Numerically stable softmax along `axis` (max subtracted first)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate_owned(x, out_data * (g - dot))

    return _node(out_data, (x,), backward)


def _check_temps(temps: Tensor, expected: int, what: str):
    if temps.shape != (expected,):
        raise DimensionError(f"{what}: expected {expected} temperatures, got shape {temps.shape}")
    if np.any(temps.data <= 0):
        raise DomainError(f"{what}: temperatures must be positive")


def tempered_softmax(m, temps, axis: str):
    """Softmax of temperature-scaled logits over a 2-d (proposals x classes) matrix.

    axis='class': entry (r, k) is scaled by temps[k]; rows are normalized.
    axis='proposal': entry (r, k) is scaled by temps[r]; columns are normalized.
    """
    m, temps = _as_tensor(m), _as_tensor(temps)
    if m.ndim != 2:
        raise DimensionError(f"tempered_softmax: expected a 2-d logit matrix, got {m.shape}")
    r, k = m.shape
    if axis == "class":
        _check_temps(temps, k, "tempered_softmax(axis=class)")
        return softmax(div(m, temps), axis=1)
    if axis == "proposal":
        _check_temps(temps, r, "tempered_softmax(axis=proposal)")
        return softmax(div(m, reshape(temps, (r, 1))), axis=0)
    raise ContractError(f"tempered_softmax: axis must be 'class' or 'proposal', got {axis!r}")


def tempered_sigmoid(m, temps):
    """Per-class sigmoid of temperature-scaled logits: 1 / (1 + exp(-m_k / t_k))."""
    m, temps = _as_tensor(m), _as_tensor(temps)
    if np.any(temps.data <= 0):
        raise DomainError("tempered_sigmoid: temperatures must be positive")
    if m.shape[-1] != temps.shape[0]:
        raise DimensionError(f"tempered_sigmoid: logits {m.shape} vs temperatures {temps.shape}")
    return sigmoid(div(m, temps))
