"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy float64 array.  Each operation records its
parents and a backward closure; ``backward()`` on a scalar loss walks the
recorded graph once per node in reverse topological order.  Everything is
CPU, float64, single-threaded per graph: small scale, tight gradient checks.
"""

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible; message names the offending dims."""


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode pass from a scalar; touches each graph node once."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents and node is not self:
                node.grad = None  # free non-leaf grads as we go

    # -- operator sugar -----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts):
    return any(t.requires_grad or t._parents for t in ts)


def _make(data, parents, backward):
    if any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum gradient g down to the given (possibly broadcast) operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def bw(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), bw)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), bw)


def log(a):
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bw)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                        np.exp(a.data) / (1.0 + np.exp(a.data)))

    def bw(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        a._accumulate(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw)


def hard_clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only where not clamped."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)

    def bw(g):
        a._accumulate(g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), bw)


def clamp_min(a, lo):
    a = as_tensor(a)
    mask = a.data > lo

    def bw(g):
        a._accumulate(g * mask)

    return _make(np.maximum(a.data, lo), (a,), bw)


# -- reductions / structure -------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def bw(g):
        a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw)


def getitem(a, key):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accumulate(full)

    return _make(a.data[key].copy(), (a,), bw)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def gather_flat(a, idx):
    """Pick elements of a 1-D tensor at integer indices (backward scatter-adds)."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"gather_flat needs a 1-D tensor, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), bw)


def upsample2x(a):
    """Nearest-neighbor 2x spatial upsampling of [H,W,C]."""
    a = as_tensor(a)
    h, w, c = a.data.shape
    out_data = np.repeat(np.repeat(a.data, 2, axis=0), 2, axis=1)

    def bw(g):
        a._accumulate(g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)))

    return _make(out_data, (a,), bw)


# -- losses -----------------------------------------------------------------


def smooth_l1(a):
    """Elementwise Huber with unit transition: 0.5 x^2 inside, |x| - 0.5 outside."""
    a = as_tensor(a)
    absd = np.abs(a.data)
    inner = absd < 1.0

    def bw(g):
        a._accumulate(g * np.where(inner, a.data, np.sign(a.data)))

    return _make(np.where(inner, 0.5 * a.data * a.data, absd - 0.5), (a,), bw)


def sigmoid_ce(logits, targets):
    """Numerically stable sigmoid cross-entropy; targets are constant in {0,1}."""
    logits = as_tensor(logits)
    t = _as_array(targets)
    x = logits.data
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

    def bw(g):
        logits._accumulate(g * (sig - t))

    return _make(loss, (logits,), bw)


# -- spatial ops backed by kernels -------------------------------------------


def conv2d(x, w, stride=1, padding=0):
    """2-D convolution, channels last: x [H,W,Cin] * w [k,k,Cin,Cout].

    Output spatial size floor((H + 2p - k)/s) + 1 per axis.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: input rank {x.data.ndim} (want 3), kernel rank {w.data.ndim} (want 4)")
    k = w.data.shape[0]
    if w.data.shape[1] != k:
        raise ShapeError(f"conv2d: kernel must be square, got {w.data.shape[:2]}")
    if k % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if x.data.shape[2] != w.data.shape[2]:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape[2]} != kernel input channels {w.data.shape[2]}"
        )
    h, w_in = x.data.shape[:2]
    y = kernels.conv2d_forward(x.data, w.data, stride, padding)

    def bw(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad or x._parents:
            x._accumulate(kernels.conv2d_input_grad(g, w.data, stride, padding, h, w_in))
        if w.requires_grad or w._parents:
            w._accumulate(kernels.conv2d_kernel_grad(x.data, g, k, stride, padding))

    return _make(y, (x, w), bw)


def bilinear_sample(img, coords):
    """Sample img [H,W,C] at coords [...,2] (row, col), differentiable in both.

    Out-of-bounds samples are zero; returns (values Tensor, validity mask
    ndarray of the coords' leading shape).
    """
    img = as_tensor(img)
    coords_t = coords if isinstance(coords, Tensor) else Tensor(coords)
    lead = coords_t.data.shape[:-1]
    flat = np.ascontiguousarray(coords_t.data.reshape(-1, 2))
    out, valid = kernels.bilinear_gather(img.data, flat)
    c = img.data.shape[2]

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(-1, c))
        gimg, gcoords = kernels.bilinear_gather_grads(img.data, flat, g2)
        if img.requires_grad or img._parents:
            img._accumulate(gimg)
        if coords_t.requires_grad or coords_t._parents:
            coords_t._accumulate(gcoords.reshape(coords_t.data.shape))

    return _make(out.reshape(lead + (c,)), (img, coords_t), bw), valid.reshape(lead)
