"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable quantity in the package flows through :class:`Tensor`.
The computation graph is implicit: each tensor produced by an operation keeps
references to its parents and a closure computing the vector-Jacobian product.
``backward`` walks the graph once in reverse topological order and accumulates
gradients into ``requires_grad`` leaves. Gradients keep accumulating across
backward calls until ``zero_grad`` is called.

Default precision is float32 for training; verification code switches to
float64 via :func:`set_default_dtype` or the :class:`precision` context
manager.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "concat",
    "stack",
    "custom_op",
    "backward",
    "detach",
    "grad_check",
    "forward_op",
    "set_default_dtype",
    "default_dtype",
    "precision",
    "no_grad",
    "OPS",
]

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class precision:
    """Context manager switching the default dtype, e.g. ``with precision('float64'):``."""

    def __init__(self, dtype):
        self._dtype = dtype
        self._saved = None

    def __enter__(self):
        global _DEFAULT_DTYPE
        self._saved = _DEFAULT_DTYPE
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        global _DEFAULT_DTYPE
        _DEFAULT_DTYPE = self._saved
        return False


_GRAD_ENABLED = True


class no_grad:
    """Context manager suppressing graph construction (forward-only evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


def _shape_err(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """Dense n-dimensional real array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- graph management ----------------------------------------------------

    def detach(self) -> "Tensor":
        """Value-equal tensor at which gradient flow stops."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        other = as_tensor(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- elementwise / reductions as methods ----------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap a numpy result as a graph node with a hand-written VJP.

    ``vjp(grad_out)`` must return one gradient array (or None) per parent and
    must not mutate its argument.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- primitive operations ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_err("add", a.shape, b.shape) from None
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_err("mul", a.shape, b.shape) from None
    return custom_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def power(a, p) -> Tensor:
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise TypeError("power exponent must be a constant")
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return custom_op(out, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise _shape_err("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise _shape_err("matmul", a.shape, b.shape)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return custom_op(out, (a, b), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return custom_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(a.data.dtype.type(0), a.data)

    def vjp(g):
        x = a.data
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return custom_op(out, (a,), vjp)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def vjp(g):
        mask = np.ones_like(a.data)
        if lo is not None:
            mask = mask * (a.data > lo)
        if hi is not None:
            mask = mask * (a.data < hi)
        return (g * mask,)

    return custom_op(out, (a,), vjp)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom_op(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[i] for i in axis]))
    else:
        n = a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        o = out if (keepdims or axis is None) else np.expand_dims(out, axis)
        gg = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        mask = (a.data == o).astype(a.data.dtype)
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        return (mask / counts * gg,)

    return custom_op(np.asarray(out), (a,), vjp)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return custom_op(out, (a,), vjp)


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return custom_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return custom_op(out, (a,), lambda g: (np.transpose(g, inv),))


def take(a, idx) -> Tensor:
    """Basic (slice/integer) indexing with gradient scatter into the source."""
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return custom_op(np.asarray(out), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return custom_op(out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return custom_op(out, ts, vjp)


def conv2d_3x3_s1(x, w, b=None) -> Tensor:
    """2-D convolution, fixed 3x3 kernel, stride 1, zero padding preserving size.

    ``x``: (N, C, H, W); ``w``: (O, C, 3, 3); optional bias ``b``: (O,).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or x.shape[1] != w.shape[1]:
        raise _shape_err("conv2d_3x3_s1", x.shape, w.shape)
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * 9, h * wd)
    wf = w.data.reshape(o, c * 9)
    out = np.matmul(wf, cols).reshape(n, o, h, wd)

    def vjp(g):
        gf = g.reshape(n, o, h * wd)
        gw = np.einsum("noi,nci->oc", gf, cols).reshape(w.shape)
        gcols = np.matmul(wf.T, gf)  # (n, c*9, h*w)
        gwin = gcols.reshape(n, c, 3, 3, h, wd)
        gxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di : di + h, dj : dj + wd] += gwin[:, :, di, dj]
        return gxp[:, :, 1:-1, 1:-1], gw

    out_t = custom_op(out, (x, w), vjp)
    if b is not None:
        out_t = add(out_t, reshape(as_tensor(b), (1, o, 1, 1)))
    return out_t


def bilinear_sample(img, grid) -> Tensor:
    """Bilinear sampling of ``img`` (N,C,H,W) at ``grid`` (N,Hg,Wg,2).

    Grid coordinates are normalized to [-1,1] with (-1,-1) at pixel (0,0) and
    (1,1) at pixel (W-1,H-1); channel 0 is x (width), channel 1 is y (height).
    Points outside the source grid read as zero. Differentiable with respect
    to both image and grid.
    """
    img, grid = as_tensor(img), as_tensor(grid)
    if img.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2 or img.shape[0] != grid.shape[0]:
        raise _shape_err("bilinear_sample", img.shape, grid.shape)
    n, c, h, w = img.shape
    hg, wg = grid.shape[1], grid.shape[2]
    gx = (grid.data[..., 0] + 1.0) * 0.5 * (w - 1)
    gy = (grid.data[..., 1] + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0

    def corner(xi, yi):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc = np.clip(xi, 0, w - 1)
        yc = np.clip(yi, 0, h - 1)
        idx_n = np.arange(n)[:, None, None]
        vals = img.data[idx_n, :, yc, xc]  # (N,Hg,Wg,C)
        return vals * valid[..., None], valid

    v00, m00 = corner(x0, y0)
    v01, m01 = corner(x0 + 1, y0)
    v10, m10 = corner(x0, y0 + 1)
    v11, m11 = corner(x0 + 1, y0 + 1)
    w00 = ((1 - fx) * (1 - fy))[..., None]
    w01 = (fx * (1 - fy))[..., None]
    w10 = ((1 - fx) * fy)[..., None]
    w11 = (fx * fy)[..., None]
    out = (v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11).transpose(0, 3, 1, 2)

    def vjp(g):
        gq = g.transpose(0, 2, 3, 1)  # (N,Hg,Wg,C)
        gimg = np.zeros_like(img.data)
        idx_n = np.broadcast_to(np.arange(n)[:, None, None], (n, hg, wg))

        def scatter(xi, yi, wt, mask):
            xc = np.clip(xi, 0, w - 1)
            yc = np.clip(yi, 0, h - 1)
            contrib = gq * wt * mask[..., None]
            np.add.at(gimg, (idx_n[..., None], np.arange(c)[None, None, None, :], yc[..., None], xc[..., None]), contrib)

        scatter(x0, y0, w00, m00)
        scatter(x0 + 1, y0, w01, m01)
        scatter(x0, y0 + 1, w10, m10)
        scatter(x0 + 1, y0 + 1, w11, m11)

        # d out / d gx: corner-difference along x, weighted by the y fractions
        gdot = lambda v: (gq * v).sum(axis=-1)
        dgx = gdot(v01 - v00) * (1 - fy) + gdot(v11 - v10) * fy
        dgy = gdot(v10 - v00) * (1 - fx) + gdot(v11 - v01) * fx
        ggrid = np.stack([dgx * 0.5 * (w - 1), dgy * 0.5 * (h - 1)], axis=-1)
        return gimg, ggrid

    return custom_op(out, (img, grid), vjp)


def detach(x: Tensor) -> Tensor:
    return as_tensor(x).detach()


# -- backward pass --------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack: list = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad leaf with dRoot/dLeaf."""
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    grads: dict = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# -- named op dispatch (registry of the primitive op set) -----------------------

OPS = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d_3x3_s1": conv2d_3x3_s1,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "sum": sum_,
    "max": max_,
    "slice": take,
    "concat": concat,
    "bilinear_sample": bilinear_sample,
    "clamp": clamp,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a registered primitive by name; the graph records it for backward."""
    if op not in OPS:
        raise KeyError(f"unknown op {op!r}; registered: {sorted(OPS)}")
    return OPS[op](*inputs, **kwargs)


# -- verification harness --------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The analytic side runs one backward pass; the numeric side perturbs each
    coordinate of ``x`` by +-eps. Relative error per coordinate is
    |a - n| / (|a| + |n| + 1e-12). Raises on NaN in f(x).
    """
    if not (0 < eps <= 1e-3):
        raise ValueError("eps must lie in (0, 1e-3]")
    x = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("f(x) is not finite")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(x.data)).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(x.data)).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2 * eps)
    if not np.all(np.isfinite(numeric)):
        raise FloatingPointError("finite differences are not finite")
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0


def log_sum_exp(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-sum-exp reducing ``axis``."""
    m = max_(a, axis=axis, keepdims=True).detach()
    s = log(sum_(exp(a - m), axis=axis))
    return s + reshape(m, s.shape)
