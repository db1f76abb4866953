"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Scope: exactly the primitives the density-field training graph needs
(dense MLPs, small convolutional extractors, compositing arithmetic,
bilinear grid sampling and box filtering). Single precision by default;
float64 graphs are supported for finite-difference verification.

No general broadcasting: elementwise ops accept equal shapes or a scalar
on one side, everything else goes through explicit ``reshape`` /
``broadcast_to``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse as _sparse

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


def _shape_fault(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


_node_ids = itertools.count(1)


class Tensor:
    """A dense real array plus an optional position in the backward graph.

    ``node_id`` is assigned only to gradient-requiring tensors; constants
    stay off the graph entirely and receive no gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = next(_node_ids) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # Operator sugar; the named primitives below do the work.
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

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.node_id = next(_node_ids) if out.requires_grad else None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    # own=True means g was freshly allocated by the caller and may be
    # adopted without copying (never pass views of the upstream gradient).
    if not t.requires_grad:
        return
    if t.grad is None:
        if own and g.dtype == t.data.dtype:
            t.grad = g
        else:
            t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise arithmetic (equal shapes or scalar on one side)


def _is_scalar(x) -> bool:
    return np.ndim(x) == 0 or (isinstance(x, Tensor) and x.size == 1)


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise _shape_fault(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # Collapse a full-shape gradient onto a size-1 operand.
    if t.size == 1 and g.shape != t.shape:
        return np.sum(g).reshape(t.shape)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_elementwise("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_accum(a, _reduce_to(g, a)), _accum(b, _reduce_to(g, b))))


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_elementwise("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_accum(a, _reduce_to(g, a)), _accum(b, _reduce_to(-g, b))))


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_elementwise("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_accum(a, _reduce_to(g * b.data, a), own=True),
                              _accum(b, _reduce_to(g * a.data, b), own=True)))


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_elementwise("div", a, b)
    inv = 1.0 / b.data

    def backward(g):
        _accum(a, _reduce_to(g * inv, a), own=True)
        _accum(b, _reduce_to(-g * a.data * inv * inv, b), own=True)

    return _result(a.data * inv, (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_fault("matmul", a.shape, b.shape)

    def backward(g):
        _accum(a, g @ b.data.T, own=True)
        _accum(b, a.data.T @ g, own=True)

    return _result(a.data @ b.data, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector over the last axis of ``x`` (the one sanctioned broadcast)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise _shape_fault("add_bias", x.shape, b.shape)
    axes = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b),
                   lambda g: (_accum(x, g), _accum(b, g.sum(axis=axes), own=True)))


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # subgradient at 0 is 0
    return _result(np.maximum(x.data, 0), (x,),
                   lambda g: _accum(x, g * mask, own=True))


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # log(1 + e^x), computed stably for large |x|
    out = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))
    with np.errstate(over="ignore"):  # exp(-x) -> inf gives the exact limit 0
        sig = 1.0 / (1.0 + np.exp(-x.data))
    return _result(out.astype(x.data.dtype, copy=False), (x,),
                   lambda g: _accum(x, g * sig, own=True))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: _accum(x, g * out, own=True))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: _accum(x, g * (0.5 / out)))


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,),
                   lambda g: _accum(x, g * np.sign(x.data), own=True))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _unreduce(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (x,),
                   lambda g: _accum(x, _unreduce(g, x.shape, axis, keepdims)))


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    return _result(np.asarray(out), (x,),
                   lambda g: _accum(x, _unreduce(g, x.shape, axis, keepdims) / count))


def min_over_axis(x: Tensor, axis: int = -1) -> Tensor:
    """Minimum along ``axis``; the gradient routes entirely to the argmin
    element (ties break toward the lowest index, numpy argmin order)."""
    x = as_tensor(x)
    idx = np.argmin(x.data, axis=axis)
    out = np.min(x.data, axis=axis)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        _accum(x, dx)

    return _result(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,),
                   lambda g: _accum(x, g.reshape(x.shape)))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: _accum(x, g.transpose(inv)))


def slice_axis0(x: Tensor, lo: int, hi: int) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[lo:hi] = g
        _accum(x, dx)

    return _result(x.data[lo:hi].copy(), (x,), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise _shape_fault("broadcast_to", x.shape, shape) from None
    added = len(shape) - x.ndim

    def backward(g):
        if added:
            g = g.sum(axis=tuple(range(added)))
        rep = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if rep:
            g = g.sum(axis=rep, keepdims=True)
        _accum(x, g)

    return _result(np.ascontiguousarray(out), (x,), backward)


def cumsum_exclusive(x: Tensor) -> Tensor:
    """out[..., i] = sum of x[..., :i] along the last axis; out[..., 0] = 0."""
    x = as_tensor(x)
    out = np.zeros_like(x.data)
    if x.shape[-1] > 1:
        out[..., 1:] = np.cumsum(x.data[..., :-1], axis=-1)

    def backward(g):
        dx = np.zeros_like(g)
        if g.shape[-1] > 1:
            rev = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
            dx[..., :-1] = rev[..., 1:]
        _accum(x, dx)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# spatial ops (single image, channels-first)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1, stride 1 or 2.

    x: (Cin, H, W); w: (Cout, Cin, 3, 3); b: (Cout,) or None.
    Output spatial size is ceil(H/stride) x ceil(W/stride).
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[0]:
        raise _shape_fault("conv2d", x.shape, w.shape)
    cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * 9)
    wf = w.data.reshape(cout, cin * 9)
    y = (cols @ wf.T).T.reshape(cout, ho, wo)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise _shape_fault("conv2d bias", (cout,), b.shape)
        y = y + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gf = g.reshape(cout, ho * wo)
        _accum(w, (gf @ cols).reshape(w.shape))
        if b is not None:
            _accum(b, g.sum(axis=(1, 2)))
        if x.requires_grad:
            dcols = (gf.T @ wf).reshape(ho, wo, cin, 3, 3)
            dxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    dxp[:, di:di + (ho - 1) * stride + 1:stride,
                        dj:dj + (wo - 1) * stride + 1:stride] += \
                        dcols[:, :, :, di, dj].transpose(2, 0, 1)
            _accum(x, dxp[:, 1:h + 1, 1:wd + 1])

    return _result(y, parents, backward)


def dilate2d(x: Tensor, factor: int = 2) -> Tensor:
    """Zero-insertion upsampling of the two trailing axes."""
    x = as_tensor(x)
    c, h, w = x.shape
    out = np.zeros((c, (h - 1) * factor + 1, (w - 1) * factor + 1), dtype=x.data.dtype)
    out[:, ::factor, ::factor] = x.data
    return _result(out, (x,), lambda g: _accum(x, g[:, ::factor, ::factor]))


def pad2d(x: Tensor, pad) -> Tensor:
    """Zero-pad the two trailing axes; pad = ((top, bottom), (left, right))."""
    x = as_tensor(x)
    (t, bo), (l, r) = pad
    out = np.pad(x.data, ((0, 0), (t, bo), (l, r)))
    h, w = x.shape[-2:]
    return _result(out, (x,), lambda g: _accum(x, g[:, t:t + h, l:l + w]))


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w window of the two trailing axes."""
    x = as_tensor(x)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, :h, :w] = g
        _accum(x, dx)

    return _result(x.data[:, :h, :w].copy(), (x,), backward)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                      out_hw: tuple[int, int] | None = None) -> Tensor:
    """Stride-2 transposed 3x3 convolution (learned x2 upsampling).

    x: (Cin, h, w); w: (Cout, Cin, 3, 3). Output spatial size must be
    2h-1 or 2h per axis (default 2h); built from dilate + pad + conv so
    every piece carries its own exact adjoint.
    """
    x = as_tensor(x)
    h, wd = x.shape[-2:]
    if out_hw is None:
        out_hw = (2 * h, 2 * wd)
    oh, ow = out_hw
    if not (2 * h - 1 <= oh <= 2 * h) or not (2 * wd - 1 <= ow <= 2 * wd):
        raise ShapeError(
            f"transposed_conv2d: requested {out_hw}, reachable "
            f"{(2 * h - 1, 2 * wd - 1)}..{(2 * h, 2 * wd)}")
    z = dilate2d(x, 2)
    pb, pr = oh - (2 * h - 1), ow - (2 * wd - 1)
    if pb or pr:
        z = pad2d(z, ((0, pb), (0, pr)))
    return conv2d(z, w, b, stride=1)


def bilinear_sample_diff(grid: Tensor, pts: np.ndarray) -> Tensor:
    """Differentiably sample a (C, H, W) grid at normalized points.

    pts: (n, 2) array of (u, v) in [-1, 1]^2, u along width. Coordinates
    outside the grid clamp to the border texel (frustum extrapolation).
    Differentiable w.r.t. the grid only; points are data.
    """
    grid = as_tensor(grid)
    c, h, w = grid.shape
    pts = np.asarray(pts)
    px = np.clip((pts[:, 0] + 1.0) * 0.5 * w - 0.5, 0.0, w - 1.0)
    py = np.clip((pts[:, 1] + 1.0) * 0.5 * h - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(px), w - 2 if w > 1 else 0).astype(np.int64)
    y0 = np.minimum(np.floor(py), h - 2 if h > 1 else 0).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0).astype(grid.data.dtype)
    fy = (py - y0).astype(grid.data.dtype)

    flat_t = np.ascontiguousarray(grid.data.reshape(c, h * w).T)  # (H*W, C)
    i00, i01 = y0 * w + x0, y0 * w + x1
    i10, i11 = y1 * w + x0, y1 * w + x1
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = (flat_t[i00] * w00[:, None] + flat_t[i01] * w01[:, None] +
           flat_t[i10] * w10[:, None] + flat_t[i11] * w11[:, None])  # (n, C)

    def backward(g):
        n = pts.shape[0]
        idx = np.concatenate([i00, i01, i10, i11])
        wt = np.concatenate([w00, w01, w10, w11]).astype(np.float64)
        scat = _sparse.csr_matrix(
            (wt, (idx, np.arange(4 * n) % n)), shape=(h * w, n))
        dflat = scat @ g.astype(np.float64)  # (H*W, C)
        _accum(grid, dflat.T.reshape(grid.shape).astype(grid.data.dtype))

    return _result(np.ascontiguousarray(out), (grid,), backward)


def box_filter(x: Tensor, k: int = 3) -> Tensor:
    """k x k mean filter over the two trailing axes with clamp (edge) padding."""
    x = as_tensor(x)
    if k % 2 != 1 or k < 1:
        raise ValueError(f"box_filter: k must be odd and positive, got {k}")
    p = k // 2
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    xp = np.pad(x.data, [(0, 0)] * len(lead) + [(p, p), (p, p)], mode="edge")
    out = np.zeros_like(x.data)
    for di in range(k):
        for dj in range(k):
            out += xp[..., di:di + h, dj:dj + w]
    out = out / (k * k)

    def backward(g):
        gp = np.zeros(lead + (h + 2 * p, w + 2 * p), dtype=g.dtype)
        for di in range(k):
            for dj in range(k):
                gp[..., di:di + h, dj:dj + w] += g
        gp /= k * k
        # adjoint of edge padding: fold the pad margins onto the border rows
        for _ in range(p):
            gp[..., 1, :] += gp[..., 0, :]
            gp[..., -2, :] += gp[..., -1, :]
            gp = gp[..., 1:-1, :]
            gp[..., :, 1] += gp[..., :, 0]
            gp[..., :, -2] += gp[..., :, -1]
            gp = gp[..., :, 1:-1]
        _accum(x, gp)

    return _result(out, (x,), backward)


def forward_diff_x(x: Tensor) -> Tensor:
    """Forward difference along the last axis; last column zero."""
    x = as_tensor(x)
    out = np.zeros_like(x.data)
    out[..., :-1] = x.data[..., 1:] - x.data[..., :-1]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[..., 1:] += g[..., :-1]
        dx[..., :-1] -= g[..., :-1]
        _accum(x, dx)

    return _result(out, (x,), backward)


def forward_diff_y(x: Tensor) -> Tensor:
    """Forward difference along the second-to-last axis; last row zero."""
    x = as_tensor(x)
    out = np.zeros_like(x.data)
    out[..., :-1, :] = x.data[..., 1:, :] - x.data[..., :-1, :]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[..., 1:, :] += g[..., :-1, :]
        dx[..., :-1, :] -= g[..., :-1, :]
        _accum(x, dx)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# backward pass


class Graph:
    """Reverse-topologically ordered record of the ops reaching a loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes  # topological order, loss last

    def __len__(self):
        return len(self.nodes)


def trace(loss: Tensor) -> Graph:
    """Collect the gradient-requiring ancestry of ``loss`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return Graph(order)


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns {node_id: gradient array} for every gradient-requiring tensor
    reached; also leaves the gradient on each tensor's ``.grad``. Each node
    is visited exactly once, in reverse topological order, so repeated runs
    on the same graph values are bitwise identical.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = trace(loss)
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {n.node_id: n.grad for n in graph.nodes if n.grad is not None}


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-4) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` must be a deterministic scalar function of ``params`` (closure).
    Relative error per coordinate: |a - b| / max(1e-8, |a| + |b|).
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps must be in [1e-5, 1e-3], got {eps}")
    for p in params:
        if not p.data.flags["C_CONTIGUOUS"]:
            p.data = np.ascontiguousarray(p.data)
    loss = f()
    backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
             for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().data.item()
            flat[i] = orig - eps
            fm = f().data.item()
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            a = float(g.reshape(-1)[i])
            worst = max(worst, abs(a - fd) / max(1e-8, abs(a) + abs(fd)))
    return worst
