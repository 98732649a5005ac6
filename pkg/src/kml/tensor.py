"""Dense tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every operation whose inputs participate in
differentiation records a node holding the parent tensors and a VJP closure.
The closures are themselves written in terms of tensor operations, so a
backward pass can be recorded and differentiated again. That is what lets a
meta objective backpropagate through an inner SGD step (see ``grad2``).

Elements are float64 by default. A float32 mode exists for throughput
comparisons and is selected with ``set_default_dtype`` or the ``precision``
context manager.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, GraphConfigError

Array = np.ndarray

_DTYPES = {"f32": np.float32, "f64": np.float64}


class _Local(threading.local):
    def __init__(self):
        self.dtype = np.float64
        self.recording = True


_local = _Local()


def default_dtype() -> np.dtype:
    return np.dtype(_local.dtype)


def set_default_dtype(dtype) -> None:
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ContractViolation(f"unknown precision {dtype!r}; use 'f32' or 'f64'")
        dtype = _DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractViolation(f"unsupported dtype {dtype!r}; use float32 or float64")
    _local.dtype = dt.type


@contextmanager
def precision(name: str):
    """Temporarily switch the default element type ('f32' or 'f64')."""
    old = _local.dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _local.dtype = old


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    old = _local.recording
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = old


class Node:
    """One recorded operation: the parent tensors plus a VJP closure."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """Immutable n-dimensional array, optionally attached to a graph.

    ``requires_grad`` marks a leaf whose gradient is wanted; tensors produced
    by operations carry a ``node`` linking them to their inputs. A tensor with
    neither never receives a gradient.
    """

    __slots__ = ("data", "node", "requires_grad", "grad_marker")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        arr.setflags(write=False)
        self.data = arr
        self.node: Node | None = None
        self.requires_grad = bool(requires_grad)
        self.grad_marker: str | None = None

    @staticmethod
    def _wrap(arr: Array, node: Node | None = None) -> "Tensor":
        t = Tensor.__new__(Tensor)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        t.node = node
        t.requires_grad = False
        t.grad_marker = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def detach(self) -> "Tensor":
        """A view of the same values with no graph attachment."""
        return Tensor._wrap(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single element, got shape {self.shape}")
        return float(self.data)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def __repr__(self) -> str:
        tag = "" if self.node is None else f" op={self.node.op}"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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


def constant(value, dtype=None) -> Tensor:
    """A tensor that never participates in differentiation."""
    return Tensor(value, requires_grad=False, dtype=dtype)


def parameter(value, dtype=None) -> Tensor:
    """A leaf tensor whose gradient will be requested."""
    return Tensor(value, requires_grad=True, dtype=dtype)


def _participates(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _record(op: str, parents: tuple[Tensor, ...], out: Array, vjp: Callable) -> Tensor:
    node = None
    if _local.recording and any(_participates(p) for p in parents):
        node = Node(op, parents, vjp)
    t = Tensor._wrap(out, node)
    if node is None and any(p.grad_marker == "frozen" for p in parents):
        # keep constant-folded results traceable to a non-differentiable gradient
        t.grad_marker = "frozen"
    return t


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        if isinstance(b, Tensor):
            return a, b
        return a, Tensor._wrap(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor._wrap(np.asarray(a, dtype=b.dtype)), b
    raise TypeError("at least one operand must be a Tensor")


def _sum_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (the VJP of broadcasting)."""
    shape = tuple(shape)
    if t.shape == shape:
        return t
    extra = t.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        extra + i for i, s in enumerate(shape) if s == 1 and t.shape[extra + i] != 1
    )
    s = reduce_sum(t, axis=axes, keepdims=True) if axes else t
    return reshape(s, shape)


# ---------------------------------------------------------------------------
# elementwise and structural primitives

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def vjp(g, needs):
        return (
            _sum_to(g, a.shape) if needs[0] else None,
            _sum_to(g, b.shape) if needs[1] else None,
        )

    return _record("add", (a, b), out, vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def vjp(g, needs):
        return (
            _sum_to(g, a.shape) if needs[0] else None,
            _sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return _record("sub", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def vjp(g, needs):
        return (
            _sum_to(g * b, a.shape) if needs[0] else None,
            _sum_to(g * a, b.shape) if needs[1] else None,
        )

    return _record("mul", (a, b), out, vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g, needs):
        return (
            _sum_to(g / b, a.shape) if needs[0] else None,
            _sum_to(neg(g * a) / (b * b), b.shape) if needs[1] else None,
        )

    return _record("div", (a, b), out, vjp)


def neg(a) -> Tensor:
    a, _ = _pair(a, a)
    out = -a.data

    def vjp(g, needs):
        return (neg(g) if needs[0] else None,)

    return _record("neg", (a,), out, vjp)


def exp(a: Tensor) -> Tensor:
    out_arr = np.exp(a.data)
    cell: list[Tensor] = []

    def vjp(g, needs):
        return (g * cell[0] if needs[0] else None,)

    t = _record("exp", (a,), out_arr, vjp)
    cell.append(t)
    return t


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g, needs):
        return (g / a if needs[0] else None,)

    return _record("log", (a,), out, vjp)


def relu(a) -> Tensor:
    a, _ = _pair(a, a)
    mask = Tensor._wrap((a.data > 0).astype(a.dtype))
    out = np.maximum(a.data, 0.0)

    def vjp(g, needs):
        return (g * mask if needs[0] else None,)

    return _record("relu", (a,), out, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _record("matmul", (a, b), out, vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.transpose(a.data, axes)

    def vjp(g, needs):
        return (transpose(g, inv) if needs[0] else None,)

    return _record("transpose", (a,), out, vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    old = a.shape
    out = np.reshape(a.data, shape)

    def vjp(g, needs):
        return (reshape(g, old) if needs[0] else None,)

    return _record("reshape", (a,), out, vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)

    def vjp(g, needs):
        return (_sum_to(g, a.shape) if needs[0] else None,)

    return _record("broadcast_to", (a,), out, vjp)


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=ax, keepdims=keepdims))
    if ax is None:
        kd_shape = (1,) * a.ndim
    else:
        kd_shape = tuple(1 if i in ax else s for i, s in enumerate(a.shape))

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        gg = g if g.shape == kd_shape else reshape(g, kd_shape)
        return (broadcast_to(gg, a.shape),)

    return _record("sum", (a,), out, vjp)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    count = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    return reduce_sum(a, axis=ax, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# convolution via im2col / col2im (mutually adjoint linear maps)

def _conv_out_extent(size: int, ksize: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - ksize) // stride + 1


def im2col(x: Tensor, ksize: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Extract sliding k*k windows into columns, shape (N, C*k*k, Ho*Wo)."""
    if x.ndim != 4:
        raise ContractViolation(f"im2col expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    ho = _conv_out_extent(h, ksize, stride, padding)
    wo = _conv_out_extent(w, ksize, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ContractViolation(f"window {ksize}x{ksize} stride {stride} does not fit {h}x{w}")
    arr = x.data
    if padding:
        arr = np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(arr, (ksize, ksize), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # (N, C, Ho, Wo, k, k)
    out = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * ksize * ksize, ho * wo)

    def vjp(g, needs):
        return (col2im(g, (n, c, h, w), ksize, stride, padding) if needs[0] else None,)

    return _record("im2col", (x,), out, vjp)


def col2im(cols: Tensor, x_shape, ksize: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Scatter-add columns back to the image; exact adjoint of ``im2col``."""
    n, c, h, w = x_shape
    ho = _conv_out_extent(h, ksize, stride, padding)
    wo = _conv_out_extent(w, ksize, stride, padding)
    expect = (n, c * ksize * ksize, ho * wo)
    if cols.shape != expect:
        raise ContractViolation(f"col2im expects shape {expect}, got {cols.shape}")
    a = cols.data.reshape(n, c, ksize, ksize, ho, wo)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ki in range(ksize):
        for kj in range(ksize):
            padded[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += a[:, :, ki, kj]
    out = np.ascontiguousarray(padded[:, :, padding : padding + h, padding : padding + w])

    def vjp(g, needs):
        return (im2col(g, ksize, stride, padding) if needs[0] else None,)

    return _record("col2im", (cols,), out, vjp)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation: per output channel i, Y_i = W_i * X + b_i."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ContractViolation(f"conv2d expects NCHW x and OIkk kernel, got {x.shape}, {kernel.shape}")
    n, ci, h, w = x.shape
    co, ci2, kh, kw = kernel.shape
    if ci != ci2:
        raise ContractViolation(f"channel mismatch: input {ci} vs kernel {ci2}")
    if kh != kw:
        raise ContractViolation("only square kernels are supported")
    if bias is not None and bias.shape != (co,):
        raise ContractViolation(f"bias must have shape ({co},), got {bias.shape}")
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kh, stride, padding)
    cols = im2col(x, kh, stride, padding)                       # (N, Ci*k*k, L)
    w2 = reshape(kernel, (co, ci * kh * kw))
    colsm = reshape(transpose(cols, (1, 0, 2)), (ci * kh * kw, n * ho * wo))
    out = matmul(w2, colsm)                                     # (Co, N*L)
    out = transpose(reshape(out, (co, n, ho, wo)), (1, 0, 2, 3))
    if bias is not None:
        out = out + reshape(bias, (1, co, 1, 1))
    return out


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on rows: x @ w + b."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractViolation(f"dense shapes do not compose: {x.shape} @ {w.shape}")
    out = matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ContractViolation(f"bias must have shape ({w.shape[1]},), got {b.shape}")
        out = out + b
    return out


def average_pool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping window averaging over the spatial axes."""
    if x.ndim != 4:
        raise ContractViolation(f"average_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ContractViolation(f"window {window} does not divide spatial extents {h}x{w}")
    r = reshape(x, (n, c, h // window, window, w // window, window))
    return reduce_mean(r, axis=(3, 5))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels."""
    if logits.ndim != 2:
        raise ContractViolation(f"logits must be (batch, classes), got {logits.shape}")
    y = np.asarray(labels)
    b, c = logits.shape
    if y.shape != (b,):
        raise ContractViolation(f"labels must have shape ({b},), got {y.shape}")
    if y.min() < 0 or y.max() >= c:
        raise ContractViolation("label outside [0, classes)")
    # the stability shift is a constant; it cancels exactly in value and gradient
    m = Tensor._wrap(logits.data.max(axis=1, keepdims=True))
    z = logits - m
    lse = log(reduce_sum(exp(z), axis=1, keepdims=True)) + m      # (B, 1)
    onehot = Tensor._wrap(np.eye(c, dtype=logits.dtype.type)[y])
    picked = reduce_sum(logits * onehot, axis=1, keepdims=True)   # (B, 1)
    return reduce_mean(lse - picked)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    pred, target = _pair(pred, target)
    if pred.shape != target.shape:
        raise ContractViolation(f"mse shapes differ: {pred.shape} vs {target.shape}")
    d = pred - target
    return reduce_mean(d * d)


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax matches the label."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(np.argmax(arr, axis=1) == np.asarray(labels)))


def sgd_step(params: Sequence[Tensor], grads: Sequence[Tensor], lr: float) -> list[Tensor]:
    """One gradient step p - lr*g per parameter, inputs unmutated."""
    if len(params) != len(grads):
        raise ContractViolation(f"{len(params)} params vs {len(grads)} grads")
    if lr == 0.0:
        return list(params)
    return [p - lr * g for p, g in zip(params, grads)]


# ---------------------------------------------------------------------------
# backward passes

class GradTape:
    """The replay order of every node below one scalar root.

    Built by a structural depth-first walk, so identical graphs replay in
    identical order; the backward pass visits each node exactly once.
    """

    def __init__(self, root: Tensor, *, stop_at_grad_outputs: bool = False,
                 require_differentiable_grads: bool = False):
        if root.shape != ():
            raise ContractViolation(f"loss must be a scalar (rank 0), got shape {root.shape}")
        self.root = root
        self.operations: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.operations.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.node is None:
                if require_differentiable_grads and t.grad_marker == "frozen":
                    raise GraphConfigError(
                        "graph contains a gradient recorded without create_graph; "
                        "rebuild the inner step with create_graph=True or pass first_order=True"
                    )
                continue
            if stop_at_grad_outputs and t.grad_marker == "differentiable":
                continue
            stack.append((t, True))
            for p in t.node.parents:
                stack.append((p, False))

    def gradient(self, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
        cot: dict[int, Tensor] = {
            id(self.root): Tensor._wrap(np.ones((), dtype=self.root.dtype))
        }
        ctx = no_grad() if not create_graph else _null()
        with ctx:
            for t in reversed(self.operations):
                g = cot.get(id(t))
                if g is None:
                    continue
                needs = tuple(_participates(p) for p in t.node.parents)
                contribs = t.node.vjp(g, needs)
                for p, cg in zip(t.node.parents, contribs):
                    if cg is None:
                        continue
                    prev = cot.get(id(p))
                    cot[id(p)] = cg if prev is None else prev + cg
        marker = "differentiable" if create_graph else "frozen"
        results = []
        for w in wrt:
            g = cot.get(id(w))
            if g is None:
                g = Tensor._wrap(np.zeros(w.shape, dtype=w.dtype))
            elif not create_graph:
                g = g.detach()
            g.grad_marker = marker
            results.append(g)
        return results


@contextmanager
def _null():
    yield


def grad(scalar_loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """dL/dw for each w; unreachable or detached parameters get zeros.

    With ``create_graph`` the returned gradients stay attached to the graph
    and can be differentiated again.
    """
    return GradTape(scalar_loss).gradient(list(wrt), create_graph=create_graph)


def grad2(scalar_meta_loss: Tensor, wrt: Sequence[Tensor], first_order: bool = False) -> list[Tensor]:
    """Gradient of a meta loss built through inner gradient steps.

    Exact second order by default; with ``first_order`` the backward pass
    treats recorded inner gradients as constants. Raises GraphConfigError if
    an exact pass is requested but the inner gradients were recorded without
    ``create_graph``.
    """
    tape = GradTape(
        scalar_meta_loss,
        stop_at_grad_outputs=first_order,
        require_differentiable_grads=not first_order,
    )
    return tape.gradient(list(wrt), create_graph=False)
