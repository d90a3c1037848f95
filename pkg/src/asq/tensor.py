"""Dense float64 tensor with reverse-mode autodiff.

Only the operations the quantized CNNs need are provided. Gradients of
leaf tensors accumulate into ``Tensor.grad``; intermediate gradients live
only for the duration of a ``backward`` call.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class GradNode:
    """Records how a tensor was produced.

    ``backward_fn`` maps the upstream gradient to one gradient per input
    (``None`` allowed for inputs that do not need one).
    """

    __slots__ = ("inputs", "backward_fn", "name")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable, name: str = ""):
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(
            data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._node: GradNode | None = None

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                if t.requires_grad:
                    t.grad = t.grad + g if t.grad is not None else g.copy()
                continue
            in_grads = t._node.backward_fn(g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            if len(in_grads) != len(t._node.inputs):
                raise RuntimeError(f"{t._node.name}: backward returned {len(in_grads)} grads "
                                   f"for {len(t._node.inputs)} inputs")
            for inp, ig in zip(t._node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{t._node.name}: gradient shape {ig.shape} "
                                     f"does not match input shape {inp.shape}")
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return total(self)

    def mean(self) -> "Tensor":
        return scale(total(self), 1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in reversed(t._node.inputs):
                if id(inp) not in seen:
                    stack.append((inp, False))
    return order


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable,
              name: str = "custom") -> Tensor:
    """Wrap ``data`` as the output of an op with a hand-written backward.

    This is how quantizers install straight-through gradients.
    """
    out = Tensor(np.asarray(data, dtype=np.float64))
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = GradNode(inputs, backward_fn, name)
    return out


def check_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return custom_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return custom_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def total(a: Tensor) -> Tensor:
    return custom_op(np.array(a.data.sum()), (a,),
                     lambda g: (np.full(a.shape, float(g)),), "sum")


def square(a: Tensor) -> Tensor:
    return custom_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,), "exp")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return custom_op(a.data.T, (a,), lambda g: (g.T,), "transpose")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return custom_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def maximum_scalar(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    return custom_op(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "max")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b`` (shape ``(C,)``) along axis 1 of ``x``."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match channels of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return custom_op(x.data + b.data.reshape(view), (x, b),
                     lambda g: (g, g.sum(axis=axes)), "bias_add")


def scale_rows(x: Tensor, r: Tensor) -> Tensor:
    """Multiply sample ``i`` of ``x`` by ``r[i]``."""
    if r.ndim != 1 or r.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: {r.shape} vs batch of {x.shape}")
    view = (-1,) + (1,) * (x.ndim - 1)
    rv = r.data.reshape(view)
    axes = tuple(range(1, x.ndim))

    def backward(g):
        return g * rv, (g * x.data).sum(axis=axes) if axes else g * x.data

    return custom_op(x.data * rv, (x, r), backward, "scale_rows")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return custom_op(a.data @ b.data, (a, b),
                     lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Return windows of shape ``(N, Ho, Wo, C, kh, kw)`` (a strided view when possible)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, Hp-kh+1, Wp-kw+1, kh, kw
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: nonpositive output extent {ho}x{wo}")
    cols = im2col(x, kh, kw, stride, padding).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ w.reshape(cout, -1).T
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,Cin,H,W) with ``w`` (Cout,Cin,Kh,Kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    out = conv2d_forward(x.data, w.data, stride, padding)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = out.shape[2], out.shape[3]

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        dw = None
        if w.requires_grad:
            cols = im2col(x.data, kh, kw, stride, padding).reshape(n * ho * wo, cin * kh * kw)
            dw = (g2 @ cols).reshape(w.shape)
        dx = None
        if x.requires_grad:
            # (Cin, kh, kw, N, Ho, Wo): every kernel tap is a contiguous block
            dcols = (w.data.reshape(cout, -1).T @ g2).reshape(cin, kh, kw, n, ho, wo)
            dxp = np.zeros((cin, n, h + 2 * padding, wd + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            dx = np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))
        return dx, dw

    return custom_op(out, (x, w), backward, "conv2d")


# ---------------------------------------------------------------------------
# normalization, pooling, losses
# ---------------------------------------------------------------------------

def batchnorm_inference(x: Tensor, mean: np.ndarray, var: np.ndarray, gamma: Tensor,
                        shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Affine batch norm using fixed running statistics."""
    view = (1, -1, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(view)) * inv.reshape(view)
    out = xhat * gamma.data.reshape(view) + shift.data.reshape(view)

    def backward(g):
        return (g * (gamma.data * inv).reshape(view),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)))

    return custom_op(out, (x, gamma, shift), backward, "batchnorm_inference")


def batchnorm_train(x: Tensor, gamma: Tensor, shift: Tensor, eps: float = 1e-5):
    """Batch-statistics batch norm. Returns ``(out, batch_mean, batch_var)``."""
    view = (1, -1, 1, 1)
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(view)) * inv.reshape(view)
    out = xhat * gamma.data.reshape(view) + shift.data.reshape(view)

    def backward(g):
        dxhat = g * gamma.data.reshape(view)
        dx = (inv.reshape(view) / m) * (
            m * dxhat - dxhat.sum(axis=axes).reshape(view)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(view))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return custom_op(out, (x, gamma, shift), backward, "batchnorm_train"), mu, var


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return custom_op(x.data.mean(axis=(2, 3)), (x,),
                     lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
                     "global_avg_pool")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for {n} samples")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"cross_entropy: label out of range [0, {c})")
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return custom_op(np.array(loss), (logits,), backward, "cross_entropy")


def mse(a: Tensor, target: np.ndarray) -> Tensor:
    diff = a.data - target
    return custom_op(np.array((diff * diff).mean()), (a,),
                     lambda g: (2.0 * diff * float(g) / diff.size,), "mse")
