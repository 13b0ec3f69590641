"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` while one is active::

    with Tape() as tape:
        loss = bce_with_logits(linear(x, w, b), y)
    loss.backward()

Outside a tape every op is a plain numpy computation. Tapes live in a
context variable, so each thread records independently.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "armrefine_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    """Dense row-major array that can participate in gradient recording."""

    __slots__ = ("_data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"dimensions must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t._data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._tape = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    def assign(self, values: np.ndarray) -> None:
        """Replace the values in place; the shape must stay the same."""
        values = np.asarray(values)
        if values.shape != self._data.shape:
            raise ShapeError(f"cannot assign {values.shape} into tensor of shape {self.shape}")
        arr = np.array(values, dtype=values.dtype if values.dtype.kind == "f" else np.float64)
        arr.flags.writeable = False
        self._data = arr

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise RuntimeError("tensor was not produced under an active tape")
        self._tape.backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, scalar: float) -> "Tensor":
        return mul_scalar(self, scalar)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so inputs always precede the ops that
    consume them; :meth:`backward` walks the record in exact reverse order.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        out._tape = self
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            _deposit(node.out, g)
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    touched[key] = inp
        # whatever remains belongs to leaves
        for key, g in grads.items():
            _deposit(touched[key], g)


def _deposit(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def current_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result and record it when a tape is active.

    ``backward`` maps the output gradient to a tuple with one entry (or None)
    per input.
    """
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(data), requires_grad=needs)
    if needs:
        tape.record(out, tuple(inputs), backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return make_op(A @ B, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return make_op(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(axis, x.data.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    axis = _axis(axis, x.data.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    clipped = norm < eps

    def backward(g):
        radial = y * (g * y).sum(axis=axis, keepdims=True)
        return (np.where(clipped, g, g - radial) / denom,)

    return make_op(y, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if (
        x.data.ndim != 2
        or w.data.ndim != 2
        or b.data.ndim != 1
        or x.shape[1] != w.shape[0]
        or w.shape[1] != b.shape[0]
    ):
        raise ShapeError(f"linear shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    X, W = x.data, w.data

    def backward(g):
        return g @ W.T, X.T @ g, g.sum(axis=0)

    return make_op(X @ W + b.data, (x, w, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul_scalar(x: Tensor, scalar: float) -> Tensor:
    s = float(scalar)
    return make_op(x.data * s, (x,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def elementwise(kind: str, *args):
    """Dispatch to one of the pointwise ops by name."""
    table = {"add": add, "mul_scalar": mul_scalar, "relu": relu, "sigmoid": sigmoid}
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](*args)


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    axis = _axis(axis, a.data.ndim)
    sa, sb = list(a.shape), list(b.shape)
    sa.pop(axis)
    sb.pop(axis)
    if sa != sb:
        raise ShapeError(f"concat shapes incompatible along axis {axis}: {a.shape} vs {b.shape}")
    cut = a.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [cut], axis=axis)
        return ga, gb

    return make_op(np.concatenate([a.data, b.data], axis=axis), (a, b), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"bad column slice [{start}:{stop}] of {x.shape}")
    ncol = x.shape[1]

    def backward(g):
        full = np.zeros(g.shape[:1] + (ncol,), dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_op(x.data[:, start:stop], (x,), backward)


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(x.data.sum().reshape(()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Non-overlapping transposed convolution (kernel size equals stride).

    Each input pixel scatters ``value * kernel`` into its own stride x stride
    output tile; contributions are summed over input channels.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError(f"transposed_conv2d ranks: x{x.shape} k{kernel.shape} b{bias.shape}")
    c_in, h, w = x.shape
    kc_in, c_out, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    k = kh
    if k != stride:
        raise ValueError(f"only kernel size == stride is supported (k={k}, stride={stride})")
    if kc_in != c_in or bias.shape[0] != c_out:
        raise ShapeError(f"transposed_conv2d channel mismatch: x{x.shape} k{kernel.shape} b{bias.shape}")
    X = x.data.reshape(c_in, h * w)
    K = kernel.data.reshape(c_in, c_out * k * k)
    # channel-ordered accumulation of rounded products (no BLAS reordering/FMA),
    # so the result matches a plain scatter loop bit for bit
    tiles = np.zeros((h * w, c_out * k * k), dtype=np.result_type(X, K))
    for c in range(c_in):
        tiles += np.multiply.outer(X[c], K[c])
    out = tiles.reshape(h, w, c_out, k, k).transpose(2, 0, 3, 1, 4).reshape(c_out, h * k, w * k)
    out = out + bias.data[:, None, None]

    def backward(g):
        gt = g.reshape(c_out, h, k, w, k).transpose(1, 3, 0, 2, 4).reshape(h * w, c_out * k * k)
        gx = (K @ gt.T).reshape(c_in, h, w)
        gk = (X @ gt).reshape(c_in, c_out, k, k)
        return gx, gk, g.sum(axis=(1, 2))

    return make_op(out, (x, kernel, bias), backward)


def bilinear_resample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply separable interpolation matrices to every channel of a C x h x w map."""
    if x.data.ndim != 3 or rows.shape[1] != x.shape[1] or cols.shape[1] != x.shape[2]:
        raise ShapeError(f"resample mismatch: x{x.shape} rows{rows.shape} cols{cols.shape}")
    rows = rows.astype(x.dtype)
    cols = cols.astype(x.dtype)

    def backward(g):
        return (rows.T @ g @ cols,)

    return make_op(rows @ x.data @ cols.T, (x,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits, stable for large magnitudes."""
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce shape mismatch: logits {logits.shape} vs targets {y.shape}")
    if np.any(y < 0) or np.any(y > 1):
        raise ValueError("bce targets must lie in [0, 1]")
    x = logits.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    count = x.size

    def backward(g):
        return ((_sigmoid(x) - y) * (g / count),)

    return make_op(np.asarray(per.mean(), dtype=x.dtype).reshape(()), (logits,), backward)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare tape gradients against central differences.

    ``f`` takes no arguments and must read ``params`` afresh on every call.
    Parameters are promoted to float64 for the duration of the check and
    restored afterwards. Returns the max over coordinates of
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    originals = [p.data for p in params]
    flags = [p.requires_grad for p in params]
    try:
        for p in params:
            p.assign(p.data.astype(np.float64))
            p.requires_grad = True
            p.grad = None
        with Tape():
            loss = f()
        loss.backward()
        analytic = [
            p.grad.copy() if p.grad is not None else np.zeros(p.shape) for p in params
        ]
        worst = 0.0
        for p, ga in zip(params, analytic):
            base = p.data.copy()
            flat = base.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                p.assign(base)
                up = float(f().data.reshape(-1)[0])
                flat[i] = keep - eps
                p.assign(base)
                down = float(f().data.reshape(-1)[0])
                flat[i] = keep
                p.assign(base)
                n = (up - down) / (2 * eps)
                a = float(ga.reshape(-1)[i])
                worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-8))
        return worst
    finally:
        for p, orig, flag in zip(params, originals, flags):
            p.assign(orig)
            p.requires_grad = flag
            p.grad = None
