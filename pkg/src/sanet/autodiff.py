"""Dense tensors with a define-by-run reverse-mode tape.

Every op is a plain function taking and returning :class:`Tensor`.  When a
:class:`Tape` is active and any input requires a gradient, the op records a
vector-Jacobian closure on the tape.  :func:`backward` then walks the tape in
reverse recording order.

Storage is float32.  Wrap code in :func:`float64_mode` to build tensors (and
models) in float64, which is only meant for finite-difference checks.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_dtype_stack: list[type] = [np.float32]
_tape_stack: list["Tape"] = []
_branch_log: list[list[np.ndarray]] = []

GROUPS = ("trunk", "stn", "head")


def default_dtype():
    return _dtype_stack[-1]


@contextlib.contextmanager
def float64_mode():
    """Create tensors in float64 inside this block (gradient checking only)."""
    _dtype_stack.append(np.float64)
    try:
        yield
    finally:
        _dtype_stack.pop()


@contextlib.contextmanager
def record_branches():
    """Collect the discrete choices (ReLU masks, argmax picks, sample cells) made inside the block.

    Two evaluations that log equal choices lie on the same smooth piece of
    the function, which is what a finite-difference check needs.
    """
    log: list[np.ndarray] = []
    _branch_log.append(log)
    try:
        yield log
    finally:
        _branch_log.pop()


def note_branch(choice: np.ndarray) -> None:
    if _branch_log:
        _branch_log[-1].append(np.array(choice, copy=True))


class Tensor:
    """An n-dimensional real array that may take part in a tape."""

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=default_dtype())
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node_id = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Ordered record of the ops executed while the tape is active."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs, output, vjp, name):
        output.node_id = len(self.nodes)
        self.nodes.append(Node(tuple(inputs), output, vjp, name))

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. each tensor in ``wrt``.

        Tensors with no path to ``loss`` get zeros.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        keep = {id(t) for t in wrt}
        for node in reversed(self.nodes):
            key = id(node.output)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


@dataclass
class Parameter:
    """A named trainable tensor with an optimizer group tag."""

    name: str
    value: Tensor
    group: str

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"parameter {self.name!r} has unknown group {self.group!r}")
        self.value.requires_grad = True

    @property
    def shape(self):
        return self.value.shape


def backward(tape: Tape, loss: Tensor, params: Iterable[Parameter]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``loss`` keyed by parameter name."""
    params = list(params)
    grads = tape.gradient(loss, [p.value for p in params])
    return {p.name: g for p, g in zip(params, grads)}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(out_data: np.ndarray, inputs: Sequence[Tensor], vjp, name: str) -> Tensor:
    out = Tensor._wrap(out_data)
    if _tape_stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape_stack[-1].record(inputs, out, vjp, name)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _op(a.data + b.data, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _op(a.data - b.data, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _op(a.data * b.data, (a, b),
               lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
               "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    return _op(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def sqrt_floor(x: Tensor, floor: float = 1e-12) -> Tensor:
    """``sqrt(max(x, floor))``; zero gradient where the floor is active."""
    live = x.data > floor
    note_branch(live)
    y = np.sqrt(np.maximum(x.data, floor))
    return _op(y, (x,), lambda g: (np.where(live, g / (2 * y), 0),), "sqrt_floor")


# ----------------------------------------------------------------- reductions

def tsum(x: Tensor) -> Tensor:
    return _op(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _op(x.data.mean(), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return _op(x.data.mean(axis=(2, 3)), (x,),
               lambda g: (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),),
               "global_avg_pool")


# ------------------------------------------------------------------ structure

def reshape(x: Tensor, shape) -> Tensor:
    return _op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along ``axis`` (the last axis by default)."""
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return np.split(g, bounds, axis=axis)

    return _op(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def concat_last_axis(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


_SPATIAL_AXES = {"height": 2, "width": 3}


def slice_spatial(x: Tensor, axis: str, index: int, parts: int = 2) -> Tensor:
    """Strip ``index`` of ``parts`` equal strips of a [N,C,H,W] map.

    ``axis="height"`` cuts horizontally (top first), ``axis="width"`` cuts
    vertically (left first).
    """
    if axis not in _SPATIAL_AXES:
        raise ValueError(f"axis must be 'height' or 'width', got {axis!r}")
    ax = _SPATIAL_AXES[axis]
    extent = x.shape[ax]
    if extent % parts:
        raise ValueError(f"cannot split extent {extent} along {axis} into {parts} equal strips")
    if not 0 <= index < parts:
        raise ValueError(f"strip index {index} out of range for {parts} strips")
    step = extent // parts
    sl = [slice(None)] * 4
    sl[ax] = slice(index * step, (index + 1) * step)
    sl = tuple(sl)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _op(x.data[sl].copy(), (x,), vjp, "slice_spatial")


def split_spatial(x: Tensor, axis: str, parts: int = 2) -> list[Tensor]:
    return [slice_spatial(x, axis, i, parts) for i in range(parts)]


def take2d(x: Tensor, rows, cols) -> Tensor:
    """Gather ``x[rows[i], cols[i]]`` into a vector."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _op(x.data[rows, cols], (x,), vjp, "take2d")


# --------------------------------------------------------------- linear maps

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape [out, in]."""
    if x.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def vjp(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _op(out, (x, weight, bias), vjp, "linear")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded extent {size + 2 * pad}")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of [N,C,H,W] with [F,C,kh,kw].

    Output extents follow the usual floor rule; trailing input rows/columns
    that do not start a full window are skipped.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(f, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (g2.T @ cols).reshape(kernel.shape)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, dk, db

    return _op(np.ascontiguousarray(out), (x, kernel, bias), vjp, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Per-channel batch normalization over all axes but 1 (training statistics).

    Returns ``(y, batch_mean, batch_var)``; the statistics are plain arrays
    for updating running estimates.
    """
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    count = x.data.size // x.shape[1]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    y = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gamma.data.reshape(shape)
        dx = (inv.reshape(shape) / count) * (
            count * gx - gx.sum(axis=axes).reshape(shape) - xhat * (gx * xhat).sum(axis=axes).reshape(shape)
        )
        return dx, dgamma, dbeta

    return _op(y.astype(x.data.dtype), (x, gamma, beta), vjp, "batch_norm"), mu, var


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """``x * scale + shift`` broadcast along axis 1."""
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    s = scale.data.reshape(shape)

    def vjp(g):
        return g * s, (g * x.data).sum(axis=axes), g.sum(axis=axes)

    return _op(x.data * s + shift.data.reshape(shape), (x, scale, shift), vjp, "channel_affine")


# ----------------------------------------------------------------- objectives

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    rows = np.arange(n)

    def vjp(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _op(np.asarray(nll.mean(), dtype=logits.data.dtype), (logits,), vjp, "softmax_cross_entropy")


def pairwise_sq_dist(x: Tensor) -> Tensor:
    """[N,d] -> [N,N] squared Euclidean distances (exact zeros on the diagonal)."""
    diff = x.data[:, None, :] - x.data[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(g):
        s = g + g.T
        return (2 * (s.sum(axis=1, keepdims=True) * x.data - s @ x.data),)

    return _op(d2, (x,), vjp, "pairwise_sq_dist")
