"""Dense float64 tensors with a reverse-mode tape.

Each op returns a new :class:`Tensor`. When any input requires a gradient the
output keeps references to its inputs and a closure mapping the output
gradient to input gradients; :func:`backward` sorts that implicit graph
topologically (see :class:`Graph`) and runs the closures in reverse.

All storage and accumulation is float64.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PAD_MODES = ("zero", "symmetric")

_grad_enabled = True


class ShapeError(ValueError):
    def __init__(self, op: str, shape_a, shape_b, detail: str = ""):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        msg = f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph and reverse pass


@dataclass
class Node:
    op: str | None
    inputs: tuple[Tensor, ...]
    output: Tensor


class Graph:
    """Topologically ordered nodes reachable from a root; inputs come first."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
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
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls([Node(t.op, t._parents, t) for t in order])

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, graph: Graph | None = None) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``root``.

    Gradients are added to any existing ``.grad``.
    """
    if root.data.size != 1:
        raise GradientError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GradientError("backward: root does not require grad")
    if graph is None:
        graph = Graph.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        t = node.output
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _make(data, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(data, (a, b), "mul", bw)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), "neg", lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), "scale", lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), "log", lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    data = x.data.sum(axis=axis, keepdims=keepdims)
    return _make(data, (x,), "sum", lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    data = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(data.size, 1)
    return _make(data, (x,), "mean", lambda g: (_expand_reduced(g, shape, axis, keepdims) / n,))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _make(data, (x,), "reshape", lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate on the way back."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape
    axis = axis % x.ndim

    def bw(g):
        gx = np.zeros(shape)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, idx.reshape(-1), np.moveaxis(g, list(range(axis, axis + idx.ndim)),
                                                    list(range(idx.ndim))).reshape((-1,) + gm.shape[1:]))
        return (gx,)

    return _make(np.take(x.data, idx, axis=axis), (x,), "take", bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, "inner dimensions differ")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), "matmul", bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), "softmax", lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _make(ls, (x,), "log_softmax",
                 lambda g: (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return neg(mean(sum_(mul(log_softmax(logits), Tensor(onehot)), axis=1)))


# ---------------------------------------------------------------------------
# spatial ops; images are N x C x H x W (a single C x H x W image is accepted)


def pad2d(x: Tensor, pad: int, mode: str = "zero") -> Tensor:
    """Pad the last two axes by ``pad`` on every side.

    ``symmetric`` mirrors the image including its border pixel, so the pad
    width must be smaller than each spatial dimension.
    """
    if mode not in PAD_MODES:
        raise ValueError(f"pad2d: unknown padding mode {mode!r}; expected one of {PAD_MODES}")
    if pad < 0:
        raise ValueError(f"pad2d: negative pad {pad}")
    if pad == 0:
        return x
    H, W = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    if mode == "zero":
        data = np.pad(x.data, widths)

        def bw(g):
            return (g[..., pad:pad + H, pad:pad + W].copy(),)
    else:
        if pad >= H or pad >= W:
            raise ShapeError("pad2d", x.shape, (pad, pad), "symmetric pad must be < spatial dims")
        data = np.pad(x.data, widths, mode="symmetric")

        def fold(g, axis, n):
            g = np.moveaxis(g, axis, 0)
            out = g[pad:pad + n].copy()
            out[:pad] += g[:pad][::-1]
            out[n - pad:] += g[pad + n:][::-1]
            return np.moveaxis(out, 0, axis)

        def bw(g):
            return (fold(fold(g, -2, H), -1, W),)

    return _make(data, (x,), "pad2d", bw)


def _conv2d_valid(x: Tensor, w: Tensor, stride: int) -> Tensor:
    # im2col in channels-last order: columns are (kh, kw, C) so every window
    # copy and gradient scatter moves contiguous runs of C values
    xd, wd = x.data, w.data
    N, C, H, W = xd.shape
    O, _, kh, kw = wd.shape
    Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d", xd.shape, wd.shape, "kernel larger than input")
    xl = np.ascontiguousarray(xd.transpose(0, 2, 3, 1))
    cols = np.empty((N, Ho, Wo, kh, kw, C))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xl[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    cols = cols.reshape(N * Ho * Wo, kh * kw * C)
    wm = wd.transpose(0, 2, 3, 1).reshape(O, -1)
    out = (cols @ wm.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    need_x = x.requires_grad

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gw = (gm.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        if not need_x:
            return None, gw
        gcols = (gm @ wm).reshape(N, Ho, Wo, kh, kw, C)
        gx = np.zeros((N, H, W, C))
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
        return gx.transpose(0, 3, 1, 2), gw

    return _make(out, (x, w), "conv2d", bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zero") -> Tensor:
    if pad_mode not in PAD_MODES:
        raise ValueError(f"conv2d: unknown padding mode {pad_mode!r}; expected one of {PAD_MODES}")
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape, "expected C_in x H x W input and C_out x C_in x kh x kw kernel")
    x = pad2d(x, padding, pad_mode)
    out = _conv2d_valid(x, weight, stride)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError("conv2d", bias.shape, weight.shape, "bias must have C_out entries")
        out = add(out, reshape(bias, (1, -1, 1, 1)))
    if single:
        out = reshape(out, out.shape[1:])
    return out


def _pool(x: Tensor, k: int, kind: str) -> Tensor:
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(kind, x.shape, (k, k), "expected 3D or 4D image tensor")
    N, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    if Ho < 1 or Wo < 1:
        raise ShapeError(kind, x.shape, (k, k), "window larger than input")
    xd = x.data[:, :, :Ho * k, :Wo * k]
    blocks = xd.reshape(N, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, k * k)
    if kind == "avgpool2d":
        data = blocks.mean(axis=-1)

        def bw(g):
            gx = np.zeros((N, C, H, W))
            gx[:, :, :Ho * k, :Wo * k] = np.repeat(np.repeat(g / (k * k), k, axis=2), k, axis=3)
            return (gx,)
    else:
        arg = blocks.argmax(axis=-1)
        data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

        def bw(g):
            gb = np.zeros((N, C, Ho, Wo, k * k))
            np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
            gx = np.zeros((N, C, H, W))
            gx[:, :, :Ho * k, :Wo * k] = gb.reshape(N, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5) \
                .reshape(N, C, Ho * k, Wo * k)
            return (gx,)

    out = _make(data, (x,), kind, bw)
    if single:
        out = reshape(out, out.shape[1:])
    return out


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pool (stride k); trailing rows/cols dropped."""
    return _pool(x, k, "avgpool2d")


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pool; ties route the gradient to the first max."""
    return _pool(x, k, "maxpool2d")


def normalization(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
                  per_channel: bool = False) -> Tensor:
    """Per-example normalization, then per-channel affine.

    ``x`` is N x C x ... ; ``gamma`` and ``beta`` have shape (C,). Statistics
    are taken over all non-batch axes, or over the spatial axes of each
    channel separately when ``per_channel`` is set.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("normalization", x.shape, gamma.shape, "scale/shift must have one entry per channel")
    axes = tuple(range(2 if per_channel else 1, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gamma, beta), "normalization", bw)


# ---------------------------------------------------------------------------
# dispatch by op name

OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "avgpool2d": avgpool2d,
    "maxpool2d": maxpool2d,
    "relu": relu,
    "add": add,
    "mul": mul,
    "scale": scale,
    "reshape": reshape,
    "transpose": transpose,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log": log,
    "exp": exp,
    "sum": sum_,
    "mean": mean,
    "take": take,
    "pad2d": pad2d,
    "normalization": normalization,
}


def forward_op(kind: str, inputs: Iterable[Tensor], **attrs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: Sequence[Tensor], learning_rate: float, momentum: float = 0.0,
             nesterov: bool = False, weight_decay: float = 0.0,
             buffers: dict[int, np.ndarray] | None = None) -> None:
    """One SGD update, in place.

    With momentum ``mu`` the buffer follows ``v <- mu * v + g`` (``v = g`` on
    first use) and the update is ``v`` or, with Nesterov, ``g + mu * v``.
    ``buffers`` persists the per-parameter velocity across calls. Gradients
    are zeroed afterwards.
    """
    if momentum and buffers is None:
        raise ValueError("sgd_step: momentum requires a buffers dict")
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradientError(f"sgd_step: parameter {i} with shape {p.shape} has no gradient")
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            key = id(p)
            buf = buffers.get(key)
            buf = g.copy() if buf is None else momentum * buf + g
            buffers[key] = buf
            g = g + momentum * buf if nesterov else buf
        p.data -= learning_rate * g
        p.grad = np.zeros_like(p.data)


class SGD:
    def __init__(self, momentum: float = 0.9, nesterov: bool = True, weight_decay: float = 0.0):
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.buffers: dict[int, np.ndarray] = {}

    def step(self, params: Sequence[Tensor], learning_rate: float) -> None:
        sgd_step(params, learning_rate, self.momentum, self.nesterov, self.weight_decay, self.buffers)
