"""Dense NCHW tensors with reverse-mode differentiation.

Every forward kernel used by the detector lives here: convolutions, the three
activations, pooling/resampling, channel concatenation and elementwise sums.
Each op records an :class:`OpNode` on its output so that :func:`backward` can
walk the graph in reverse topological order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

LEAKY_ALPHA = 0.1


class ShapeError(ValueError):
    """Input tensors do not satisfy an op's shape contract."""


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


class GraphError(RuntimeError):
    """The computation graph is malformed (e.g. contains a cycle)."""


@dataclass(eq=False)
class OpNode:
    kind: str
    inputs: tuple["Tensor", ...]
    params: dict[str, Any] = field(default_factory=dict)
    # maps d(loss)/d(output) to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None


class Tensor:
    """A dense array that can take part in a differentiable graph.

    Feature maps are 4-D ``(N, C, H, W)``. Parameters (conv weights, biases)
    are stored in their natural shapes and flattened to four extents only when
    checkpointed.
    """

    __slots__ = ("data", "requires_grad", "op", "name", "_grad")

    def __init__(self, data, requires_grad: bool = False, op: OpNode | None = None,
                 name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.name = name
        self._grad = None

    @property
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        self._grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add([self, other])

    def __mul__(self, other):
        return mul(self, other)


def _make(data: np.ndarray, kind: str, inputs: Sequence[Tensor], backward, **params) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    op = OpNode(kind, tuple(inputs), params, backward) if needs else None
    return Tensor(data, requires_grad=needs, op=op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_4d(x: Tensor, what: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected a 4-D (N, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolutions


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, kh, kw) -> (N*Ho*Wo, C*kh*kw)
    n, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` with filters ``w`` of shape ``[Cout, Cin, kh, kw]``."""
    _check_4d(x, "conv2d input")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d weights must be [Cout, Cin, kh, kw], got {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has C={cin}, weights expect Cin={wcin}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wmat = w.data.reshape(cout, -1)
    if kh == 1 and kw == 1 and stride == 1:
        cols = None
        out = np.einsum("oc,nchw->nohw", wmat, xp, optimize=True)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if kh == 1 and kw == 1 and stride == 1:
            if w.requires_grad:
                gw = np.einsum("nohw,nchw->oc", g, xp, optimize=True).reshape(w.shape)
            if x.requires_grad:
                gx = np.einsum("oc,nohw->nchw", wmat, g, optimize=True)
            return gx, gw, gb
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if w.requires_grad:
            c = cols if cols is not None else _im2col(xp, kh, kw, stride, ho, wo)
            gw = (gmat.T @ c).reshape(w.shape)
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    inputs = [x, w] + ([b] if b is not None else [])
    return _make(out, "conv2d", inputs, _drop_bias(backward, b), stride=stride, pad=pad)


def _drop_bias(backward, b):
    if b is not None:
        return backward
    return lambda g: backward(g)[:2]


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """One ``kh x kw`` filter per channel; ``w`` has shape ``[C, 1, kh, kw]``."""
    _check_4d(x, "depthwise_conv2d input")
    n, c, h, wd = x.shape
    if w.data.ndim != 4 or w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d weights must be [{c}, 1, kh, kw], got {w.shape}")
    if b is not None and b.shape != (c,):
        raise ShapeError(f"depthwise_conv2d bias must have shape ({c},), got {b.shape}")
    kh, kw = w.shape[2:]
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"depthwise kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wk = w.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.data, w.data))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * wk[None, :, i, j, None, None]
    if b is not None:
        out += b.data.reshape(1, c, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.empty(w.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", patch, g)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * wk[None, :, i, j, None, None]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = [x, w] + ([b] if b is not None else [])
    return _make(out, "depthwise_conv2d", inputs, _drop_bias(backward, b), stride=stride, pad=pad)


# ---------------------------------------------------------------------------
# elementwise


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, "sigmoid", [x], lambda g: (g * s * (1.0 - s),))


def leaky_relu(x: Tensor, alpha: float = LEAKY_ALPHA) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return _make(x.data * slope, "leaky_relu", [x], lambda g: (g * slope,), alpha=alpha)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return _make(out, "silu", [x], lambda g: (g * (s + out * (1.0 - s)),))


def activation(x: Tensor, kind: str, alpha: float = LEAKY_ALPHA) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "silu":
        return silu(x)
    if kind in ("linear", "identity", None):
        return x
    raise ValueError(f"unknown activation {kind!r}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of identically shaped tensors."""
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("add needs at least one tensor")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ShapeError(f"add shape mismatch: {shape} vs {t.shape}")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out += t.data
    return _make(out, "add", xs, lambda g: tuple(g for _ in xs))


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting (used for channel gating)."""
    x, y = as_tensor(x), as_tensor(y)
    try:
        out = x.data * y.data
    except ValueError as exc:
        raise ShapeError(f"mul cannot broadcast {x.shape} with {y.shape}") from exc

    def backward(g):
        gx = _unbroadcast(g * y.data, x.shape) if x.requires_grad else None
        gy = _unbroadcast(g * x.data, y.shape) if y.requires_grad else None
        return gx, gy

    return _make(out, "mul", [x, y], backward)


def scale(x: Tensor, factor: float) -> Tensor:
    return _make(x.data * factor, "scale", [x], lambda g: (g * factor,), factor=factor)


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a ``1x1x1x1`` scalar tensor."""
    total = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return _make(total, "sum", [x], lambda g: (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype),))


def dot_all(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` for a constant weight array; handy for random projections."""
    weights = np.asarray(weights, dtype=x.dtype)
    total = np.asarray((x.data * weights).sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return _make(total, "dot", [x], lambda g: (g.reshape(()) * weights,))


# ---------------------------------------------------------------------------
# pooling / resampling / layout


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool input")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool needs H, W >= 1")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _make(out, "global_avg_pool", [x], lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x replication along H and W."""
    _check_4d(x, "upsample2x input")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, "upsample2x", [x], backward)


def downsample2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    _check_4d(x, "downsample2x input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2x needs even H and W, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, "downsample2x", [x], backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in xs:
        _check_4d(t, "concat_channels input")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels N/H/W mismatch: {xs[0].shape} vs {t.shape}")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _make(out, "concat_channels", xs, backward)


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        key = id(node)
        if processed:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        if node.op is not None:
            for parent in node.op.inputs:
                pmark = state.get(id(parent))
                if pmark == 1:
                    raise GraphError("cycle detected in computation graph")
                if pmark is None and parent.requires_grad:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf ``t``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite loss {loss.data.ravel()[0]}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            node.grad = node.grad + g
            continue
        parent_grads = node.op.backward(g)
        for parent, pg in zip(node.op.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def check_gradients(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-6,
                    indices: Sequence[tuple[int, ...]] | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the graph from scratch and returns the scalar loss; ``tensor``
    is a leaf that ``fn`` reads. ``indices`` restricts the comparison to a subset
    of elements (all elements by default).
    """
    if tensor.data.dtype != np.float64:
        raise TypeError("gradient checks require float64 tensors")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    tensor.zero_grad()
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericalError("non-finite loss in gradient check")
    backward(loss)
    analytic = tensor.grad.copy()

    if indices is None:
        indices = list(np.ndindex(*tensor.shape))
    worst = 0.0
    for idx in indices:
        orig = tensor.data[idx]
        tensor.data[idx] = orig + eps
        fp = float(fn().data.ravel()[0])
        tensor.data[idx] = orig - eps
        fm = float(fn().data.ravel()[0])
        tensor.data[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError("non-finite loss in gradient check")
        numeric = (fp - fm) / (2 * eps)
        a = float(analytic[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    tensor.zero_grad()
    return worst
