"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves onto the tape that is active in the current
context (``with Tape() as tape:``). Outside any tape nothing is recorded,
which is how inference passes avoid the bookkeeping cost.
"""
from __future__ import annotations

import contextvars
import functools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "record",
    "backward",
    "seed_gradient_at",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "upsample_bilinear",
    "resize_bilinear",
    "batch_norm2d",
    "relu",
    "dropout",
    "add",
    "concat_channels",
    "sigmoid",
    "softmax_channels",
    "total",
    "scale",
    "sum_squares",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending axis."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: {axis} mismatch (expected {expected}, got {got})")


class Tensor:
    """A float64 array plus an optional gradient buffer and tape node id."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "size", 1, self.data.size)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("ddnkit_tape", default=None)


class Tape:
    """Ordered record of differentiable operations.

    Creation order is a valid topological order because a node can only
    consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._tokens.pop())
        return False

    def __len__(self):
        return len(self.nodes)


def record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn) -> Tensor:
    """Wrap ``out`` in a Tensor and register ``grad_fn`` on the active tape.

    ``grad_fn`` maps the upstream gradient to one gradient (or None) per input.
    """
    result = Tensor(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node_id = len(tape.nodes)
        tape.nodes.append(Node(kind, tuple(inputs), result, grad_fn))
    return result


def backward(tape: Tape, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` on every tensor reachable from ``root``.

    Without ``seed`` the root must be a single-element tensor and is seeded
    with 1. Only leaves (tensors not produced on this tape, i.e. parameters
    and inputs) receive a ``.grad``; reachable leaves are overwritten and
    unreachable ones keep whatever they held.
    """
    if seed is None:
        if root.data.size != 1:
            raise ValueError(
                f"backward from a non-scalar tensor of shape {root.shape} needs an explicit seed"
            )
        seed = np.ones_like(root.data)
    elif seed.shape != root.shape:
        raise ShapeError("backward", "seed shape", root.shape, seed.shape)
    if root.node_id is None or root.node_id >= len(tape.nodes) or tape.nodes[root.node_id].output is not root:
        raise ValueError("root tensor is not on this tape")

    pending: dict[int, list] = {id(root): [root, np.array(seed, dtype=np.float64)]}
    for node in reversed(tape.nodes[: root.node_id + 1]):
        entry = pending.pop(id(node.output), None)
        if entry is None:
            continue
        for t, gi in zip(node.inputs, node.backward(entry[1])):
            if gi is None or not t.requires_grad:
                continue
            slot = pending.get(id(t))
            if slot is None:
                pending[id(t)] = [t, gi]
            else:
                slot[1] = slot[1] + gi
    # whatever remains are leaves (parameters and inputs)
    for t, g in pending.values():
        t.grad = g


def seed_gradient_at(tape: Tape, tensor: Tensor, channel: int, i: int, j: int) -> None:
    """Backpropagate a one-hot upstream gradient at ``tensor[0, channel, i, j]``."""
    _, c, h, w = tensor.shape
    if not (0 <= channel < c and 0 <= i < h and 0 <= j < w):
        raise IndexError(f"seed position {(channel, i, j)} outside tensor of shape {tensor.shape}")
    seed = np.zeros_like(tensor.data)
    seed[0, channel, i, j] = 1.0
    backward(tape, tensor, seed)


def _need4(op: str, x: Tensor):
    if x.data.ndim != 4:
        raise ShapeError(op, "rank", 4, x.data.ndim)


# ---------------------------------------------------------------- convolution


# im2col buffers above this many bytes fall back to one matmul per kernel tap
_IM2COL_LIMIT = 256 * 2**20


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int, dy: int, dx: int) -> np.ndarray:
    return xp[:, :, dy : dy + stride * (ho - 1) + 1 : stride, dx : dx + stride * (wo - 1) + 1 : stride]


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(C*k*k, N*ho*wo) patch matrix of a padded NCHW array."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def _use_im2col(xp: np.ndarray, k: int, ho: int, wo: int) -> bool:
    return xp.shape[0] * xp.shape[1] * k * k * ho * wo * 8 <= _IM2COL_LIMIT


def _correlate(xp: np.ndarray, wd: np.ndarray, stride: int, ho: int, wo: int, cols: Optional[list] = None) -> np.ndarray:
    """Valid cross-correlation of padded input ``xp`` with ``wd``; returns NCHW.

    When ``cols`` is a list the patch matrix (if one was built) is appended to
    it so the kernel gradient can reuse it.
    """
    n = xp.shape[0]
    cout, cin, k, _ = wd.shape
    if _use_im2col(xp, k, ho, wo):
        patches = _im2col(xp, k, stride, ho, wo)
        if cols is not None:
            cols.append(patches)
        out = wd.reshape(cout, -1) @ patches
    else:
        # per-tap (Cout, Cin) matrices must be contiguous to hit BLAS
        wt = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))
        xt = xp.transpose(1, 0, 2, 3)
        out = np.zeros((cout, n * ho * wo))
        for dy in range(k):
            for dx in range(k):
                out += wt[dy, dx] @ _windows(xt, k, stride, ho, wo, dy, dx).reshape(cin, -1)
    return np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))


def _kernel_grad(xp: np.ndarray, g2: np.ndarray, k: int, stride: int, ho: int, wo: int, cols: Optional[list] = None) -> np.ndarray:
    cout = g2.shape[0]
    n, cin = xp.shape[:2]
    if cols:
        return (g2 @ cols[0].T).reshape(cout, cin, k, k)
    if _use_im2col(xp, k, ho, wo):
        return (g2 @ _im2col(xp, k, stride, ho, wo).T).reshape(cout, cin, k, k)
    xt = xp.transpose(1, 0, 2, 3)
    gw = np.empty((k, k, cout, cin))
    for dy in range(k):
        for dx in range(k):
            gw[dy, dx] = g2 @ _windows(xt, k, stride, ho, wo, dy, dx).reshape(cin, -1).T
    return np.ascontiguousarray(gw.transpose(2, 3, 0, 1))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with a (Cout, Cin, k, k) kernel."""
    _need4("conv2d", x)
    n, c, h, w = x.shape
    if weight.data.ndim != 4:
        raise ShapeError("conv2d", "weight rank", 4, weight.data.ndim)
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError("conv2d", "channels", cin, c)
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d", "kernel size", "odd square", (kh, kw))
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d", "bias length", (cout,), bias.shape)
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", "spatial size", f">= {k - 2 * padding}", (h, w))

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weight.data
    keep = [] if weight.requires_grad and _ACTIVE_TAPE.get() is not None else None
    out = _correlate(xp, wd, stride, ho, wo, keep)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            back_pad = k - 1 - padding
            if stride == 1 and back_pad >= 0:
                # input gradient = full correlation with the flipped, transposed kernel
                gp = np.pad(g, ((0, 0), (0, 0), (back_pad, back_pad), (back_pad, back_pad)))
                wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = _correlate(gp, wflip, 1, h, w)
            else:
                g2t = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
                wtt = np.ascontiguousarray(wd.transpose(2, 3, 1, 0))
                gxp = np.zeros((cin, n) + xp.shape[2:])
                for dy in range(k):
                    for dx in range(k):
                        _windows(gxp, k, stride, ho, wo, dy, dx)[...] += (wtt[dy, dx] @ g2t).reshape(cin, n, ho, wo)
                gxp = gxp.transpose(1, 0, 2, 3)
                gx = gxp[:, :, padding : padding + h, padding : padding + w]
        if weight.requires_grad:
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
            gw = _kernel_grad(xp, g2, k, stride, ho, wo, keep)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, out, grad_fn)


# -------------------------------------------------------------------- pooling


def _check_even(op: str, x: Tensor):
    _need4(op, x)
    _, _, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(op, "spatial size", "even height and width (pad the input)", (h, w))


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """2x2/2 max pooling; ties send the gradient to the first element in scan order."""
    if k != 2 or stride != 2:
        raise ValueError("only k=2, stride=2 pooling is supported")
    _check_even("max_pool2d", x)
    n, c, h, w = x.shape
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record("max_pool2d", (x,), out, grad_fn)


def avg_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    if k != 2 or stride != 2:
        raise ValueError("only k=2, stride=2 pooling is supported")
    _check_even("avg_pool2d", x)
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return record("avg_pool2d", (x,), out, grad_fn)


# --------------------------------------------------------------- resampling


@functools.lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows of 1-D linear interpolation weights, half-pixel (align_corners=False)."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resize to ``(height, width)``; the backward pass is the exact adjoint."""
    _need4("resize_bilinear", x)
    _, _, h, w = x.shape
    if (h, w) == (height, width):
        return x
    mh = _interp_matrix(h, height)
    mw = _interp_matrix(w, width)
    out = mh @ x.data @ mw.T

    def grad_fn(g):
        return (mh.T @ g @ mw,)

    return record("resize_bilinear", (x,), out, grad_fn)


def upsample_bilinear(x: Tensor, scale: int = 2) -> Tensor:
    _need4("upsample_bilinear", x)
    _, _, h, w = x.shape
    return resize_bilinear(x, h * scale, w * scale)


# ------------------------------------------------------------ normalization


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode ``running_mean``/``running_var`` are updated in place
    (unbiased variance, like the usual frameworks).
    """
    _need4("batch_norm2d", x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm2d", "channels", (c,), (gamma.shape, beta.shape))
    count = n * h * w
    if training:
        if count < 2:
            raise ValueError("batch_norm2d in training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    gd = gamma.data.copy()

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (inv[None, :, None, None] / count) * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record("batch_norm2d", (x, gamma, beta), out, grad_fn)


# ------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", "shape", a.shape, b.shape)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    n, _, h, w = tensors[0].shape
    for t in tensors:
        _need4("concat_channels", t)
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError("concat_channels", "N,H,W", (n, h, w), (t.shape[0], t.shape[2], t.shape[3]))
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return record("concat_channels", tuple(tensors), out, lambda g: tuple(np.split(g, splits, axis=1)))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def softmax_channels(x: Tensor) -> Tensor:
    _need4("softmax_channels", x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return record("softmax_channels", (x,), out, grad_fn)


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 1x1x1x1 scalar."""
    return record("total", (x,), np.full((1, 1, 1, 1), x.data.sum()), lambda g: (np.full(x.shape, g.item()),))


def scale(x: Tensor, factor: float) -> Tensor:
    return record("scale", (x,), x.data * factor, lambda g: (g * factor,))


def sum_squares(tensors: Sequence[Tensor]) -> Tensor:
    """Scalar sum of squared entries over several tensors of any shape."""
    value = sum(float(np.vdot(t.data, t.data)) for t in tensors)
    return record(
        "sum_squares",
        tuple(tensors),
        np.full((1, 1, 1, 1), value),
        lambda g: tuple(2.0 * g.item() * t.data for t in tensors),
    )
