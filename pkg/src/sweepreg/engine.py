"""Minimal reverse-mode autodiff engine on numpy arrays.

Everything runs in float32 by default; ``precision("float64")`` switches the
whole engine to float64 for gradient-check builds.  Reductions accumulate in
float64 internally regardless of the active dtype.  All operations are plain
numpy, so results are bitwise deterministic for a fixed BLAS thread count.
"""
from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_DTYPE = np.float32


class EngineError(Exception):
    """Raised on malformed engine usage (shape mismatch, bad backward call)."""


def get_dtype() -> type:
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise EngineError(f"unsupported engine dtype {dtype!r}")
    _DTYPE = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine dtype (e.g. float64 for grad checks)."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


class Tensor:
    """Array with an optional gradient and a recorded backward closure.

    Gradients accumulate additively into ``grad``; call ``zero_grad`` (or the
    optimizer's) between steps.  ``backward`` may only be called on a scalar
    produced by engine operations.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def backward(self) -> None:
        if self._backward is None:
            raise EngineError("backward called on a tensor with no recorded forward computation")
        if self.data.size != 1:
            raise EngineError(f"backward requires a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS post-order, reversed: root first.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if req:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# convolution

def _out_len(n: int, stride: int) -> int:
    return -(-n // stride)


def _pad_amounts(n: int, k: int, stride: int) -> tuple[int, int, int]:
    """'same'-style zero padding: output extent is ceil(n / stride)."""
    out = _out_len(n, stride)
    total = max((out - 1) * stride + k - n, 0)
    lo = total // 2
    return lo, total - lo, out


def _im2col(xp: np.ndarray, ksizes: tuple[int, ...], stride: int):
    """Return (col, out_dims): col has shape (N, prod(out), C * prod(k))."""
    nd = len(ksizes)
    win = np.lib.stride_tricks.sliding_window_view(xp, ksizes, axis=tuple(range(2, 2 + nd)))
    if stride != 1:
        idx = (slice(None), slice(None)) + tuple(slice(None, None, stride) for _ in ksizes)
        win = win[idx]
    out_dims = win.shape[2:2 + nd]
    win = np.moveaxis(win, 1, 1 + nd)  # (N, *out, C, *k)
    n = xp.shape[0]
    p = int(np.prod(out_dims))
    ck = xp.shape[1] * int(np.prod(ksizes))
    col = np.ascontiguousarray(win).reshape(n, p, ck)
    return col, out_dims


def conv(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """N-d cross-correlation with 'same' zero padding and integer stride.

    x: (N, C_in, *spatial); w: (C_out, C_in, *kernel).  Output spatial extents
    are ceil(in / stride) per axis.
    """
    xd, wd = x.data, w.data
    nd = xd.ndim - 2
    if nd < 1 or wd.ndim - 2 != nd:
        raise EngineError(f"conv rank mismatch: input {xd.shape}, kernel {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise EngineError(
            f"conv channel mismatch: input has {xd.shape[1]} channels, kernel expects {wd.shape[1]}")
    if stride not in (1, 2):
        raise EngineError(f"conv stride must be 1 or 2, got {stride}")
    ks = wd.shape[2:]
    c_out = wd.shape[0]
    n = xd.shape[0]
    pads, outs = [], []
    for dim, k in zip(xd.shape[2:], ks):
        lo, hi, out = _pad_amounts(dim, k, stride)
        pads.append((lo, hi))
        outs.append(out)
    xp = np.pad(xd, [(0, 0), (0, 0)] + pads)
    col, col_out = _im2col(xp, ks, stride)
    assert tuple(col_out) == tuple(outs)
    wmat = wd.reshape(c_out, -1)
    y = col @ wmat.T  # (N, P, C_out)
    ydata = np.moveaxis(y, -1, 1).reshape((n, c_out) + tuple(outs))

    def backward(g: np.ndarray) -> None:
        gt = np.moveaxis(g.reshape(n, c_out, -1), 1, -1)  # (N, P, C_out)
        if w.requires_grad:
            dw = np.tensordot(gt, col, axes=([0, 1], [0, 1]))  # (C_out, C*K)
            _accum(w, dw.reshape(wd.shape).astype(wd.dtype, copy=False))
        if x.requires_grad:
            _accum(x, _conv_input_grad(g, wd, xd.shape, pads, outs, stride))

    return _make(ydata, (x, w), backward)


def _conv_input_grad(g: np.ndarray, wd: np.ndarray, x_shape, pads, outs, stride: int) -> np.ndarray:
    """Gradient w.r.t. conv input via a stride-1 correlation with the flipped kernel."""
    n, c_in = x_shape[0], x_shape[1]
    ks = wd.shape[2:]
    nd = len(ks)
    # zero-stuff the output gradient to undo the stride
    dil_dims = tuple((o - 1) * stride + 1 for o in outs)
    gd = np.zeros((n, wd.shape[0]) + dil_dims, dtype=g.dtype)
    gd[(slice(None), slice(None)) + tuple(slice(None, None, stride) for _ in outs)] = g
    gp = np.pad(gd, [(0, 0), (0, 0)] + [(k - 1, k - 1) for k in ks])
    wflip = np.flip(wd, axis=tuple(range(2, 2 + nd))).swapaxes(0, 1)  # (C_in, C_out, *k)
    colb, full_dims = _im2col(gp, ks, 1)
    dxf = colb @ wflip.reshape(c_in, -1).T  # (N, P_full, C_in)
    dxf = np.moveaxis(dxf, -1, 1).reshape((n, c_in) + tuple(full_dims))
    # full_dims == (out-1)*stride + k per axis; the padded input may be one
    # longer when 'same' padding clamped to zero (k < stride), fill with zeros
    padded_dims = tuple(d + lo + hi for d, (lo, hi) in zip(x_shape[2:], pads))
    if tuple(full_dims) != padded_dims:
        dxp = np.zeros((n, c_in) + padded_dims, dtype=g.dtype)
        copy_idx = tuple(slice(0, min(f, p)) for f, p in zip(full_dims, padded_dims))
        dxp[(slice(None), slice(None)) + copy_idx] = dxf[(slice(None), slice(None)) + copy_idx]
        dxf = dxp
    crop = tuple(slice(lo, lo + d) for d, (lo, _) in zip(x_shape[2:], pads))
    return dxf[(slice(None), slice(None)) + crop]


# ---------------------------------------------------------------------------
# pointwise and normalization ops

def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalization over spatial axes, no affine terms."""
    xd = x.data
    if xd.ndim < 3:
        raise EngineError(f"instance_norm expects (N, C, *spatial), got shape {xd.shape}")
    axes = tuple(range(2, xd.ndim))
    mu = xd.mean(axis=axes, keepdims=True, dtype=np.float64)
    xc = xd - mu.astype(xd.dtype)
    var = np.mean(xc.astype(np.float64) ** 2, axis=axes, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    y = xc * inv

    def backward(g: np.ndarray) -> None:
        gm = g.mean(axis=axes, keepdims=True, dtype=np.float64).astype(xd.dtype)
        gym = (g * y).mean(axis=axes, keepdims=True, dtype=np.float64).astype(xd.dtype)
        _accum(x, inv * (g - gm - y * gym))

    return _make(y, (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise EngineError(f"leaky_relu slope must be in (0, 1), got {slope}")
    xd = x.data
    factor = np.where(xd >= 0, xd.dtype.type(1.0), xd.dtype.type(slope))
    y = xd * factor

    def backward(g: np.ndarray) -> None:
        _accum(x, g * factor)

    return _make(y, (x,), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.data.shape != y.data.shape:
        raise EngineError(f"add shape mismatch: {x.data.shape} vs {y.data.shape}")
    out = x.data + y.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g)
        if y.requires_grad:
            _accum(y, g)

    return _make(out, (x, y), backward)


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.data.shape != y.data.shape:
        raise EngineError(f"mul shape mismatch: {x.data.shape} vs {y.data.shape}")
    out = x.data * y.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * y.data)
        if y.requires_grad:
            _accum(y, g * x.data)

    return _make(out, (x, y), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    out = x.data * c

    def backward(g: np.ndarray) -> None:
        _accum(x, g * c)

    return _make(out, (x,), backward)


def mul_const(x: Tensor, arr: np.ndarray) -> Tensor:
    arr = np.asarray(arr, dtype=x.data.dtype)
    if arr.shape != x.data.shape:
        raise EngineError(f"mul_const shape mismatch: {x.data.shape} vs {arr.shape}")
    out = x.data * arr

    def backward(g: np.ndarray) -> None:
        _accum(x, g * arr)

    return _make(out, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise EngineError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise EngineError(f"transpose expects a 2-d tensor, got shape {x.data.shape}")
    out = np.ascontiguousarray(x.data.T)

    def backward(g: np.ndarray) -> None:
        _accum(x, g.T)

    return _make(out, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    old = x.data.shape

    def backward(g: np.ndarray) -> None:
        _accum(x, g.reshape(old))

    return _make(out, (x,), backward)


def crop(x: Tensor, starts: Sequence[int], sizes: Sequence[int]) -> Tensor:
    """Slice a contiguous block; gradient scatters back into a zero tensor."""
    if len(starts) != x.data.ndim or len(sizes) != x.data.ndim:
        raise EngineError("crop starts/sizes must cover every axis")
    idx = tuple(slice(s, s + n) for s, n in zip(starts, sizes))
    out = x.data[idx].copy()
    if out.shape != tuple(sizes):
        raise EngineError(f"crop out of bounds: starts={starts} sizes={sizes} "
                          f"for shape {x.data.shape}")

    def backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        dx[idx] = g
        _accum(x, dx)

    return _make(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g: np.ndarray) -> None:
        _accum(x, g / x.data)

    return _make(out, (x,), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(xd.dtype)

    def backward(g: np.ndarray) -> None:
        inner = (g * s).sum(axis=axis, keepdims=True, dtype=np.float64).astype(xd.dtype)
        _accum(x, s * (g - inner))

    return _make(s, (x,), backward)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    shifted = xd - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True,
                                     dtype=np.float64)).astype(xd.dtype)
    y = shifted - lse

    def backward(g: np.ndarray) -> None:
        gsum = g.sum(axis=axis, keepdims=True, dtype=np.float64).astype(xd.dtype)
        _accum(x, g - np.exp(y) * gsum)

    return _make(y, (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g: np.ndarray) -> None:
        _accum(x, g * y)

    return _make(y, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(out, (x,), backward)


def with_sink(real: Tensor, alpha: Tensor) -> Tensor:
    """Append a sink row and column filled with the scalar alpha.

    (M, N) -> (M+1, N+1); the corner entry is alpha as well and contributes
    to alpha's gradient exactly once.
    """
    if real.data.ndim != 2:
        raise EngineError(f"with_sink expects a 2-d matrix, got shape {real.data.shape}")
    if alpha.data.size != 1:
        raise EngineError("sink score alpha must be a scalar")
    m, n = real.data.shape
    out = np.empty((m + 1, n + 1), dtype=real.data.dtype)
    out[:m, :n] = real.data
    out[m, :] = alpha.data
    out[:, n] = alpha.data

    def backward(g: np.ndarray) -> None:
        if real.requires_grad:
            _accum(real, g[:m, :n])
        if alpha.requires_grad:
            da = g[m, :].sum(dtype=np.float64) + g[:m, n].sum(dtype=np.float64)
            _accum(alpha, np.asarray(da, dtype=alpha.data.dtype).reshape(alpha.data.shape))

    return _make(out, (real, alpha), backward)


def weighted_mean(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(w * x) / sum(w) with non-negative constant weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.data.shape:
        raise EngineError(f"weight shape {w.shape} != value shape {x.data.shape}")
    if np.any(w < 0):
        raise EngineError("weights must be non-negative")
    wsum = float(w.sum())
    if wsum <= 0:
        raise EngineError("weights sum to zero")
    total = (w * x.data.astype(np.float64)).sum()
    out = np.asarray(total / wsum, dtype=x.data.dtype)
    wn = (w / wsum).astype(x.data.dtype)

    def backward(g: np.ndarray) -> None:
        _accum(x, g * wn)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# training helpers

def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
    """Run backprop from a scalar loss; unused parameters get zero gradients."""
    loss.backward()
    if params is None:
        return None
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)
    if isinstance(params, Mapping):
        return {name: p.grad for name, p in params.items()}
    return [p.grad for p in values]


class Adam:
    """Adam with bias correction.  A step with any non-finite gradient is
    skipped entirely (parameters untouched), counted, and warned about."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.skipped_steps = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        grads = {}
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                self.skipped_steps += 1
                logger.warning("non-finite gradient in %r, skipping optimizer step "
                               "(%d skipped so far)", k, self.skipped_steps)
                return False
            grads[k] = g
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self._m[k]
            v = self._v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
        return True
