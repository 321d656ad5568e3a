"""Reverse-mode automatic differentiation over n-dimensional arrays.

A :class:`Tensor` wraps a row-major numpy array (float32 or float64)
plus an optional gradient accumulator. Every op records a backward
closure; ``backward(loss)`` replays the closures in exact reverse
topological order and accumulates gradients additively across fan-out.

Design constraints kept deliberately simple so the backward rules stay
auditable:

* broadcasting only where an op declares it (``add``/``mul`` elementwise,
  matmul batch dims);
* all convolutions use zero same-padding;
* graphs are single-use: a second ``backward`` through already-consumed
  nodes is rejected;
* tensors are value-semantic and safe to hand between threads once no
  graph references them.

Training runs in float32 by default; gradient checks run in float64
because finite-difference tolerances are untrustworthy in 32-bit.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class AutodiffError(RuntimeError):
    """Misuse of the graph machinery (non-scalar loss, stale graph...)."""


class ShapeError(ValueError):
    """Operands have incompatible shapes or invalid extents."""


# grad mode is thread-local: parallel ablation runs train and evaluate
# independent models on worker threads
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()
        self._op = ""
        self._consumed = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag}, op={self._op!r})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents: tuple[Tensor, ...], op: str) -> Tensor:
    """Construct an op output; parents are recorded only in grad mode."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward = None
    out._op = op
    out._consumed = False
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    out._prev = parents if out.requires_grad else ()
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may be shared with a sibling's accumulation
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}; cast explicitly")


# -- elementwise -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    _check_same_dtype(a, b, "add")
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def backward(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))
        out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    _check_same_dtype(a, b, "mul")
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def backward(g):
            _accum(a, _unbroadcast(g * b.data, a.shape))
            _accum(b, _unbroadcast(g * a.data, b.shape))
        out._backward = backward
    return out


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (dtype preserved)."""
    s = a.dtype.type(s)
    out = _make(a.data * s, (a,), "scale")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * s)
    return out


def gelu(a: Tensor) -> Tensor:
    """GELU nonlinearity, tanh approximation.

    y = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    """
    c = a.dtype.type(math.sqrt(2.0 / math.pi))
    k = a.dtype.type(0.044715)
    x = a.data
    u = c * (x + k * x * x * x)
    t = np.tanh(u)
    out = _make(0.5 * x * (1.0 + t), (a,), "gelu")
    if out.requires_grad:
        def backward(g):
            du = c * (1.0 + 3.0 * k * x * x)
            _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))
        out._backward = backward
    return out


# -- shape manipulation ------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Permute axes: output axis i reads input axis axes[i]."""
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} is not a permutation of 0..{a.ndim - 1}")
    inv = tuple(np.argsort(axes))
    out = _make(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, np.transpose(g, inv))
    return out


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along ``axis``. Inverse of :func:`split` on the same axis."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    for t in ts[1:]:
        _check_same_dtype(ts[0], t, "concat")
    sizes = [t.shape[axis] for t in ts]
    out = _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), "concat")
    if out.requires_grad:
        offsets = np.cumsum([0] + sizes)
        def backward(g):
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])
        out._backward = backward
    return out


def split(a: Tensor, sizes, axis: int) -> tuple[Tensor, ...]:
    """Split along ``axis`` into chunks of the given sizes."""
    sizes = list(sizes)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(
            f"split: sizes {sizes} do not sum to extent {a.shape[axis]} of axis {axis}"
        )
    outs = []
    lo = 0
    for size in sizes:
        hi = lo + size
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(lo, hi)
        piece = _make(np.ascontiguousarray(a.data[tuple(idx)]), (a,), "split")
        if piece.requires_grad:
            def backward(g, lo=lo, hi=hi):
                full = np.zeros_like(a.data)
                idx2 = [slice(None)] * full.ndim
                idx2[axis] = slice(lo, hi)
                full[tuple(idx2)] = g
                _accum(a, full)
            piece._backward = backward
        outs.append(piece)
        lo = hi
    return tuple(outs)


# -- contractions ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Backward: dA = dC @ B^T, dB = A^T @ dC, summed over broadcast batch dims.
    """
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner extents differ, {a.shape} @ {b.shape} "
            f"({a.shape[-1]} vs {b.shape[-2]})"
        )
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch extents not broadcastable, {a.shape} @ {b.shape}") from exc
    out = _make(data, (a, b), "matmul")
    if out.requires_grad:
        def backward(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(a, _unbroadcast(ga, a.shape))
            _accum(b, _unbroadcast(gb, b.shape))
        out._backward = backward
    return out


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 1-d convolution with zero same-padding.

    x: [B, C, T], w: [C, k] with k odd. Channel c convolves only with
    kernel row c:  y[b,c,t] = sum_j x[b,c,t+j-(k-1)/2] * w[c,j].
    k > T is allowed (the zero padding extends as needed).
    """
    _check_same_dtype(x, w, "depthwise_conv1d")
    if x.ndim != 3 or w.ndim != 2:
        raise ShapeError(f"depthwise_conv1d: expected x[B,C,T], w[C,k], got {x.shape}, {w.shape}")
    channels, k = w.shape
    if x.shape[1] != channels:
        raise ShapeError(
            f"depthwise_conv1d: channel mismatch, x has {x.shape[1]}, w has {channels}"
        )
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel size must be odd, got {k}")
    pad = (k - 1) // 2
    frames = x.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    y = np.zeros_like(x.data)
    for j in range(k):
        y += xp[:, :, j:j + frames] * w.data[:, j][None, :, None]
    out = _make(y, (x, w), "depthwise_conv1d")
    if out.requires_grad:
        def backward(g):
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[:, :, j:j + frames] += g * w.data[:, j][None, :, None]
                _accum(x, gxp[:, :, pad:pad + frames])
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for j in range(k):
                    gw[:, j] = np.einsum("bct,bct->c", xp[:, :, j:j + frames], g)
                _accum(w, gw)
        out._backward = backward
    return out


# -- reductions and normalizations ------------------------------------


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over everything (axis=None -> scalar)."""
    out = _make(a.data.sum(axis=axis), (a,), "sum")
    if out.requires_grad:
        def backward(g):
            if axis is None:
                _accum(a, np.broadcast_to(g, a.shape).copy())
            else:
                _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())
        out._backward = backward
    return out


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean over one axis, or over everything (axis=None -> scalar)."""
    count = a.size if axis is None else a.shape[axis]
    out = _make(a.data.mean(axis=axis), (a,), "mean")
    if out.requires_grad:
        def backward(g):
            gg = g / count
            if axis is None:
                _accum(a, np.broadcast_to(gg, a.shape).copy())
            else:
                _accum(a, np.broadcast_to(np.expand_dims(gg, axis), a.shape).copy())
        out._backward = backward
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (rows sum to 1)."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _make(s, (a,), "softmax")
    if out.requires_grad:
        def backward(g):
            _accum(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))
        out._backward = backward
    return out


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis; equals log(softmax) to rounding."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = _make(y, (a,), "log_softmax")
    if out.requires_grad:
        def backward(g):
            _accum(a, g - np.exp(y) * g.sum(axis=-1, keepdims=True))
        out._backward = backward
    return out


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    y = xc * inv
    out = _make(y, (a,), "layer_norm")
    if out.requires_grad:
        def backward(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            _accum(a, inv * (g - gm - y * gy))
        out._backward = backward
    return out


def nll_loss(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets.

    log_probs: [B, C] (already log-softmaxed), targets: int array [B].
    """
    targets = np.asarray(targets)
    if log_probs.ndim != 2 or targets.shape != (log_probs.shape[0],):
        raise ShapeError(
            f"nll_loss: expected log_probs[B,C] and targets[B], "
            f"got {log_probs.shape} and {targets.shape}"
        )
    batch = log_probs.shape[0]
    picked = log_probs.data[np.arange(batch), targets]
    out = _make(np.asarray(-picked.mean(), dtype=log_probs.dtype), (log_probs,), "nll_loss")
    if out.requires_grad:
        def backward(g):
            gl = np.zeros_like(log_probs.data)
            gl[np.arange(batch), targets] = -g / batch
            _accum(log_probs, gl)
        out._backward = backward
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of logits against integer class targets."""
    return nll_loss(log_softmax(logits), targets)


# -- backward ----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Populates ``grad`` on every requires-grad node reachable from
    ``loss``; accumulation is additive across fan-out. The touched graph
    is consumed: a second backward through it raises
    :class:`AutodiffError` until a new forward rebuilds it.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss does not require grad; nothing to differentiate")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._consumed:
            raise AutodiffError(
                f"stale graph: node {node._op!r} was already consumed by a previous "
                "backward; rerun the forward pass"
            )
        stack.append((node, True))
        for parent in node._prev:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
            node._consumed = True
