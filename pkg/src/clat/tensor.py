"""Dense float32 tensors with tape-based reverse-mode differentiation.

Any op with at least one input that requires grad records a node on the tape:
the op name, its parent tensors and a backward closure.  Node ids increase
monotonically with creation, so ascending id order is a topological order of
the tape.  :func:`backward` walks that order in reverse and accumulates parent
gradients in a fixed order, which keeps gradients bit-reproducible.

Storage is float32.  Reductions that feed losses or norms accumulate in float64
and round the result back to float32.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError, UsageError

_node_ids = itertools.count()
_recording = True

BackwardFn = Callable[[np.ndarray, tuple], tuple]


class Tensor:
    """A float32 array plus the tape bookkeeping needed to differentiate it."""

    __slots__ = ("data", "requires_grad", "op", "parents", "_backward", "id")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: BackwardFn | None = None):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self._backward = backward
        self.id = next(_node_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same data, no tape history (a stop-gradient)."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, shape=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=np.float32)
    if shape is not None and arr.shape != tuple(shape):
        arr = np.broadcast_to(arr, shape).copy()
    return Tensor(arr)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous


def _record(out: np.ndarray, parents: Sequence[Tensor], op: str, backward: BackwardFn) -> Tensor:
    if not _recording or not any(p.requires_grad for p in parents):
        return Tensor(out, op=op)
    return Tensor(out, True, op=op, parents=tuple(parents), backward=backward)


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    """Elementwise sum of equal shapes; ``b`` may also be a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.ndim != 0:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    scalar_b = a.shape != b.shape

    def bw(g, need):
        gb = None
        if need[1]:
            gb = _f32(np.sum(g, dtype=np.float64)) if scalar_b else g
        return (g if need[0] else None, gb)

    return _record(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def bw(g, need):
        return (g if need[0] else None, -g if need[1] else None)

    return _record(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or a tensor times a python scalar."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.float32(b)

        def bw_scalar(g, need):
            return (g * c,)

        return _record(a.data * c, (a,), "scale", bw_scalar)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g, need):
        return (g * b.data if need[0] else None, g * a.data if need[1] else None)

    return _record(a.data * b.data, (a, b), "mul", bw)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0

    def bw(g, need):
        return (g * mask,)

    return _record(np.where(mask, x.data, np.float32(0)), (x,), "relu", bw)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g, need):
        return (g @ b.data.T if need[0] else None, a.data.T @ g if need[1] else None)

    return _record(a.data @ b.data, (a, b), "matmul", bw)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias along axis 1 ([N, F] or [N, F, H, W])."""
    if x.ndim < 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {bias.shape} to {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))

    def bw(g, need):
        return (g if need[0] else None, g.sum(axis=axes) if need[1] else None)

    return _record(x.data + bias.data.reshape(view), (x, bias), "add_bias", bw)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if stride < 1 or pad < 0 or span < 0 or span % stride:
        raise ConfigurationError(
            f"conv2d: input {size} with kernel {kernel}, stride {stride}, pad {pad} "
            "does not give an integral output size")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) via an explicit column matrix.

    x: [N, C, H, W], w: [F, C, kh, kw], bias: [F] -> [N, F, H', W'].
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xt = xp.transpose(1, 0, 2, 3)  # [C, N, Hp, Wp]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(f, -1)
    out = (wmat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    parents = (x, w)
    if bias is not None:
        if bias.shape != (f,):
            raise DimensionError(f"conv2d: bias {bias.shape} does not match {f} filters")
        out += bias.data.reshape(1, -1, 1, 1)
        parents = (x, w, bias)

    def bw(g, need):
        gx = gw = gb = None
        gmat = g.transpose(1, 0, 2, 3).reshape(f, -1)  # [F, N*H'*W']
        if need[0]:
            dcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=np.float32)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp)
        if need[1]:
            gw = (gmat @ cols.T).reshape(w.shape)
        if len(need) > 2 and need[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)[:len(parents)]

    return _record(out, parents, "conv2d", bw)


# ---------------------------------------------------------------------------
# pooling and reshaping


def _pool_view(x: Tensor, size: int, name: str) -> np.ndarray:
    if x.ndim != 4:
        raise DimensionError(f"{name}: expected [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if size < 1 or h % size or w % size:
        raise DimensionError(f"{name}: window {size} does not tile spatial shape {(h, w)}")
    return x.data.reshape(n, c, h // size, size, w // size, size)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    v = _pool_view(x, size, "maxpool2d")
    n, c, ho, _, wo, _ = v.shape
    win = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g, need):
        gwin = np.zeros(win.shape, dtype=np.float32)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(x.shape),)

    return _record(np.ascontiguousarray(out), (x,), "maxpool2d", bw)


def avgpool2d(x: Tensor, size: int = 2) -> Tensor:
    v = _pool_view(x, size, "avgpool2d")
    scale = np.float32(1.0 / (size * size))

    def bw(g, need):
        gx = np.broadcast_to((g * scale)[:, :, :, None, :, None], v.shape)
        return (gx.reshape(x.shape).copy(),)

    return _record(v.mean(axis=(3, 5), dtype=np.float32), (x,), "avgpool2d", bw)


def flatten(x: Tensor) -> Tensor:
    """[N, ...] -> [N, prod(...)]."""
    if x.ndim < 1:
        raise DimensionError("flatten: needs a batch axis")
    shape = x.shape

    def bw(g, need):
        return (g.reshape(shape),)

    return _record(x.data.reshape(shape[0], -1), (x,), "flatten", bw)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def bw(g, need):
        return (np.full(shape, g, dtype=np.float32),)

    return _record(_f32(np.sum(x.data, dtype=np.float64)), (x,), "sum", bw)


def mean(x: Tensor) -> Tensor:
    shape, count = x.shape, max(x.size, 1)

    def bw(g, need):
        return (np.full(shape, g / np.float32(count), dtype=np.float32),)

    return _record(_f32(np.sum(x.data, dtype=np.float64) / count), (x,), "mean", bw)


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm over all elements; gradient 0 at the zero tensor."""
    x64 = x.data.astype(np.float64)
    norm = float(np.sqrt(np.sum(x64 * x64)))

    def bw(g, need):
        if norm == 0.0:
            return (np.zeros(x.shape, dtype=np.float32),)
        return (_f32(x64 * (float(g) / norm)),)

    return _record(_f32(norm), (x,), "l2_norm", bw)


def row_norms(x: Tensor) -> Tensor:
    """Per-sample Euclidean norms: [N, ...] -> [N].  Zero rows get zero gradient."""
    n = x.shape[0]
    x64 = x.data.reshape(n, -1).astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x64, x64))

    def bw(g, need):
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, g.astype(np.float64) / safe, 0.0)
        return (_f32(x64 * scale[:, None]).reshape(x.shape),)

    return _record(_f32(norms), (x,), "row_norms", bw)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer class labels.

    reduction is "mean" (default), "sum" or "none" (per-sample [N]).
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be [N, K], got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if n and (labels.min() < 0 or labels.max() >= k or not np.issubdtype(labels.dtype, np.integer)):
        raise InputError(f"softmax_cross_entropy: labels must be integers in [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per = lse - z[np.arange(n), labels]
    if reduction == "mean":
        out, scale = per.mean() if n else 0.0, 1.0 / max(n, 1)
    elif reduction == "sum":
        out, scale = per.sum(), 1.0
    elif reduction == "none":
        out, scale = per, None
    else:
        raise UsageError(f"unknown reduction {reduction!r}")

    def bw(g, need):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        if scale is None:
            p *= g.astype(np.float64)[:, None]
        else:
            p *= float(g) * scale
        return (_f32(p),)

    return _record(_f32(out), (logits,), "softmax_cross_entropy", bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, wrt: Iterable[Tensor]) -> dict:
    """Gradients of the scalar ``loss`` with respect to each tensor in ``wrt``.

    Returns a dict keyed by the requested tensors (identity).  Only nodes that
    lie on a path from ``loss`` down to some requested tensor are visited.
    """
    wrt = list(wrt)
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in nodes:
            continue
        nodes[t.id] = t
        stack.extend(t.parents)
    targets = set()
    for w in wrt:
        if not w.requires_grad or w.id not in nodes:
            raise UsageError(f"requested gradient for a tensor that is not on the tape: {w!r}")
        targets.add(w.id)

    order = sorted(nodes)
    needed = set(targets)
    for i in order:
        if any(p.id in needed for p in nodes[i].parents):
            needed.add(i)

    grads = {loss.id: np.ones(loss.shape, dtype=np.float32)}
    for i in reversed(order):
        node = nodes[i]
        if node._backward is None or i not in needed:
            continue
        g = grads.get(i) if i in targets else grads.pop(i, None)
        if g is None:
            continue
        need = tuple(p.id in needed for p in node.parents)
        for p, pg, want in zip(node.parents, node._backward(g, need), need):
            if not want or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float32)
            grads[p.id] = grads[p.id] + pg if p.id in grads else pg
    return {w: grads.get(w.id, np.zeros(w.shape, dtype=np.float32)) for w in wrt}


def grad(loss: Tensor, *wrt: Tensor) -> list:
    """List form of :func:`backward`, aligned with ``wrt``."""
    result = backward(loss, wrt)
    return [result[w] for w in wrt]
