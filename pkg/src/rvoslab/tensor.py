"""Dense float64 tensors with reverse-mode automatic differentiation.

Every array in the lab (video features, query embeddings, mask logits,
loss scalars) is a :class:`Tensor`: an immutable float64 ndarray plus an
optional backpropagation record. Ops build a DAG of closures; calling
``backward()`` on a scalar walks the DAG in reverse topological order and
accumulates gradients into every reachable leaf with ``requires_grad``.

All computation is 64-bit and deterministic: same inputs, same bits out.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 5

TENSOR_MAGIC = b"TNS1"


class ShapeMismatch(ValueError):
    """Operand extents disagree with what the op requires."""


class NotSquare(ValueError):
    """Channel count is not a perfect square."""


class NonScalarLoss(ValueError):
    """backward() was called on a tensor that is not a scalar."""


class Tensor:
    """A dense float64 array with an optional autodiff record.

    Treat instances as immutable after construction; ops never write into
    operand data, which makes tensors safe to share across threads.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeMismatch(f"rank {arr.ndim} exceeds supported rank {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing -----------------------------------------------------

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Backpropagate from a scalar loss into every reachable leaf."""
        if self.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._ensure_grad()[...] = 1.0
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = np.zeros_like(out.data)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b._ensure_grad()[...] += _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b._ensure_grad()[...] -= _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b._ensure_grad()[...] += _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += _unbroadcast(g / b.data, a.shape)
        if b.requires_grad:
            b._ensure_grad()[...] += _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _make(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    """a ** exponent with a constant exponent."""
    a = as_tensor(a)
    e = float(exponent)
    data = a.data**e

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += g * e * a.data ** (e - 1.0)

    return _make(data, (a,), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; on exact ties the gradient routes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += _unbroadcast(np.where(take_a, g, 0.0), a.shape)
        if b.requires_grad:
            b._ensure_grad()[...] += _unbroadcast(np.where(take_a, 0.0, g), b.shape)

    return _make(data, (a, b), backward)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += _unbroadcast(np.where(take_a, g, 0.0), a.shape)
        if b.requires_grad:
            b._ensure_grad()[...] += _unbroadcast(np.where(take_a, 0.0, g), b.shape)

    return _make(data, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += np.where(mask, g, 0.0)

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # Stable on both tails: never exponentiates a positive argument.
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += g * data * (1.0 - data)

    return _make(data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed as logaddexp(0, a) so large |a| stays finite."""
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        if a.requires_grad:
            s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                         np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
            a._ensure_grad()[...] += g * s

    return _make(data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += g * data

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += g / a.data

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += g * 0.5 / data

    return _make(data, (a,), backward)


def absolute(a) -> Tensor:
    """|a|; subgradient 0 at exactly 0."""
    a = as_tensor(a)
    data = np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += g * np.sign(a.data)

    return _make(data, (a,), backward)


# -- reductions ---------------------------------------------------------------


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._ensure_grad()[...] += g
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._ensure_grad()[...] += np.broadcast_to(gg, a.shape)

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- shape manipulation -------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += g.reshape(a.shape)

    return _make(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += g.transpose(inv)

    return _make(data, (a,), backward)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._ensure_grad()[...] += g[tuple(idx)]

    return _make(data, parts, backward)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[idx] += g

    return _make(data, (a,), backward)


def select(a, axis: int, index: int) -> Tensor:
    """Single-index selection along `axis`, dropping that axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = index
    idx = tuple(idx)
    # note: plain indexing keeps 0-d results 0-d (ascontiguousarray would not)
    data = np.asarray(a.data[idx]).copy()

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[idx] += g

    return _make(data, (a,), backward)


def gather_rows(a, indices) -> Tensor:
    """Pick rows a[indices[i]] along axis 0; duplicate indices accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            np.add.at(a._ensure_grad(), idx, g)

    return _make(data, (a,), backward)


def stack(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    expanded = [reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(expanded, axis=axis)


# -- contractions -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """2-D matrix product: (m, k) @ (k, n) -> (m, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += g @ b.data.T
        if b.requires_grad:
            b._ensure_grad()[...] += a.data.T @ g

    return _make(data, (a, b), backward)


def bmm(a, b) -> Tensor:
    """Batched matrix product: (B, m, k) @ (B, k, n) -> (B, m, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeMismatch(f"bmm expects rank-3 operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeMismatch(f"incompatible batch extents: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()[...] += np.matmul(g, b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b._ensure_grad()[...] += np.matmul(a.data.transpose(0, 2, 1), g)

    return _make(data, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along one axis, max-shifted for stability."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._ensure_grad()[...] += data * (g - dot)

    return _make(data, (a,), backward)


# -- structured ops -----------------------------------------------------------


def _conv2d_geometry(h: int, w: int, s: int, stride: int) -> tuple[int, int, int]:
    pad = s // 2
    oh = (h + 2 * pad - s) // stride + 1
    ow = (w + 2 * pad - s) // stride + 1
    return pad, oh, ow


def conv2d(x, k, stride: int = 1) -> Tensor:
    """Same-padded 2-D cross-correlation.

    x is (h, w, cin) or (batch, h, w, cin); k is (s, s, cin, cout) with
    s in {1, 3}. Zero fill outside the image. stride 1 keeps the spatial
    extents; stride 2 halves them (rounding up).
    """
    x, k = as_tensor(x), as_tensor(k)
    batched = x.data.ndim == 4
    xb = x.data if batched else x.data[None]
    if k.data.ndim != 4 or k.shape[0] != k.shape[1]:
        raise ShapeMismatch(f"kernel must be (s, s, cin, cout), got {k.shape}")
    s = k.shape[0]
    if s not in (1, 3):
        raise ShapeMismatch(f"kernel size must be 1 or 3, got {s}")
    if xb.shape[3] != k.shape[2]:
        raise ShapeMismatch(f"input channels {xb.shape[3]} != kernel cin {k.shape[2]}")
    b, h, w, cin = xb.shape
    cout = k.shape[3]
    pad, oh, ow = _conv2d_geometry(h, w, s, stride)

    xp = np.pad(xb, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    iy = (np.arange(oh) * stride)[:, None, None, None] + np.arange(s)[None, None, :, None]
    ix = (np.arange(ow) * stride)[None, :, None, None] + np.arange(s)[None, None, None, :]
    iy = np.broadcast_to(iy, (oh, ow, s, s))
    ix = np.broadcast_to(ix, (oh, ow, s, s))
    # cols: (b, oh, ow, s, s, cin)
    cols = xp[:, iy, ix, :]
    out = cols.reshape(b * oh * ow, s * s * cin) @ k.data.reshape(s * s * cin, cout)
    out = out.reshape(b, oh, ow, cout)
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        gflat = gb.reshape(b * oh * ow, cout)
        if k.requires_grad:
            k._ensure_grad()[...] += (
                cols.reshape(b * oh * ow, s * s * cin).T @ gflat
            ).reshape(k.shape)
        if x.requires_grad:
            gcols = (gflat @ k.data.reshape(s * s * cin, cout).T).reshape(b, oh, ow, s, s, cin)
            gxp = np.zeros((h + 2 * pad, w + 2 * pad, b * cin))
            np.add.at(gxp, (iy, ix), np.moveaxis(gcols, 0, 4).reshape(oh, ow, s, s, b * cin))
            gx = np.moveaxis(gxp.reshape(h + 2 * pad, w + 2 * pad, b, cin), 2, 0)
            gx = gx[:, pad : pad + h, pad : pad + w, :]
            x._ensure_grad()[...] += gx if batched else gx[0]

    return _make(out, (x, k), backward)


def temporal_conv1d(x, k) -> Tensor:
    """Width-3 convolution along the leading time axis, zero-padded ends.

    x is (T, ..., c); k is (3, c, c). All non-time, non-channel axes are
    treated as independent sites.
    """
    x, k = as_tensor(x), as_tensor(k)
    if k.data.ndim != 3 or k.shape[0] != 3 or k.shape[1] != k.shape[2]:
        raise ShapeMismatch(f"temporal kernel must be (3, c, c), got {k.shape}")
    c = k.shape[1]
    if x.data.ndim < 2 or x.shape[-1] != c:
        raise ShapeMismatch(f"input channels {x.shape} incompatible with kernel {k.shape}")
    t = x.shape[0]
    mid_shape = x.shape[1:-1]
    m = int(np.prod(mid_shape)) if mid_shape else 1
    xf = x.data.reshape(t, m, c)
    xp = np.zeros((t + 2, m, c))
    xp[1 : t + 1] = xf
    out = np.zeros((t, m, c))
    for tap in range(3):
        out += xp[tap : tap + t] @ k.data[tap]
    out = out.reshape(x.shape[:-1] + (c,))

    def backward(g):
        gf = g.reshape(t, m, c)
        if k.requires_grad:
            gk = k._ensure_grad()
            for tap in range(3):
                gk[tap] += np.tensordot(xp[tap : tap + t], gf, axes=([0, 1], [0, 1]))
        if x.requires_grad:
            gxp = np.zeros((t + 2, m, c))
            for tap in range(3):
                gxp[tap : tap + t] += gf @ k.data[tap].T
            x._ensure_grad()[...] += gxp[1 : t + 1].reshape(x.shape)

    return _make(out, (x, k), backward)


def pixel_shuffle(x) -> Tensor:
    """Rearrange d*d channels into a d-times-larger spatial grid.

    x is (h, w, d*d) or (batch, h, w, d*d); channel c lands at sub-pixel
    offset (c // d, c % d), row-major. Output has a single channel.
    """
    x = as_tensor(x)
    batched = x.data.ndim == 4
    xb = x.data if batched else x.data[None]
    b, h, w, ch = xb.shape
    d = int(round(np.sqrt(ch)))
    if d * d != ch:
        raise NotSquare(f"channel count {ch} is not a perfect square")
    data = (
        xb.reshape(b, h, w, d, d)
        .transpose(0, 1, 3, 2, 4)
        .reshape(b, h * d, w * d, 1)
    )
    if not batched:
        data = data[0]

    def backward(g):
        gb = g if batched else g[None]
        gx = (
            gb.reshape(b, h, d, w, d)
            .transpose(0, 1, 3, 2, 4)
            .reshape(b, h, w, ch)
        )
        if x.requires_grad:
            x._ensure_grad()[...] += gx if batched else gx[0]

    return _make(data, (x,), backward)


def pixel_unshuffle(x, d: int) -> Tensor:
    """Inverse of pixel_shuffle: (h*d, w*d, 1) -> (h, w, d*d)."""
    x = as_tensor(x)
    batched = x.data.ndim == 4
    xb = x.data if batched else x.data[None]
    b, hd, wd, ch = xb.shape
    if ch != 1 or hd % d or wd % d:
        raise ShapeMismatch(f"cannot unshuffle shape {x.shape} with d={d}")
    h, w = hd // d, wd // d
    data = xb.reshape(b, h, d, w, d).transpose(0, 1, 3, 2, 4).reshape(b, h, w, d * d)
    if not batched:
        data = data[0]

    def backward(g):
        gb = g if batched else g[None]
        gx = gb.reshape(b, h, w, d, d).transpose(0, 1, 3, 2, 4).reshape(b, hd, wd, 1)
        if x.requires_grad:
            x._ensure_grad()[...] += gx if batched else gx[0]

    return _make(data, (x,), backward)


def _bilinear_axis_weights(n_in: int, factor: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center (align-corners=false) source indices and weights."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    i0 = np.clip(np.floor(src), 0, n_in - 1).astype(np.int64)
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    w1 = np.clip(src - i0, 0.0, 1.0)
    w1[src < 0] = 0.0
    return i0, i1, w1


def upsample(x, factor: int, mode: str = "bilinear") -> Tensor:
    """Spatial upsampling by an integer factor in {2, 4}.

    x is (h, w, c) or (batch, h, w, c). `nearest` replicates pixels;
    `bilinear` uses half-pixel centers (align-corners=false), clamped at
    the borders.
    """
    x = as_tensor(x)
    if factor not in (2, 4):
        raise ShapeMismatch(f"upsample factor must be 2 or 4, got {factor}")
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"unknown mode {mode!r}")
    batched = x.data.ndim == 4
    xb = x.data if batched else x.data[None]
    b, h, w, c = xb.shape

    if mode == "nearest":
        data = xb.repeat(factor, axis=1).repeat(factor, axis=2)

        def backward(g):
            if not x.requires_grad:
                return
            gb = g if batched else g[None]
            gx = gb.reshape(b, h, factor, w, factor, c).sum(axis=(2, 4))
            x._ensure_grad()[...] += gx if batched else gx[0]

    else:
        y0, y1, wy = _bilinear_axis_weights(h, factor)
        x0, x1, wx = _bilinear_axis_weights(w, factor)
        rows = xb[:, y0] * (1.0 - wy)[None, :, None, None] + xb[:, y1] * wy[None, :, None, None]
        data = (
            rows[:, :, x0] * (1.0 - wx)[None, None, :, None]
            + rows[:, :, x1] * wx[None, None, :, None]
        )

        def backward(g):
            if not x.requires_grad:
                return
            gb = g if batched else g[None]
            grows = np.zeros((b, h * factor, w, c))
            np.add.at(grows.transpose(2, 0, 1, 3), x0, (gb * (1.0 - wx)[None, None, :, None]).transpose(2, 0, 1, 3))
            np.add.at(grows.transpose(2, 0, 1, 3), x1, (gb * wx[None, None, :, None]).transpose(2, 0, 1, 3))
            gx = np.zeros((b, h, w, c))
            np.add.at(gx.transpose(1, 0, 2, 3), y0, (grows * (1.0 - wy)[None, :, None, None]).transpose(1, 0, 2, 3))
            np.add.at(gx.transpose(1, 0, 2, 3), y1, (grows * wy[None, :, None, None]).transpose(1, 0, 2, 3))
            x._ensure_grad()[...] += gx if batched else gx[0]

    out = data if batched else data[0]
    return _make(out, (x,), backward)


def avg_pool(x, k: int) -> Tensor:
    """Non-overlapping k-by-k mean pooling; spatial extents must divide by k."""
    x = as_tensor(x)
    batched = x.data.ndim == 4
    xb = x.data if batched else x.data[None]
    b, h, w, c = xb.shape
    if h % k or w % k:
        raise ShapeMismatch(f"extents {(h, w)} not divisible by pool size {k}")
    data = xb.reshape(b, h // k, k, w // k, k, c).mean(axis=(2, 4))
    if not batched:
        data = data[0]

    def backward(g):
        if not x.requires_grad:
            return
        gb = g if batched else g[None]
        gx = np.broadcast_to(
            gb[:, :, None, :, None, :] / (k * k), (b, h // k, k, w // k, k, c)
        ).reshape(b, h, w, c)
        x._ensure_grad()[...] += gx if batched else gx[0]

    return _make(data, (x,), backward)


# -- serialization ------------------------------------------------------------


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    """Write one array in the "TNS1" format: magic, rank, extents, f64 LE payload."""
    arr = np.asarray(arr, dtype=np.float64)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    if rank > MAX_RANK:
        raise ValueError(f"unsupported tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
