"""Minimal float32 N-D tensor engine with reverse-mode autodiff.

Everything is backed by contiguous numpy float32 arrays.  Each operation
that participates in differentiation records a closure on the output
tensor; ``backward()`` walks the recorded graph in reverse topological
order and accumulates gradients into ``.grad`` buffers.  The tape is
per-forward-pass: it is dropped after backward so repeated training steps
do not grow memory.

The engine is deliberately small: only the ops needed by a convolutional
detector (conv, batchnorm, activations, attention primitives, reductions,
reshapes) are provided.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Dimension mismatch; the message names the offending axis."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float32 array with an optional gradient buffer.

    ``data`` is always a contiguous float32 ndarray.  ``grad`` is either
    None or an ndarray of identical shape.  Tensors produced by recorded
    ops carry ``_parents``/``_backward`` until ``backward()`` clears them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # numpy must defer mixed ndarray-Tensor arithmetic to our reflected ops
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Constant copy sharing data, cut off from the graph."""
        out = Tensor(self.data)
        return out

    # -- graph plumbing -----------------------------------------------------

    def _make(self, data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
            out.requires_grad = False
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        """Populate ``grad`` on every reachable requires_grad tensor.

        The loss must be scalar (size 1).  The recorded graph is released
        afterwards so tensors can be reused across steps.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            node._parents = ()
            node._backward = None
            if not node.requires_grad and node is not self:
                node.grad = None

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def back(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))

        return self._make(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return self._make(-a.data, (a,), lambda g: a._accum(-g))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def back(g):
            a._accum(_unbroadcast(g * b.data, a.shape))
            b._accum(_unbroadcast(g * a.data, b.shape))

        return self._make(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def back(g):
            a._accum(_unbroadcast(g / b.data, a.shape))
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return self._make(a.data / b.data, (a, b), back)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        out_data = a.data ** np.float32(p)

        def back(g):
            a._accum(g * np.float32(p) * a.data ** np.float32(p - 1))

        return self._make(out_data, (a,), back)

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul requires >= 2-D operands")
        if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(
                f"matmul batch axes must match exactly: {a.shape} vs {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul inner axis mismatch: axis {a.ndim - 1} of left ({a.shape[-1]}) "
                f"!= axis {b.ndim - 2} of right ({b.shape[-2]})")

        def back(g):
            a._accum(g @ b.data.swapaxes(-1, -2))
            b._accum(a.data.swapaxes(-1, -2) @ g)

        return self._make(a.data @ b.data, (a, b), back)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

        def back(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis=axis)
            a._accum(np.broadcast_to(gg, a.shape).astype(np.float32))

        return self._make(out_data, (a,), back)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape
        return self._make(a.data.reshape(shape), (a,),
                          lambda g: a._accum(g.reshape(old)))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)
        return self._make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                          lambda g: a._accum(g.transpose(inv)))

    def index_channels(self, lo: int, hi: int) -> "Tensor":
        """Slice channels [lo, hi) of an NCHW tensor; backward zero-pads."""
        if self.ndim != 4:
            raise ShapeError("index_channels requires a 4-D tensor")
        if not 0 <= lo < hi <= self.shape[1]:
            raise ShapeError(
                f"channel slice [{lo},{hi}) out of range for axis 1 size {self.shape[1]}")
        a = self

        def back(g):
            da = np.zeros_like(a.data)
            da[:, lo:hi] += g
            a._accum(da)

        return self._make(np.ascontiguousarray(a.data[:, lo:hi]), (a,), back)

    def index_columns(self, j: int) -> "Tensor":
        """Select column j of a 2-D tensor as a 1-D tensor."""
        if self.ndim != 2:
            raise ShapeError("index_columns requires a 2-D tensor")
        if not -self.shape[1] <= j < self.shape[1]:
            raise ShapeError(f"column {j} out of range for axis 1 size {self.shape[1]}")
        a = self

        def back(g):
            da = np.zeros_like(a.data)
            da[:, j] += g
            a._accum(da)

        return self._make(np.ascontiguousarray(a.data[:, j]), (a,), back)

    def index_rows(self, idx) -> "Tensor":
        """Select rows of a 2-D tensor; backward scatter-adds."""
        if self.ndim != 2:
            raise ShapeError("index_rows requires a 2-D tensor")
        a = self
        idx = np.asarray(idx, dtype=np.int64)

        def back(g):
            da = np.zeros_like(a.data)
            np.add.at(da, idx, g)
            a._accum(da)

        return self._make(a.data[idx], (a,), back)

    # -- elementwise nonlinearities ------------------------------------------

    def maximum(self, other):
        other = self._coerce(other)
        a, b = self, other
        mask = a.data >= b.data

        def back(g):
            a._accum(_unbroadcast(g * mask, a.shape))
            b._accum(_unbroadcast(g * ~mask, b.shape))

        return self._make(np.maximum(a.data, b.data), (a, b), back)

    def minimum(self, other):
        other = self._coerce(other)
        a, b = self, other
        mask = a.data <= b.data

        def back(g):
            a._accum(_unbroadcast(g * mask, a.shape))
            b._accum(_unbroadcast(g * ~mask, b.shape))

        return self._make(np.minimum(a.data, b.data), (a, b), back)

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return self._make(out_data, (a,), lambda g: a._accum(g * out_data))

    def log(self):
        a = self
        return self._make(np.log(a.data), (a,), lambda g: a._accum(g / a.data))

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        return self._make(out_data, (a,),
                          lambda g: a._accum(g / (2.0 * out_data)))

    def atan(self):
        a = self
        return self._make(np.arctan(a.data), (a,),
                          lambda g: a._accum(g / (1.0 + a.data * a.data)))

    def sigmoid(self):
        a = self
        out_data = _sigmoid_np(a.data)
        return self._make(out_data, (a,),
                          lambda g: a._accum(g * out_data * (1.0 - out_data)))

    def silu(self):
        a = self
        s = _sigmoid_np(a.data)

        def back(g):
            a._accum(g * (s * (1.0 + a.data * (1.0 - s))))

        return self._make(a.data * s, (a,), back)

    def softplus(self):
        a = self
        out_data = _softplus_np(a.data)
        s = _sigmoid_np(a.data)
        return self._make(out_data, (a,), lambda g: a._accum(g * s))

    def softmax(self, axis: int = -1):
        a = self
        if not -a.ndim <= axis < a.ndim:
            raise ShapeError(f"softmax axis {axis} out of range for ndim {a.ndim}")
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accum(out_data * (g - dot))

        return self._make(out_data, (a,), back)


# -- numpy kernels shared by ops ---------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.float32)


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))).astype(np.float32)


# -- free-function ops ---------------------------------------------------------


def silu(x: Tensor) -> Tensor:
    return x.silu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def softplus(x: Tensor) -> Tensor:
    return x.softplus()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.softmax(axis)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along `axis`; backward splits the gradient."""
    tensors = list(tensors)
    ref = tensors[0]
    for i, t in enumerate(tensors[1:], start=1):
        for ax in range(ref.ndim):
            if ax != axis % ref.ndim and t.shape[ax] != ref.shape[ax]:
                raise ShapeError(
                    f"concat: operand {i} differs from operand 0 on axis {ax} "
                    f"({t.shape[ax]} vs {ref.shape[ax]})")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(np.ascontiguousarray(g[tuple(sl)]))

    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    return ref._make(out_data, tuple(tensors), back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW maps on the channel axis."""
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_channels: batch axis 0 mismatch {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: spatial axes 2,3 mismatch {a.shape[2:]} vs {b.shape[2:]}")
    return concat([a, b], axis=1)


def nearest_upsample2x(x: Tensor) -> Tensor:
    """Replicate each pixel of an NCHW map into a 2x2 block."""
    a = x
    n, c, h, w = a.shape
    out_data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def back(g):
        a._accum(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return a._make(out_data, (a,), back)


def space_to_depth2x(x: Tensor) -> Tensor:
    """2x2 space-to-depth: out[n, c*4 + 2*di + dj, i, j] = x[n, c, 2i+di, 2j+dj]."""
    a = x
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"space_to_depth2x: spatial axes must be even, got {h}x{w}")
    out_data = np.ascontiguousarray(
        a.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * 4, h // 2, w // 2))

    def back(g):
        a._accum(np.ascontiguousarray(
            g.reshape(n, c, 2, 2, h // 2, w // 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, h, w)))

    return a._make(out_data, (a,), back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (NCHW x OIHW), im2col + one sgemm.

    Output spatial size is floor((in + 2*pad - k)/stride) + 1.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d: input channel axis 1 ({cin}) != weight input axis 1 ({cin_w})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(
            f"conv2d: bias axis 0 ({bias.shape}) must equal output channels ({cout},)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} too large for padded input {h + 2 * padding}x{w + 2 * padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # windows: (N, C, OH, OW, KH, KW)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out2d = cols @ wmat.T
    if bias is not None:
        out2d += bias.data
    out_data = out2d.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        weight._accum((g2d.T @ cols).reshape(weight.shape))
        if bias is not None:
            bias._accum(g2d.sum(axis=0))
        dcols = g2d @ wmat  # (N*OH*OW, C*KH*KW)
        dcols = dcols.reshape(n, oh, ow, cin, kh, kw)
        dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=np.float32)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                    dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        if padding:
            dxp = dxp[:, :, padding:h + padding, padding:w + padding]
        x._accum(np.ascontiguousarray(dxp))

    return x._make(out_data, parents, back)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over an NCHW map.

    Training mode normalizes by batch statistics and updates the running
    buffers in place (unbiased variance, torch convention).  Eval mode is
    a per-channel affine transform using the running buffers.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: gamma/beta axis 0 must equal channel axis 1 ({c})")
    cnt = n * h * w
    if training:
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float32)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float32)
        unbiased = var * (cnt / (cnt - 1)) if cnt > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(np.float32)
        var = running_var.astype(np.float32)

    ivar = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = (x.data - mean[:, None, None]) * ivar[:, None, None]
    out_data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def back(g):
        beta._accum(g.sum(axis=(0, 2, 3)))
        gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if training:
            gy = g * gamma.data[:, None, None]
            m1 = gy.mean(axis=(0, 2, 3), dtype=np.float32)[:, None, None]
            m2 = (gy * xhat).mean(axis=(0, 2, 3), dtype=np.float32)[:, None, None]
            x._accum((gy - m1 - xhat * m2) * ivar[:, None, None])
        else:
            x._accum(g * (gamma.data * ivar)[:, None, None])

    return x._make(out_data, (x, gamma, beta), back)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention over token sequences.

    Accepts (T, D) or (B, T, D); q, k, v must share token count and
    embedding dim, and D must be divisible by `heads`.  Returns the same
    shape as `v`.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (t.reshape(1, *t.shape) for t in (q, k, v))
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    b, t, d = q.shape
    if d % heads:
        raise ShapeError(f"attention: embedding axis ({d}) not divisible by heads ({heads})")
    dh = d // heads

    def split(x):
        return x.reshape(b, t, heads, dh).transpose(0, 2, 1, 3).reshape(b * heads, t, dh)

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    out = scores.softmax(axis=-1) @ vh
    out = out.reshape(b, heads, t, dh).transpose(0, 2, 1, 3).reshape(b, t, d)
    if squeeze:
        out = out.reshape(t, d)
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray | Tensor) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable)."""
    t = targets.data if isinstance(targets, Tensor) else _f32(targets)
    a = logits
    out_data = (np.maximum(a.data, 0.0) - a.data * t
                + np.log1p(np.exp(-np.abs(a.data)))).astype(np.float32)

    def back(g):
        a._accum(g * (_sigmoid_np(a.data) - t))

    return a._make(out_data, (a,), back)


def backward(loss: Tensor, params=()) -> None:
    """Run reverse-mode on a scalar loss; ensure zero grads on unreachable params."""
    loss.backward()
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)
