"""Dense 4-D tensors with reverse-mode automatic differentiation.

Every value is a (batch, channel, height, width) float array; scalars are
(1, 1, 1, 1). Ops build a tape of closures, micrograd-style, but with numpy
payloads so the heavy lifting (convolutions, reductions) runs through BLAS.
Gradients accumulate additively across fan-out during `backward`.
"""

from __future__ import annotations

import threading

import numpy as np

VALID_DTYPES = (np.float32, np.float64)


class EngineError(ValueError):
    """Shape, dtype or domain violation in a tensor op."""


class NonFiniteError(EngineError):
    """NaN or Inf detected in an op output while finite checks are on."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _finite_checks() -> bool:
    return getattr(_state, "finite", False)


class no_grad:
    """Context manager: skip tape construction (inference mode)."""

    def __enter__(self):
        self.prev = _grad_enabled()
        _state.grad = False
        return self

    def __exit__(self, *exc):
        _state.grad = self.prev
        return False


class finite_checks:
    """Context manager: verify every op output is finite (slow, for tests)."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled

    def __enter__(self):
        self.prev = _finite_checks()
        _state.finite = self.enabled
        return self

    def __exit__(self, *exc):
        _state.finite = self.prev
        return False


class Tensor:
    """A 4-D array plus its place on the tape.

    `data` is treated as immutable once the tensor is constructed. `grad`
    is the gradient accumulator, allocated lazily during backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = ()):
        arr = np.asarray(data)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise EngineError(
                f"tensor must be 4-D (batch, channel, height, width), got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise EngineError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Reverse traversal from this scalar; fills `.grad` on the tape."""
        if self.shape != (1, 1, 1, 1):
            raise EngineError(f"backward needs a scalar (1,1,1,1) loss, got {self.shape}")
        order = _toposort(self)
        for t in order:
            t.grad = np.zeros_like(t.data)
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._backward is not None:
                t._backward()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op!r})"


def _toposort(root: Tensor) -> list:
    order, visited, stack = [], set(), [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def scalar(value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def constant(array, dtype=None) -> Tensor:
    arr = np.asarray(array)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    if _finite_checks() and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values in output of op {op!r}")
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise EngineError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise EngineError(f"{op}: operand dtypes differ, {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad += out.grad
        out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    out = _make(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad -= out.grad
        out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a.grad += b.data * out.grad
            if b.requires_grad:
                b.grad += a.data * out.grad
        out._backward = bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _make(a.data * a.dtype.type(s), (a,), "scale")
    if out.requires_grad:
        def bw():
            a.grad += out.grad * a.dtype.type(s)
        out._backward = bw
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    out = _make(a.data + a.dtype.type(c), (a,), "add_const")
    if out.requires_grad:
        def bw():
            a.grad += out.grad
        out._backward = bw
    return out


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo) elementwise; subgradient 0 on the clamped side."""
    mask = a.data >= lo
    out = _make(np.maximum(a.data, a.dtype.type(lo)), (a,), "clamp_min")
    if out.requires_grad:
        def bw():
            a.grad += np.where(mask, out.grad, 0)
        out._backward = bw
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise EngineError("log: inputs must be > 0 (clamp first)")
    out = _make(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def bw():
            a.grad += out.grad / a.data
        out._backward = bw
    return out


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise EngineError("sqrt: inputs must be >= 0")
    val = np.sqrt(a.data)
    out = _make(val, (a,), "sqrt")
    if out.requires_grad:
        def bw():
            a.grad += out.grad * 0.5 / val
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# unary activations (spec kinds: relu, sigmoid, log1p)

def apply_unary(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "log1p":
        return log1p(a)
    raise EngineError(f"apply_unary: unknown kind {kind!r}")


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0), (a,), "relu")
    if out.requires_grad:
        def bw():
            a.grad += np.where(a.data > 0, out.grad, 0)
        out._backward = bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    val = np.empty_like(x)
    pos = x >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    val[~pos] = ex / (1.0 + ex)
    out = _make(val, (a,), "sigmoid")
    if out.requires_grad:
        def bw():
            a.grad += out.grad * val * (1.0 - val)
        out._backward = bw
    return out


def log1p(a: Tensor) -> Tensor:
    if np.any(a.data <= -1):
        raise EngineError("log1p: domain fault, inputs must be > -1")
    out = _make(np.log1p(a.data), (a,), "log1p")
    if out.requires_grad:
        def bw():
            a.grad += out.grad / (1.0 + a.data)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# reductions (keepdims, so everything stays 4-D)

def sum_over(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(4)) if axes is None else tuple(axes)
    out = _make(a.data.sum(axis=axes, keepdims=True), (a,), "sum")
    if out.requires_grad:
        def bw():
            a.grad += np.broadcast_to(out.grad, a.shape)
        out._backward = bw
    return out


def mean_over(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(4)) if axes is None else tuple(axes)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = _make(a.data.mean(axis=axes, keepdims=True), (a,), "mean")
    if out.requires_grad:
        def bw():
            a.grad += np.broadcast_to(out.grad, a.shape) / a.dtype.type(n)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# softmax over channels

def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax across the channel axis, max-subtracted for stability."""
    if logits.shape[1] < 1:
        raise EngineError("softmax_channels: channel extent must be >= 1")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    val = ez / ez.sum(axis=1, keepdims=True)
    out = _make(val, (logits,), "softmax_channels")
    if out.requires_grad:
        def bw():
            g = out.grad
            dot = (g * val).sum(axis=1, keepdims=True)
            logits.grad += val * (g - dot)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# convolution: shift-and-GEMM over the k*k taps, BLAS does the work

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    weight is (out_ch, in_ch, k, k); bias, when given, is (1, out_ch, 1, 1).
    """
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = weight.shape
    if kh != kw:
        raise EngineError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if Cin != Cw:
        raise EngineError(
            f"conv2d: input channels {x.shape} do not match weight in-channels {weight.shape}")
    if bias is not None and bias.shape != (1, Cout, 1, 1):
        raise EngineError(
            f"conv2d: bias shape {bias.shape} does not match out channels of weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise EngineError(f"conv2d: bad stride {stride} or padding {padding}")
    if (H + 2 * padding - k) % stride or (W + 2 * padding - k) % stride:
        raise EngineError(
            f"conv2d: output extents not integral for input {x.shape}, kernel {k}, "
            f"stride {stride}, padding {padding}")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise EngineError(f"conv2d: empty output {Ho}x{Wo} for input {x.shape}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    out_data = np.zeros((B, Cout, Ho, Wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            xs = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
            # (B,Cin,Ho,Wo) x (Cout,Cin) -> (B,Ho,Wo,Cout)
            out_data += np.tensordot(xs, weight.data[:, :, i, j],
                                     axes=([1], [1])).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data += bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out_data, parents, "conv2d")
    if out.requires_grad:
        def bw():
            g = out.grad
            if bias is not None and bias.requires_grad:
                bias.grad += g.sum(axis=(0, 2, 3), keepdims=True)
            need_dx = x.requires_grad
            dxp = np.zeros_like(xp) if need_dx else None
            for i in range(k):
                for j in range(k):
                    if weight.requires_grad:
                        xs = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
                        weight.grad[:, :, i, j] += np.tensordot(
                            g, xs, axes=([0, 2, 3], [0, 2, 3]))
                    if need_dx:
                        dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                            np.tensordot(g, weight.data[:, :, i, j],
                                         axes=([1], [0])).transpose(0, 3, 1, 2)
            if need_dx:
                if padding:
                    x.grad += dxp[:, :, padding:-padding, padding:-padding]
                else:
                    x.grad += dxp
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# 2x2 max pooling, gradient to the argmax (ties: first in row-major order)

def maxpool2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise EngineError(f"maxpool2: extents must be even, got {H}x{W}")
    Ho, Wo = H // 2, W // 2
    # (B,C,Ho,Wo,4) with the last axis in row-major block order
    blocks = x.data.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(B, C, Ho, Wo, 4)
    idx = blocks.argmax(axis=-1)
    val = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = _make(val, (x,), "maxpool2")
    if out.requires_grad:
        def bw():
            g4 = np.zeros((B, C, Ho, Wo, 4), dtype=x.data.dtype)
            np.put_along_axis(g4, idx[..., None], out.grad[..., None], axis=-1)
            x.grad += g4.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
                .reshape(B, C, H, W)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# bilinear 2x upsampling, half-pixel centers (align_corners = false)
#
# Per axis the map is separable. Writing E/O for even/odd output rows:
#   E[0] = x[0],            E[m] = 0.25*x[m-1] + 0.75*x[m]
#   O[m] = 0.75*x[m] + 0.25*x[m+1],            O[last] = x[last]
# which is exactly the half-pixel sample grid (o + 0.5)/2 - 0.5 with edge clamp.

def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    even = 0.75 * a
    even[..., 1:] += 0.25 * a[..., :-1]
    even[..., 0] += 0.25 * a[..., 0]
    odd = 0.75 * a
    odd[..., :-1] += 0.25 * a[..., 1:]
    odd[..., -1] += 0.25 * a[..., -1]
    out = np.empty(a.shape[:-1] + (2 * n,), dtype=a.dtype)
    out[..., 0::2] = even
    out[..., 1::2] = odd
    return np.moveaxis(out, -1, axis)


def _up1d_grad(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    dx = 0.75 * ge + 0.75 * go
    dx[..., 1:] += 0.25 * go[..., :-1]
    dx[..., :-1] += 0.25 * ge[..., 1:]
    dx[..., 0] += 0.25 * ge[..., 0]
    dx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(dx, -1, axis)


def upsample_bilinear2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H < 1 or W < 1:
        raise EngineError(f"upsample_bilinear2x: empty input {x.shape}")
    val = _up1d(_up1d(x.data, 2), 3)
    out = _make(val, (x,), "upsample_bilinear2x")
    if out.requires_grad:
        def bw():
            x.grad += _up1d_grad(_up1d_grad(out.grad, 3), 2)
        out._backward = bw
    return out
