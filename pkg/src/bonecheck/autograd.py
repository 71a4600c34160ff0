"""Dense tensors with reverse-mode automatic differentiation.

Everything here is numpy-backed. A Tensor produced by an op keeps
references to its parents and a closure that routes the incoming
gradient to them; ``backward`` walks that implicit graph in reverse
topological order. Image tensors use (batch, channel, height, width)
layout throughout.

Conventions pinned here (and in the tests):
  * convolution is cross-correlation, no kernel flip
  * ReLU subgradient at exactly 0 is 0
  * padding is zero-fill; average pooling counts padded zeros
  * float32 for training, float64 for gradient verification
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible; message names the offending axis."""


class KernelTooLargeError(ValueError):
    """Kernel extent exceeds the padded input."""


class RankError(ValueError):
    """Operand has the wrong number of dimensions."""


class NonScalarLossError(ValueError):
    """backward() was called on a tensor that is not a scalar."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """n-dimensional array of reals, optionally participating in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                arr = data
            else:
                arr = np.asarray(data, dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every grad-enabled tensor reachable from ``loss``.

    Grads of reachable tensors are reset first, so repeated calls give
    identical results.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} differ")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return Tensor._from_op(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: shapes {a.shape} and {b.shape} differ")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return Tensor._from_op(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} differ")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return Tensor._from_op(a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * c)

    return Tensor._from_op(a.data * c, (a,), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return Tensor._from_op(np.where(mask, a.data, 0), (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    z = a.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * out * (1.0 - out))

    return Tensor._from_op(out, (a,), back)


def log(a: Tensor) -> Tensor:
    def back(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return Tensor._from_op(np.log(a.data), (a,), back)


def tsum(a: Tensor) -> Tensor:
    def back(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, g.reshape(())[()]))

    return Tensor._from_op(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), back)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, g.reshape(())[()] / n))

    return Tensor._from_op(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        ref, cur = list(tensors[0].shape), list(t.shape)
        ref[axis] = cur[axis] = -1
        if ref != cur:
            raise ShapeMismatchError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis),
                           tuple(tensors), back)


def mean_tensors(tensors: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of same-shaped tensors (the ensemble averaging node)."""
    if not tensors:
        raise ValueError("mean_tensors: empty input")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeMismatchError(
                f"average: shapes {tensors[0].shape} and {t.shape} differ")
    k = len(tensors)

    def back(g):
        for t in tensors:
            if t.requires_grad:
                _accumulate(t, g / k)

    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out = out + t.data
    return Tensor._from_op(out / k, tuple(tensors), back)


# ---------------------------------------------------------------------------
# spatial ops

def _check_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise RankError(f"{op}: expected 4-D (N,C,H,W) input, got rank {x.ndim}")


def _out_hw(H: int, W: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise KernelTooLargeError(
            f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    return (Hp - kh) // stride + 1, (Wp - kw) // stride + 1


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; differentiable in all three operands."""
    _check_4d(x, "conv2d")
    N, Cin, H, W = x.shape
    Cout, Ck, kh, kw = kernel.shape
    if Ck != Cin:
        raise ShapeMismatchError(
            f"conv2d channel axis: input has {Cin} channels, kernel expects {Ck}")
    if bias.shape != (Cout,):
        raise ShapeMismatchError(
            f"conv2d bias axis: expected ({Cout},), got {bias.shape}")
    Ho, Wo = _out_hw(H, W, kh, kw, stride, padding)

    xp = _pad2d(x.data, padding)
    win = _windows(xp, kh, kw, stride)  # (N,Cin,Ho,Wo,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        N * Ho * Wo, Cin * kh * kw)
    Wm = kernel.data.reshape(Cout, -1)
    out = (cols @ Wm.T + bias.data).reshape(N, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def back(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Cout)
        if kernel.requires_grad:
            _accumulate(kernel, (gmat.T @ cols).reshape(kernel.shape))
        if bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=0))
        if x.requires_grad:
            gcols = (gmat @ Wm).reshape(N, Ho, Wo, Cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            Hp, Wp = H + 2 * padding, W + 2 * padding
            gxp = np.zeros((N, Cin, Hp, Wp), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + stride * Ho:stride,
                        v:v + stride * Wo:stride] += gcols[..., u, v]
            p = padding
            _accumulate(x, gxp[:, :, p:p + H, p:p + W] if p else gxp)

    return Tensor._from_op(np.ascontiguousarray(out), (x, kernel, bias), back)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution; kernel shape (C, 1, kh, kw)."""
    _check_4d(x, "depthwise_conv2d")
    N, C, H, W = x.shape
    Ck, one, kh, kw = kernel.shape
    if Ck != C or one != 1:
        raise ShapeMismatchError(
            f"depthwise channel axis: input has {C} channels, kernel is {kernel.shape}")
    if bias.shape != (C,):
        raise ShapeMismatchError(f"depthwise bias axis: expected ({C},), got {bias.shape}")
    Ho, Wo = _out_hw(H, W, kh, kw, stride, padding)

    xp = _pad2d(x.data, padding)
    win = _windows(xp, kh, kw, stride)  # (N,C,Ho,Wo,kh,kw)
    K = kernel.data[:, 0]  # (C,kh,kw)
    out = np.einsum("nchwuv,cuv->nchw", win, K) + bias.data[None, :, None, None]

    def back(g):
        if kernel.requires_grad:
            _accumulate(kernel, np.einsum("nchwuv,nchw->cuv", win, g)[:, None])
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            Hp, Wp = H + 2 * padding, W + 2 * padding
            gxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + stride * Ho:stride,
                        v:v + stride * Wo:stride] += g * K[None, :, u, v, None, None]
            p = padding
            _accumulate(x, gxp[:, :, p:p + H, p:p + W] if p else gxp)

    return Tensor._from_op(np.ascontiguousarray(out), (x, kernel, bias), back)


def depthwise_separable_conv2d(x: Tensor, depthwise_kernel: Tensor,
                               pointwise_kernel: Tensor,
                               depthwise_bias: Tensor, pointwise_bias: Tensor,
                               stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel conv followed by a 1x1 conv across channels."""
    mid = depthwise_conv2d(x, depthwise_kernel, depthwise_bias, stride, padding)
    return conv2d(mid, pointwise_kernel, pointwise_bias, 1, 0)


def avg_pool(x: Tensor, kernel_size: int, stride: int | None = None,
             padding: int = 0) -> Tensor:
    """Window mean per channel; padded zeros count toward the mean."""
    _check_4d(x, "avg_pool")
    k = kernel_size
    s = stride if stride is not None else k
    N, C, H, W = x.shape
    Ho, Wo = _out_hw(H, W, k, k, s, padding)
    xp = _pad2d(x.data, padding)
    win = _windows(xp, k, k, s)
    out = win.mean(axis=(4, 5))

    def back(g):
        if x.requires_grad:
            Hp, Wp = H + 2 * padding, W + 2 * padding
            gxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
            gshare = g / (k * k)
            for u in range(k):
                for v in range(k):
                    gxp[:, :, u:u + s * Ho:s, v:v + s * Wo:s] += gshare
            p = padding
            _accumulate(x, gxp[:, :, p:p + H, p:p + W] if p else gxp)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), back)


def max_pool(x: Tensor, kernel_size: int, stride: int | None = None,
             padding: int = 0) -> Tensor:
    _check_4d(x, "max_pool")
    k = kernel_size
    s = stride if stride is not None else k
    N, C, H, W = x.shape
    Ho, Wo = _out_hw(H, W, k, k, s, padding)
    xp = _pad2d(x.data, padding)
    win = _windows(xp, k, k, s).reshape(N, C, Ho, Wo, k * k)
    idx = win.argmax(axis=4)
    out = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]

    def back(g):
        if x.requires_grad:
            Hp, Wp = H + 2 * padding, W + 2 * padding
            gxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
            for u in range(k):
                for v in range(k):
                    mask = idx == (u * k + v)
                    gxp[:, :, u:u + s * Ho:s, v:v + s * Wo:s] += g * mask
            p = padding
            _accumulate(x, gxp[:, :, p:p + H, p:p + W] if p else gxp)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), back)


def global_average_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    _check_4d(x, "global_average_pool")
    N, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(
                g[:, :, None, None] / (H * W), x.shape).copy())

    return Tensor._from_op(out, (x,), back)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """(N,C) @ (C,M) + (M,)."""
    if x.ndim != 2:
        raise RankError(f"affine: expected 2-D input, got rank {x.ndim}")
    N, C = x.shape
    if weight.shape[0] != C:
        raise ShapeMismatchError(
            f"affine inner axis: input has {C} features, weight expects {weight.shape[0]}")
    M = weight.shape[1]
    if bias.shape != (M,):
        raise ShapeMismatchError(f"affine bias axis: expected ({M},), got {bias.shape}")
    out = x.data @ weight.data + bias.data

    def back(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, x.data.T @ g)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return Tensor._from_op(out, (x, weight, bias), back)


# ---------------------------------------------------------------------------
# verification

def finite_difference_check(f: Callable[[Tensor], Tensor],
                            point: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 regardless of the dtype handed in; f must map a
    Tensor to a scalar Tensor.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    p64 = np.asarray(point, dtype=np.float64)
    x = Tensor(p64.copy(), requires_grad=True, dtype=np.float64)
    loss = f(x)
    backward(loss)
    analytic = (x.grad if x.grad is not None else np.zeros_like(p64)).reshape(-1)

    flat = p64.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(p64.copy(), dtype=np.float64)).item()
        flat[i] = orig - eps
        fm = f(Tensor(p64.copy(), dtype=np.float64)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite perturbation result at coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        a = analytic[i]
        rel = abs(numeric - a) / max(abs(numeric), abs(a), 1e-8)
        worst = max(worst, rel)
    return worst
