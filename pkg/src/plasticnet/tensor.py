"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operations the models in this package need: linear and
matrix products, 2d cross-correlation, batch normalization, relu, max
pooling, flatten, broadcast add, and softmax cross-entropy. Arithmetic is
64-bit by default; 32-bit can be selected via ``set_default_dtype``.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError

_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise InputError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DTYPE = dt.type


def default_dtype():
    return _DTYPE


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A contiguous float array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # Gradients from shared subexpressions sum.
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from this tensor; each node visited once."""
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make_output(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make_output(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree ({a.shape} x {b.shape})")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make_output(data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + b`` with weight rows owned by output neurons."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError(f"linear expects 2d operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: fan-in mismatch ({x.shape[1]} vs {w.shape[1]})")
    data = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        data = data + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make_output(data, parents, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2d cross-correlation over NCHW input with OIHW kernels."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4d operands, got {x.shape} and {w.shape}")
    n, c_in, h, wid = x.shape
    c_out, c_k, kh, kw = w.shape
    if c_k != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, kernel expects {c_k}")
    if kh > h + 2 * padding or kw > wid + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wid + 2 * padding}")
    if stride < 1:
        raise InputError(f"conv2d: stride must be >= 1, got {stride}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = win.shape[2], win.shape[3]
    data = np.einsum("nchwij,ocij->nohw", win, w.data)
    if b is not None:
        if b.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({c_out},)")
        data = data + b.data[None, :, None, None]

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.einsum("nohw,nchwij->ocij", g, win))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros((n, c_in, h + 2 * padding, wid + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                        np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j])
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wid]
            x._accumulate(gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make_output(data, parents, backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _make_output(data, (x,), backward)


def maxpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide by the kernel."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4d input, got {x.shape}")
    n, c, h, w = x.shape
    if h < kernel or w < kernel or h % kernel or w % kernel:
        raise DimensionError(f"maxpool2d: {h}x{w} not tileable by {kernel}x{kernel}")
    ho, wo = h // kernel, w // kernel
    tiles = x.data.reshape(n, c, ho, kernel, wo, kernel)
    tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel)
    idx = tiles.argmax(axis=-1)
    data = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if x.requires_grad:
            gt = np.zeros_like(tiles)
            np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
            gt = gt.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
            x._accumulate(gt.reshape(n, c, h, w))

    return _make_output(data, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    n = x.shape[0]
    data = x.data.reshape(n, -1)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _make_output(data, (x,), backward)


def _channel_axes(x: Tensor) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.data.ndim == 2:
        return (0,), (1, x.shape[1])
    if x.data.ndim == 4:
        return (0, 2, 3), (1, x.shape[1], 1, 1)
    raise DimensionError(f"batchnorm expects 2d or 4d input, got {x.shape}")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization with learnable affine parameters.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place; eval mode uses the buffers.
    The epsilon keeps zero-variance channels finite.
    """
    axes, bshape = _channel_axes(x)
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"batchnorm: affine shapes {gamma.shape}/{beta.shape} != ({channels},)")
    m = x.data.size // channels

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    data = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = gxhat.sum(axis=axes).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv_std.reshape(bshape) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(bshape)
            x._accumulate(gx)

    return _make_output(data, (x, gamma, beta), backward)


def weighted_sum(x: Tensor, coeffs: np.ndarray) -> Tensor:
    """Scalar projection sum(x * coeffs); used to reduce outputs for checks."""
    coeffs = np.asarray(coeffs, dtype=x.data.dtype)
    if coeffs.shape != x.shape:
        raise DimensionError(f"weighted_sum: coeffs shape {coeffs.shape} != {x.shape}")
    data = np.array((x.data * coeffs).sum())

    def backward(g):
        if x.requires_grad:
            x._accumulate(float(g.reshape(-1)[0]) * coeffs)

    return _make_output(data, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          sample_weights: np.ndarray | None = None) -> Tensor:
    """Mean (or weighted mean) negative log softmax at the label index.

    Weighted samples behave exactly like duplicated samples: the loss is
    normalized by the total weight, so the gradient for sample i is
    ``(softmax_i - onehot_i) * w_i / sum(w)``.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects 2d logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise InputError(f"labels must lie in [0, {k})")
    if sample_weights is None:
        wn = np.full(n, 1.0 / n, dtype=logits.data.dtype)
    else:
        sample_weights = np.asarray(sample_weights, dtype=logits.data.dtype)
        if sample_weights.shape != (n,):
            raise DimensionError(f"sample_weights shape {sample_weights.shape} != ({n},)")
        wn = sample_weights / sample_weights.sum()

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    data = np.array(-(wn * logp[rows, labels]).sum())

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[rows, labels] -= 1.0
            logits._accumulate(float(g.reshape(-1)[0]) * wn[:, None] * p)

    return _make_output(data, (logits,), backward)
