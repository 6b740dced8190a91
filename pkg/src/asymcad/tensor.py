"""Minimal dense tensor engine with reverse-mode differentiation.

Everything is 64-bit float and runs on numpy. The computation graph is a
flat tape of Tensor nodes; calling :func:`backward` on a scalar loss walks
the tape in reverse topological order and accumulates gradients into the
``grad`` slot of every parameter that contributed to it.
"""

from __future__ import annotations

import math

import numpy as np


class TensorError(Exception):
    pass


class DimensionError(TensorError):
    pass


class NumericError(TensorError):
    pass


class StateError(TensorError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")
    return arr


class Tensor:
    """N-d float64 array with an optional gradient buffer.

    ``parents`` and ``_backward`` record how the value was produced so the
    chain rule can be replayed in reverse.
    """

    __slots__ = ("data", "grad", "parents", "_backward", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray promotes 0-d to 1-d; keep scalar shapes intact
        self.data = np.ascontiguousarray(arr).reshape(arr.shape)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss, filling grad slots."""
    if loss.data.size != 1:
        raise DimensionError("backward expects a scalar loss")
    if not loss.parents and loss._backward is None and not loss.requires_grad:
        raise StateError("backward called on a node with no recorded computation")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_toposort(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            _check_finite(node.grad, "gradient")


# ---------------------------------------------------------------------------
# im2col helpers for valid-mode cross-correlation


def _im2col(x: np.ndarray, k: int, stride: int):
    c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s0, s1, s2 = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(c, k, k, ho, wo),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
    )
    return cols.reshape(c * k * k, ho * wo), ho, wo


def _col2im(cols: np.ndarray, shape, k: int, stride: int) -> np.ndarray:
    c, h, w = shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.zeros((c, h, w))
    cols = cols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, i : i + ho * stride : stride, j : j + wo * stride : stride] += cols[:, i, j]
    return out


def conv2d_forward(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of a [C,H,W] input with [K,C,k,k] kernels."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError("conv2d expects [C,H,W] input and [K,C,k,k] kernels")
    c, h, w = x.data.shape
    nk, kc, kh, kw = kernels.data.shape
    if kc != c or kh != kw:
        raise DimensionError(f"kernel shape {kernels.data.shape} incompatible with input {x.data.shape}")
    if h < kh or w < kw:
        raise DimensionError("kernel larger than input")
    if bias.data.shape != (nk,):
        raise DimensionError("bias must have one entry per kernel")
    _check_finite(x.data, "conv input")
    k = kh
    cols, ho, wo = _im2col(x.data, k, stride)
    wmat = kernels.data.reshape(nk, c * k * k)
    out = (wmat @ cols).reshape(nk, ho, wo) + bias.data[:, None, None]
    _check_finite(out, "conv output")

    def bwd(g: np.ndarray) -> None:
        gmat = g.reshape(nk, ho * wo)
        if kernels.requires_grad:
            kernels._accumulate((gmat @ cols.T).reshape(nk, c, k, k))
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=1))
        if x.requires_grad:
            x._accumulate(_col2im(wmat.T @ gmat, (c, h, w), k, stride))

    return Tensor(out, parents=(x, kernels, bias), backward=bwd)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    neg = x.data <= 0
    out = x.data.copy()
    out[neg] = alpha * np.expm1(x.data[neg])

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.array(g, dtype=np.float64)
            gx[neg] *= alpha * np.exp(x.data[neg])
            x._accumulate(gx)

    return Tensor(out, parents=(x,), backward=bwd)


def maxpool(x: Tensor, window: int, stride: int) -> Tensor:
    """Per-window max; gradient routes to the first (row-major) argmax."""
    if x.data.ndim != 3:
        raise DimensionError("maxpool expects a [C,H,W] tensor")
    c, h, w = x.data.shape
    if window > h or window > w:
        raise DimensionError("pool window larger than input")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    s0, s1, s2 = x.data.strides
    win = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(c, ho, wo, window, window),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
    ).reshape(c, ho, wo, window * window)
    arg = win.argmax(axis=3)  # argmax takes the first max in row-major order
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]

    def bwd(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        ci, hi, wi = np.meshgrid(np.arange(c), np.arange(ho), np.arange(wo), indexing="ij")
        rows = hi * stride + arg // window
        cols = wi * stride + arg % window
        np.add.at(gx, (ci, rows, cols), g)
        x._accumulate(gx)

    return Tensor(out, parents=(x,), backward=bwd)


def dense_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 1 or weight.data.ndim != 2:
        raise DimensionError("dense expects vector input and matrix weight")
    m, n = weight.data.shape
    if x.data.shape != (n,) or bias.data.shape != (m,):
        raise DimensionError(
            f"dense shapes disagree: weight {weight.data.shape}, input {x.data.shape}, bias {bias.data.shape}"
        )
    out = weight.data @ x.data + bias.data
    _check_finite(out, "dense output")

    def bwd(g: np.ndarray) -> None:
        if weight.requires_grad:
            weight._accumulate(np.outer(g, x.data))
        if bias.requires_grad:
            bias._accumulate(g)
        if x.requires_grad:
            x._accumulate(weight.data.T @ g)

    return Tensor(out, parents=(x, weight, bias), backward=bwd)


def softmax(logits: Tensor) -> Tensor:
    _check_finite(logits.data, "softmax logits")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    p = e / e.sum()

    def bwd(g: np.ndarray) -> None:
        if logits.requires_grad:
            logits._accumulate(p * (g - np.dot(g, p)))

    return Tensor(p, parents=(logits,), backward=bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * out * (1.0 - out))

    return Tensor(out, parents=(x,), backward=bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; rng=None means evaluation mode (identity)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0,1)")
    if rng is None or rate == 0.0:
        mask = np.ones_like(x.data)
    else:
        mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = x.data * mask

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * mask)

    return Tensor(out, parents=(x,), backward=bwd)


def flatten(x: Tensor) -> Tensor:
    shape = x.data.shape
    out = x.data.reshape(-1)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g.reshape(shape))

    return Tensor(out, parents=(x,), backward=bwd)


def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError("concat expects flat vectors")
    na = a.data.shape[0]
    out = np.concatenate([a.data, b.data])

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g[:na])
        if b.requires_grad:
            b._accumulate(g[na:])

    return Tensor(out, parents=(a, b), backward=bwd)


def tsum(x: Tensor) -> Tensor:
    out = np.array(x.data.sum())

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(g)))

    return Tensor(out, parents=(x,), backward=bwd)


def cross_entropy(probs: Tensor, label: int, eps: float = 1e-12) -> Tensor:
    """Negative log-likelihood of the true class under a probability vector."""
    p = max(float(probs.data[label]), eps)
    out = np.array(-math.log(p))

    def bwd(g: np.ndarray) -> None:
        if probs.requires_grad:
            gp = np.zeros_like(probs.data)
            gp[label] = -float(g) / p
            probs._accumulate(gp)

    return Tensor(out, parents=(probs,), backward=bwd)


# ---------------------------------------------------------------------------
# initialization and optimization


def truncated_he_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, 2/fan_in) redrawn until within two standard deviations."""
    std = math.sqrt(2.0 / fan_in)
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


BIAS_INIT = 0.001


def sgd_step(params: list[Tensor], lr: float, l2: float = 0.0) -> None:
    """w <- w - lr * (grad + l2 * w), in place; missing grads are treated as zero."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    for p in params:
        g = p.grad if p.grad is not None else 0.0
        p.data = p.data - lr * (g + l2 * p.data)
