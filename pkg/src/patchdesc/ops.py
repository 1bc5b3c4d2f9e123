"""Differentiable numpy layers for the descriptor network.

Every layer keeps the activations its backward pass needs when called with
``train=True``; ``backward`` then returns the gradient w.r.t. the layer input
and accumulates parameter gradients into the attached ``ParamBuffer``.
Tensors are plain numpy arrays in NCHW layout; float32 is the training
precision, float64 is used for gradient checking.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class NumericsError(ArithmeticError):
    """Raised when NaN/Inf shows up where finite values are required."""


class DegenerateInputError(ValueError):
    """Raised for inputs the math cannot handle (zero-norm row, batch of 1)."""


def require_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")


class ParamBuffer:
    """A trainable array with its gradient and momentum state.

    ``grad`` is only ever cleared by :meth:`zero_grad`; backward passes
    accumulate into it.
    """

    def __init__(self, value: np.ndarray, name: str = "", weight_decay_exempt: bool = False):
        self.value = value
        self.grad = np.zeros_like(value)
        self.velocity = np.zeros_like(value)
        self.name = name
        self.weight_decay_exempt = weight_decay_exempt

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def sgd_step(params, lr: float, momentum: float, weight_decay: float) -> None:
    """Classical momentum update: v <- mu*v + (g + wd*w); w <- w - lr*v."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericsError(f"NaN/Inf gradient in parameter '{p.name}'")
        g = p.grad
        if weight_decay != 0.0 and not p.weight_decay_exempt:
            g = g + weight_decay * p.value
        p.velocity *= momentum
        p.velocity += g
        p.value -= lr * p.velocity


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Unfold padded input into (N, C*kh*kw, oh*ow) patch columns."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols: np.ndarray, n: int, c: int, hp: int, wp: int,
            kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add patch-column gradients back onto the padded input."""
    g6 = gcols.reshape(n, c, kh, kw, oh, ow)
    xg = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            xg[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g6[:, :, i, j]
    return xg


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlate x (N,C,H,W) with kernels w (F,C,kh,kw), zero padding."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(f"conv2d needs rank-4 input and weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeMismatchError(f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeMismatchError(f"kernel {w.shape} does not fit padded input {x.shape} (pad={pad})")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = np.matmul(w.reshape(f, -1), cols)
    return out.reshape(n, f, oh, ow)


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray,
                    stride: int, pad: int):
    """Gradients of conv2d_forward w.r.t. input and weights."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    _, _, oh, ow = grad_out.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    g = grad_out.reshape(n, f, oh * ow)
    grad_w = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    gcols = np.matmul(w.reshape(f, -1).T, g)
    gxp = _col2im(gcols, n, c, h + 2 * pad, wd + 2 * pad, kh, kw, stride, oh, ow)
    grad_x = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return grad_x, grad_w


class Conv2d:
    """Convolution layer with no bias (a BN layer always follows)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int, pad: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "conv"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        fan_in = in_channels * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        init = rng.uniform(-bound, bound, (out_channels, in_channels, kernel, kernel))
        self.weight = ParamBuffer(init.astype(dtype), name=name)
        self._x = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        out = conv2d_forward(x, self.weight.value, self.stride, self.pad)
        self._x = x if train else None
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("conv backward called without a train-mode forward")
        grad_x, grad_w = conv2d_backward(self._x, self.weight.value, grad_out,
                                         self.stride, self.pad)
        self.weight.grad += grad_w
        return grad_x

    def out_size(self, size: int) -> int:
        return (size + 2 * self.pad - self.kernel) // self.stride + 1


# ---------------------------------------------------------------------------
# batch normalization


class BatchNorm2d:
    """Per-channel batch normalization without learned affine parameters.

    Train mode normalizes by batch statistics and updates the running
    statistics; eval mode normalizes by the running statistics only.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None
        self.batch_mean = None
        self.batch_var = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatchError(
                f"batch_norm expects (N,{self.channels},H,W), got {x.shape}")
        if train:
            if x.shape[0] < 2:
                raise DegenerateInputError(
                    "batch_norm train mode needs batch >= 2 (zero-variance hazard)")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.batch_mean = mean
            self.batch_var = var
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std) if train else None
        return xhat

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("batch_norm backward called without a train-mode forward")
        xhat, inv_std = self._cache
        n_eff = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        sum_g = grad_out.sum(axis=(0, 2, 3))
        sum_gx = (grad_out * xhat).sum(axis=(0, 2, 3))
        grad_x = (inv_std[None, :, None, None] / n_eff) * (
            n_eff * grad_out
            - sum_g[None, :, None, None]
            - xhat * sum_gx[None, :, None, None]
        )
        return grad_x


# ---------------------------------------------------------------------------
# pointwise layers


class ReLU:
    def __init__(self):
        self._mask = None
        self.last_input = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        out = np.maximum(x, 0)
        if train:
            self._mask = x > 0
            self.last_input = x
        else:
            self._mask = None
            self.last_input = None
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise RuntimeError("relu backward called without a train-mode forward")
        return grad_out * self._mask


class Dropout:
    """Inverted dropout: scales kept units by 1/(1-rate) so eval is identity."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self._scaled_mask = None

    def forward(self, x: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if not train or self.rate == 0.0:
            self._scaled_mask = np.asarray(1.0, dtype=x.dtype) if train else None
            return x
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        keep = rng.random(x.shape) >= self.rate
        self._scaled_mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._scaled_mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._scaled_mask is None:
            raise RuntimeError("dropout backward called without a train-mode forward")
        return grad_out * self._scaled_mask


class Flatten:
    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out.reshape(self._shape)


class UnitNormRows:
    """Divide every row of an (N,d) matrix by its Euclidean norm."""

    def __init__(self, eps: float = 1e-12):
        self.eps = eps
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 2:
            raise ShapeMismatchError(f"l2_normalize_rows expects (N,d), got {x.shape}")
        norms = np.sqrt((x * x).sum(axis=1))
        if np.any(norms <= self.eps):
            raise DegenerateInputError("zero-norm row: degenerate descriptor")
        inv = 1.0 / norms
        y = x * inv[:, None]
        self._cache = (y, inv) if train else None
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("l2_normalize backward called without a train-mode forward")
        y, inv = self._cache
        dot = (grad_out * y).sum(axis=1)
        return (grad_out - y * dot[:, None]) * inv[:, None]


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Functional form of row normalization (no gradient caching)."""
    return UnitNormRows().forward(x)


# ---------------------------------------------------------------------------
# matrix product A @ B^T


def matmul_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product A (N,d) x B^T for B (M,d), yielding (N,M)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f"matmul_nt inner dims differ: {a.shape} vs {b.shape}")
    return a @ b.T


def matmul_nt_backward(grad_out: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of matmul_nt w.r.t. both factors."""
    return grad_out @ b, grad_out.T @ a
