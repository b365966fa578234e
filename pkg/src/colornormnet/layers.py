"""Forward and backward passes for the layers ColorNormNet is built from.

Every function here is dtype-generic: the model trains in float32 while the
gradient checker re-runs the same code in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels as K
from .errors import DegenerateBatchError, NonFiniteError, ShapeMismatchError
from .tensor_core import Rng

LRELU_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ConvParams:
    weights: np.ndarray  # (out_ch, in_ch, k, k)
    bias: np.ndarray  # (out_ch,)
    dilation: int = 1

    def __post_init__(self):
        o, _, kh, kw = self.weights.shape
        if kh != kw or kh % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.bias.shape != (o,):
            raise ShapeMismatchError(f"bias shape {self.bias.shape} does not match {o} output channels")

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @property
    def in_ch(self) -> int:
        return self.weights.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weights.shape[0]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


@dataclass
class BatchNormCache:
    mode: str
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    rect: tuple | None = None
    full_shape: tuple | None = None


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


# -- convolution --------------------------------------------------------------

def _check_conv_input(x: np.ndarray, p: ConvParams):
    if x.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects (N,C,H,W) input, got shape {x.shape}")
    if x.shape[1] != p.in_ch:
        raise ShapeMismatchError(f"conv2d: input has {x.shape[1]} channels, kernel expects {p.in_ch}")


def pad_planes(x: np.ndarray, border: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (border, border), (border, border)))


def zero_outside(buf: np.ndarray, rect, c0: int = 0, c1: int | None = None) -> None:
    """Zero buf[:, c0:c1] outside rows [y0, y1) x cols [x0, x1)."""
    y0, y1, x0, x1 = rect
    v = buf[:, c0:c1]
    v[:, :, :y0] = 0
    v[:, :, y1:] = 0
    v[:, :, y0:y1, :x0] = 0
    v[:, :, y0:y1, x1:] = 0


def conv_into(xbuf: np.ndarray, n_in: int, p: ConvParams, out: np.ndarray, c0: int, rect) -> None:
    """Convolve xbuf[:, :n_in] into out[:, c0:c0+O] on zero-bordered buffers.

    The frame around ``rect`` must be at least dilation*(k-1)/2 wide and
    zero in ``xbuf``; it is zeroed in the output.
    """
    dt = xbuf.dtype
    K.conv_forward(K.flat(xbuf), n_in, p.weights.astype(dt, copy=False), p.bias.astype(dt, copy=False),
                   p.dilation, xbuf.shape[3], K.flat(out), c0)
    zero_outside(out, rect, c0, c0 + p.out_ch)


def conv_backward_into(xbuf: np.ndarray, p: ConvParams, gbuf: np.ndarray, g0: int, gx: np.ndarray, rect):
    """Accumulate the input gradient into gx[:, :in_ch]; return (grad_w, grad_b).

    gbuf[:, g0:g0+O] must be zero outside ``rect``.
    """
    dt = xbuf.dtype
    w = np.ascontiguousarray(p.weights, dtype=dt)
    grad_w = np.empty(p.weights.shape, dtype=dt)
    K.conv_backward_input(K.flat(gbuf), g0, w, p.dilation, xbuf.shape[3], K.flat(gx))
    zero_outside(gx, rect, 0, p.in_ch)
    K.conv_backward_weights(K.flat(xbuf), K.flat(gbuf), g0, p.dilation, xbuf.shape[3], grad_w)
    grad_b = gbuf[:, g0:g0 + p.out_ch].sum(axis=(0, 2, 3))
    return grad_w, grad_b


def _interior(h: int, w: int, border: int):
    return (border, border + h, border, border + w)


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Dilated same-padding convolution; output keeps the input's H and W."""
    _check_conv_input(x, p)
    n, _, h, w = x.shape
    border = p.dilation * (p.k - 1) // 2
    xp = pad_planes(x, border)
    out = np.empty((n, p.out_ch) + xp.shape[2:], dtype=x.dtype)
    conv_into(xp, p.in_ch, p, out, 0, _interior(h, w, border))
    return out[:, :, border:border + h, border:border + w].copy()


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Returns (grad_input, grad_weights, grad_bias)."""
    _check_conv_input(x, p)
    n, _, h, w = x.shape
    if grad_out.shape != (n, p.out_ch, h, w):
        raise ShapeMismatchError(
            f"conv2d_backward: grad_out shape {grad_out.shape} != output shape {(n, p.out_ch, h, w)}")
    border = p.dilation * (p.k - 1) // 2
    xp = pad_planes(x, border)
    gp = pad_planes(grad_out.astype(x.dtype, copy=False), border)
    gx = np.zeros_like(xp)
    grad_w, grad_b = conv_backward_into(xp, p, gp, 0, gx, _interior(h, w, border))
    return gx[:, :, border:border + h, border:border + w].copy(), grad_w, grad_b


# -- batch normalization ------------------------------------------------------

def _view(x: np.ndarray, rect):
    if rect is None:
        return x
    y0, y1, x0, x1 = rect
    return x[:, :, y0:y1, x0:x1]


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, mode: str = "train", rect=None):
    """Per-channel normalization. Train mode updates the running statistics in place.

    With ``rect`` the statistics and output cover only that window of a
    zero-bordered buffer; everything outside it comes back as zero.
    """
    dt = x.dtype
    xi = _view(x, rect)
    gamma = p.gamma.astype(dt, copy=False)
    beta = p.beta.astype(dt, copy=False)
    if mode == "train":
        count = xi.shape[0] * xi.shape[2] * xi.shape[3]
        if count < 2:
            raise DegenerateBatchError(
                f"batchnorm in train mode needs >= 2 values per channel, got {count}")
        mean = xi.mean(axis=(0, 2, 3))
        var = xi.var(axis=(0, 2, 3))
        mom = p.momentum
        p.running_mean[...] = (1 - mom) * p.running_mean + mom * mean
        p.running_var[...] = (1 - mom) * p.running_var + mom * var
    elif mode == "infer":
        mean = p.running_mean.astype(dt, copy=False)
        var = p.running_var.astype(dt, copy=False)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + dt.type(p.eps))).astype(dt)
    xhat = (xi - mean[None, :, None, None]) * inv_std[None, :, None, None]
    res = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    if rect is None:
        out = res
    else:
        out = np.zeros_like(x)
        _view(out, rect)[...] = res
    return out, BatchNormCache(mode, xhat, inv_std, gamma, rect, x.shape)


def batchnorm_backward(cache: BatchNormCache, grad_out: np.ndarray):
    """Returns (grad_input, grad_gamma, grad_beta)."""
    if cache.mode != "train":
        raise ValueError("batchnorm backward is only defined for train-mode caches")
    if grad_out.shape != cache.full_shape:
        raise ShapeMismatchError(
            f"batchnorm_backward: grad_out {grad_out.shape} != input {cache.full_shape}")
    g = _view(grad_out, cache.rect)
    xhat = cache.xhat
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    grad_beta = g.sum(axis=(0, 2, 3))
    grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
    dxhat_sum = (grad_beta * cache.gamma)[None, :, None, None]
    dxhat_dot = (grad_gamma * cache.gamma)[None, :, None, None]
    dxhat = g * cache.gamma[None, :, None, None]
    scale = (cache.inv_std / m)[None, :, None, None]
    res = scale * (m * dxhat - dxhat_sum - xhat * dxhat_dot)
    if cache.rect is None:
        return res, grad_gamma, grad_beta
    grad_x = np.zeros(cache.full_shape, dtype=res.dtype)
    _view(grad_x, cache.rect)[...] = res
    return grad_x, grad_gamma, grad_beta


# -- pointwise and structural ops ----------------------------------------------

def leaky_relu(x: np.ndarray, slope: float = LRELU_SLOPE) -> np.ndarray:
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    K.lrelu(x, x.dtype.type(slope), out)
    return out


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float = LRELU_SLOPE) -> np.ndarray:
    # derivative at exactly 0 is taken as 1
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(grad_out, dtype=x.dtype)
    out = np.empty_like(x)
    K.lrelu_backward(x, g, x.dtype.type(slope), out)
    return out


def concat_channels(tensors: list[np.ndarray]) -> np.ndarray:
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeMismatchError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    if len(tensors) == 1:
        return tensors[0]
    return np.concatenate(tensors, axis=1)


def split_channels(grad: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Backward of concat_channels: slice the channel axis back into pieces."""
    if sum(sizes) != grad.shape[1]:
        raise ShapeMismatchError(f"split sizes {sizes} do not sum to {grad.shape[1]} channels")
    return np.split(grad, np.cumsum(sizes)[:-1], axis=1)


# -- loss and optimizer --------------------------------------------------------

def loss_l1l2(pred: np.ndarray, target: np.ndarray, lam: float = 0.1):
    """mean|d| + lam * mean(d^2) with d = pred - target; returns (loss, grad_pred)."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"loss: pred shape {pred.shape} != target shape {target.shape}")
    d = pred - target
    count = d.size
    loss = float(np.abs(d).mean(dtype=np.float64) + lam * np.square(d, dtype=np.float64).mean())
    grad = (np.sign(d) + d.dtype.type(2 * lam) * d) / d.dtype.type(count)
    return loss, grad


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update applied to ``params`` in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeMismatchError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        dt = p.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * g * g
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p -= dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))


# -- finite-difference verification ---------------------------------------------

def rel_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def gradient_check(
    forward: Callable[[dict], np.ndarray],
    backward: Callable[[dict, np.ndarray], dict],
    inputs: dict,
    rng: Rng,
    h: float = 1e-3,
    coords: int = 200,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar probed is <forward(inputs), v> for a fixed random v, so a layer
    only has to expose forward and a vector-Jacobian backward. All arithmetic
    is float64. Returns the worst error over ``coords`` sampled coordinates
    spread across every named input.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out = forward(inputs)
    probe = rng.uniform_array(out.size, -1.0, 1.0).reshape(out.shape)
    analytic = backward(inputs, probe)

    names = sorted(inputs)
    sizes = np.array([inputs[k].size for k in names])
    total = int(sizes.sum())
    picks = rng.u64_array(min(coords, total)) % np.uint64(total) if total > coords else np.arange(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in np.asarray(picks, dtype=np.int64):
        idx = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[idx]
        local = int(flat - offsets[idx])
        arr = inputs[name].reshape(-1)
        saved = arr[local]
        arr[local] = saved + h
        fp = float(np.sum(forward(inputs) * probe))
        arr[local] = saved - h
        fm = float(np.sum(forward(inputs) * probe))
        arr[local] = saved
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, float(rel_error(analytic[name].reshape(-1)[local], numeric)))
    return worst
