"""Forward/backward primitives on NHWC numpy arrays.

Every differentiable op comes as a pair ``op(...)`` / ``op_backward(dout, ...)``.
Backward functions return cotangents in the order of the forward inputs.
Filters are stored ``(L, L, C_in, C_out)`` and convolution is cross-correlation
with zero padding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


# ---------------------------------------------------------------- convolution

def _out_size(size: int, L: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - L) // stride + 1


def _check_conv(x: np.ndarray, f: np.ndarray, stride: int, pad: int) -> None:
    if x.ndim != 4 or f.ndim != 4:
        raise ConfigError(f"conv2d expects 4-d input and filter, got {x.shape} and {f.shape}")
    L = f.shape[0]
    if f.shape[1] != L:
        raise ConfigError(f"filter must be square, got {f.shape}")
    if f.shape[2] != x.shape[3]:
        raise ConfigError(f"filter expects {f.shape[2]} input channels, input has {x.shape[3]}")
    if stride < 1 or pad < 0:
        raise ConfigError("stride must be positive and pad non-negative")
    if x.shape[1] + 2 * pad < L or x.shape[2] + 2 * pad < L:
        raise ConfigError(f"input {x.shape[1:3]} with pad {pad} is smaller than the {L}x{L} filter")


def _im2col(x: np.ndarray, L: int, stride: int, pad: int) -> np.ndarray:
    """Patches as an (N, H', W', L, L, C) array (a copy)."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (L, L), axis=(1, 2))  # N, H-L+1, W-L+1, C, L, L
    win = win[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv2d(x: np.ndarray, f: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    _check_conv(x, f, stride, pad)
    L, _, cin, cout = f.shape
    if L == 1:
        xs = x[:, ::stride, ::stride, :] if stride > 1 else x
        out = xs @ f[0, 0]
    else:
        cols = _im2col(x, L, stride, pad)
        n, ho, wo = cols.shape[:3]
        out = (cols.reshape(-1, L * L * cin) @ f.reshape(L * L * cin, cout)).reshape(n, ho, wo, cout)
    return check_finite(out, "conv2d output")


def conv2d_backward(dout: np.ndarray, x: np.ndarray, f: np.ndarray, stride: int = 1,
                    pad: int = 0, need_dx: bool = True, need_df: bool = True):
    L, _, cin, cout = f.shape
    n, ho, wo, _ = dout.shape
    dx = df = None
    if L == 1 and pad == 0:
        xs = x[:, ::stride, ::stride, :][:, :ho, :wo] if stride > 1 else x
        if need_df:
            df = (xs.reshape(-1, cin).T @ dout.reshape(-1, cout)).reshape(1, 1, cin, cout)
        if need_dx:
            dxs = dout @ f[0, 0].T
            if stride > 1:
                dx = np.zeros_like(x)
                dx[:, ::stride, ::stride, :][:, :ho, :wo] = dxs
            else:
                dx = dxs
        return dx, df
    dflat = dout.reshape(-1, cout)
    if need_df:
        cols = _im2col(x, L, stride, pad)
        df = (cols.reshape(-1, L * L * cin).T @ dflat).reshape(L, L, cin, cout)
    if need_dx and stride == 1 and pad <= L - 1:
        # stride-1 input gradient is a full correlation with the flipped, transposed bank
        frot = np.ascontiguousarray(f[::-1, ::-1].transpose(0, 1, 3, 2))
        dx = conv2d(dout, frot, 1, L - 1 - pad)
    elif need_dx:
        dcols = (dflat @ f.reshape(L * L * cin, cout).T).reshape(n, ho, wo, L, L, cin)
        H, W = x.shape[1], x.shape[2]
        dxp = np.zeros((n, H + 2 * pad, W + 2 * pad, cin), dtype=dout.dtype)
        for v in range(L):
            for u in range(L):
                dxp[:, v:v + stride * ho:stride, u:u + stride * wo:stride, :] += dcols[:, :, :, v, u, :]
        dx = dxp[:, pad:pad + H, pad:pad + W, :]
    return dx, df


def conv1x1(x: np.ndarray, A: np.ndarray, stride: int = 1) -> np.ndarray:
    if A.ndim != 2 or A.shape[0] != x.shape[-1]:
        raise ConfigError(f"1x1 map of shape {A.shape} does not fit {x.shape[-1]} input channels")
    return conv2d(x, A[None, None], stride=stride, pad=0)


def conv1x1_backward(dout: np.ndarray, x: np.ndarray, A: np.ndarray, stride: int = 1,
                     need_dx: bool = True, need_dA: bool = True):
    dx, df = conv2d_backward(dout, x, A[None, None], stride, 0, need_dx, need_dA)
    return dx, (df[0, 0] if df is not None else None)


# ---------------------------------------------------------- batch normalization

@dataclass
class BatchNormState:
    scale: np.ndarray
    bias: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.scale.copy(), self.bias.copy(), self.running_mean.copy(),
                              self.running_var.copy(), self.eps, self.momentum)


def batch_norm(x: np.ndarray, state: BatchNormState, train: bool):
    """Returns ``(out, cache)``; in train mode the running statistics are updated in place."""
    c = x.shape[-1]
    if state.scale.shape != (c,):
        raise ConfigError(f"batch norm has {state.scale.shape[0]} channels, input has {c}")
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // c
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean *= 1 - state.momentum
        state.running_mean += state.momentum * mean
        state.running_var *= 1 - state.momentum
        state.running_var += state.momentum * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean) * inv_std
    out = xhat * state.scale + state.bias
    return check_finite(out, "batch_norm output"), (xhat, inv_std, state.scale, train)


def batch_norm_backward(dout: np.ndarray, cache):
    xhat, inv_std, scale, train = cache
    axes = tuple(range(dout.ndim - 1))
    dbias = dout.sum(axis=axes)
    dscale = (dout * xhat).sum(axis=axes)
    dxhat = dout * scale
    if train:
        m = dout.size // dout.shape[-1]
        dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    else:
        dx = dxhat * inv_std
    return dx, dscale, dbias


# ------------------------------------------------------------------- pooling

def pool(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "avg2x2":
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"avg2x2 pooling needs even spatial extent, got {h}x{w}")
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
    if kind == "global_avg":
        return x.mean(axis=(1, 2))
    raise ConfigError(f"unknown pooling kind {kind!r}")


def pool_backward(dout: np.ndarray, x_shape, kind: str) -> np.ndarray:
    n, h, w, c = x_shape
    if kind == "avg2x2":
        d = np.broadcast_to(dout[:, :, None, :, None, :] * 0.25, (n, h // 2, 2, w // 2, 2, c))
        return d.reshape(n, h, w, c)
    if kind == "global_avg":
        return np.broadcast_to(dout[:, None, None, :] / (h * w), x_shape).copy()
    raise ConfigError(f"unknown pooling kind {kind!r}")


# ----------------------------------------------------------------- pointwise

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def dropout(x: np.ndarray, p: float, rng, train: bool):
    """Inverted dropout. ``rng`` is a :class:`~resadapt.rng.CounterRNG`; returns ``(out, mask)``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, None
    mask = rng.bernoulli_keep(x.shape, 1.0 - p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask) -> np.ndarray:
    return dout if mask is None else dout * mask


def pointwise(x: np.ndarray, kind: str, p: float = 0.0, rng=None, train: bool = True) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "dropout":
        return dropout(x, p, rng, train)[0]
    raise ConfigError(f"unknown pointwise kind {kind!r}")


# ----------------------------------------------------------- classifier head

def classifier_head(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, labels=None):
    """Linear layer + mean softmax cross-entropy. Returns ``(logits, loss, cache)``."""
    logits = x @ weight + bias
    if labels is None:
        return logits, None, None
    labels = np.asarray(labels)
    k = weight.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = x.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    if not np.isfinite(loss):
        raise NumericError("classifier loss is not finite")
    return logits, loss, (x, weight, np.exp(logp), labels)


def classifier_head_backward(cache, scale: float = 1.0):
    x, weight, probs, labels = cache
    n = x.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= scale / n
    return dlogits @ weight.T, x.T @ dlogits, dlogits.sum(axis=0)


# ----------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


def sgd_step(params: dict, grads: dict, opt: OptimizerState) -> dict:
    """``v <- mu v + g + wd p``; ``p <- p - lr v``.  Updates ``params`` in place.

    ``opt.weight_decay`` maps parameter names to their decay; missing names use 0.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        wd = opt.weight_decay.get(name, 0.0)
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(p)
        v *= opt.momentum
        v += g
        if wd:
            v += wd * p
        p -= opt.learning_rate * v
    return params
