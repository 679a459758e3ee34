"""Series and parallel residual adapters, their fusion into a single filter bank and back.

An adapter is a matrix ``alpha`` of shape ``(C_in, C_out)``; entry ``[c, d]``
maps input channel ``c`` to output channel ``d``.  Embedded at the centre tap
of an ``L x L`` bank it acts as a 1x1 convolution.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from .errors import ConfigError
from .tensor_core import (BatchNormState, batch_norm, batch_norm_backward, conv1x1,
                          conv1x1_backward, conv2d, conv2d_backward)

SERIES = "series"
PARALLEL = "parallel"
TOPOLOGIES = (SERIES, PARALLEL)


def _check_odd(L: int) -> None:
    if L < 1 or L % 2 == 0:
        raise ConfigError(f"filter size must be a positive odd integer, got {L}")


def embed_diag(A: np.ndarray, L: int) -> np.ndarray:
    """Place ``A`` at the centre tap of an otherwise-zero ``(L, L, C_in, C_out)`` bank."""
    _check_odd(L)
    A = np.asarray(A)
    if A.ndim != 2:
        raise ConfigError(f"adapter must be a matrix, got shape {A.shape}")
    bank = np.zeros((L, L) + A.shape, dtype=A.dtype)
    bank[L // 2, L // 2] = A
    return bank


def adapter_param_fraction(L: int) -> Fraction:
    _check_odd(L)
    return Fraction(1, L * L)


def _check_series(f: np.ndarray, alpha: np.ndarray) -> None:
    cout = f.shape[3]
    if alpha.shape != (cout, cout):
        raise ConfigError(f"series adapter must be {cout}x{cout}, got {alpha.shape}")


def _check_parallel(f: np.ndarray, alpha: np.ndarray) -> None:
    if alpha.shape != f.shape[2:]:
        raise ConfigError(f"parallel adapter must be {f.shape[2:]}, got {alpha.shape}")


def series_forward(x, f, alpha, bn: BatchNormState | None = None, stride=1, pad=None,
                   train=False, branch_mask=None):
    """``z + BN(z @ alpha)`` with ``z = conv2d(x, f)``; ``bn=None`` bypasses the adapter BN.

    ``branch_mask`` multiplies the adapter branch input (dropout).  Returns ``(out, cache)``.
    """
    _check_series(f, alpha)
    pad = f.shape[0] // 2 if pad is None else pad
    z = conv2d(x, f, stride, pad)
    zb = z if branch_mask is None else z * branch_mask
    a = conv1x1(zb, alpha)
    bn_cache = None
    if bn is not None:
        a, bn_cache = batch_norm(a, bn, train)
    return z + a, (x, f, alpha, zb, stride, pad, bn_cache, branch_mask)


def series_backward(dout, cache, need_dx=True, need_df=True, need_dalpha=True):
    x, f, alpha, zb, stride, pad, bn_cache, mask = cache
    da, dscale, dbias = dout, None, None
    if bn_cache is not None:
        da, dscale, dbias = batch_norm_backward(dout, bn_cache)
    dz_branch, dalpha = conv1x1_backward(da, zb, alpha, need_dA=need_dalpha)
    if mask is not None:
        dz_branch = dz_branch * mask
    dz = dout + dz_branch
    dx, df = conv2d_backward(dz, x, f, stride, pad, need_dx, need_df)
    return dx, df, dalpha, dscale, dbias


def parallel_forward(x, f, alpha, stride=1, pad=None, adapter_input=None):
    """``conv2d(x, f) + conv1x1(x, alpha)`` with the host stride on both branches.

    ``adapter_input`` lets the caller feed a perturbed copy of ``x`` (e.g. after
    dropout) to the adapter branch only.  Returns ``(out, cache)``.
    """
    _check_parallel(f, alpha)
    pad = f.shape[0] // 2 if pad is None else pad
    xa = x if adapter_input is None else adapter_input
    out = conv2d(x, f, stride, pad)
    branch = conv1x1(xa, alpha, stride)
    ho, wo = out.shape[1:3]
    if branch.shape[1:3] != (ho, wo):
        # host padding is not "same": pick the taps the host centre tap sees
        off = f.shape[0] // 2 - pad
        branch = conv1x1(xa[:, off:, off:], alpha, stride)[:, :ho, :wo]
    return out + branch, (x, xa, f, alpha, stride, pad)


def parallel_backward(dout, cache, need_dx=True, need_df=True, need_dalpha=True):
    """Returns ``(dx, dx_adapter, df, dalpha)``; ``dx_adapter`` is the cotangent of the adapter input."""
    x, xa, f, alpha, stride, pad = cache
    dx, df = conv2d_backward(dout, x, f, stride, pad, need_dx, need_df)
    off = f.shape[0] // 2 - pad
    if not off:
        dxa, dalpha = conv1x1_backward(dout, xa, alpha, stride, need_dx, need_dalpha)
        return dx, dxa, df, dalpha
    xs = xa[:, off:, off:]
    full = np.zeros((dout.shape[0], -(-xs.shape[1] // stride), -(-xs.shape[2] // stride),
                     dout.shape[3]), dtype=dout.dtype)
    full[:, :dout.shape[1], :dout.shape[2]] = dout
    dxs, dalpha = conv1x1_backward(full, xs, alpha, stride, need_dx, need_dalpha)
    dxa = None
    if need_dx:
        dxa = np.zeros_like(xa)
        dxa[:, off:, off:] = dxs
    return dx, dxa, df, dalpha


def fuse_series(f: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Compose the host bank with the 1x1 map ``I + alpha``."""
    _check_series(f, alpha)
    return f @ (np.eye(alpha.shape[0], dtype=alpha.dtype) + alpha)


def unfuse_series(g: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Recover the host bank from a series-fused one; fails when ``I + alpha`` is singular."""
    _check_series(g, alpha)
    m = np.eye(alpha.shape[0], dtype=alpha.dtype) + alpha
    try:
        inv = np.linalg.inv(m)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("I + alpha is singular: the host filter cannot be recovered") from exc
    if np.linalg.cond(m) > 1e12:
        raise ConfigError("I + alpha is numerically singular: the host filter cannot be recovered")
    return g @ inv


def fuse_parallel(f: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    _check_parallel(f, alpha)
    g = f.copy()
    c = f.shape[0] // 2
    g[c, c] += alpha
    return g


def unfuse_parallel(g: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    _check_parallel(g, alpha)
    f = g.copy()
    c = g.shape[0] // 2
    f[c, c] -= alpha
    return f


def adapter_shape(topology: str, cin: int, cout: int) -> tuple:
    if topology == SERIES:
        return (cout, cout)
    if topology == PARALLEL:
        return (cin, cout)
    raise ConfigError(f"unknown adapter topology {topology!r}")
