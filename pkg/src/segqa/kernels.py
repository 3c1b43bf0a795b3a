"""Layer primitives for the tiny U-Net: conv3d, maxpool, upsample.

Tensors are channels-first float arrays (C, X, Y, Z). Convolution is
cross-correlation with same-size zero padding. The conv inner loops run in
the compiled extension when it imported cleanly; set SEGQA_BACKEND=numpy to
force the pure-NumPy path (the benchmark in benchmarks/ compares the two).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _kernels as _ext
except ImportError:  # pragma: no cover - extension not built
    _ext = None

if os.environ.get("SEGQA_BACKEND", "").lower() == "numpy":
    _ext = None

BACKEND = "cython" if _ext is not None else "numpy"


class ShapeError(ValueError):
    pass


def _pad_same(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    if p == 0:
        return np.ascontiguousarray(x)
    ci, nx, ny, nz = x.shape
    xp = np.zeros((ci, nx + 2 * p, ny + 2 * p, nz + 2 * p), dtype=x.dtype)
    xp[:, p : p + nx, p : p + ny, p : p + nz] = x
    return xp


def _conv_forward_np(xp, w, bias, out):
    co_n, _, _, _ = out.shape
    _, nx, ny, nz = out.shape
    k = w.shape[2]
    out[:] = bias.reshape(-1, 1, 1, 1)
    for dx in range(k):
        for dy in range(k):
            for dz in range(k):
                out += np.tensordot(
                    w[:, :, dx, dy, dz],
                    xp[:, dx : dx + nx, dy : dy + ny, dz : dz + nz],
                    axes=(1, 0),
                )


def _conv_grad_weights_np(xp, gout, gw):
    _, nx, ny, nz = gout.shape
    k = gw.shape[2]
    for dx in range(k):
        for dy in range(k):
            for dz in range(k):
                gw[:, :, dx, dy, dz] = np.tensordot(
                    gout,
                    xp[:, dx : dx + nx, dy : dy + ny, dz : dz + nz],
                    axes=([1, 2, 3], [1, 2, 3]),
                )


def conv3d_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation; spatial shape preserved."""
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"expected x (C,X,Y,Z) and w (Co,Ci,k,k,k), got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"kernel expects {w.shape[1]} input channels, input has {x.shape[0]}"
        )
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeError(f"kernel must be cubic with odd size, got {w.shape[2:]}")
    w = np.ascontiguousarray(w, dtype=x.dtype)
    bias = np.ascontiguousarray(bias, dtype=x.dtype)
    xp = _pad_same(x, k)
    out = np.empty((w.shape[0],) + x.shape[1:], dtype=x.dtype)
    if _ext is not None:
        _ext.conv3d_forward_padded(xp, w, bias, out)
    else:
        _conv_forward_np(xp, w, bias, out)
    return out


def conv3d_backward(
    x: np.ndarray, w: np.ndarray, gout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (gx, gw, gb) of the same-padded cross-correlation."""
    k = w.shape[2]
    # input gradient: correlate gout with the flipped, channel-transposed kernel
    wt = np.ascontiguousarray(np.flip(w, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4))
    zero_bias = np.zeros(wt.shape[0], dtype=x.dtype)
    gx = conv3d_forward(gout, wt, zero_bias)

    xp = _pad_same(x, k)
    gw = np.empty(w.shape, dtype=x.dtype)
    gc = np.ascontiguousarray(gout, dtype=x.dtype)
    if _ext is not None:
        _ext.conv3d_grad_weights_padded(xp, gc, gw)
    else:
        _conv_grad_weights_np(xp, gc, gw)
    gb = gout.sum(axis=(1, 2, 3))
    return gx, gw, gb


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, gout: np.ndarray) -> np.ndarray:
    return np.where(x > 0, gout, 0)


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2x2 max pooling; returns (pooled, argmax) with first-max ties."""
    c, nx, ny, nz = x.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ShapeError(f"spatial dims must be even for 2x2x2 pooling, got {x.shape[1:]}")
    blocks = (
        x.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, nx // 2, ny // 2, nz // 2, 8)
    )
    arg = blocks.argmax(axis=-1)
    pooled = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return pooled, arg


def maxpool2_backward(arg: np.ndarray, gout: np.ndarray, in_shape) -> np.ndarray:
    c, nx, ny, nz = in_shape
    gb = np.zeros((c, nx // 2, ny // 2, nz // 2, 8), dtype=gout.dtype)
    np.put_along_axis(gb, arg[..., None], gout[..., None], axis=-1)
    return (
        gb.reshape(c, nx // 2, ny // 2, nz // 2, 2, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3, 6)
        .reshape(c, nx, ny, nz)
    )


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor doubling along each spatial axis."""
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(gout: np.ndarray) -> np.ndarray:
    c, nx, ny, nz = gout.shape
    return (
        gout.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).sum(axis=(2, 4, 6))
    )
