"""Layer primitives with analytic forward and backward passes.

Every primitive works on a leading batch axis. Shapes:

* location tensor ``R``: ``(B, 2, I, J)`` (channel 0 = home, 1 = work)
* communication matrix ``U``: ``(B, 2, T)`` (row 0 = calls, 1 = SMS)
* dense input ``x``: ``(B, in)``

Unbatched inputs (no leading axis) are accepted and returned unbatched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

ACTIVATIONS = ("sigmoid", "tanh", "identity")


class ShapeError(ValueError):
    """Raised when array shapes do not fit the layer."""


@dataclass
class GradientBundle:
    """Parameter gradients of one layer plus the gradient w.r.t. its input."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    input: np.ndarray | None = None


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "sigmoid":
        return expit(z)
    if activation == "tanh":
        return np.tanh(z)
    if activation == "identity":
        return z
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def _activation_grad(y: np.ndarray, activation: str) -> np.ndarray:
    # derivative expressed through the layer output
    if activation == "sigmoid":
        return y * (1.0 - y)
    if activation == "tanh":
        return 1.0 - y * y
    if activation == "identity":
        return np.ones_like(y)
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def _batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-d sample or {ndim}-d batch, got shape {x.shape}")
    return x, False


def _check_upstream(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != out.shape:
        raise ShapeError(f"upstream gradient shape {grad.shape} != layer output shape {out.shape}")
    return grad


# ----------------------------------------------------------------------------
# two-channel 2-D convolution (location domain)
# ----------------------------------------------------------------------------

def _im2col(R: np.ndarray, M: int, N: int) -> np.ndarray:
    # (B, C, I, J) -> (B, P, Q, C*M*N), contiguous
    win = sliding_window_view(R, (M, N), axis=(2, 3))
    B, C, P, Q = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, P, Q, C * M * N)


def conv2d_two_channel(R, weights, bias, activation="sigmoid", return_cols=False):
    """Valid, stride-1 convolution of a two-channel location tensor.

    ``weights`` has shape ``(K, 2, M, N)`` and ``bias`` shape ``(K,)``; the
    output holds one ``(I-M+1, J-N+1)`` map per filter::

        c[k, p, q] = act(u_k + sum_{c,m,n} W[k, c, m, n] * R[c, p+m, q+n])

    With ``return_cols`` the unfolded input windows are returned as well so
    the backward pass can reuse them.
    """
    R, squeeze = _batch(R, 4)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 4 or weights.shape[1] != R.shape[1]:
        raise ShapeError(f"filter bank shape {weights.shape} does not match input channels {R.shape[1]}")
    K, _, M, N = weights.shape
    _, C, I, J = R.shape
    if M > I or N > J:
        raise ShapeError(f"filter {M}x{N} larger than input {I}x{J}")
    if bias.shape != (K,):
        raise ShapeError(f"bias shape {bias.shape} != ({K},)")
    cols = _im2col(R, M, N)
    z = cols @ weights.reshape(K, -1).T + bias
    out = np.ascontiguousarray(_activate(z, activation).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_two_channel_backward(R, weights, out, grad_out, activation="sigmoid", need_input=True, cols=None):
    R, squeeze = _batch(R, 4)
    out = out[None] if squeeze else out
    grad_out = _check_upstream(grad_out[None] if squeeze else grad_out, out)
    weights = np.asarray(weights, dtype=np.float64)
    K, C, M, N = weights.shape
    P, Q = out.shape[2], out.shape[3]
    if cols is None:
        cols = _im2col(R, M, N)
    gz = grad_out * _activation_grad(out, activation)
    gz_rows = gz.transpose(0, 2, 3, 1).reshape(-1, K)
    gW = (gz_rows.T @ cols.reshape(-1, C * M * N)).reshape(weights.shape)
    gR = None
    if need_input:
        gR = np.zeros_like(R)
        for m in range(M):
            for n in range(N):
                gR[:, :, m:m + P, n:n + Q] += np.einsum("bkpq,kc->bcpq", gz, weights[:, :, m, n], optimize=True)
        if squeeze:
            gR = gR[0]
    return GradientBundle({"W": gW, "b": gz.sum(axis=(0, 2, 3))}, gR)


# ----------------------------------------------------------------------------
# two-row 1-D convolution (communication domain)
# ----------------------------------------------------------------------------

def conv1d_two_row(U, weights, bias, activation="sigmoid"):
    """Valid, stride-1 convolution over the hour axis of a ``(2, T)`` matrix.

    ``weights`` has shape ``(K, 2, H)``; output is ``(K, T-H+1)`` per sample.
    """
    U, squeeze = _batch(U, 3)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 3 or weights.shape[1] != U.shape[1]:
        raise ShapeError(f"filter bank shape {weights.shape} does not match input rows {U.shape[1]}")
    K, _, H = weights.shape
    T = U.shape[2]
    if H > T:
        raise ShapeError(f"filter length {H} exceeds sequence length {T}")
    if bias.shape != (K,):
        raise ShapeError(f"bias shape {bias.shape} != ({K},)")
    L = T - H + 1
    z = np.empty((U.shape[0], K, L))
    z[...] = bias[None, :, None]
    for h in range(H):
        z += np.einsum("bcl,kc->bkl", U[:, :, h:h + L], weights[:, :, h], optimize=True)
    out = _activate(z, activation)
    return out[0] if squeeze else out


def conv1d_two_row_backward(U, weights, out, grad_out, activation="sigmoid", need_input=True):
    U, squeeze = _batch(U, 3)
    out = out[None] if squeeze else out
    grad_out = _check_upstream(grad_out[None] if squeeze else grad_out, out)
    weights = np.asarray(weights, dtype=np.float64)
    K, C, H = weights.shape
    L = out.shape[2]
    gz = grad_out * _activation_grad(out, activation)
    gW = np.empty_like(weights)
    gU = np.zeros_like(U) if need_input else None
    for h in range(H):
        window = U[:, :, h:h + L]
        gW[:, :, h] = np.tensordot(gz, window, axes=([0, 2], [0, 2]))
        if need_input:
            gU[:, :, h:h + L] += np.einsum("bkl,kc->bcl", gz, weights[:, :, h], optimize=True)
    if need_input and squeeze:
        gU = gU[0]
    return GradientBundle({"W": gW, "b": gz.sum(axis=(0, 2))}, gU)


# ----------------------------------------------------------------------------
# average pooling over disjoint blocks
# ----------------------------------------------------------------------------

def _block_counts(size: int, window: int) -> np.ndarray:
    starts = np.arange(0, size, window)
    return np.minimum(window, size - starts).astype(np.float64)


def _pool(x: np.ndarray, window: int, naxes: int) -> np.ndarray:
    if window <= 0:
        raise ValueError(f"pooling window must be positive, got {window}")
    sizes = x.shape[-naxes:]
    lead = x.shape[:-naxes]
    padded_sizes = [-(-s // window) * window for s in sizes]
    pad = [(0, 0)] * len(lead) + [(0, p - s) for p, s in zip(padded_sizes, sizes)]
    xp = np.pad(x, pad) if any(p != s for p, s in zip(padded_sizes, sizes)) else x
    shape = list(lead)
    for p in padded_sizes:
        shape += [p // window, window]
    sums = xp.reshape(shape).sum(axis=tuple(len(lead) + 2 * i + 1 for i in range(naxes)))
    counts = _block_counts(sizes[0], window)
    for s in sizes[1:]:
        counts = np.multiply.outer(counts, _block_counts(s, window))
    return sums / counts


def _pool_backward(grad_out: np.ndarray, input_shape: tuple, window: int, naxes: int) -> np.ndarray:
    sizes = input_shape[-naxes:]
    counts = _block_counts(sizes[0], window)
    for s in sizes[1:]:
        counts = np.multiply.outer(counts, _block_counts(s, window))
    g = grad_out / counts
    for i in range(naxes):
        axis = g.ndim - naxes + i
        g = np.repeat(g, window, axis=axis)
    crop = tuple(slice(None) for _ in input_shape[:-naxes]) + tuple(slice(0, s) for s in sizes)
    return g[crop]


def pooled_size(size: int, window: int) -> int:
    return -(-size // window)


def avg_pool2d(C, D):
    """Mean over disjoint ``D x D`` blocks of the last two axes.

    Trailing partial blocks are averaged over the cells they actually hold.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim < 2:
        raise ShapeError(f"avg_pool2d needs at least 2 dims, got {C.shape}")
    return _pool(C, D, 2)


def avg_pool2d_backward(input_shape, D, grad_out):
    expected = tuple(input_shape[:-2]) + tuple(pooled_size(s, D) for s in input_shape[-2:])
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != expected:
        raise ShapeError(f"upstream gradient shape {grad_out.shape} != pooled shape {expected}")
    return GradientBundle({}, _pool_backward(grad_out, tuple(input_shape), D, 2))


def avg_pool1d(b, D1):
    b = np.asarray(b, dtype=np.float64)
    if b.ndim < 1:
        raise ShapeError("avg_pool1d needs at least 1 dim")
    return _pool(b, D1, 1)


def avg_pool1d_backward(input_shape, D1, grad_out):
    expected = tuple(input_shape[:-1]) + (pooled_size(input_shape[-1], D1),)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != expected:
        raise ShapeError(f"upstream gradient shape {grad_out.shape} != pooled shape {expected}")
    return GradientBundle({}, _pool_backward(grad_out, tuple(input_shape), D1, 1))


# ----------------------------------------------------------------------------
# fully connected layer
# ----------------------------------------------------------------------------

def dense_forward(x, W, b, activation="sigmoid"):
    """``act(W x + b)`` with ``W`` of shape ``(out, in)``."""
    x, squeeze = _batch(x, 2)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != x.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} does not match weight matrix {W.shape}")
    out = _activate(x @ W.T + b, activation)
    return out[0] if squeeze else out


def dense_backward(x, W, out, grad_out, activation="sigmoid", need_input=True):
    x, squeeze = _batch(x, 2)
    out = out[None] if squeeze else out
    grad_out = _check_upstream(grad_out[None] if squeeze else grad_out, out)
    gz = grad_out * _activation_grad(out, activation)
    gx = None
    if need_input:
        gx = gz @ W
        if squeeze:
            gx = gx[0]
    return GradientBundle({"W": gz.T @ x, "b": gz.sum(axis=0)}, gx)


# ----------------------------------------------------------------------------
# gradient oracle
# ----------------------------------------------------------------------------

def finite_difference_grad(f: Callable, params, epsilon: float = 1e-5):
    """Central-difference gradient of a scalar function.

    ``params`` is either an array or a dict of arrays; the result has the
    same structure. Arrays are perturbed in place and restored.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if isinstance(params, dict):
        work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        grads = {}
        for name, arr in work.items():
            grads[name] = _fd_array(lambda: f(work), arr, epsilon)
        return grads
    arr = np.array(params, dtype=np.float64)
    return _fd_array(lambda: f(arr), arr, epsilon)


def _fd_array(evaluate, arr: np.ndarray, epsilon: float) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(evaluate())
        flat[i] = orig - epsilon
        fm = float(evaluate())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * epsilon)
    return grad


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    """Largest ``|a-b| / max(|a|, |b|, floor)`` over all entries."""
    if isinstance(a, dict):
        return max((max_relative_error(a[k], b[k], floor) for k in a), default=0.0)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def tensor_relative_error(a, b, floor: float = 1e-12) -> float:
    """Largest ``||a-b|| / max(||a||, ||b||, floor)`` over the tensors.

    Unlike the entrywise measure this is not dominated by near-zero
    entries, whose central differences carry ~1e-11 of roundoff.
    """
    if isinstance(a, dict):
        return max((tensor_relative_error(a[k], b[k], floor) for k in a), default=0.0)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
