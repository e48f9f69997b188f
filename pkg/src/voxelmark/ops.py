"""Dense tensor kernels with explicit forward and VJP passes.

Everything operates on float64 numpy arrays. Each differentiable op
returns ``(output, cache)``; the matching ``*_vjp`` consumes the cache and
returns exact gradients of the forward map. There is no autodiff graph:
the network built on top of these kernels is small and fixed, so explicit
VJPs keep every gradient path individually testable against the
finite-difference oracle at the bottom of this module.
"""

from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when an operand dimension does not match the contract."""


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

@dataclass
class Conv2dCache:
    patches: np.ndarray      # (H'*W', C_in*k*k) im2col matrix
    kernel: np.ndarray       # (C_out, C_in, k, k)
    in_shape: tuple          # (C_in, H, W)
    out_shape: tuple         # (C_out, H', W')
    stride: int
    pad: int


def conv2d(input, kernel, bias, stride=1, pad=0):
    """Cross-correlate ``input`` (C_in,H,W) with ``kernel`` (C_out,C_in,k,k).

    Zero padding, odd kernel sizes only. Returns the (C_out,H',W') output
    and a cache for :func:`conv2d_vjp`.
    """
    x = _as_f64(input)
    w = _as_f64(kernel)
    b = _as_f64(bias)
    if x.ndim != 3:
        raise ShapeMismatch(f"input must be (C,H,W), got {x.shape}")
    if w.ndim != 4:
        raise ShapeMismatch(f"kernel must be (C_out,C_in,k,k), got {w.shape}")
    c_in, h, wd = x.shape
    c_out, kc_in, k, k2 = w.shape
    if k != k2:
        raise ShapeMismatch(f"kernel must be square, got {k}x{k2}")
    if k % 2 != 1:
        raise ShapeMismatch(f"kernel size must be odd, got {k}")
    if kc_in != c_in:
        raise ShapeMismatch(
            f"kernel in-channels {kc_in} != input channels {c_in}")
    if b.shape != (c_out,):
        raise ShapeMismatch(f"bias must be ({c_out},), got {b.shape}")
    if pad < 0 or stride < 1:
        raise ValueError(f"need pad >= 0 and stride >= 1, got {pad}, {stride}")
    if (h + 2 * pad - k) % stride or (wd + 2 * pad - k) % stride:
        raise ShapeMismatch(
            f"({h}+2*{pad}-{k}) and ({wd}+2*{pad}-{k}) must be divisible by "
            f"stride {stride}")
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wd + 2 * pad - k) // stride + 1

    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]                    # (C_in,H',W',k,k)
    patches = win.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * k * k)
    out = patches @ w.reshape(c_out, -1).T + b
    out = out.T.reshape(c_out, h_out, w_out)
    cache = Conv2dCache(patches, w, (c_in, h, wd), (c_out, h_out, w_out),
                        stride, pad)
    return out, cache


def conv2d_vjp(cache, grad_out):
    """Gradients of conv2d w.r.t. input, kernel and bias."""
    g = _as_f64(grad_out)
    if g.shape != cache.out_shape:
        raise ShapeMismatch(
            f"grad_out shape {g.shape} != forward output {cache.out_shape}")
    c_out, h_out, w_out = cache.out_shape
    c_in, h, wd = cache.in_shape
    k = cache.kernel.shape[2]
    g_flat = g.reshape(c_out, -1).T                     # (H'*W', C_out)

    grad_bias = g_flat.sum(axis=0)
    grad_kernel = (g_flat.T @ cache.patches).reshape(cache.kernel.shape)

    # col2im: scatter patch gradients back onto the padded input.
    gp = (g_flat @ cache.kernel.reshape(c_out, -1))
    gp = gp.reshape(h_out, w_out, c_in, k, k)
    pad, stride = cache.pad, cache.stride
    grad_xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    for di in range(k):
        for dj in range(k):
            grad_xp[:, di:di + stride * h_out:stride,
                    dj:dj + stride * w_out:stride] += gp[:, :, :, di, dj].transpose(2, 0, 1)
    grad_input = grad_xp[:, pad:pad + h, pad:pad + wd]
    return grad_input, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# resample2d
# ---------------------------------------------------------------------------

@dataclass
class ResampleCache:
    mode: str
    in_shape: tuple
    out_shape: tuple


def resample2d(input, mode):
    """2x average-pool downsampling or 2x nearest-neighbour upsampling.

    ``mode`` is ``"down2"`` (H and W must be even) or ``"up2"``.
    """
    x = _as_f64(input)
    if x.ndim != 3:
        raise ShapeMismatch(f"input must be (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if mode == "down2":
        if h % 2 or w % 2:
            raise ShapeMismatch(f"down2 needs even H, W; got {h}x{w}")
        out = x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    elif mode == "up2":
        out = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return out, ResampleCache(mode, x.shape, out.shape)


def resample2d_vjp(cache, grad_out):
    g = _as_f64(grad_out)
    if g.shape != cache.out_shape:
        raise ShapeMismatch(
            f"grad_out shape {g.shape} != forward output {cache.out_shape}")
    c, h, w = cache.in_shape
    if cache.mode == "down2":
        grad_input = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
    else:
        grad_input = g.reshape(c, h, 2, w, 2).sum(axis=(2, 4))
    return grad_input


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------

@dataclass
class ActivationCache:
    kind: str
    saved: np.ndarray


def sigmoid(x):
    """Numerically stable logistic function."""
    x = _as_f64(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """ln(1 + e^x) without overflow."""
    return np.logaddexp(0.0, _as_f64(x))


def activation(input, kind):
    """Elementwise relu, sigmoid or softplus with a VJP cache."""
    x = _as_f64(input)
    if kind == "relu":
        out = np.maximum(x, 0.0)
        saved = (x > 0).astype(np.float64)
    elif kind == "sigmoid":
        out = sigmoid(x)
        saved = out * (1.0 - out)
    elif kind == "softplus":
        out = softplus(x)
        saved = sigmoid(x)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return out, ActivationCache(kind, saved)


def activation_vjp(cache, grad_out):
    g = _as_f64(grad_out)
    if g.shape != cache.saved.shape:
        raise ShapeMismatch(
            f"grad_out shape {g.shape} != forward output {cache.saved.shape}")
    return g * cache.saved


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f, x, epsilon, coords=None):
    """Compare the analytic gradient of ``f`` against central differences.

    ``f`` maps an array to ``(value, grad)`` where ``grad`` has the shape of
    ``x``. Perturbs one coordinate at a time by ``epsilon`` and returns the
    maximum relative error, using ``max(|analytic|, |numeric|, 1e-8)`` as the
    denominator. ``coords`` optionally restricts the sweep to a subset of
    flat indices (the default sweeps every coordinate).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = _as_f64(x)
    value, grad = f(x)
    grad = _as_f64(grad)
    if not np.isfinite(value):
        raise ValueError("f returned a non-finite value at x")
    if grad.shape != x.shape:
        raise ShapeMismatch(f"grad shape {grad.shape} != x shape {x.shape}")
    if coords is None:
        coords = range(x.size)
    max_rel = 0.0
    flat = x.ravel()
    for i in coords:
        xp = flat.copy()
        xp[i] += epsilon
        fp, _ = f(xp.reshape(x.shape))
        xm = flat.copy()
        xm[i] -= epsilon
        fm, _ = f(xm.reshape(x.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"f returned a non-finite value near coordinate {i}")
        numeric = (fp - fm) / (2.0 * epsilon)
        analytic = grad.ravel()[i]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, abs(analytic - numeric) / denom)
    return max_rel
