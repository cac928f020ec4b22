"""Differentiable layer primitives with hand-written backward rules.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Every function here is pure: inputs are never written to, and every
forward output is checked for NaN/Inf.

Linear, layer-norm and GELU act on the last axis and accept any number of
leading batch axes. Images use the ``(..., H, W, C)`` layout throughout.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, LabelError, NonFiniteError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    return check_finite(arr, name)


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def _shape_error(what, a, b):
    return DimensionError(f"{what}: shapes {tuple(a)} and {tuple(b)} do not conform")


# -- linear -----------------------------------------------------------------


def linear_fwd(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``out[..., j] = sum_i x[..., i] * weight[i, j] + bias[j]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise _shape_error("linear input/weight", x.shape, weight.shape)
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise _shape_error("linear weight/bias", weight.shape, bias.shape)
        out = out + bias
    return check_finite(out, "linear output")


def linear_bwd(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    if grad_out.shape[:-1] != x.shape[:-1] or grad_out.shape[-1] != weight.shape[1]:
        raise _shape_error("linear grad_out", grad_out.shape, x.shape[:-1] + (weight.shape[1],))
    if x.shape[-1] != weight.shape[0]:
        raise _shape_error("linear input/weight", x.shape, weight.shape)
    grad_input = grad_out @ weight.T
    g2 = grad_out.reshape(-1, weight.shape[1])
    grad_weight = x.reshape(-1, weight.shape[0]).T @ g2
    grad_bias = g2.sum(axis=0)
    return grad_input, grad_weight, grad_bias


# -- softmax ----------------------------------------------------------------


def softmax_rows_fwd(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    check_finite(logits, "softmax input")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_bwd(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if probs.shape != grad_out.shape:
        raise _shape_error("softmax probs/grad_out", probs.shape, grad_out.shape)
    inner = (probs * grad_out).sum(axis=-1, keepdims=True)
    return probs * (grad_out - inner)


# -- layer norm ---------------------------------------------------------------


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS):
    """Normalize over the last axis. Returns ``(out, cache)``."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise _shape_error("layer_norm input/scale", x.shape, gamma.shape)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma + beta
    return check_finite(out, "layer_norm output"), (xhat, rstd, gamma)


def layer_norm_bwd(cache, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, rstd, gamma = cache
    if grad_out.shape != xhat.shape:
        raise _shape_error("layer_norm grad_out", grad_out.shape, xhat.shape)
    d = xhat.shape[-1]
    g2 = grad_out.reshape(-1, d)
    grad_gamma = (g2 * xhat.reshape(-1, d)).sum(axis=0)
    grad_beta = g2.sum(axis=0)
    dxhat = grad_out * gamma
    grad_input = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return grad_input, grad_gamma, grad_beta


# -- GELU (tanh approximation) ------------------------------------------------


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    """``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x * x))
    return check_finite(0.5 * x * (1.0 + t), "gelu output")


def gelu_bwd(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if x.shape != grad_out.shape:
        raise _shape_error("gelu input/grad_out", x.shape, grad_out.shape)
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * dt)


# -- convolution and pooling ----------------------------------------------------


def conv2d_fwd(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 'same' convolution.

    x: ``(B, H, W, Cin)``; weight: ``(k, k, Cin, Cout)`` with odd k; bias: ``(Cout,)``.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[-1] != weight.shape[2]:
        raise _shape_error("conv2d input/weight", x.shape, weight.shape)
    k = weight.shape[0]
    if weight.shape[1] != k or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got {weight.shape[:2]}")
    if bias.shape != (weight.shape[3],):
        raise _shape_error("conv2d weight/bias", weight.shape, bias.shape)
    b, h, w, _ = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros((b, h, w, weight.shape[3]))
    for i in range(k):
        for j in range(k):
            out += xp[:, i : i + h, j : j + w, :] @ weight[i, j]
    out += bias
    return check_finite(out, "conv2d output")


def conv2d_bwd(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    b, h, w, cin = x.shape
    k = weight.shape[0]
    if grad_out.shape != (b, h, w, weight.shape[3]):
        raise _shape_error("conv2d grad_out", grad_out.shape, (b, h, w, weight.shape[3]))
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    gxp = np.zeros_like(xp)
    grad_weight = np.empty_like(weight)
    g2 = grad_out.reshape(-1, weight.shape[3])
    for i in range(k):
        for j in range(k):
            window = xp[:, i : i + h, j : j + w, :]
            grad_weight[i, j] = window.reshape(-1, cin).T @ g2
            gxp[:, i : i + h, j : j + w, :] += grad_out @ weight[i, j].T
    grad_input = gxp[:, p : p + h, p : p + w, :]
    return np.ascontiguousarray(grad_input), grad_weight, g2.sum(axis=0)


def avgpool_fwd(x: np.ndarray, k: int) -> np.ndarray:
    """Non-overlapping k x k mean pooling on ``(B, H, W, C)``."""
    b, h, w, c = x.shape
    if h % k or w % k:
        raise DimensionError(f"avgpool window {k} does not divide spatial shape {(h, w)}")
    return x.reshape(b, h // k, k, w // k, k, c).mean(axis=(2, 4))


def avgpool_bwd(grad_out: np.ndarray, k: int) -> np.ndarray:
    g = grad_out / (k * k)
    return np.repeat(np.repeat(g, k, axis=1), k, axis=2)


# -- loss -------------------------------------------------------------------


def cross_entropy_fwd_bwd(logits: np.ndarray, labels, reduction: str = "sum"):
    """Softmax cross-entropy on logits ``(K,)`` or ``(B, K)``.

    Returns ``(loss, grad_logits)``. With ``reduction="sum"`` each sample's
    gradient equals its single-sample gradient; ``"mean"`` divides by B;
    ``"none"`` returns per-sample losses with the unscaled gradient.
    """
    check_finite(logits, "cross_entropy logits")
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(labels))
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise _shape_error("cross_entropy logits/labels", logits.shape, np.shape(labels))
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise LabelError("labels must be integers")
        y = y.astype(np.int64)
    k = z.shape[1]
    if np.any(y < 0) or np.any(y >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = logsum - shifted[rows, y]
    grad = np.exp(shifted - logsum[:, None])
    grad[rows, y] -= 1.0
    if reduction == "mean":
        loss, grad = losses.mean(), grad / z.shape[0]
    elif reduction == "sum":
        loss = losses.sum()
    elif reduction == "none":
        loss = losses
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if single:
        grad = grad[0]
        if reduction == "none":
            loss = loss[0]
    return loss, grad
