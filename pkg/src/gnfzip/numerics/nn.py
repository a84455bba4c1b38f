"""Layer operations: softmax, losses, activations, conv/pool, normalization, dropout."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch, TargetOutOfRange
from .tensor import Tensor, as_tensor, make, unbroadcast

LN_EPS = 1e-5
BN_MOMENTUM = 0.9
_GELU_C = math.sqrt(2.0 / math.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return make(s, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)
    return make(out, (x,), back, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood, plus per-example code length in bits."""
    targets = np.asarray(targets, dtype=np.int64)
    B, V = logits.shape
    if targets.shape != (B,):
        raise ShapeMismatch(f"targets shape {targets.shape} does not match batch {B}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise TargetOutOfRange(f"target outside 0..{V - 1}")
    logp = log_softmax(logits, axis=-1)
    rows = np.arange(B)
    picked = logp.data[rows, targets]

    def back(g):
        full = np.zeros_like(logp.data)
        full[rows, targets] = -g / B
        return (full,)
    loss = make(np.asarray(-picked.mean()), (logp,), back, "nll")
    return loss, -picked / math.log(2.0)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)
    return make(out, (x,), back, "gelu")


def dropout(x: Tensor, p: float = 0.1, train: bool = False, key=(0, 0, 0)) -> Tensor:
    """Inverted dropout; the mask is a pure function of ``key`` = (seed, layer, step)."""
    if not train or p <= 0.0:
        return x
    rng = np.random.Generator(np.random.Philox(key=np.random.SeedSequence(list(key)).generate_state(2, np.uint64)))
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out if bias is None else out + bias


def embedding(weight: Tensor, tokens) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)

    def back(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, tokens, g)
        return (full,)
    return make(weight.data[tokens], (weight,), back, "embedding")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``x[..., C_in, L]`` with ``weight[C_out, C_in, K]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    c_out, c_in, k = weight.shape
    if x.shape[-2] != c_in:
        raise ShapeMismatch(f"conv1d expects {c_in} input channels, got {x.shape[-2]}")
    length = x.shape[-1]
    if length < k:
        raise ShapeMismatch(f"conv1d input length {length} shorter than kernel {k}")
    l_out = (length - k) // stride + 1
    lead = x.shape[:-2]
    # windows: [..., C_in, L_out, K] -> cols [..., L_out, C_in*K]
    win = sliding_window_view(x.data, k, axis=-1)[..., ::stride, :]
    cols = np.ascontiguousarray(np.moveaxis(win, -3, -2)).reshape(*lead, l_out, c_in * k)
    wmat = weight.data.reshape(c_out, c_in * k)
    out = cols @ wmat.T  # [..., L_out, C_out]
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(np.swapaxes(out, -1, -2))

    def back(g):
        gt = np.swapaxes(g, -1, -2)  # [..., L_out, C_out]
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (np.swapaxes(cols, -1, -2) @ gt)
            gw = gw.reshape(-1, c_in * k, c_out).sum(axis=0).T.reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, c_out, l_out).sum(axis=(0, 2))
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(*lead, l_out, c_in, k)
            gx = np.zeros_like(x.data)
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gx[..., :, j:j + span:stride] += np.swapaxes(gcols[..., j], -1, -2)
        return (gx, gw, gb) if bias is not None else (gx, gw)
    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make(out, inputs, back, "conv1d")


def maxpool1d(x: Tensor, k: int, stride: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Max over windows of the last axis; gradient goes to the argmax only."""
    stride = stride or k
    length = x.shape[-1]
    if length < k:
        raise ShapeMismatch(f"maxpool1d input length {length} shorter than kernel {k}")
    win = sliding_window_view(x.data, k, axis=-1)[..., ::stride, :]
    l_out = win.shape[-2]
    local = win.argmax(axis=-1)
    idx = local + stride * np.arange(l_out)
    out = np.take_along_axis(x.data, idx, axis=-1)

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, 0.0, axis=-1)
        # windows never overlap when stride >= k; fall back to add.at otherwise
        if stride >= k:
            np.put_along_axis(full, idx, g, axis=-1)
        else:
            flat = full.reshape(-1, length)
            rows = np.repeat(np.arange(flat.shape[0]), l_out)
            np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))
        return (full,)
    return make(np.ascontiguousarray(out), (x,), back, "maxpool1d"), idx


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return (gx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape))
    return make(out, (x, gamma, beta), back, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool = False, momentum: float = BN_MOMENTUM,
               eps: float = LN_EPS) -> Tensor:
    """Per-channel normalization of ``x[B, C, L]``.

    Training mode uses batch statistics and updates the running buffers in
    place (``running = momentum * running + (1 - momentum) * batch``); eval
    mode uses the stored statistics only.
    """
    shape_c = (1, -1, 1)
    g_ = gamma.data.reshape(shape_c)
    b_ = beta.data.reshape(shape_c)
    if not train:
        inv = 1.0 / np.sqrt(running_var.reshape(shape_c) + eps)
        xhat = (x.data - running_mean.reshape(shape_c)) * inv
        out = xhat * g_ + b_

        def back_eval(g):
            return (g * g_ * inv, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2)))
        return make(out, (x, gamma, beta), back_eval, "batch_norm")

    n = x.shape[0] * x.shape[2]
    mu = x.data.mean(axis=(0, 2), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + b_
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu.reshape(-1)
    unbiased = var.reshape(-1) * (n / (n - 1)) if n > 1 else var.reshape(-1)
    running_var *= momentum
    running_var += (1.0 - momentum) * unbiased

    def back(g):
        gg = g * g_
        gx = inv * (gg - gg.mean(axis=(0, 2), keepdims=True)
                    - xhat * (gg * xhat).mean(axis=(0, 2), keepdims=True))
        return (gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2)))
    return make(out, (x, gamma, beta), back, "batch_norm")
