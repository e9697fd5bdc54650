"""Differentiable primitives. Every function returns a :class:`Tensor` and
registers an exact backward rule."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _data, unbroadcast

NORM_EPS = 1e-5
SCAN_SEQUENTIAL_MIN = 1024   # elements per time step above which the plain loop is faster


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


# -- activations -------------------------------------------------------------

def relu(x) -> Tensor:
    d = _data(x)
    mask = d > 0
    return Tensor.make(d * mask, (x,), lambda g: (g * mask,))


def _sigmoid(d):
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    y = _sigmoid(_data(x))
    return Tensor.make(y, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x) -> Tensor:
    d = _data(x)
    s = _sigmoid(d)
    return Tensor.make(d * s, (x,), lambda g: (g * (s * (1.0 + d * (1.0 - s))),))


def softplus(x) -> Tensor:
    d = _data(x)
    y = np.logaddexp(0.0, d)
    return Tensor.make(y, (x,), lambda g: (g * _sigmoid(d),))


def exp(x) -> Tensor:
    return x.exp()


def softmax(x, axis: int = -1) -> Tensor:
    d = _data(x)
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.make(y, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    d = _data(x)
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor.make(y, (x,), backward)


# -- elementwise / shape -------------------------------------------------------

def elementwise_mul(a, b) -> Tensor:
    return a * b if isinstance(a, Tensor) else Tensor(a) * b


def concat(tensors, axis: int = 0) -> Tensor:
    datas = [_data(t) for t in tensors]
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.make(np.concatenate(datas, axis=axis), tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    datas = [_data(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(datas)))

    return Tensor.make(np.stack(datas, axis=axis), tuple(tensors), backward)


def flip(x, axes) -> Tensor:
    axes = tuple(np.atleast_1d(axes).tolist())
    if not axes:
        return x if isinstance(x, Tensor) else Tensor(x)
    return Tensor.make(np.flip(_data(x), axes).copy(), (x,), lambda g: (np.flip(g, axes).copy(),))


def pad2d(x, pads) -> Tensor:
    """Zero-pad the last two axes; ``pads = (top, bottom, left, right)``."""
    d = _data(x)
    t, b, l, r = pads
    width = [(0, 0)] * (d.ndim - 2) + [(t, b), (l, r)]
    H, W = d.shape[-2:]
    return Tensor.make(np.pad(d, width), (x,), lambda g: (g[..., t:t + H, l:l + W],))


def crop2d(x, pads) -> Tensor:
    """Inverse of :func:`pad2d`."""
    t, b, l, r = pads
    H, W = x.shape[-2:]
    return x[..., t:H - b, l:W - r]


def upsample_nearest(x, factor: int = 2) -> Tensor:
    d = _data(x)
    y = d.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor))
        return (g.sum(axis=(-3, -1)),)

    return Tensor.make(y, (x,), backward)


def avg_pool(x, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` average pooling over the last two axes (trailing remainder dropped)."""
    d = _data(x)
    H, W = d.shape[-2:]
    Ho, Wo = H // k, W // k
    if Ho == 0 or Wo == 0:
        raise ValueError(f"avg_pool window {k} larger than input {H}x{W}")
    core = d[..., :Ho * k, :Wo * k]
    y = core.reshape(d.shape[:-2] + (Ho, k, Wo, k)).mean(axis=(-3, -1))

    def backward(g):
        out = np.zeros_like(d)
        out[..., :Ho * k, :Wo * k] = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
        return (out,)

    return Tensor.make(y, (x,), backward)


# -- affine layers -------------------------------------------------------------

def linear(x, w, b=None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b`` with ``w`` of shape (D, E)."""
    xd, wd = _data(x), _data(w)
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear: input dim {xd.shape[-1]} != weight rows {wd.shape[0]}")
    y = xd @ wd
    if b is not None:
        bd = _data(b)
        if bd.shape != (wd.shape[1],):
            raise ValueError(f"linear: bias shape {bd.shape} != ({wd.shape[1]},)")
        y = y + bd

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    return Tensor.make(y, (x, w, b), backward)


def batched_linear(x, w, b=None) -> Tensor:
    """Independent affine maps: ``x (K, ..., D)`` with ``w (K, D, E)`` and ``b (K, E)``.

    ``K`` may be 1 on the weights to share one map across the batch of maps.
    """
    xd, wd = _data(x), _data(w)
    K = xd.shape[0]
    if wd.ndim != 3 or wd.shape[0] not in (1, K) or wd.shape[1] != xd.shape[-1]:
        raise ValueError(f"batched_linear: weight {wd.shape} incompatible with input {xd.shape}")
    x3 = xd.reshape(K, -1, xd.shape[-1])
    y = np.matmul(x3, wd)
    if b is not None:
        y = y + _data(b)[:, None, :]
    out_shape = xd.shape[:-1] + (wd.shape[2],)

    def backward(g):
        g3 = g.reshape(K, -1, wd.shape[2])
        gx = np.matmul(g3, wd.transpose(0, 2, 1)).reshape(xd.shape)
        gw = np.matmul(x3.transpose(0, 2, 1), g3)
        if wd.shape[0] == 1:
            gw = gw.sum(axis=0, keepdims=True)
        gb = None
        if b is not None:
            gb = g3.sum(axis=1)
            if _data(b).shape[0] == 1:
                gb = gb.sum(axis=0, keepdims=True)
        return gx, gw, gb

    return Tensor.make(y.reshape(out_shape), (x, w, b), backward)


def conv2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x (N,C,H,W)`` with ``w (K,C,kh,kw)``."""
    xd, wd = _data(x), _data(w)
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {xd.shape}, {wd.shape}")
    N, C, H, W = xd.shape
    K, Cw, kh, kw = wd.shape
    if C != Cw:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    y = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + _data(b)[None, :, None, None]
    y = np.ascontiguousarray(y)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += contrib
        gx = gxp[:, :, ph:ph + H, pw:pw + W]
        return gx, gw, gb

    return Tensor.make(y, (x, w, b), backward)


def depthwise_conv2d(x, w, b=None, padding=0) -> Tensor:
    """Per-channel stride-1 convolution, ``w`` of shape (C, kh, kw)."""
    xd, wd = _data(x), _data(w)
    N, C, H, W = xd.shape
    if wd.shape[0] != C:
        raise ValueError(f"depthwise_conv2d: weight has {wd.shape[0]} channels, input {C}")
    _, kh, kw = wd.shape
    ph, pw = _pair(padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    y = np.zeros((N, C, Ho, Wo), dtype=np.result_type(xd, wd))
    for i in range(kh):
        for j in range(kw):
            y += xp[:, :, i:i + Ho, j:j + Wo] * wd[None, :, i, j, None, None]
    if b is not None:
        y += _data(b)[None, :, None, None]

    def backward(g):
        gw = np.empty_like(wd)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gw[:, i, j] = (g * xp[:, :, i:i + Ho, j:j + Wo]).sum(axis=(0, 2, 3))
                gxp[:, :, i:i + Ho, j:j + Wo] += g * wd[None, :, i, j, None, None]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gxp[:, :, ph:ph + H, pw:pw + W], gw, gb

    return Tensor.make(y, (x, w, b), backward)


def depthwise_separable_conv(x, w_dw, w_pw, b_dw=None, b_pw=None, padding=1) -> Tensor:
    """Depthwise ``kxk`` followed by a pointwise ``1x1`` convolution."""
    y = depthwise_conv2d(x, w_dw, b_dw, padding=padding)
    return conv2d(y, w_pw, b_pw)


# -- normalization ---------------------------------------------------------------

def layer_norm(x, gamma=None, beta=None, eps: float = NORM_EPS) -> Tensor:
    """Normalize over the last axis."""
    d = _data(x)
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = None if gamma is None else _data(gamma)
    y = xhat if gd is None else xhat * gd
    if beta is not None:
        y = y + _data(beta)

    def backward(g):
        gg = gb = None
        if beta is not None:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        if gd is not None:
            gg = (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0)
            g = g * gd
        gx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor.make(y, (x, gamma, beta), backward)


def batch_norm(x, gamma, beta, running_mean: np.ndarray | None = None,
               running_var: np.ndarray | None = None, training: bool = True,
               momentum: float = 0.1, eps: float = NORM_EPS) -> Tensor:
    """Batch normalization over (N, H, W) of an ``(N, C, H, W)`` input.

    In training mode batch statistics are used and the running buffers (if
    given) are updated in place; in eval mode the running buffers are used.
    """
    d = _data(x)
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    gd, bd = _data(gamma), _data(beta)
    if training:
        mu = d.mean(axis=axes, keepdims=True)
        xc = d - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        if running_mean is not None:
            n = d.size // d.shape[1]
            unbiased = var.ravel() * (n / max(n - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.ravel()
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu = running_mean.reshape(shape).astype(d.dtype)
        var = running_var.reshape(shape).astype(d.dtype)
        xc = d - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gd.reshape(shape) + bd.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx_hat = g * gd.reshape(shape)
        if training:
            gx = inv * (gx_hat - gx_hat.mean(axis=axes, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gx_hat * inv
        return gx, gg, gb

    return Tensor.make(y, (x, gamma, beta), backward)


# -- losses -----------------------------------------------------------------------

def cross_entropy(logits, target, weight=None) -> Tensor:
    """Mean over all positions of ``-log softmax(logits)[target]``.

    ``logits`` is (N, C, ...) and ``target`` integer (N, ...). Optional
    per-class ``weight`` gives the weighted mean (normalized by the summed
    weights of the targets).
    """
    z = _data(logits)
    t = np.asarray(target)
    C = z.shape[1]
    if t.shape != z.shape[:1] + z.shape[2:]:
        raise ValueError(f"cross_entropy: target shape {t.shape} vs logits {z.shape}")
    if t.size and (t.min() < 0 or t.max() >= C):
        raise ValueError(f"cross_entropy: class id {int(t.max())} outside [0, {C})")
    t = t.astype(np.int64)
    zm = np.moveaxis(z, 1, -1)
    shifted = zm - zm.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    if weight is None:
        wt = np.ones_like(picked)
    else:
        wt = np.asarray(weight, dtype=z.dtype)[t]
    norm = wt.sum()
    loss = -(wt * picked).sum() / norm

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, t[..., None], np.take_along_axis(p, t[..., None], axis=-1) - 1.0, axis=-1)
        p *= (wt / norm)[..., None]
        return (np.moveaxis(p, -1, 1) * g,)

    return Tensor.make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def binary_cross_entropy_with_logits(logits, target, weight=None) -> Tensor:
    """Mean of ``softplus(z) - t * z`` (two-class cross-entropy on a logit), soft targets allowed."""
    z = _data(logits)
    t = np.asarray(target, dtype=z.dtype)
    wt = np.ones_like(z) if weight is None else np.broadcast_to(np.asarray(weight, dtype=z.dtype), z.shape)
    norm = wt.sum()
    loss = (wt * (np.logaddexp(0.0, z) - t * z)).sum() / norm

    def backward(g):
        return (g * wt * (_sigmoid(z) - t) / norm,)

    return Tensor.make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def l1_masked_mean(a, b, mask) -> Tensor:
    """``sum(mask * |a - b|) / sum(mask)``."""
    m = np.asarray(mask, dtype=_data(a).dtype)
    diff = _data(a) - _data(b)
    denom = m.sum()
    sign = np.sign(diff) * m / denom
    loss = (np.abs(diff) * m).sum() / denom

    def backward(g):
        ga = g * sign
        return unbroadcast(ga, _data(a).shape), unbroadcast(-ga, _data(b).shape)

    return Tensor.make(np.asarray(loss, dtype=diff.dtype), (a, b), backward)


# -- sequence / sparse primitives ----------------------------------------------------

def scan_kernel(a: np.ndarray, b: np.ndarray, h0: np.ndarray | None = None,
                chunk: int | None = None, method: str = "auto") -> np.ndarray:
    """Solve ``h[t] = a[t] * h[t-1] + b[t]`` along axis 0 (``h[-1] = h0`` or 0).

    ``"sequential"`` steps through time with in-place vector updates.
    ``"blocked"`` runs a local recurrence inside every chunk in parallel,
    then carries chunk-final states forward and folds them back in with the
    running product of ``a``; it wins when each time step is too small to
    amortize per-step overhead. ``"auto"`` picks by per-step size.
    """
    if method == "auto":
        method = "sequential" if b[0].size >= SCAN_SEQUENTIAL_MIN else "blocked"
    if method == "sequential":
        h = np.empty(b.shape, dtype=np.result_type(a, b))
        if h0 is None:
            h[0] = b[0]
        else:
            np.multiply(a[0], h0, out=h[0])
            h[0] += b[0]
        for t in range(1, a.shape[0]):
            np.multiply(a[t], h[t - 1], out=h[t])
            h[t] += b[t]
        return h
    if method != "blocked":
        raise ValueError(f"unknown scan method {method!r}")
    L = a.shape[0]
    rest = a.shape[1:]
    if chunk is None:
        chunk = max(8, int(np.sqrt(L)))
    nc = -(-L // chunk)
    pad = nc * chunk - L
    if pad:
        a = np.concatenate([a, np.ones((pad,) + rest, a.dtype)])
        b = np.concatenate([b, np.zeros((pad,) + rest, b.dtype)])
    a = a.reshape((nc, chunk) + rest)
    b = b.reshape((nc, chunk) + rest)
    h = np.empty_like(b)
    P = np.empty_like(a)
    h[:, 0] = b[:, 0]
    P[:, 0] = a[:, 0]
    for t in range(1, chunk):
        np.multiply(a[:, t], h[:, t - 1], out=h[:, t])
        h[:, t] += b[:, t]
        np.multiply(P[:, t - 1], a[:, t], out=P[:, t])
    carry = np.zeros((nc,) + rest, dtype=h.dtype)
    prev = np.zeros(rest, dtype=h.dtype) if h0 is None else h0
    for k in range(nc):
        carry[k] = prev
        prev = h[k, -1] + P[k, -1] * prev
    h += P * carry[:, None]
    return h.reshape((nc * chunk,) + rest)[:L]


def linear_recurrence(a, b, axis: int = 1) -> Tensor:
    """Differentiable first-order linear recurrence along ``axis`` with zero initial state."""
    ad = np.moveaxis(_data(a), axis, 0)
    bd = np.moveaxis(_data(b), axis, 0)
    h = scan_kernel(ad, bd)

    def backward(g):
        g0 = np.moveaxis(g, axis, 0)
        # adjoint recurrence runs backwards in time: lam[t] = g[t] + a[t+1] * lam[t+1]
        a_next = np.concatenate([ad[1:], np.zeros_like(ad[:1])])[::-1]
        lam = scan_kernel(np.ascontiguousarray(a_next), np.ascontiguousarray(g0[::-1]))[::-1]
        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]])
        ga = lam * h_prev
        return np.moveaxis(ga, 0, axis), np.moveaxis(lam, 0, axis)

    return Tensor.make(np.moveaxis(h, 0, axis), (a, b), backward)


def spmm(x, S) -> Tensor:
    """Apply a fixed sparse matrix ``S (P, M)`` along the last axis: ``(..., M) -> (..., P)``."""
    d = _data(x)
    lead = d.shape[:-1]
    M = d.shape[-1]
    if S.shape[1] != M:
        raise ValueError(f"spmm: matrix has {S.shape[1]} columns, input last dim {M}")
    S = S.astype(d.dtype) if S.dtype != d.dtype else S
    x2 = d.reshape(-1, M)
    y = np.asarray((S @ x2.T).T).reshape(lead + (S.shape[0],))
    ST = S.T.tocsr()

    def backward(g):
        g2 = g.reshape(-1, S.shape[0])
        return (np.asarray((ST @ g2.T).T).reshape(d.shape),)

    return Tensor.make(y, (x,), backward)
