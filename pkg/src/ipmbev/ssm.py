"""Selective state-space layers: the S6 scan, the four-direction 2-D scan and the VSS / VM blocks.

Recurrence per channel ``e`` and state ``n``::

    h[t] = exp(delta[t, e] * A[e, n]) * h[t-1] + delta[t, e] * B[t, n] * x[t, e]
    y[t, e] = sum_n C[t, n] * h[t, e, n] + D[e] * x[t, e]

with ``h[-1] = 0`` and ``delta = softplus(dt_proj(x_proj(x)) + bias)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensorcore import DSConv, LayerNorm, Linear, Module, Tensor, is_grad_enabled, param
from .tensorcore import functional as F
from .tensorcore.functional import scan_kernel
from .tensorcore.tensor import unbroadcast

DIRECTIONS = ("row", "row_reversed", "col", "col_reversed")
STREAM_CHUNK = 512


def _streamable(*xs) -> bool:
    return not is_grad_enabled() or not any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def selective_scan(x, delta, A, B, C, D=None, fused: bool = True) -> Tensor:
    """Run the S6 recurrence along axis -2.

    Shapes: ``x, delta (..., L, E)``, ``A (..., E, N)`` (broadcast over L),
    ``B, C (..., L, N)``, ``D (..., E)``. Returns ``(..., L, E)``.

    Without a tape the forward runs streamed in chunks of L. With a tape,
    ``fused=True`` uses one primitive with a hand-written adjoint; ``False``
    composes tensorcore primitives (slower, kept as an independent route).
    """
    if _streamable(x, delta, A, B, C, D):
        return Tensor(_selective_scan_stream(*(np.asarray(F._data(t)) for t in (x, delta, A, B, C)),
                                             None if D is None else F._data(D)))
    if fused:
        return _selective_scan_fused(x, delta, A, B, C, D)
    dA = F.exp(delta.reshape(delta.shape + (1,)) * A.reshape(A.shape[:-2] + (1,) + A.shape[-2:]))
    dBx = (delta * x).reshape(x.shape + (1,)) * B.reshape(B.shape[:-1] + (1,) + B.shape[-1:])
    h = F.linear_recurrence(dA, dBx, axis=dA.ndim - 3)
    y = (h * C.reshape(C.shape[:-1] + (1,) + C.shape[-1:])).sum(axis=-1)
    if D is not None:
        y = y + x * D.reshape(D.shape[:-1] + (1,) + D.shape[-1:])
    return y


def _selective_scan_fused(x, delta, A, B, C, D) -> Tensor:
    xd, dd, Ad, Bd, Cd = (F._data(t) for t in (x, delta, A, B, C))
    Dd = None if D is None else F._data(D)
    # time axis first on the small inputs so every (L, ..., E, N) temporary is born contiguous
    x0, d0, B0, C0 = (np.moveaxis(t, -2, 0) for t in (xd, dd, Bd, Cd))
    dx0 = d0 * x0
    dA0 = np.exp(d0[..., None] * Ad)
    dBx0 = dx0[..., None] * B0[..., None, :]
    if dBx0.shape != dA0.shape:
        dA0, dBx0 = (np.ascontiguousarray(t) for t in np.broadcast_arrays(dA0, dBx0))
    h0 = scan_kernel(dA0, dBx0)
    y0 = np.matmul(h0, C0[..., :, None])[..., 0]
    y = np.moveaxis(y0, 0, -2)
    if Dd is not None:
        y = y + xd * Dd[..., None, :]

    def backward(gy):
        gy0 = np.moveaxis(gy, -2, 0)
        # adjoint recurrence backwards in time: lam[t] = gh[t] + dA[t+1] * lam[t+1]
        a_rev = np.empty_like(dA0)
        a_rev[0] = 0.0
        a_rev[1:] = dA0[:0:-1]
        lam0 = scan_kernel(a_rev, np.ascontiguousarray((gy0[..., None] * C0[..., None, :])[::-1]))[::-1]
        g_logit0 = np.zeros_like(dA0)                   # d/d(delta * A)
        np.multiply(lam0[1:], h0[:-1], out=g_logit0[1:])
        g_logit0 *= dA0
        lamB0 = np.matmul(lam0, B0[..., :, None])[..., 0]  # d/d(delta * x)
        g_x = np.moveaxis(lamB0 * d0, 0, -2)
        g_delta = np.moveaxis(np.matmul(g_logit0[..., None, :], Ad[..., :, None])[..., 0, 0] + lamB0 * x0, 0, -2)
        g_A = (g_logit0 * d0[..., None]).sum(axis=0)
        g_B = np.moveaxis(np.matmul(dx0[..., None, :], lam0)[..., 0, :], 0, -2)
        g_C = np.moveaxis(np.matmul(gy0[..., None, :], h0)[..., 0, :], 0, -2)
        if Dd is not None:
            g_x = g_x + gy * Dd[..., None, :]
        out = [unbroadcast(g_x, xd.shape), unbroadcast(g_delta, dd.shape), unbroadcast(g_A, Ad.shape),
               unbroadcast(g_B, Bd.shape), unbroadcast(g_C, Cd.shape)]
        if Dd is not None:
            out.append(unbroadcast((gy * xd).sum(axis=-2), Dd.shape))
        return tuple(out)

    parents = (x, delta, A, B, C) + (() if D is None else (D,))
    return Tensor.make(y, parents, backward)


def _selective_scan_stream(x, delta, A, B, C, D, chunk: int = STREAM_CHUNK) -> np.ndarray:
    """Forward-only scan in chunks along L; memory O(chunk * E * N)."""
    L, E = x.shape[-2:]
    N = B.shape[-1]
    lead = np.broadcast_shapes(x.shape[:-2], delta.shape[:-2], A.shape[:-2], B.shape[:-2], C.shape[:-2])
    dtype = np.result_type(x, delta, A, B, C)
    Ab = A[..., None, :, :]
    y = np.empty(lead + (L, E), dtype=dtype)
    h = np.zeros(lead + (E, N), dtype=dtype)
    for s in range(0, L, chunk):
        sl = slice(s, min(L, s + chunk))
        dt = delta[..., sl, :]
        dA = np.exp(dt[..., None] * Ab)
        dBx = (dt * x[..., sl, :])[..., None] * B[..., sl, None, :]
        dA, dBx = np.broadcast_arrays(dA, dBx)
        # scan_kernel runs over axis 0
        ax = len(lead)
        hs = scan_kernel(np.ascontiguousarray(np.moveaxis(dA, ax, 0)),
                         np.ascontiguousarray(np.moveaxis(dBx, ax, 0)), h0=h)
        hs = np.moveaxis(hs, 0, ax)
        y[..., sl, :] = np.einsum("...len,...ln->...le", hs, np.broadcast_to(C[..., sl, :], lead + C[..., sl, :].shape[-2:]))
        h = hs[..., -1, :, :]
    if D is not None:
        y += x * D[..., None, :]
    return y


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class S6(Module):
    """Selective-scan parameters for ``K`` independent scans sharing shapes.

    ``K = 4`` holds one parameter set per scan direction; ``K = 1`` shares
    one set across directions (tied mode).
    """

    def __init__(self, rng, d_inner: int, d_state: int = 8, dt_rank: int | None = None, k: int = 1,
                 dt_min: float = 1e-3, dt_max: float = 1e-1, dtype=np.float32):
        super().__init__()
        self.d_inner, self.d_state, self.k = d_inner, d_state, k
        self.dt_rank = dt_rank or math.ceil(d_inner / 16)
        R, N, E = self.dt_rank, d_state, d_inner
        bound = 1.0 / math.sqrt(E)
        self.x_proj = param(rng.uniform(-bound, bound, (k, E, R + 2 * N)), dtype)
        bound = 1.0 / math.sqrt(R)
        self.dt_w = param(rng.uniform(-bound, bound, (k, R, E)), dtype)
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), (k, E)))
        self.dt_b = param(inverse_softplus(dt), dtype)
        self.A_log = param(np.log(np.broadcast_to(np.arange(1, N + 1, dtype=np.float64), (k, E, N))), dtype)
        self.D = param(np.ones((k, E)), dtype)

    def A(self) -> Tensor:
        return -F.exp(self.A_log)

    def __call__(self, x: Tensor) -> Tensor:
        """``x (K', ..., L, E)`` with ``K'`` equal to ``K`` or any count when ``K = 1``."""
        Kx = x.shape[0]
        lead = x.shape[1:-1]
        R, N = self.dt_rank, self.d_state
        flat = x.reshape(Kx, -1, self.d_inner)
        proj = F.batched_linear(flat, self.x_proj)
        dt_in, Bm, Cm = proj[..., :R], proj[..., R:R + N], proj[..., R + N:]
        delta = F.softplus(F.batched_linear(dt_in, self.dt_w, self.dt_b))
        shape = lambda t, last: t.reshape((Kx,) + lead + (last,))
        A = self.A().reshape((self.k,) + (1,) * (len(lead) - 1) + (self.d_inner, N))
        D = self.D.reshape((self.k,) + (1,) * (len(lead) - 1) + (self.d_inner,))
        return selective_scan(x, shape(delta, self.d_inner), A, shape(Bm, N), shape(Cm, N), D)


def expand_scans(x: Tensor) -> Tensor:
    """``(B, H, W, E)`` -> ``(4, B, H*W, E)`` in the fixed direction order."""
    Bn, H, W, E = x.shape
    rows = x.reshape(Bn, H * W, E)
    cols = x.transpose(0, 2, 1, 3).reshape(Bn, W * H, E)
    return F.stack([rows, F.flip(rows, 1), cols, F.flip(cols, 1)], axis=0)


def merge_scans(y: Tensor, H: int, W: int) -> Tensor:
    """Inverse-reorder each direction back to ``(B, H, W, E)`` and sum in direction order."""
    _, Bn, L, E = y.shape
    out = y[0].reshape(Bn, H, W, E)
    out = out + F.flip(y[1], 1).reshape(Bn, H, W, E)
    out = out + y[2].reshape(Bn, W, H, E).transpose(0, 2, 1, 3)
    out = out + F.flip(y[3], 1).reshape(Bn, W, H, E).transpose(0, 2, 1, 3)
    return out


class SS2D(Module):
    """Four-direction selective scan over a channels-last ``(B, H, W, E)`` map."""

    def __init__(self, rng, d_inner: int, d_state: int = 8, tied: bool = False, dtype=np.float32):
        super().__init__()
        self.tied = tied
        self.s6 = S6(rng, d_inner, d_state, k=1 if tied else 4, dtype=dtype)

    def __call__(self, x: Tensor, directions=None) -> Tensor:
        """``directions`` optionally restricts the merge to a subset (used by oracles)."""
        _, H, W, _ = x.shape
        y = self.s6(expand_scans(x))
        if directions is not None:
            keep = np.zeros((4, 1, 1, 1), dtype=y.dtype)
            keep[list(directions)] = 1.0
            y = y * keep
        return merge_scans(y, H, W)


@dataclass
class VssTrace:
    F1: Tensor
    F2: Tensor
    F3: Tensor
    F4: Tensor
    F_fuse: Tensor
    F_out: Tensor


class VSSBlock(Module):
    """Gated two-branch block with a 2-D selective scan and a residual connection.

    Works on channels-first ``(B, C, H, W)`` tensors.
    """

    def __init__(self, rng, channels: int, expand: int = 2, d_state: int = 8, conv_kernel: int = 3,
                 tied: bool = False, zero_out: bool = False, dtype=np.float32):
        super().__init__()
        E = expand * channels
        self.norm_in = LayerNorm(channels, dtype)
        self.lin_gate = Linear(rng, channels, E, dtype=dtype)
        self.lin_scan = Linear(rng, channels, E, dtype=dtype)
        self.dsconv = DSConv(rng, E, conv_kernel, dtype=dtype)
        self.ss2d = SS2D(rng, E, d_state, tied=tied, dtype=dtype)
        self.norm_scan = LayerNorm(E, dtype)
        self.lin_out = Linear(rng, E, channels, zero_init=zero_out, dtype=dtype)

    def forward_trace(self, x: Tensor) -> VssTrace:
        xl = x.transpose(0, 2, 3, 1)
        f1 = self.norm_in(xl)
        f2 = F.silu(self.lin_gate(f1))
        f3 = F.silu(self.dsconv(self.lin_scan(f1).transpose(0, 3, 1, 2))).transpose(0, 2, 3, 1)
        f4 = self.ss2d(f3)
        fuse = self.lin_out(F.elementwise_mul(self.norm_scan(f4), f2))
        out = x + fuse.transpose(0, 3, 1, 2)
        cf = lambda t: t.transpose(0, 3, 1, 2)
        return VssTrace(cf(f1), cf(f2), cf(f3), cf(f4), cf(fuse), out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_trace(x).F_out


class VMBlock(Module):
    """``depth`` chained VSS blocks with independent parameters."""

    def __init__(self, rng, channels: int, depth: int = 2, **kw):
        super().__init__()
        if depth < 1:
            raise ValueError(f"VM block depth must be >= 1, got {depth}")
        self.blocks = [VSSBlock(rng, channels, **kw) for _ in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x
