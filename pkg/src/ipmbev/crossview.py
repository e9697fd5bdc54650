"""Cross-view map consistency: the perspective road map warped into BEV must agree with the BEV foreground.

The training loss is the soft form: an L1 distance between warped
probabilities and ``1 - P(background)`` over visible cells. The hard
(binarized) form has zero gradient almost everywhere and is kept for
reporting only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .ipm import IpmLut, visibility_mask, warp_tensor, warp_to_bev
from .raster import MapRaster
from .tensorcore import Tensor
from .tensorcore import functional as F


class EmptyMaskWarning(UserWarning):
    pass


def binarize_bev(m_bev) -> MapRaster | np.ndarray:
    """0 where the class is background, 1 elsewhere."""
    if isinstance(m_bev, MapRaster):
        return MapRaster(m_bev.grid, (m_bev.data != 0).astype(np.float32), "binary")
    return (np.asarray(m_bev) != 0).astype(np.float32)


def foreground_probability(logits: Tensor) -> Tensor:
    """``(B, K, H, W)`` class logits -> ``(B, H, W)`` probability of any map element."""
    return 1.0 - F.softmax(logits, axis=1)[:, 0]


def warp_pv_map(m_pv, lut: IpmLut):
    """Warp perspective probabilities with bilinear sampling and mean merge.

    A Tensor ``(B, n_cams, 1, h, w)`` gives a differentiable ``(B, H, W)``;
    a list of per-camera arrays gives a ``MapRaster``.
    """
    if isinstance(m_pv, Tensor):
        return warp_tensor(m_pv, lut, "bilinear", "mean")[:, 0]
    return warp_to_bev(m_pv, lut, "bilinear", "mean", kind="feature")


@dataclass(frozen=True)
class CvmlInputs:
    """``m_hat_pv`` and ``m_bev_fg`` are ``(..., H, W)`` probabilities; ``mask`` selects visible cells."""

    m_hat_pv: Tensor | np.ndarray
    m_bev_fg: Tensor | np.ndarray
    mask: np.ndarray

    @classmethod
    def from_perspective(cls, m_pv, m_bev_fg, lut: IpmLut) -> "CvmlInputs":
        hat = warp_pv_map(m_pv, lut)
        if isinstance(hat, MapRaster):
            hat = hat.data[0]
        return cls(hat, m_bev_fg, visibility_mask(lut).data[0])


def cvml_loss(inputs: CvmlInputs, stop_grad: str | None = None) -> Tensor:
    """Masked mean absolute difference.

    ``stop_grad`` = ``"pv"`` or ``"bev"`` blocks the gradient into that side.
    An empty mask yields 0 with an :class:`EmptyMaskWarning`.
    """
    a, b = inputs.m_hat_pv, inputs.m_bev_fg
    if stop_grad not in (None, "pv", "bev"):
        raise ValueError(f"stop_grad must be None, 'pv' or 'bev', got {stop_grad!r}")
    if stop_grad == "pv" and isinstance(a, Tensor):
        a = a.detach()
    if stop_grad == "bev" and isinstance(b, Tensor):
        b = b.detach()
    shape = np.broadcast_shapes(np.shape(F._data(a)), np.shape(F._data(b)))
    mask = np.broadcast_to(np.asarray(inputs.mask, dtype=np.float64) > 0, shape)
    if not mask.any():
        warnings.warn("cross-view loss: visibility mask is empty; returning 0", EmptyMaskWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=np.result_type(F._data(a), F._data(b))))
    return F.l1_masked_mean(a, b, mask)


def hard_cvml(m_hat_pv, m_bev_fg, mask, threshold: float = 0.5) -> float:
    """Reporting form: L1 between binarized maps over the mask."""
    a = np.asarray(F._data(m_hat_pv)) > threshold
    b = np.asarray(F._data(m_bev_fg)) > threshold
    m = np.broadcast_to(np.asarray(mask) > 0, a.shape)
    if not m.any():
        return 0.0
    return float((a != b)[m].mean())
