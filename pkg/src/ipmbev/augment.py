"""Bidirectional grid augmentation: flips and a 180 degree turn applied jointly to every BEV raster.

Every transform is a permutation of cells, so inputs, labels and features at
any resolution stay aligned and the inverse is exact. The last two axes of
any array are ``(H, W)``: ``hflip`` mirrors X (reverses W), ``vflip`` mirrors
Y (reverses H), ``rot180`` does both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec
from .raster import MapRaster
from .tensorcore import Tensor
from .tensorcore import functional as F


@dataclass(frozen=True)
class AugSpec:
    hflip: bool = False
    vflip: bool = False
    rot180: bool = False
    seed: int = 0

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return (self.hflip, self.vflip, self.rot180)

    @property
    def is_identity(self) -> bool:
        return not self.grid_axes()

    def grid_axes(self) -> tuple[int, ...]:
        """Axes reversed by this spec, as negative indices into a grid-shaped array."""
        axes = []
        if self.vflip != self.rot180:
            axes.append(-2)
        if self.hflip != self.rot180:
            axes.append(-1)
        return tuple(axes)

    def compose(self, other: "AugSpec") -> "AugSpec":
        """Flag-wise XOR: the spec whose action equals applying ``other`` then ``self``."""
        return AugSpec(self.hflip != other.hflip, self.vflip != other.vflip,
                       self.rot180 != other.rot180, self.seed)

    def inverse(self) -> "AugSpec":
        return self

    def to_str(self) -> str:
        return ",".join(k for k, f in zip("hvr", self.flags) if f)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "AugSpec":
        """``"h,v,r"`` style flag list; empty string or ``"none"`` is the identity."""
        flags = {t.strip() for t in text.split(",") if t.strip() and t.strip() != "none"}
        unknown = flags - {"h", "v", "r"}
        if unknown:
            raise ValueError(f"unknown augmentation flags {sorted(unknown)}; use h, v, r")
        return cls("h" in flags, "v" in flags, "r" in flags, seed)


ALL_SPECS = tuple(AugSpec(h, v, r) for r in (False, True) for v in (False, True) for h in (False, True))


def sample_aug(seed: int, probs=(0.5, 0.5, 0.5)) -> AugSpec:
    """Independent coin flips for (hflip, vflip, rot180)."""
    p = np.broadcast_to(np.asarray(probs, dtype=np.float64), (3,))
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError(f"probabilities must lie in [0, 1], got {probs}")
    u = np.random.default_rng(seed).random(3)
    h, v, r = (bool(x) for x in u < p)
    return AugSpec(h, v, r, int(seed))


def _apply_one(spec: AugSpec, x):
    axes = spec.grid_axes()
    if isinstance(x, MapRaster):
        return x if not axes else x.replace(data=np.flip(x.data, axes).copy())
    if isinstance(x, Tensor):
        if x.ndim < 2:
            raise ValueError(f"augmentation needs a grid-shaped tensor, got shape {x.shape}")
        return x if not axes else F.flip(x, tuple(a % x.ndim for a in axes))
    arr = np.asarray(x)
    if arr.ndim < 2:
        raise ValueError(f"augmentation needs a grid-shaped array, got shape {arr.shape}")
    return arr if not axes else np.flip(arr, axes).copy()


def apply_forward(spec: AugSpec, rasters):
    """Apply ``spec`` to one raster or a list (MapRaster, Tensor or ndarray; last two axes are H, W)."""
    if isinstance(rasters, (list, tuple)):
        return type(rasters)(_apply_one(spec, r) for r in rasters)
    return _apply_one(spec, rasters)


def apply_backward(spec: AugSpec, rasters):
    """Exact inverse of :func:`apply_forward` (each spec is an involution)."""
    return apply_forward(spec.inverse(), rasters)


def apply_batch(specs, x, backward: bool = False):
    """Per-item augmentation of a batched ``(B, ..., H, W)`` tensor or array."""
    if specs is None or all(s.is_identity for s in specs):
        return x
    if len(specs) != x.shape[0]:
        raise ValueError(f"{len(specs)} augmentation specs for a batch of {x.shape[0]}")
    fn = apply_backward if backward else apply_forward
    if isinstance(x, Tensor):
        return F.stack([fn(s, x[b]) for b, s in enumerate(specs)], axis=0)
    return np.stack([fn(s, np.asarray(x)[b]) for b, s in enumerate(specs)])


def apply_to_points(spec: AugSpec, points, grid: GridSpec) -> np.ndarray:
    """Move ego ``(..., 2)`` points the way the cell permutation moves the cells containing them."""
    p = np.array(points, dtype=np.float64, copy=True)
    axes = spec.grid_axes()
    if -1 in axes:
        p[..., 0] = grid.x_range[0] + grid.x_range[1] - p[..., 0]
    if -2 in axes:
        p[..., 1] = grid.y_range[0] + grid.y_range[1] - p[..., 1]
    return p
