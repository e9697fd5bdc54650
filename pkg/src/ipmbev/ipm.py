"""Inverse perspective mapping: BEV cell -> camera pixel lookup tables and warps.

A :class:`IpmLut` is computed once from a rig. Every warp afterwards uses only
the table (a sparse linear map from stacked camera payloads to BEV cells), so
changing cameras only ever means rebuilding the table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import CameraRig, GridSpec, PixelHit, project_points
from .raster import MapRaster
from .tensorcore import Tensor
from .tensorcore import functional as F

SAMPLINGS = ("nearest", "bilinear")
_SNAP = 1e-9


def _snap(x: np.ndarray) -> np.ndarray:
    r = np.round(x)
    return np.where(np.abs(x - r) < _SNAP, r, x)


MERGES = ("mean", "sum", "first")


@dataclass(frozen=True, eq=False)
class IpmLut:
    """Per-cell camera hits, stored flat and ordered by (cell, camera).

    ``u, v`` are already scaled to the payload resolution of each camera.
    """

    grid: GridSpec
    height_h: float
    payload_sizes: tuple[tuple[int, int], ...]
    cell: np.ndarray
    cam: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_cams(self) -> int:
        return len(self.payload_sizes)

    @property
    def visibility(self) -> np.ndarray:
        """``(H, W)`` count of contributing cameras per cell."""
        if "vis" not in self._cache:
            counts = np.bincount(self.cell, minlength=self.grid.h_cells * self.grid.w_cells)
            self._cache["vis"] = counts.reshape(self.grid.shape)
        return self._cache["vis"]

    def entries(self, i: int, j: int) -> list[PixelHit]:
        """Hits of cell ``(i, j)`` (``i`` along X, ``j`` along Y) in camera order."""
        flat = j * self.grid.w_cells + i
        lo, hi = np.searchsorted(self.cell, [flat, flat + 1])
        return [PixelHit(int(self.cam[k]), float(self.u[k]), float(self.v[k]), float(self.depth[k]))
                for k in range(lo, hi)]

    @property
    def offsets(self) -> np.ndarray:
        sizes = [w * h for w, h in self.payload_sizes]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    def matrix(self, sampling: str = "bilinear", merge: str = "mean") -> sp.csr_matrix:
        """Sparse ``(H*W, sum_n w_n*h_n)`` operator implementing the warp."""
        if sampling not in SAMPLINGS:
            raise ValueError(f"sampling must be one of {SAMPLINGS}, got {sampling!r}")
        if merge not in MERGES:
            raise ValueError(f"merge must be one of {MERGES}, got {merge!r}")
        key = (sampling, merge)
        if key not in self._cache:
            self._cache[key] = self._build_matrix(sampling, merge)
        return self._cache[key]

    def _build_matrix(self, sampling, merge):
        n_cells = self.grid.h_cells * self.grid.w_cells
        cell, cam, u, v = self.cell, self.cam, self.u, self.v
        if merge == "first":
            keep = np.ones(cell.size, bool)
            keep[1:] = cell[1:] != cell[:-1]
            cell, cam, u, v = cell[keep], cam[keep], u[keep], v[keep]
            hit_w = np.ones(cell.size)
        elif merge == "mean":
            hit_w = 1.0 / self.visibility.ravel()[cell] if cell.size else np.ones(0)
        else:
            hit_w = np.ones(cell.size)
        sizes = np.array(self.payload_sizes, dtype=np.int64).reshape(-1, 2)
        pw = sizes[cam, 0] if cell.size else np.zeros(0, np.int64)
        ph = sizes[cam, 1] if cell.size else np.zeros(0, np.int64)
        base = self.offsets[cam] if cell.size else np.zeros(0, np.int64)
        if sampling == "nearest":
            c = np.minimum(np.floor(_snap(u)).astype(np.int64), pw - 1)
            r = np.minimum(np.floor(_snap(v)).astype(np.int64), ph - 1)
            rows, cols, vals = cell, base + r * pw + c, hit_w
        else:
            x = _snap(u - 0.5)
            y = _snap(v - 0.5)
            x0 = np.floor(x)
            y0 = np.floor(y)
            fx = x - x0
            fy = y - y0
            x0 = x0.astype(np.int64)
            y0 = y0.astype(np.int64)
            rows, cols, vals = [], [], []
            for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                                (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
                cc = np.clip(x0 + dx, 0, pw - 1)
                rr = np.clip(y0 + dy, 0, ph - 1)
                rows.append(cell)
                cols.append(base + rr * pw + cc)
                vals.append(wgt * hit_w)
            rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        M = sp.coo_matrix((vals, (rows, cols)), shape=(n_cells, int(self.offsets[-1])))
        return M.tocsr()


def build_ipm_lut(grid: GridSpec, rig: CameraRig, h: float = 0.0,
                  payload_size=None) -> IpmLut:
    """Project every cell center at height ``h`` into every camera.

    ``payload_size`` is one ``(w, h)`` for all cameras, a list with one per
    camera, or None for the cameras' native sizes.
    """
    if len(rig) == 0:
        raise ValueError("cannot build an IPM table for an empty rig")
    if payload_size is None:
        sizes = [cam.size for cam in rig]
    elif np.ndim(payload_size) == 1:
        sizes = [tuple(payload_size)] * len(rig)
    else:
        sizes = [tuple(s) for s in payload_size]
    if len(sizes) != len(rig):
        raise ValueError(f"{len(sizes)} payload sizes for {len(rig)} cameras")
    sizes = tuple((int(w), int(hh)) for w, hh in sizes)
    if any(w <= 0 or hh <= 0 for w, hh in sizes):
        raise ValueError(f"payload sizes must be positive, got {sizes}")

    X, Y = grid.cell_centers()
    pts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, float(h))], axis=-1)
    cells, cams, us, vs, ds = [], [], [], [], []
    for n, cam in enumerate(rig):
        u_o, v_o, depth, valid = project_points(cam, pts)
        tw, th = sizes[n]
        u = u_o * tw / cam.width
        v = v_o * th / cam.height
        with np.errstate(invalid="ignore"):
            ok = valid & (u >= 0) & (u < tw) & (v >= 0) & (v < th)
        idx = np.nonzero(ok)[0]
        cells.append(idx)
        cams.append(np.full(idx.size, n, dtype=np.int64))
        us.append(u[idx])
        vs.append(v[idx])
        ds.append(depth[idx])
    cell = np.concatenate(cells)
    cam = np.concatenate(cams)
    order = np.lexsort((cam, cell))
    arrays = [np.ascontiguousarray(a[order]) for a in (cell, cam, np.concatenate(us),
                                                        np.concatenate(vs), np.concatenate(ds))]
    for a in arrays:
        a.setflags(write=False)
    return IpmLut(grid, float(h), sizes, *arrays)


def _stack_payloads(payloads, lut: IpmLut) -> np.ndarray:
    """Flatten per-camera ``(C, h, w)`` payloads into ``(C, sum h*w)``."""
    if isinstance(payloads, np.ndarray) and payloads.ndim == 4:
        payloads = list(payloads)
    if len(payloads) != lut.n_cams:
        raise ValueError(f"got {len(payloads)} payloads for a table with {lut.n_cams} cameras")
    chans = set()
    flats = []
    for n, p in enumerate(payloads):
        p = np.asarray(p)
        if p.ndim == 2:
            p = p[None]
        w, h = lut.payload_sizes[n]
        if p.shape[1:] != (h, w):
            raise ValueError(f"camera {n}: payload {p.shape[1:]} does not match table size {(h, w)}")
        chans.add(p.shape[0])
        flats.append(p.reshape(p.shape[0], -1))
    if len(chans) != 1:
        raise ValueError(f"channel counts differ across cameras: {sorted(chans)}")
    return np.concatenate(flats, axis=1)


def default_sampling(kind: str) -> str:
    return "nearest" if kind in ("semantic", "binary") else "bilinear"


def warp_to_bev(payloads, lut: IpmLut, sampling: str | None = None, merge: str | None = None,
                kind: str = "image") -> MapRaster:
    """Warp per-camera payloads into a BEV raster (zeros where no camera sees the cell)."""
    sampling = sampling or default_sampling(kind)
    merge = merge or ("first" if kind == "semantic" else "mean")
    flat = _stack_payloads(payloads, lut).astype(np.float64)
    bev = np.asarray((lut.matrix(sampling, merge) @ flat.T).T)
    data = bev.reshape((-1,) + lut.grid.shape)
    if kind == "binary" and merge != "first" and not np.isin(data, (0, 1)).all():
        kind = "feature"
    return MapRaster(lut.grid, data, kind)


def warp_tensor(payload: Tensor, lut: IpmLut, sampling: str = "bilinear", merge: str = "mean") -> Tensor:
    """Differentiable warp of ``(B, n_cams, C, h, w)`` payloads to ``(B, C, H, W)``.

    All cameras must share one payload size.
    """
    B, n, C, h, w = payload.shape
    if n != lut.n_cams or any(s != (w, h) for s in lut.payload_sizes):
        raise ValueError(f"payload {payload.shape} does not match table sizes {lut.payload_sizes}")
    x = payload.transpose(0, 2, 1, 3, 4).reshape(B, C, n * h * w)
    y = F.spmm(x, lut.matrix(sampling, merge))
    return y.reshape((B, C) + lut.grid.shape)


def visibility_mask(lut: IpmLut) -> MapRaster:
    return MapRaster(lut.grid, (lut.visibility >= 1).astype(np.float32)[None], "binary")
