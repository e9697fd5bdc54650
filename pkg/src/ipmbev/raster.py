"""Channel-major BEV rasters and the ``BEVR`` binary file format.

Layout of a ``.bevr`` file (all little-endian)::

    b"BEVR"                       magic
    u32 version (=1)
    u32 C, u32 H, u32 W
    u8  kind                      0 image, 1 feature, 2 semantic, 3 binary
    f64 x_min, x_max, y_min, y_max, resolution    (all zero: no grid)
    f32 payload[C*H*W]            row-major, C outermost
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import GridSpec

MAGIC = b"BEVR"
VERSION = 1
KINDS = ("image", "feature", "semantic", "binary")
_HEADER = struct.Struct("<4sIIIIB5d")


class RasterFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MapRaster:
    grid: GridSpec | None
    data: np.ndarray
    kind: str = "feature"
    num_classes: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown raster kind {self.kind!r}")
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"raster data must be (C, H, W), got shape {data.shape}")
        if self.grid is not None and data.shape[1:] != self.grid.shape:
            raise ValueError(f"raster shape {data.shape[1:]} does not match grid {self.grid.shape}")
        if self.kind == "binary" and not np.isin(data, (0, 1)).all():
            raise ValueError("binary raster must hold only 0 and 1")
        if self.kind == "semantic":
            if not np.all(data == np.round(data)) or data.min(initial=0) < 0:
                raise ValueError("semantic raster must hold nonnegative integer class ids")
            if self.num_classes is not None and data.size and data.max() >= self.num_classes:
                raise ValueError(f"class id {data.max()} >= num_classes {self.num_classes}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, MapRaster):
            return NotImplemented
        return (self.kind == other.kind and self.grid == other.grid
                and self.data.shape == other.data.shape and np.array_equal(self.data, other.data))

    def replace(self, data=None, kind=None) -> "MapRaster":
        return MapRaster(self.grid, self.data if data is None else data,
                         self.kind if kind is None else kind, self.num_classes)


def encode_bevr(data: np.ndarray, kind: str, grid: GridSpec | None = None) -> bytes:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ValueError(f"BEVR payload must be (C, H, W), got {data.shape}")
    C, H, W = data.shape
    meta = (0.0,) * 5 if grid is None else (*grid.x_range, *grid.y_range, grid.resolution)
    header = _HEADER.pack(MAGIC, VERSION, C, H, W, KINDS.index(kind), *meta)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_bevr(buf: bytes) -> MapRaster:
    if len(buf) < _HEADER.size:
        raise RasterFormatError("truncated BEVR header")
    magic, version, C, H, W, kind, x0, x1, y0, y1, res = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise RasterFormatError(f"unsupported BEVR version {version}")
    if kind >= len(KINDS):
        raise RasterFormatError(f"bad kind code {kind}")
    n = C * H * W
    body = buf[_HEADER.size:]
    if len(body) != 4 * n:
        raise RasterFormatError(f"payload has {len(body)} bytes, expected {4 * n}")
    data = np.frombuffer(body, dtype="<f4").reshape(C, H, W).astype(np.float32)
    grid = None if res == 0 else GridSpec((x0, x1), (y0, y1), res)
    return MapRaster(grid, data, KINDS[kind])


def write_bevr(path, raster_or_data, kind: str | None = None, grid: GridSpec | None = None) -> None:
    if isinstance(raster_or_data, MapRaster):
        r = raster_or_data
        buf = encode_bevr(r.data, r.kind, r.grid)
    else:
        buf = encode_bevr(raster_or_data, kind or "feature", grid)
    Path(path).write_bytes(buf)


def read_bevr(path) -> MapRaster:
    return decode_bevr(Path(path).read_bytes())
