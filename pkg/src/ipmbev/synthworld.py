"""Synthetic ground-truth scenes, rasterization, perspective rendering and sensor corruptions.

A scene is a curved road corridor on flat ground: two boundaries, 1-4 lane
dividers, 0-3 pedestrian crossings, an OSM-style centerline and a ground
texture painting each element class in its own color.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .geometry import CameraRig, GridSpec, backproject_to_plane
from .raster import MapRaster, read_bevr, write_bevr

BACKGROUND, DIVIDER, PEDESTRIAN, BOUNDARY = 0, 1, 2, 3
CLASS_NAMES = ("background", "divider", "pedestrian", "boundary")
NUM_CLASSES = 4

CLASS_COLORS = {
    DIVIDER: (0.95, 0.80, 0.10),
    PEDESTRIAN: (0.95, 0.95, 0.95),
    BOUNDARY: (0.85, 0.15, 0.15),
}
HORIZON_COLOR = (0.55, 0.70, 0.90)

_SNAP = 1e-9


@dataclass(frozen=True)
class SceneParams:
    grid: GridSpec = field(default_factory=GridSpec)
    dividers: tuple[int, int] = (1, 4)
    crossings: tuple[int, int] = (0, 3)
    curvature: tuple[float, float] = (-0.012, 0.012)
    lane_width: tuple[float, float] = (2.6, 3.4)
    lateral_offset: tuple[float, float] = (-3.0, 3.0)
    heading: tuple[float, float] = (-0.12, 0.12)
    gps_jitter: float = 0.5

    def __post_init__(self):
        for name in ("dividers", "crossings", "curvature", "lane_width", "lateral_offset", "heading"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"SceneParams.{name}: min {lo} > max {hi}")
        if self.dividers[0] < 1 or self.dividers[1] > 4:
            raise ValueError("SceneParams.dividers must lie within [1, 4]")
        if self.crossings[0] < 0 or self.crossings[1] > 3:
            raise ValueError("SceneParams.crossings must lie within [0, 3]")
        if self.gps_jitter < 0:
            raise ValueError("SceneParams.gps_jitter must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        d = dict(d)
        d["grid"] = GridSpec.from_dict(d["grid"])
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class VectorElement:
    class_id: int
    points: np.ndarray  # (K, 2) meters

    def to_dict(self) -> dict:
        return {"class": int(self.class_id), "points": np.round(self.points, 9).tolist()}


@dataclass(frozen=True, eq=False)
class Scene:
    seed: int
    params: SceneParams
    gt_semantic: MapRaster
    gt_vector: tuple[VectorElement, ...]
    osm_centerlines: tuple[np.ndarray, ...]
    ground_texture: MapRaster
    road_halfwidth: float = 0.0
    axis: np.ndarray | None = None

    @property
    def grid(self) -> GridSpec:
        return self.params.grid

    def foreground(self) -> np.ndarray:
        """``(H, W)`` float mask of any map element."""
        return (self.gt_semantic.data[0] != BACKGROUND).astype(np.float32)

    def to_json(self) -> str:
        return json.dumps({
            "seed": int(self.seed),
            "params": self.params.to_dict(),
            "vectors": [e.to_dict() for e in self.gt_vector],
            "centerlines": [np.round(c, 9).tolist() for c in self.osm_centerlines],
            "road_halfwidth": round(float(self.road_halfwidth), 9),
            "axis": None if self.axis is None else np.round(self.axis, 9).tolist(),
        }, sort_keys=True)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "scene.json").write_text(self.to_json(), encoding="utf-8")
        write_bevr(d / "gt_semantic.bevr", self.gt_semantic)
        write_bevr(d / "texture.bevr", self.ground_texture)

    @classmethod
    def load(cls, directory) -> "Scene":
        d = Path(directory)
        meta = json.loads((d / "scene.json").read_text(encoding="utf-8"))
        params = SceneParams.from_dict(meta["params"])
        sem = read_bevr(d / "gt_semantic.bevr")
        tex = read_bevr(d / "texture.bevr")
        vectors = tuple(VectorElement(v["class"], np.asarray(v["points"], float)) for v in meta["vectors"])
        lines = tuple(np.asarray(c, float) for c in meta["centerlines"])
        axis = None if meta.get("axis") is None else np.asarray(meta["axis"], float)
        return cls(int(meta["seed"]), params, MapRaster(params.grid, sem.data, "semantic", NUM_CLASSES),
                   vectors, lines, MapRaster(params.grid, tex.data, "image"),
                   float(meta.get("road_halfwidth", 0.0)), axis)

    def digest(self) -> str:
        h = hashlib.sha256(self.to_json().encode())
        h.update(self.gt_semantic.data.astype("<f4").tobytes())
        h.update(self.ground_texture.data.astype("<f4").tobytes())
        return h.hexdigest()


# -- rasterization ------------------------------------------------------------------

def snap_integer(g, tol: float = _SNAP) -> np.ndarray:
    """Round values within ``tol`` of an integer onto it (keeps lattice-aligned sampling exact)."""
    r = np.round(g)
    return np.where(np.abs(g - r) < tol, r, g)


def _snap_floor(g: np.ndarray) -> np.ndarray:
    return np.floor(snap_integer(g)).astype(np.int64)


def supercover_cells(p0, p1, grid: GridSpec) -> np.ndarray:
    """All cells ``(i, j)`` a closed segment passes through (half-open cells).

    The cell can only change where the segment crosses a grid line, so it is
    enough to classify the crossing points themselves and the midpoints
    between consecutive crossings.
    """
    gx0, gy0 = grid.to_grid_coords(p0[0], p0[1])
    gx1, gy1 = grid.to_grid_coords(p1[0], p1[1])
    dx, dy = gx1 - gx0, gy1 - gy0
    ts = [np.array([0.0, 1.0])]
    for g0, d in ((gx0, dx), (gy0, dy)):
        if abs(d) > 0:
            lo, hi = sorted((g0, g0 + d))
            k = np.arange(math.ceil(lo - _SNAP), math.floor(hi + _SNAP) + 1)
            ts.append((k - g0) / d)
    t = np.unique(np.clip(np.concatenate(ts), 0.0, 1.0))
    t = np.concatenate([t, 0.5 * (t[1:] + t[:-1])])
    gx = gx0 + t * dx
    gy = gy0 + t * dy
    i = _snap_floor(gx)
    j = _snap_floor(gy)
    ok = (i >= 0) & (i < grid.w_cells) & (j >= 0) & (j < grid.h_cells)
    cells = np.unique(np.stack([i[ok], j[ok]], axis=1), axis=0)
    return cells.reshape(-1, 2)


def rasterize_polyline(points, grid: GridSpec, out: np.ndarray | None = None, value=1) -> np.ndarray:
    """Supercover stroke of a polyline into an ``(H, W)`` array."""
    if out is None:
        out = np.zeros(grid.shape, dtype=np.float32)
    pts = np.asarray(points, dtype=np.float64)
    for a, b in zip(pts[:-1], pts[1:]):
        cells = supercover_cells(a, b, grid)
        out[cells[:, 1], cells[:, 0]] = value
    return out


def rasterize_polygon(points, grid: GridSpec, out: np.ndarray | None = None, value=1) -> np.ndarray:
    """Fill cells whose center lies inside the polygon (even-odd rule)."""
    if out is None:
        out = np.zeros(grid.shape, dtype=np.float32)
    X, Y = grid.cell_centers()
    out[points_in_polygon(X, Y, points)] = value
    return out


def points_in_polygon(X, Y, poly) -> np.ndarray:
    poly = np.asarray(poly, dtype=np.float64)
    if np.allclose(poly[0], poly[-1]):
        poly = poly[:-1]
    inside = np.zeros(np.shape(X), dtype=bool)
    n = len(poly)
    for k in range(n):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % n]
        cond = (y1 > Y) != (y2 > Y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (Y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cond & (X < xint)
    return inside


def rasterize_osm(centerlines, grid: GridSpec) -> MapRaster:
    """Binary 1-cell supercover stroke of every centerline."""
    out = np.zeros(grid.shape, dtype=np.float32)
    for line in centerlines:
        if len(line) >= 2:
            rasterize_polyline(line, grid, out)
    return MapRaster(grid, out[None], "binary")


def rasterize_vectors(vectors, grid: GridSpec) -> MapRaster:
    """Semantic raster: crossings filled, then dividers, then boundaries stroked on top."""
    out = np.zeros(grid.shape, dtype=np.float32)
    order = {PEDESTRIAN: 0, DIVIDER: 1, BOUNDARY: 2}
    for e in sorted(vectors, key=lambda e: order[e.class_id]):
        if e.class_id == PEDESTRIAN:
            rasterize_polygon(e.points, grid, out, PEDESTRIAN)
        else:
            rasterize_polyline(e.points, grid, out, e.class_id)
    return MapRaster(grid, out[None], "semantic", NUM_CLASSES)


# -- scene generation -------------------------------------------------------------------

def _corridor_axis(rng, params: SceneParams, step=0.25):
    """Road axis as piecewise-constant curvature arcs sampled every ``step`` meters."""
    g = params.grid
    margin = 10.0
    length = (g.x_range[1] - g.x_range[0]) + 2 * margin
    n_pieces = int(rng.integers(1, 4))
    breaks = np.sort(rng.uniform(0, length, n_pieces - 1))
    kappas = rng.uniform(*params.curvature, n_pieces)
    s = np.arange(0.0, length + step, step)
    kappa = kappas[np.searchsorted(breaks, s)]
    theta = rng.uniform(*params.heading) + np.concatenate([[0.0], np.cumsum(kappa[:-1] * step)])
    x = g.x_range[0] - margin + np.concatenate([[0.0], np.cumsum(np.cos(theta[:-1]) * step)])
    y = rng.uniform(*params.lateral_offset) + np.concatenate([[0.0], np.cumsum(np.sin(theta[:-1]) * step)])
    # anchor so the axis passes near the ego origin
    k0 = np.argmin(np.abs(x))
    y = y - y[k0] + rng.uniform(*params.lateral_offset)
    axis = np.stack([x, y], axis=1)
    normal = np.stack([-np.sin(theta), np.cos(theta)], axis=1)
    return axis, normal


def clip_polyline(points, grid: GridSpec, shrink=1e-6) -> list[np.ndarray]:
    """Runs of consecutive in-range vertices (each with >= 2 vertices)."""
    pts = np.asarray(points)
    inside = ((pts[:, 0] >= grid.x_range[0] + shrink) & (pts[:, 0] <= grid.x_range[1] - shrink)
              & (pts[:, 1] >= grid.y_range[0] + shrink) & (pts[:, 1] <= grid.y_range[1] - shrink))
    runs, cur = [], []
    for p, ok in zip(pts, inside):
        if ok:
            cur.append(p)
        elif cur:
            runs.append(np.array(cur))
            cur = []
    if cur:
        runs.append(np.array(cur))
    return [r for r in runs if len(r) >= 2]


def _decimate(run: np.ndarray, every: int = 4) -> np.ndarray:
    if len(run) <= 2:
        return run
    keep = list(range(0, len(run), every))
    if keep[-1] != len(run) - 1:
        keep.append(len(run) - 1)
    return run[keep]


def _texture(rng, grid: GridSpec, semantic: np.ndarray, corridor: np.ndarray) -> np.ndarray:
    H, W = grid.shape
    noise = gaussian_filter(rng.standard_normal((H, W)), sigma=2.0, mode="nearest")
    noise /= max(noise.std(), 1e-12)
    ground = 0.45 + 0.04 * noise
    road = 0.22 + 0.03 * noise
    base = np.where(corridor, road, ground)
    tex = np.stack([base * 1.0, base * 1.02, base * 0.96])
    for cls, color in CLASS_COLORS.items():
        m = semantic == cls
        for ch in range(3):
            tex[ch][m] = color[ch]
    return np.clip(tex, 0.0, 1.0).astype(np.float32)


def generate_scene(seed: int, params: SceneParams | None = None) -> Scene:
    params = params or SceneParams()
    rng = np.random.default_rng(seed)
    g = params.grid
    axis, normal = _corridor_axis(rng, params)
    n_div = int(rng.integers(params.dividers[0], params.dividers[1] + 1))
    lane_w = float(rng.uniform(*params.lane_width))
    half = 0.5 * lane_w * (n_div + 1)

    vectors: list[VectorElement] = []
    for side in (-1.0, 1.0):
        for run in clip_polyline(axis + side * half * normal, g):
            vectors.append(VectorElement(BOUNDARY, _decimate(run)))
    for k in range(1, n_div + 1):
        off = -half + k * lane_w
        for run in clip_polyline(axis + off * normal, g):
            vectors.append(VectorElement(DIVIDER, _decimate(run)))

    n_cross = int(rng.integers(params.crossings[0], params.crossings[1] + 1))
    in_grid = np.nonzero(
        (axis[:, 0] > g.x_range[0] + 4) & (axis[:, 0] < g.x_range[1] - 4)
    )[0]
    stations = []
    for _ in range(n_cross * 8):
        if len(stations) == n_cross or in_grid.size == 0:
            break
        k = int(rng.choice(in_grid))
        if any(abs(k - s) < 40 for s in stations):
            continue
        depth = float(rng.uniform(2.5, 4.0))
        c, t, nrm = axis[k], np.array([normal[k][1], -normal[k][0]]), normal[k]
        w = half - 0.3
        poly = np.array([c - t * depth / 2 - nrm * w, c + t * depth / 2 - nrm * w,
                         c + t * depth / 2 + nrm * w, c - t * depth / 2 + nrm * w])
        clipped = np.column_stack([
            np.clip(poly[:, 0], g.x_range[0] + 1e-6, g.x_range[1] - 1e-6),
            np.clip(poly[:, 1], g.y_range[0] + 1e-6, g.y_range[1] - 1e-6)])
        if points_in_polygon(np.array([c[0]]), np.array([c[1]]), clipped)[0]:
            stations.append(k)
            vectors.append(VectorElement(PEDESTRIAN, np.vstack([clipped, clipped[:1]])))

    jitter = rng.uniform(-params.gps_jitter, params.gps_jitter, size=2) if params.gps_jitter else np.zeros(2)
    centerlines = tuple(_decimate(r) for r in clip_polyline(axis + jitter, g))

    semantic = rasterize_vectors(vectors, g)
    X, Y = g.cell_centers()
    corridor = corridor_mask(axis, half, X, Y)
    tex = _texture(rng, g, semantic.data[0], corridor)
    return Scene(int(seed), params, semantic, tuple(vectors), centerlines,
                 MapRaster(g, tex, "image"), half, axis)


def corridor_mask(axis: np.ndarray, half_width: float, X, Y, step: float = 0.02) -> np.ndarray:
    """Points within ``half_width`` of the axis polyline.

    The axis is resampled every ``step`` meters and queried with a KD-tree;
    the distance error is below ``step**2 / (8 * half_width)``.
    """
    seg = np.linalg.norm(np.diff(axis, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    t = np.arange(0.0, s[-1] + step, step)
    dense = np.stack([np.interp(t, s, axis[:, 0]), np.interp(t, s, axis[:, 1])], axis=1)
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    d, _ = cKDTree(dense).query(np.stack([X.ravel(), Y.ravel()], axis=1), distance_upper_bound=half_width + step)
    return (d <= half_width).reshape(X.shape)


# -- rendering -----------------------------------------------------------------------------

def sample_bilinear_grid(data: np.ndarray, grid: GridSpec, X, Y) -> np.ndarray:
    """Sample ``(C, H, W)`` cell-centered data at ego points (edge-clamped)."""
    gx, gy = grid.to_grid_coords(X, Y)
    x = snap_integer(gx - 0.5)
    y = snap_integer(gy - 0.5)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    H, W = grid.shape
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = 0.0
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = np.clip(x0 + dx, 0, W - 1)
        yi = np.clip(y0 + dy, 0, H - 1)
        out = out + data[:, yi, xi] * w
    return out


def sample_nearest_grid(data: np.ndarray, grid: GridSpec, X, Y) -> np.ndarray:
    gx, gy = grid.to_grid_coords(X, Y)
    H, W = grid.shape
    i = np.clip(np.floor(gx).astype(np.int64), 0, W - 1)
    j = np.clip(np.floor(gy).astype(np.int64), 0, H - 1)
    return data[:, j, i]


def render_raster(data: np.ndarray, grid: GridSpec, rig: CameraRig, h: float, out_size,
                  fill, sampling: str = "bilinear") -> np.ndarray:
    """Ray-cast every output pixel onto ``Z = h`` and sample a BEV raster.

    ``out_size = (w, h)``; output ``(n_cams, C, h, w)``. Pixels whose ray
    misses the plane or hits outside the grid get ``fill``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    ow, oh = out_size
    fill = np.broadcast_to(np.asarray(fill, dtype=np.float64), (data.shape[0],))
    out = np.empty((len(rig), data.shape[0], oh, ow), dtype=np.float64)
    cc, rr = np.meshgrid(np.arange(ow) + 0.5, np.arange(oh) + 0.5)
    sampler = sample_bilinear_grid if sampling == "bilinear" else sample_nearest_grid
    for n, cam in enumerate(rig):
        u_o = cc * cam.width / ow
        v_o = rr * cam.height / oh
        X, Y, valid = backproject_to_plane(cam, u_o, v_o, h)
        hit = valid & grid.contains(np.nan_to_num(X, nan=np.inf), np.nan_to_num(Y, nan=np.inf))
        img = np.empty((data.shape[0], oh, ow))
        img[:] = fill[:, None, None]
        if hit.any():
            img[:, hit] = sampler(data, grid, X[hit], Y[hit])
        out[n] = img
    return out


def render_perspective(scene_or_texture, rig: CameraRig, h: float = 0.0, out_size=(352, 128),
                       grid: GridSpec | None = None) -> np.ndarray:
    """Render the scene's ground texture into every camera: ``(n_cams, 3, h, w)`` in [0, 1]."""
    if isinstance(scene_or_texture, Scene):
        tex = scene_or_texture.ground_texture
        data, grid = tex.data, tex.grid
    elif isinstance(scene_or_texture, MapRaster):
        data, grid = scene_or_texture.data, scene_or_texture.grid
    else:
        data = scene_or_texture
    return render_raster(data, grid, rig, h, out_size, HORIZON_COLOR[: np.shape(data)[0]]
                         if np.shape(data)[0] == 3 else 0.0)


def render_foreground(scene: Scene, rig: CameraRig, h: float = 0.0, out_size=(352, 128),
                      sampling: str = "bilinear") -> np.ndarray:
    """Perspective map-element mask ``(n_cams, 1, h, w)``: soft for bilinear, binary for nearest."""
    return render_raster(scene.foreground(), scene.grid, rig, h, out_size, 0.0, sampling)


# -- corruptions ---------------------------------------------------------------------------

CORRUPTIONS = ("brightness", "camera_crash", "frame_lost", "gaussian_noise")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: float
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}; choose from {CORRUPTIONS}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity must be in [0, 1], got {self.severity}")


def corrupt(images: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt ``(n_cams, C, h, w)`` images; severity 0 returns an exact copy."""
    imgs = np.array(images, copy=True)
    s = spec.severity
    if s == 0:
        return imgs
    rng = np.random.default_rng(spec.rng_seed)
    n = imgs.shape[0]
    if spec.kind == "brightness":
        imgs = np.clip(imgs * (1.0 + s), 0.0, 1.0)
    elif spec.kind == "camera_crash":
        k = min(n, math.ceil(s * n - 1e-12))
        imgs[rng.choice(n, size=k, replace=False)] = 0.0
    elif spec.kind == "frame_lost":
        imgs[rng.random(n) < s] = 0.0
    elif spec.kind == "gaussian_noise":
        imgs = np.clip(imgs + rng.normal(0.0, s * 0.1, size=imgs.shape), 0.0, 1.0)
    return imgs.astype(np.asarray(images).dtype, copy=False)
