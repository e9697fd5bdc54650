"""Pinhole cameras, BEV grid geometry and the ego <-> camera <-> pixel transforms.

Conventions
-----------
* ego frame: X forward, Y left, Z up (meters)
* camera frame: z forward, x right, y down
* pixels: pixel ``(c, r)`` covers ``[c, c+1) x [r, r+1)``; its center is at
  ``(c + 0.5, r + 0.5)``. Image extents are therefore ``[0, W) x [0, H)``.
* BEV cell ``(i, j)``: ``i`` indexes X (raster column), ``j`` indexes Y
  (raster row). Cells are half-open ``[x_i, x_i + res) x [y_j, y_j + res)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPS_DEPTH = 1e-6
_ORTHO_TOL = 1e-9


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned BEV grid in the ego frame."""

    x_range: tuple[float, float] = (-30.0, 30.0)
    y_range: tuple[float, float] = (-15.0, 15.0)
    resolution: float = 0.15

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        for name, (lo, hi) in (("x_range", self.x_range), ("y_range", self.y_range)):
            n = (hi - lo) / self.resolution
            if not hi > lo or abs(n - round(n)) > 1e-6 or round(n) < 1:
                raise ValueError(
                    f"{name}={self.x_range if name == 'x_range' else self.y_range} "
                    f"is not a positive multiple of resolution {self.resolution}"
                )

    @property
    def w_cells(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.resolution))

    @property
    def h_cells(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        """Raster shape ``(H_cells, W_cells)``."""
        return self.h_cells, self.w_cells

    def with_resolution(self, resolution: float) -> "GridSpec":
        return GridSpec(self.x_range, self.y_range, resolution)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` arrays of shape ``(H_cells, W_cells)``."""
        xs = self.x_range[0] + (np.arange(self.w_cells) + 0.5) * self.resolution
        ys = self.y_range[0] + (np.arange(self.h_cells) + 0.5) * self.resolution
        X, Y = np.meshgrid(xs, ys)
        return X, Y

    def to_grid_coords(self, X, Y) -> tuple[np.ndarray, np.ndarray]:
        """Continuous cell coordinates: integer values fall on cell edges."""
        gx = (np.asarray(X, dtype=np.float64) - self.x_range[0]) / self.resolution
        gy = (np.asarray(Y, dtype=np.float64) - self.y_range[0]) / self.resolution
        return gx, gy

    def contains(self, X, Y) -> np.ndarray:
        X = np.asarray(X)
        Y = np.asarray(Y)
        return (
            (X >= self.x_range[0]) & (X < self.x_range[1])
            & (Y >= self.y_range[0]) & (Y < self.y_range[1])
        )

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "resolution": self.resolution}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), float(d["resolution"]))


def bev_cell_to_ego(cell: tuple[int, int], grid: GridSpec) -> tuple[float, float]:
    """Center of cell ``(i, j)`` in ego meters."""
    i, j = cell
    if not (0 <= i < grid.w_cells and 0 <= j < grid.h_cells):
        raise IndexError(f"cell {cell} outside grid of {grid.w_cells}x{grid.h_cells} cells")
    return (grid.x_range[0] + (i + 0.5) * grid.resolution,
            grid.y_range[0] + (j + 0.5) * grid.resolution)


@dataclass(frozen=True)
class PixelHit:
    cam_index: int
    u: float
    v: float
    depth: float


def rotation_from_yaw_pitch(yaw: float, pitch: float, roll: float = 0.0) -> np.ndarray:
    """Ego->camera rotation for a camera with the given heading.

    ``yaw`` rotates counter-clockwise about ego Z (0 = looking along +X),
    ``pitch`` > 0 tilts the optical axis down, ``roll`` spins about it.
    """
    fwd = np.array([math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), -math.sin(pitch)])
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    if roll:
        c, s = math.cos(roll), math.sin(roll)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ R
    return R


@dataclass(frozen=True)
class Camera:
    """One pinhole camera: ``K`` in pixels of the original image, ``T_ego_to_cam`` rigid."""

    name: str
    K: np.ndarray
    T_ego_to_cam: np.ndarray
    width: int
    height: int
    allow_skew: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "K", _frozen(self.K, (3, 3)))
        object.__setattr__(self, "T_ego_to_cam", _frozen(self.T_ego_to_cam, (4, 4)))
        K, T = self.K, self.T_ego_to_cam
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError(f"camera {self.name!r}: focal lengths must be positive")
        if K[0, 1] != 0 and not self.allow_skew:
            raise ValueError(f"camera {self.name!r}: nonzero skew")
        if not np.allclose(K[2], [0, 0, 1]):
            raise ValueError(f"camera {self.name!r}: last row of K must be [0, 0, 1]")
        R = T[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() >= _ORTHO_TOL or np.linalg.det(R) < 0:
            raise ValueError(f"camera {self.name!r}: extrinsic rotation is not orthonormal")
        if not np.allclose(T[3], [0, 0, 0, 1]):
            raise ValueError(f"camera {self.name!r}: last row of T_ego_to_cam must be [0, 0, 0, 1]")
        if not (int(self.width) > 0 and int(self.height) > 0):
            raise ValueError(f"camera {self.name!r}: image size must be positive")

    @classmethod
    def looking(cls, name: str, position: Sequence[float], yaw: float, pitch: float,
                focal: float, size: tuple[int, int], roll: float = 0.0) -> "Camera":
        """Camera at ego ``position`` with heading ``yaw``/``pitch`` (radians), principal point centered."""
        w, h = size
        R = rotation_from_yaw_pitch(yaw, pitch, roll)
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ np.asarray(position, dtype=np.float64)
        K = np.array([[focal, 0.0, w / 2.0], [0.0, focal, h / 2.0], [0.0, 0.0, 1.0]])
        return cls(name, K, T, int(w), int(h))

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def R(self) -> np.ndarray:
        return self.T_ego_to_cam[:3, :3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in the ego frame."""
        return -self.R.T @ self.T_ego_to_cam[:3, 3]

    @property
    def P(self) -> np.ndarray:
        """3x4 projection ``K [R | t]``."""
        return self.K @ self.T_ego_to_cam[:3, :]

    def transformed(self, T_new_from_old: np.ndarray) -> "Camera":
        """Same camera after expressing the ego frame through a rigid change of frame."""
        T = self.T_ego_to_cam @ np.linalg.inv(T_new_from_old)
        return Camera(self.name, self.K, T, self.width, self.height, self.allow_skew)

    def to_dict(self) -> dict:
        return {"name": self.name, "K": self.K.ravel().tolist(),
                "T_ego_to_cam": self.T_ego_to_cam.ravel().tolist(),
                "width": int(self.width), "height": int(self.height)}


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i) -> Camera:
        return self.cameras[i]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.cameras]

    def transformed(self, T_new_from_old: np.ndarray) -> "CameraRig":
        return CameraRig(tuple(c.transformed(T_new_from_old) for c in self.cameras))

    def to_json(self) -> str:
        return json.dumps([c.to_dict() for c in self.cameras], indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "CameraRig":
        return cls(tuple(_camera_from_dict(d, k) for k, d in enumerate(json.loads(text))))

    @classmethod
    def load(cls, path) -> "CameraRig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _camera_from_dict(d: dict, index: int) -> Camera:
    for key in ("name", "K", "T_ego_to_cam", "width", "height"):
        if key not in d:
            raise ValueError(f"[{index}].{key}: missing field")
    if len(d["K"]) != 9:
        raise ValueError(f"[{index}].K: expected 9 numbers, got {len(d['K'])}")
    if len(d["T_ego_to_cam"]) != 16:
        raise ValueError(f"[{index}].T_ego_to_cam: expected 16 numbers, got {len(d['T_ego_to_cam'])}")
    return Camera(str(d["name"]), d["K"], d["T_ego_to_cam"], int(d["width"]), int(d["height"]))


# -- projection -------------------------------------------------------------

def project_points(cam: Camera, points: np.ndarray, eps_depth: float = EPS_DEPTH):
    """Vectorized projection of ego points ``(..., 3)``.

    Returns ``(u, v, depth, valid)``; ``u, v`` are in original-image pixels and
    undefined (nan) where ``valid`` is False (point at or behind the camera).
    """
    pts = np.asarray(points, dtype=np.float64)
    hom = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)
    pc = hom @ cam.T_ego_to_cam[:3, :].T
    depth = pc[..., 2]
    valid = depth > eps_depth
    safe = np.where(valid, depth, 1.0)
    uvw = pc @ cam.K.T
    u = np.where(valid, uvw[..., 0] / safe, np.nan)
    v = np.where(valid, uvw[..., 1] / safe, np.nan)
    return u, v, depth, valid


def project_ego_to_pixel(point: Sequence[float], cam: Camera, cam_index: int = 0,
                         eps_depth: float = EPS_DEPTH) -> PixelHit | None:
    """Project one ego point ``(X, Y, h)``; None when it is not in front of the camera."""
    X, Y, h = (float(c) for c in point)
    pc = cam.T_ego_to_cam @ np.array([X, Y, h, 1.0])
    if pc[2] <= eps_depth:
        return None
    uvw = cam.K @ pc[:3]
    return PixelHit(cam_index, float(uvw[0] / uvw[2]), float(uvw[1] / uvw[2]), float(pc[2]))


def scale_pixel(pixel: tuple[float, float], target_size: tuple[float, float],
                source_size: tuple[float, float]) -> tuple[float, float]:
    """Rescale pixel coordinates from a ``source_size`` image to ``target_size``."""
    u_o, v_o = pixel
    return u_o * target_size[0] / source_size[0], v_o * target_size[1] / source_size[1]


def pixel_rays(cam: Camera, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame ray origin ``(3,)`` and directions ``(..., 3)`` for original-image pixels."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    K = cam.K
    # K is upper triangular: solve without forming the inverse
    y = (v - K[1, 2]) / K[1, 1]
    x = (u - K[0, 2] - K[0, 1] * y) / K[0, 0]
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    return cam.center, d_cam @ cam.R


def backproject_to_plane(cam: Camera, u, v, h: float = 0.0):
    """Intersect the rays of original-image pixels with the plane ``Z = h``.

    Returns ``(X, Y, valid)``. Invalid where the ray is parallel to or points
    away from the plane.
    """
    origin, d = pixel_rays(cam, u, v)
    dz = d[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (h - origin[2]) / dz
    valid = np.isfinite(t) & (t > 0)
    t = np.where(valid, t, np.nan)
    return origin[0] + t * d[..., 0], origin[1] + t * d[..., 1], valid


# -- ready-made rigs ----------------------------------------------------------

NUSCENES_LIKE_SIZE = (1600, 900)
_RING_FOCAL = 800 / math.tan(math.radians(35.0))  # 70 deg horizontal field of view


def _ring_camera(name, yaw_deg, radius_xy, height=1.6, pitch_deg=8.0):
    yaw = math.radians(yaw_deg)
    pos = (radius_xy[0], radius_xy[1], height)
    return Camera.looking(name, pos, yaw, math.radians(pitch_deg), _RING_FOCAL, NUSCENES_LIKE_SIZE)


def front_rig() -> CameraRig:
    """Single forward camera."""
    return CameraRig((_ring_camera("front", 0.0, (1.5, 0.0)),))


def stereo_front_rig(baseline: float = 0.6) -> CameraRig:
    """Two forward cameras with a lateral baseline and a small toe-out."""
    b = baseline / 2.0
    return CameraRig((
        _ring_camera("front_left", 4.0, (1.5, b)),
        _ring_camera("front_right", -4.0, (1.5, -b)),
    ))


def ring_rig() -> CameraRig:
    """Six cameras spaced 60 degrees apart; neighbours overlap by about 10 degrees."""
    specs = [
        ("front", 0.0, (1.6, 0.0)),
        ("front_left", 60.0, (1.4, 0.6)),
        ("back_left", 120.0, (-0.4, 0.7)),
        ("back", 180.0, (-1.0, 0.0)),
        ("back_right", -120.0, (-0.4, -0.7)),
        ("front_right", -60.0, (1.4, -0.6)),
    ]
    return CameraRig(tuple(_ring_camera(n, y, p) for n, y, p in specs))


def nadir_rig(grid: GridSpec | None = None, height: float = 40.0) -> CameraRig:
    """One downward camera whose pixel lattice coincides with the BEV cell lattice at Z = 0.

    Column ``c`` images cells ``i = c`` and row ``r`` images ``j = H - 1 - r``,
    so every cell center projects to a pixel center.
    """
    grid = grid or GridSpec()
    xc = 0.5 * (grid.x_range[0] + grid.x_range[1])
    yc = 0.5 * (grid.y_range[0] + grid.y_range[1])
    R = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ np.array([xc, yc, height])
    f = height / grid.resolution
    W, H = grid.w_cells, grid.h_cells
    K = np.array([[f, 0.0, W / 2.0], [0.0, f, H / 2.0], [0.0, 0.0, 1.0]])
    return CameraRig((Camera("nadir", K, T, W, H),))


RIGS = {"front": front_rig, "stereo": stereo_front_rig, "ring": ring_rig, "nadir": nadir_rig}


def make_rig(name_or_path: str) -> CameraRig:
    """Named preset (``front``, ``stereo``, ``ring``, ``nadir``) or path to a rig JSON file."""
    if name_or_path in RIGS:
        return RIGS[name_or_path]()
    return CameraRig.load(name_or_path)


def rigid_transform(yaw: float = 0.0, translation: Iterable[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """4x4 ego-frame rigid transform: rotation about Z then translation."""
    c, s = math.cos(yaw), math.sin(yaw)
    T = np.eye(4)
    T[:3, :3] = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    T[:3, 3] = list(translation)
    return T
