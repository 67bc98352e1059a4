"""Pinhole cameras, depth unprojection, 3D->2D projection, 9-DOF boxes and IoU.

Conventions
-----------
* World frame: z up. Camera frame: x right, y down, z forward.
* Extrinsics map world to camera: ``p_cam = R @ p_world + t``.
* Pixel ``(u, v)`` is the center of column ``u`` / row ``v``; the image covers
  ``[-0.5, W - 0.5) x [-0.5, H - 0.5)``.
* Box rotations are intrinsic Z-X-Y Euler angles ``(a, b, c)``:
  ``R = Rz(a) @ Rx(b) @ Ry(c)``.
* :func:`box_corners` orders corners by ``itertools.product((-1, 1), repeat=3)``
  over the signs of the local (l, w, h) half-extents.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import qmc

DEFAULT_NEAR = 0.05
CORNER_SIGNS = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    return a - 2 * np.pi * np.ceil((a - np.pi) / (2 * np.pi))


@dataclass
class CameraView:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    rgb: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    near: float = DEFAULT_NEAR
    width: int = 0
    height: int = 0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.depth is not None:
            self.height, self.width = self.depth.shape
        elif self.rgb is not None:
            self.height, self.width = self.rgb.shape[:2]
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-5) or abs(np.linalg.det(self.R) - 1) > 1e-5:
            raise ValueError("camera rotation must be orthonormal with det 1")
        if self.depth is not None and np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def position(self) -> np.ndarray:
        return -self.R.T @ self.t


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Extrinsics (R, t) of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        r = np.cross(f, (0.0, -1.0, 0.0))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    return R, -R @ eye


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self):
        return len(self.positions)


def unproject(view: CameraView, stride: int = 1) -> PointCloud:
    """Lift every valid-depth pixel (sampled every ``stride`` pixels) to world space."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    vs, us = np.mgrid[0:view.height:stride, 0:view.width:stride]
    d = view.depth[vs, us]
    ok = d > 0
    u, v, d = us[ok].astype(np.float64), vs[ok].astype(np.float64), d[ok].astype(np.float64)
    cam = np.stack([(u - view.cx) / view.fx * d, (v - view.cy) / view.fy * d, d], axis=1)
    world = (cam - view.t) @ view.R
    colors = view.rgb[vs[ok], us[ok]].astype(np.float64) if view.rgb is not None else None
    return PointCloud(world, colors)


@dataclass
class Projection:
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    visible: np.ndarray


def project(points, view: CameraView) -> Projection:
    """Project world points; ``visible`` requires z > near and a pixel inside the image."""
    pts = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    cam = pts.reshape(-1, 3) @ view.R.T + view.t
    z = cam[:, 2]
    front = z > view.near
    safe_z = np.where(front, z, 1.0)
    u = view.fx * cam[:, 0] / safe_z + view.cx
    v = view.fy * cam[:, 1] / safe_z + view.cy
    inside = (u >= -0.5) & (u < view.width - 0.5) & (v >= -0.5) & (v < view.height - 0.5)
    return Projection(u, v, z, front & inside)


# -- boxes ------------------------------------------------------------------

def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def euler_zxy(angles) -> np.ndarray:
    a, b, c = angles
    return rot_z(a) @ rot_x(b) @ rot_y(c)


@dataclass
class OrientedBox9:
    center: np.ndarray
    size: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.rotation = wrap_angle(np.asarray(self.rotation, dtype=np.float64).reshape(3))
        if np.any(self.size <= 0):
            raise ValueError(f"box sizes must be positive, got {self.size}")

    @classmethod
    def from_vector(cls, vec) -> "OrientedBox9":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:3], vec[3:6], vec[6:9])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.center, self.size, self.rotation])

    @property
    def R(self) -> np.ndarray:
        return euler_zxy(self.rotation)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def contains(self, pts, eps: float = 0.0) -> np.ndarray:
        local = (np.asarray(pts) - self.center) @ self.R
        return np.all(np.abs(local) <= self.size / 2 + eps, axis=-1)


def box_corners(b: OrientedBox9) -> np.ndarray:
    """8x3 world corners, ordered by the sign pattern in ``CORNER_SIGNS``."""
    return b.center + (CORNER_SIGNS * (b.size / 2)) @ b.R.T


@functools.lru_cache(maxsize=16)
def _halton(samples: int, seed: int) -> np.ndarray:
    pts = qmc.Halton(d=3, scramble=True, seed=seed).random(samples)
    pts.setflags(write=False)
    return pts


def _axis_aligned(b: OrientedBox9) -> bool:
    return not np.any(b.rotation)


def _overlap_fraction(a: OrientedBox9, b: OrientedBox9, samples: int, seed: int) -> float:
    u = _halton(samples, seed)
    local = (u - 0.5) * a.size
    world = local @ a.R.T + a.center
    return float(np.mean(b.contains(world)))


def iou9(a: OrientedBox9, b: OrientedBox9, samples: int = 16384, seed: int = 0) -> float:
    """3D IoU of two oriented boxes.

    Axis-aligned pairs use the closed form. Otherwise the intersection volume
    is estimated with scrambled Halton points filling each box in turn; the two
    estimates are averaged, so ``iou9(a, b) == iou9(b, a)`` exactly.
    """
    if samples < 1024:
        raise ValueError("iou9 needs at least 1024 samples")
    if (np.array_equal(a.center, b.center) and np.array_equal(a.size, b.size)
            and np.array_equal(a.rotation, b.rotation)):
        return 1.0
    reach = (np.linalg.norm(a.size) + np.linalg.norm(b.size)) / 2
    if np.linalg.norm(a.center - b.center) > reach:
        return 0.0
    va, vb = a.volume, b.volume
    if _axis_aligned(a) and _axis_aligned(b):
        lo = np.maximum(a.center - a.size / 2, b.center - b.size / 2)
        hi = np.minimum(a.center + a.size / 2, b.center + b.size / 2)
        inter = float(np.prod(np.clip(hi - lo, 0, None)))
    else:
        inter = 0.5 * (va * _overlap_fraction(a, b, samples, seed) + vb * _overlap_fraction(b, a, samples, seed))
    union = va + vb - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def ray_box_depth(origin, directions, box: OrientedBox9):
    """Slab-method ray/oriented-box intersection.

    Returns (t_hit, face_normal_world); ``t_hit`` is ``inf`` on a miss and the
    parameter is along the given (unnormalized) directions.
    """
    R = box.R
    o = (np.asarray(origin) - box.center) @ R
    d = np.asarray(directions) @ R
    half = box.size / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    axis = tmin.argmax(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    t_hit = np.where(hit, t_near, np.inf)
    sign = -np.sign(np.take_along_axis(d, axis[..., None], axis=-1))[..., 0]
    local_n = np.zeros(d.shape)
    np.put_along_axis(local_n, axis[..., None], sign[..., None], axis=-1)
    return t_hit, local_n @ R.T
