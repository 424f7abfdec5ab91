"""Cameras, rays, world<->grid coordinate maps, and projection.

All operations here are pure numpy and stateless; nothing on this path needs
gradients (sample positions are held fixed during optimization).

Conventions, enforced by round-trip tests:
  * pixel centers sit at integer + 0.5 in continuous image coordinates,
  * normalized grid coordinates put -1/+1 at the centers of the border cells,
  * camera frame is x-right, y-down, z-forward (optical axis = +z),
  * poses are camera-to-world.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels, camera-to-world pose in meters."""

    intrinsics: np.ndarray  # 3x3
    cam_to_world: np.ndarray  # 4x4
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        m = np.asarray(self.cam_to_world, dtype=np.float64)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "cam_to_world", m)
        if k.shape != (3, 3) or m.shape != (4, 4):
            raise ValueError(f"camera matrices must be 3x3 and 4x4, got {k.shape}, {m.shape}")
        if k[1, 0] != 0 or k[2, 0] != 0 or k[2, 1] != 0:
            raise ValueError("intrinsic matrix must be upper-triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("pose rotation block must have determinant +1")

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def optical_axis(self) -> np.ndarray:
        return self.cam_to_world[:3, 2]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit vector
    near: float
    far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, |d|={np.linalg.norm(d)}")
        if not (0.0 < self.near < self.far):
            raise ValueError(f"require 0 < near < far, got {self.near}, {self.far}")


@dataclass(frozen=True)
class ContractionParams:
    """Per-axis scale (1/meters) applied before radial contraction."""

    scale: np.ndarray  # [s_h, s_w, s_z]

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64)
        object.__setattr__(self, "scale", s)
        if s.shape != (3,) or np.any(s <= 0):
            raise ValueError(f"contraction scale must be 3 positive values, got {s}")


@dataclass(frozen=True)
class BoundedParams:
    """Affine world->grid map for bounded scenes: (x - offset) / scale."""

    scale: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64)
        o = np.asarray(self.offset, dtype=np.float64)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "offset", o)
        if s.shape != (3,) or np.any(s <= 0):
            raise ValueError(f"scale must be 3 positive values, got {s}")
        if o.shape != (3,):
            raise ValueError(f"offset must have 3 components, got {o.shape}")


_ONE_MINUS = np.nextafter(1.0, 0.0)


def contract(points: np.ndarray, params: ContractionParams) -> np.ndarray:
    """Squeeze world points into the open unit ball.

    Scaled points inside the unit sphere map to x/2; outside they map to
    (2 - 1/|x|) * x / (2|x|), which approaches (but never reaches) norm 1.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.all(np.isfinite(pts)):
        raise ValueError("contract: non-finite input point")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        xs = pts * params.scale
        # guard against overflow for extreme (but finite) inputs; only the
        # direction matters once the radius is astronomically large
        xs = np.where(np.isfinite(xs), xs, np.sign(pts) * 1e300)
        mag = np.max(np.abs(xs), axis=-1, keepdims=True)
        huge = mag > 1e150
        denom = np.where(huge, mag, 1.0)
        xr = xs / denom
        r = np.linalg.norm(xr, axis=-1, keepdims=True)  # true radius / denom
        unit = np.where(r > 0, xr / np.where(r > 0, r, 1.0), 0.0)
        inv_r = np.where(huge, 0.0, 1.0 / np.maximum(r, np.finfo(np.float64).tiny))
        coef = np.minimum((2.0 - inv_r) * 0.5, _ONE_MINUS)
    inner = xs * 0.5
    outer = unit * coef
    out = np.where(~huge & (r <= 1.0), inner, outer)
    return out.reshape(np.shape(points))


def uncontract(grid_points: np.ndarray, params: ContractionParams) -> np.ndarray:
    """Analytic inverse of :func:`contract`; defined on the open unit ball."""
    pts = np.atleast_2d(np.asarray(grid_points, dtype=np.float64))
    r = np.linalg.norm(pts, axis=-1, keepdims=True)
    if np.any(r >= 1.0):
        raise ValueError("uncontract: point outside the open unit ball")
    inner = pts * 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(r > 0, pts / np.where(r > 0, r, 1.0), 0.0)
        mag = 1.0 / np.maximum(2.0 - 2.0 * r, np.finfo(np.float64).tiny)
    outer = unit * mag
    xs = np.where(r <= 0.5, inner, outer)
    out = xs / params.scale
    return out.reshape(np.shape(grid_points))


def world_to_grid_bounded(points: np.ndarray, params: BoundedParams) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - params.offset) / params.scale


def generate_rays(camera: Camera, pixels, near: float = 0.1, far: float = 100.0) -> list[Ray]:
    """One ray per (u, v) pixel coordinate, cast through the pixel center."""
    dirs = ray_directions(camera, np.asarray(pixels, dtype=np.float64))
    origin = camera.position.copy()
    return [Ray(origin, d, near, far) for d in dirs]


def ray_directions(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    """Unit world-space directions for an [n, 2] array of pixel coordinates."""
    k = camera.intrinsics
    if abs(np.linalg.det(k)) < 1e-12:
        raise np.linalg.LinAlgError("singular intrinsic matrix")
    kinv = np.linalg.inv(k)
    pix = np.atleast_2d(pixels)
    homo = np.concatenate([pix + 0.5, np.ones((pix.shape[0], 1))], axis=1)
    cam_dirs = homo @ kinv.T
    world_dirs = cam_dirs @ camera.rotation.T
    return world_dirs / np.linalg.norm(world_dirs, axis=1, keepdims=True)


def project_to_camera(points: np.ndarray, camera: Camera):
    """Project world points; returns continuous pixel coords and a validity flag.

    Valid means the point sits in front of the camera and lands inside the
    image rectangle [0, W] x [0, H]. Pixel-index space is offset by 0.5 from
    the returned continuous coordinates.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    rel = pts - camera.position
    cam = rel @ camera.rotation  # R^T applied row-wise
    z = cam[:, 2]
    in_front = z > 1e-12
    zsafe = np.where(in_front, z, 1.0)
    k = camera.intrinsics
    u = k[0, 0] * cam[:, 0] / zsafe + k[0, 1] * cam[:, 1] / zsafe + k[0, 2]
    v = k[1, 1] * cam[:, 1] / zsafe + k[1, 2]
    valid = in_front & (u >= 0) & (u <= camera.width) & (v >= 0) & (v <= camera.height)
    uv = np.stack([u, v], axis=1)
    if np.ndim(points) == 1:
        return uv[0], bool(valid[0])
    return uv, valid


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from ``position`` toward ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("look_at: target coincides with position")
    z = forward / norm
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        raise ValueError("look_at: view direction parallel to up vector")
    x = x / xn
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0] = x
    pose[:3, 1] = y
    pose[:3, 2] = z
    pose[:3, 3] = position
    return pose


def yaw_pose(yaw: float, position) -> np.ndarray:
    """Outward-facing horizontal camera at ``yaw`` radians (x-axis = yaw 0)."""
    c, s = np.cos(yaw), np.sin(yaw)
    pose = np.eye(4)
    pose[:3, 0] = (s, -c, 0.0)   # image right
    pose[:3, 1] = (0.0, 0.0, -1.0)  # image down = world down
    pose[:3, 2] = (c, s, 0.0)    # optical axis
    pose[:3, 3] = np.asarray(position, dtype=np.float64)
    return pose


def intrinsics_from_fov(width: int, height: int, fov_x_deg: float) -> np.ndarray:
    """Intrinsic matrix with square pixels from a horizontal field of view."""
    fx = (width / 2.0) / np.tan(np.deg2rad(fov_x_deg) / 2.0)
    return np.array([
        [fx, 0.0, width / 2.0],
        [0.0, fx, height / 2.0],
        [0.0, 0.0, 1.0],
    ])
