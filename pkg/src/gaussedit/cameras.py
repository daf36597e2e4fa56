"""Pinhole cameras and pose construction.

Conventions: camera space is x-right, y-down, z-forward; pixel (row i, col j)
has its center at (x, y) = (j + 0.5, i + 0.5); projection is
u = fx * x/z + cx, v = fy * y/z + cy. Poses are stored as world-to-camera
rigid transforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus a world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # 4x4, rows [R | t; 0 0 0 1]
    znear: float = 0.01

    def __post_init__(self):
        object.__setattr__(
            self,
            "world_to_camera",
            np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4),
        )
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image dimensions must be >= 1")
        if not self.znear > 0:
            raise InvalidParameterError("znear must be positive")
        R = self.rotation
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise InvalidParameterError("world_to_camera rotation not orthonormal within 1e-6")
        if np.linalg.det(R) < 0:
            raise InvalidParameterError("world_to_camera rotation is a reflection")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def eye(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return points @ self.rotation.T + self.translation

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(xs, ys): x coordinates of column centers, y of row centers."""
        xs = np.arange(self.width, dtype=np.float64) + 0.5
        ys = np.arange(self.height, dtype=np.float64) + 0.5
        return xs, ys


def look_at(
    eye,
    target,
    up=(0.0, 1.0, 0.0),
    *,
    width: int,
    height: int,
    fov_y_deg: float = 50.0,
    znear: float = 0.01,
) -> Camera:
    """Camera at eye looking at target, with square pixels and centered principal point.

    fov_y_deg is the full vertical field of view; fx = fy is derived from it and
    the image height.
    """
    eye = np.asarray(eye, dtype=np.float64).reshape(3)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    up = np.asarray(up, dtype=np.float64).reshape(3)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise InvalidParameterError("eye and target coincide")
    z_c = forward / norm
    right = np.cross(z_c, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise InvalidParameterError("view direction parallel to up vector")
    x_c = right / rnorm
    y_c = np.cross(z_c, x_c)
    R = np.stack([x_c, y_c, z_c], axis=0)
    t = -R @ eye
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t

    if not 0.0 < fov_y_deg < 180.0:
        raise InvalidParameterError("fov_y_deg must be in (0, 180)")
    f = 0.5 * height / math.tan(math.radians(fov_y_deg) / 2.0)
    return Camera(
        fx=f,
        fy=f,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        world_to_camera=M,
        znear=znear,
    )


def orbit_camera(
    azimuth_deg: float,
    elevation_deg: float,
    radius: float,
    target=(0.0, 0.0, 0.0),
    *,
    width: int,
    height: int,
    fov_y_deg: float = 50.0,
    znear: float = 0.01,
) -> Camera:
    """Camera on a sphere around target (y-up world), looking at target.

    Azimuth 0 places the camera on +z; elevation is measured up from the
    horizontal plane.
    """
    if radius <= 0:
        raise InvalidParameterError("orbit radius must be positive")
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    direction = np.array(
        [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
    )
    eye = np.asarray(target, dtype=np.float64) + radius * direction
    return look_at(
        eye, target, width=width, height=height, fov_y_deg=fov_y_deg, znear=znear
    )


@dataclass(frozen=True)
class OrbitSpec:
    """Camera distribution for optimization: uniform azimuth, banded elevation
    and radius, fixed look-at target."""

    target: np.ndarray = field(default_factory=lambda: np.zeros(3))
    elevation_range_deg: tuple[float, float] = (-10.0, 45.0)
    radius_range: tuple[float, float] = (1.2, 1.8)
    width: int = 64
    height: int = 64
    fov_y_deg: float = 50.0
    znear: float = 0.01

    def __post_init__(self):
        object.__setattr__(
            self, "target", np.asarray(self.target, dtype=np.float64).reshape(3)
        )
        lo, hi = self.elevation_range_deg
        if not -90.0 < lo <= hi < 90.0:
            raise InvalidParameterError("elevation range must be within (-90, 90)")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi:
            raise InvalidParameterError("radius range must be positive and ordered")

    def sample(self, rng: np.random.Generator) -> Camera:
        az = rng.uniform(0.0, 360.0)
        el = rng.uniform(*self.elevation_range_deg)
        radius = rng.uniform(*self.radius_range)
        return self.at(az, el, radius)

    def at(self, azimuth_deg: float, elevation_deg: float, radius: float) -> Camera:
        return orbit_camera(
            azimuth_deg,
            elevation_deg,
            radius,
            target=self.target,
            width=self.width,
            height=self.height,
            fov_y_deg=self.fov_y_deg,
            znear=self.znear,
        )

    def ring(self, azimuth_deg: float, elevation_deg: float, radius: float, offsets_deg=(0.0, 90.0, 180.0, 270.0)):
        """Cameras at fixed azimuth offsets from a base pose (multi-view batches)."""
        return [self.at(azimuth_deg + off, elevation_deg, radius) for off in offsets_deg]
