"""Spherical cameras, perspective projection, and the hierarchical
full-body / head view sampler.

Conventions: up axis +Y, polar angle measured from +Y (90 deg = equator),
azimuth 0 looks down +Z, camera roll is zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateCameraError, DimensionError


class ViewMode(Enum):
    FULL_BODY = "full_body"
    HEAD = "head"


# Sampling ranges (degrees): polar and azimuth per view mode.
FULL_BODY_POLAR = (60.0, 90.0)
FULL_BODY_AZIMUTH = (-180.0, 180.0)
HEAD_POLAR = (75.0, 85.0)
HEAD_AZIMUTH = (-30.0, 30.0)
DEFAULT_HEAD_PROBABILITY = 0.30
DEFAULT_FOV_FULL = 45.0
DEFAULT_FOV_HEAD = 30.0


@dataclass(eq=False)
class CameraSpec:
    radius: float  # meters
    polar: float  # degrees from +Y
    azimuth: float  # degrees
    fov_y: float  # degrees
    look_at: np.ndarray  # (3,)
    resolution: tuple[int, int]  # (width, height)

    def __post_init__(self):
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        if not (0.0 < self.polar < 180.0):
            raise DegenerateCameraError(f"polar must be in (0, 180), got {self.polar}")
        if not (10.0 < self.fov_y < 120.0):
            raise DegenerateCameraError(f"fov_y must be in (10, 120), got {self.fov_y}")
        w, h = self.resolution
        if w < 8 or h < 8:
            raise DegenerateCameraError(f"resolution must be >= 8x8, got {self.resolution}")
        if self.radius <= 1e-9:
            raise DegenerateCameraError("camera eye coincides with look_at")

    def with_resolution(self, width: int, height: int) -> "CameraSpec":
        return CameraSpec(self.radius, self.polar, self.azimuth, self.fov_y,
                          self.look_at.copy(), (width, height))

    @property
    def eye(self) -> np.ndarray:
        pol = np.deg2rad(self.polar)
        az = np.deg2rad(self.azimuth)
        direction = np.array([
            np.sin(pol) * np.sin(az),
            np.cos(pol),
            np.sin(pol) * np.cos(az),
        ])
        return self.look_at + self.radius * direction

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(eye, right, up, forward); forward points at the target."""
        eye = self.eye
        fwd = self.look_at - eye
        norm = np.linalg.norm(fwd)
        if norm < 1e-12:
            raise DegenerateCameraError("camera eye coincides with look_at")
        fwd = fwd / norm
        world_up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, world_up)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-12:
            raise DegenerateCameraError("view direction parallel to the up axis")
        right = right / rnorm
        up = np.cross(right, fwd)
        return eye, right, up, fwd


def project(cam: CameraSpec, verts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Perspective-project world points.

    Returns (screen (N, 2) pixel coords with y down, depth (N,) along the
    view direction; positive in front of the camera).
    """
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise DimensionError(f"verts: expected (N, 3), got {verts.shape}")
    eye, right, up, fwd = cam.basis()
    rel = verts - eye
    a = rel @ right
    b = rel @ up
    d = rel @ fwd
    w, h = cam.resolution
    ty = np.tan(np.deg2rad(cam.fov_y) / 2.0)
    tx = ty * (w / h)
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (a / (d * tx) + 1.0) * (w / 2.0)
        sy = (1.0 - b / (d * ty)) * (h / 2.0)
    return np.stack([sx, sy], axis=1), d


def bounds_of(verts: np.ndarray) -> np.ndarray:
    """Axis-aligned bounds as a (2, 3) [min; max] array."""
    return np.stack([verts.min(axis=0), verts.max(axis=0)])


def sample_camera(
    rng: np.random.Generator,
    mode_probability_head: float,
    body_bounds: np.ndarray,
    head_bounds: np.ndarray,
    *,
    fov_full: float = DEFAULT_FOV_FULL,
    fov_head: float = DEFAULT_FOV_HEAD,
    fill_fraction: float = 0.75,
    resolution: tuple[int, int] = (512, 512),
) -> tuple[CameraSpec, ViewMode]:
    """Draw one training view: head zoom-in with probability
    mode_probability_head, full-body otherwise, each with its own polar
    and azimuth range. The radius is set so the target bounds fill
    `fill_fraction` of the frame at the mode's field of view.
    """
    head_mode = rng.random() < mode_probability_head
    if head_mode:
        polar = rng.uniform(*HEAD_POLAR)
        azimuth = rng.uniform(*HEAD_AZIMUTH)
        bounds, fov, mode = head_bounds, fov_head, ViewMode.HEAD
    else:
        polar = rng.uniform(*FULL_BODY_POLAR)
        azimuth = rng.uniform(*FULL_BODY_AZIMUTH)
        bounds, fov, mode = body_bounds, fov_full, ViewMode.FULL_BODY
    half_diag = 0.5 * float(np.linalg.norm(bounds[1] - bounds[0]))
    radius = max(half_diag / (np.tan(np.deg2rad(fov) / 2.0) * fill_fraction), 1e-3)
    look_at = 0.5 * (bounds[0] + bounds[1])
    cam = CameraSpec(radius=radius, polar=polar, azimuth=azimuth, fov_y=fov,
                     look_at=look_at, resolution=resolution)
    return cam, mode
