"""Spherical cameras, relative poses, rigid transforms and ray generation.

Conventions: world up is +z and every camera looks at the world origin.
Camera frames follow the pinhole/OpenCV layout (x right, y down, z forward),
so a world point ``p`` maps to camera coordinates ``R @ p + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi
DEFAULT_FOV_DEG = 40.0


class PoleError(ValueError):
    """Elevation at or beyond +-90 degrees, where the look-at frame degenerates."""


class BoundsError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to [0, 2*pi)."""
    w = math.fmod(a, TWO_PI)
    if w < 0:
        w += TWO_PI
    # fmod of values a hair below 2*pi may round up to exactly 2*pi after the shift
    return 0.0 if w >= TWO_PI else w


@dataclass(frozen=True)
class SphericalPose:
    theta: float  # elevation, radians, 0 = equator
    phi: float  # azimuth, radians
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if abs(self.theta) >= math.pi / 2:
            raise PoleError(f"elevation {self.theta} rad is at or beyond a pole")
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    @classmethod
    def from_degrees(cls, theta_deg: float, phi_deg: float, radius: float) -> "SphericalPose":
        return cls(math.radians(theta_deg), math.radians(phi_deg), radius)

    @property
    def center(self) -> np.ndarray:
        ct = math.cos(self.theta)
        return np.array(
            [self.radius * ct * math.cos(self.phi), self.radius * ct * math.sin(self.phi), self.radius * math.sin(self.theta)]
        )


@dataclass(frozen=True)
class RelativePose:
    d_theta: float
    d_phi: float
    d_radius: float


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_fov(cls, resolution: int, fov_deg: float = DEFAULT_FOV_DEG) -> "Intrinsics":
        focal = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2)
        return cls(focal, resolution / 2.0, resolution / 2.0, resolution, resolution)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape [..., 3]."""
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    intrinsics: Intrinsics
    spherical: SphericalPose | None = None

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def extrinsic(self) -> RigidTransform:
        return RigidTransform(self.rotation, self.translation)


def spherical_to_pose(sp: SphericalPose, resolution: int = 64, fov_deg: float = DEFAULT_FOV_DEG) -> CameraPose:
    if abs(sp.theta) >= math.pi / 2:
        raise PoleError(f"elevation {sp.theta} rad is at or beyond a pole")
    center = sp.center
    forward = -center / np.linalg.norm(center)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    t = -R @ center
    return CameraPose(R, t, Intrinsics.from_fov(resolution, fov_deg), sp)


def relative_pose(a: SphericalPose, b: SphericalPose) -> RelativePose:
    """Pose of ``b`` relative to ``a``: ``(theta_b - theta_a, phi_b - phi_a, r_b - r_a)``."""
    return RelativePose(b.theta - a.theta, wrap_angle(b.phi - a.phi), b.radius - a.radius)


def embed_relative(rp: RelativePose) -> np.ndarray:
    return np.array([rp.d_theta, math.sin(rp.d_phi), math.cos(rp.d_phi), rp.d_radius])


def relative_transform(target: CameraPose, input_i: CameraPose) -> RigidTransform:
    """Maps target-camera coordinates to input-camera coordinates."""
    return input_i.extrinsic.compose(target.extrinsic.inverse())


def transform_point(T: RigidTransform, p: np.ndarray) -> np.ndarray:
    return T.apply(np.asarray(p, dtype=float))


def azimuth_gap(target: SphericalPose, input_i: SphericalPose) -> float:
    """Smallest absolute azimuth difference, in [0, pi]."""
    d = wrap_angle(input_i.phi - target.phi)
    return min(d, TWO_PI - d)


@dataclass(frozen=True)
class RayBundle:
    origins: np.ndarray  # [N, 3] world
    directions: np.ndarray  # [N, 3] world, unit
    near: float
    far: float
    samples_per_ray: int

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise BoundsError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.samples_per_ray < 2:
            raise BoundsError("samples_per_ray must be >= 2")

    @property
    def num_rays(self) -> int:
        return self.origins.shape[0]

    def depths(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Stratified depths [N, S]; bin midpoints when ``rng`` is None."""
        n, s = self.num_rays, self.samples_per_ray
        edges = np.linspace(self.near, self.far, s + 1)
        if rng is None:
            u = np.full((n, s), 0.5)
        else:
            u = rng.uniform(size=(n, s))
        return edges[:-1] + u * (edges[1:] - edges[:-1])

    def deltas(self) -> float:
        return (self.far - self.near) / self.samples_per_ray


def pixel_directions(intr: Intrinsics, resolution: int) -> np.ndarray:
    """Unit camera-frame directions for pixel centres of a ``resolution``^2 grid (row-major)."""
    scale = resolution / intr.height
    f = intr.focal * scale
    cx, cy = intr.cx * scale, intr.cy * scale
    v, u = np.meshgrid(np.arange(resolution) + 0.5, np.arange(resolution) + 0.5, indexing="ij")
    d = np.stack([(u - cx) / f, (v - cy) / f, np.ones_like(u)], axis=-1).reshape(-1, 3)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_rays(
    pose: CameraPose, near: float, far: float, latent_resolution: int, samples_per_ray: int = 32
) -> RayBundle:
    """One pinhole ray per latent pixel, in world coordinates."""
    if latent_resolution < 1:
        raise ValueError("latent_resolution must be >= 1")
    if not 0 < near < far:
        raise BoundsError(f"need 0 < near < far, got near={near}, far={far}")
    d_cam = pixel_directions(pose.intrinsics, latent_resolution)
    dirs = d_cam @ pose.rotation  # R^T d for each row
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return RayBundle(origins, dirs, near, far, samples_per_ray)
