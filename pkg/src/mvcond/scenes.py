"""Procedural primitive scenes, an SDF ray-marcher, and the on-disk dataset format.

Layout written by :func:`make_dataset`::

    <out_dir>/scenes/<scene_id>/view_<k>.png
    <out_dir>/scenes/<scene_id>/poses.json   # {views: [{theta_deg, phi_deg, radius, file}], resolution, seed}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraPose, SphericalPose, pixel_directions, spherical_to_pose

KINDS = ("sphere", "box", "capsule")
MARCH_STEPS = 128
HIT_EPS = 1e-3
BOUND_RADIUS = 0.98
DEFAULT_RADIUS = 2.2


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: tuple[float, float, float]
    size: tuple[float, ...]  # sphere (r,), box (hx, hy, hz, yaw), capsule (r, half_len, ax, ay, az)
    color: tuple[float, float, float]

    def bound(self) -> float:
        """Radius of a sphere around ``center`` containing the primitive."""
        if self.kind == "sphere":
            return self.size[0]
        if self.kind == "box":
            return float(np.linalg.norm(self.size[:3]))
        return self.size[0] + self.size[1]

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            hx, hy, hz, yaw = self.size
            c, s = math.cos(yaw), math.sin(yaw)
            local = np.stack([c * q[..., 0] + s * q[..., 1], -s * q[..., 0] + c * q[..., 1], q[..., 2]], axis=-1)
            d = np.abs(local) - np.array([hx, hy, hz])
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(d.max(axis=-1), 0.0)
            return outside + inside
        r, h = self.size[0], self.size[1]
        axis = np.asarray(self.size[2:5])
        along = np.clip(q @ axis, -h, h)
        return np.linalg.norm(q - along[..., None] * axis, axis=-1) - r


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple[Primitive, ...] = field(default_factory=tuple)

    def sdf(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Union distance and index of the closest primitive."""
        if not self.primitives:
            return np.full(p.shape[:-1], np.inf), np.zeros(p.shape[:-1], dtype=int)
        d = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        idx = d.argmin(axis=0)
        return np.take_along_axis(d, idx[None], axis=0)[0], idx

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "primitives": [
                {"kind": p.kind, "center": list(p.center), "size": list(p.size), "color": list(p.color)}
                for p in self.primitives
            ],
        }


def build_scene(seed: int) -> SceneSpec:
    """2-6 coloured primitives inside the unit bounding sphere, deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 7]))
    count = int(rng.integers(2, 7))
    prims = []
    for i in range(count):
        kind = KINDS[int(rng.integers(0, 3))]
        center = rng.uniform(-0.4, 0.4, size=3)
        if i == 0 and np.hypot(center[0], center[1]) < 0.2:
            # guarantee one off-axis primitive so azimuths are distinguishable
            ang = math.atan2(center[1], center[0]) if np.hypot(center[0], center[1]) > 0 else 0.0
            center[0], center[1] = 0.3 * math.cos(ang), 0.3 * math.sin(ang)
        color = tuple(float(c) for c in rng.uniform(0.05, 0.85, size=3))
        if kind == "sphere":
            size = (float(rng.uniform(0.12, 0.32)),)
        elif kind == "box":
            hx, hy, hz = rng.uniform(0.08, 0.25, size=3)
            size = (float(hx), float(hy), float(hz), float(rng.uniform(0, math.pi)))
        else:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            size = (float(rng.uniform(0.06, 0.15)), float(rng.uniform(0.1, 0.3)), *(float(a) for a in axis))
        prim = Primitive(kind, tuple(float(c) for c in center), size, color)
        limit = BOUND_RADIUS - float(np.linalg.norm(center))
        if prim.bound() > limit:
            shrink = limit / prim.bound()
            if kind == "sphere":
                size = (size[0] * shrink,)
            elif kind == "box":
                size = (size[0] * shrink, size[1] * shrink, size[2] * shrink, size[3])
            else:
                size = (size[0] * shrink, size[1] * shrink, *size[2:])
            prim = Primitive(kind, prim.center, size, color)
        prims.append(prim)
    return SceneSpec(int(seed), tuple(prims))


def _light_direction(pose: CameraPose) -> np.ndarray:
    # towards the camera and slightly above it; symmetric under horizontal mirroring
    l_cam = np.array([0.0, -0.5, -1.0])
    l_cam /= np.linalg.norm(l_cam)
    return pose.rotation.T @ l_cam


def render_view(scene: SceneSpec, pose: CameraPose, resolution: int) -> np.ndarray:
    """Ray-marched Lambertian render on a white background, float image [H, W, 3] in [0, 1]."""
    dirs = pixel_directions(pose.intrinsics, resolution) @ pose.rotation
    image = np.ones((resolution * resolution, 3))
    if not scene.primitives:
        return image.reshape(resolution, resolution, 3)
    origin = pose.center
    dist = float(np.linalg.norm(origin))
    t_max = dist + 1.05
    t = np.full(dirs.shape[0], max(dist - 1.05, 1e-3))
    # rays passing outside the unit sphere can never hit anything
    closest = np.linalg.norm(np.cross(dirs, -origin), axis=-1)
    t[closest > 1.0] = t_max + 1.0
    active = np.flatnonzero(closest <= 1.0)
    for _ in range(MARCH_STEPS):
        if active.size == 0:
            break
        d, _ = scene.sdf(origin + t[active, None] * dirs[active])
        t[active] = np.minimum(t[active] + np.maximum(d, 0.0), t_max + 1.0)
        # converged and escaped rays are frozen; their t no longer changes meaningfully
        active = active[(d >= 1e-5) & (t[active] <= t_max)]
    p = origin + t[:, None] * dirs
    d, idx = scene.sdf(p)
    hit = (d < HIT_EPS) & (t < t_max)
    if np.any(hit):
        ph = p[hit]
        e = 1e-4
        n = np.stack(
            [scene.sdf(ph + e * ax)[0] - scene.sdf(ph - e * ax)[0] for ax in np.eye(3)],
            axis=-1,
        )
        n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
        shade = 0.35 + 0.65 * np.clip(n @ _light_direction(pose), 0.0, 1.0)
        colors = np.array([prim.color for prim in scene.primitives])[idx[hit]]
        image[hit] = colors * shade[:, None]
    return np.clip(image, 0.0, 1.0).reshape(resolution, resolution, 3)


# ---------------------------------------------------------------------------
# latent oracle
# ---------------------------------------------------------------------------


def target_latent_oracle(image: np.ndarray, latent_res: int, channels: int) -> np.ndarray:
    """Fixed area-average downsample to ``latent_res`` with RGB cycled across ``channels``."""
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    if h % latent_res or w % latent_res:
        raise ValueError(f"image {h}x{w} is not an integer multiple of latent resolution {latent_res}")
    fh, fw = h // latent_res, w // latent_res
    pooled = image.reshape(latent_res, fh, latent_res, fw, 3).mean(axis=(1, 3))
    return pooled[..., np.arange(channels) % 3]


def decode_latent(latent: np.ndarray, resolution: int) -> np.ndarray:
    """Inverse of :func:`target_latent_oracle` up to the averaging: mean over channel copies, nearest upsample.

    A colour with no copy (fewer than three channels) decodes to the mean of all channels.
    """
    latent = np.asarray(latent, dtype=np.float64)
    h, w, c = latent.shape
    rgb = np.stack(
        [latent[..., np.arange(k, c, 3)].mean(axis=-1) if k < c else latent.mean(axis=-1) for k in range(3)], axis=-1
    )
    f = resolution // h
    return np.clip(rgb.repeat(f, axis=0).repeat(f, axis=1), 0.0, 1.0)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class View:
    image: np.ndarray
    pose: SphericalPose


@dataclass
class MultiViewSample:
    scene_id: str
    views: list[View]

    @property
    def resolution(self) -> int:
        return self.views[0].image.shape[0]

    def rings(self) -> list[list[int]]:
        """View indices grouped by elevation, each ring in azimuth order."""
        groups: dict[float, list[int]] = {}
        for i, v in enumerate(self.views):
            groups.setdefault(round(v.pose.theta, 9), []).append(i)
        return [sorted(ids, key=lambda i: self.views[i].pose.phi) for _, ids in sorted(groups.items())]


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def view_poses(n_views: int, elevations_deg, radius: float = DEFAULT_RADIUS) -> list[SphericalPose]:
    poses = []
    for elev in elevations_deg:
        for k in range(n_views):
            poses.append(SphericalPose.from_degrees(float(elev), 360.0 * k / n_views, radius))
    return poses


def render_sample(
    scene: SceneSpec, scene_id: str, n_views: int, elevations_deg, resolution: int, radius: float = DEFAULT_RADIUS
) -> MultiViewSample:
    views = []
    for sp in view_poses(n_views, elevations_deg, radius):
        img = render_view(scene, spherical_to_pose(sp, resolution), resolution)
        views.append(View(quantize(img), sp))
    return MultiViewSample(scene_id, views)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid the PNG files store, so in-memory and on-disk samples agree."""
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.float32) / np.float32(255.0)


def _elevations_for(seed: int, elevations) -> list[float]:
    if elevations is not None:
        return [float(e) for e in elevations]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    return sorted(float(e) for e in np.round(rng.uniform(0.0, 30.0, size=2), 3))


def make_dataset(
    num_scenes: int,
    n_views: int,
    elevations,
    resolution: int,
    out_dir,
    seed: int = 0,
    radius: float = DEFAULT_RADIUS,
    first_index: int = 0,
) -> Path:
    """Render ``num_scenes`` scenes into ``out_dir/scenes``.

    ``elevations=None`` picks two random elevations in [0, 30] degrees per scene.
    ``first_index`` offsets scene indices so disjoint splits share one seed.
    """
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    root = Path(out_dir) / "scenes"
    root.mkdir(parents=True, exist_ok=True)
    for i in range(first_index, first_index + num_scenes):
        s = scene_seed(seed, i)
        scene_id = f"scene_{i:04d}"
        elevs = _elevations_for(s, elevations)
        sample = render_sample(build_scene(s), scene_id, n_views, elevs, resolution, radius)
        write_sample(sample, root / scene_id, seed=s)
    return Path(out_dir)


def write_sample(sample: MultiViewSample, scene_dir, seed: int) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, view in enumerate(sample.views):
        fname = f"view_{k}.png"
        save_png(view.image, scene_dir / fname)
        entries.append(
            {
                "theta_deg": round(math.degrees(view.pose.theta), 9),
                "phi_deg": round(math.degrees(view.pose.phi), 9),
                "radius": view.pose.radius,
                "file": fname,
            }
        )
    meta = {"views": entries, "resolution": sample.resolution, "seed": int(seed)}
    (scene_dir / "poses.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_sample(scene_dir) -> MultiViewSample:
    scene_dir = Path(scene_dir)
    meta = json.loads((scene_dir / "poses.json").read_text())
    views = []
    for entry in meta["views"]:
        img = load_png(scene_dir / entry["file"])
        sp = SphericalPose.from_degrees(entry["theta_deg"], entry["phi_deg"], entry["radius"])
        views.append(View(img, sp))
    return MultiViewSample(scene_dir.name, views)


def load_dataset(root) -> list[MultiViewSample]:
    root = Path(root)
    scenes = root / "scenes" if (root / "scenes").is_dir() else root
    dirs = sorted(p for p in scenes.iterdir() if (p / "poses.json").is_file())
    return [load_sample(d) for d in dirs]


def save_png(img: np.ndarray, path) -> None:
    arr = np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0
