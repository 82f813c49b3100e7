"""Composited volume rendering across per-view tri-planes.

Each input view owns a tri-plane expressed in its own camera-aligned frame,
centred on the object (``q = R_i @ p_world``). Target-ray samples are carried
into every input frame, sampled, blended with azimuth weights, and alpha
composited into one target-view latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .autograd import ContractError, ops
from .autograd.tensor import DimensionError, Tensor
from .camera import (
    CameraPose,
    RayBundle,
    azimuth_gap,
    relative_transform,
)

WEIGHT_EPS = 1e-8


@dataclass
class TriPlane:
    """Three [S, S, F] planes: xy indexed [y, x], xz indexed [z, x], yz indexed [z, y]."""

    xy: Tensor
    xz: Tensor
    yz: Tensor

    def __post_init__(self):
        if not (self.xy.shape == self.xz.shape == self.yz.shape) or self.xy.ndim != 3:
            raise DimensionError(f"tri-plane planes disagree: {self.xy.shape}, {self.xz.shape}, {self.yz.shape}")
        if self.xy.shape[0] != self.xy.shape[1]:
            raise DimensionError("tri-plane planes must be square")

    @property
    def resolution(self) -> int:
        return self.xy.shape[0]

    @property
    def features(self) -> int:
        return self.xy.shape[2]

    def planes(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.xy, self.xz, self.yz


@dataclass
class FusionWeights:
    raw: np.ndarray
    normalized: np.ndarray


@dataclass
class PointFeature:
    density_logit: float
    feature: np.ndarray


@dataclass
class RenderedLatent:
    grid: Tensor  # [H', W', F-1]
    opacity: Tensor  # [H', W']
    per_view: list[Tensor] | None = None  # single-view composites, same layout as grid


def view_weights(gaps: Sequence[float]) -> FusionWeights:
    """Cosine weights ``(cos(gap) + 1) / 2`` normalised to sum to one.

    When every gap is (numerically) pi the plain ratio is 0/0; only then are the
    weights shifted by ``WEIGHT_EPS``, which yields the uniform limit.
    """
    gaps = np.asarray(list(gaps), dtype=np.float64)
    if gaps.size == 0:
        raise ContractError("view_weights needs at least one view")
    raw = (np.cos(gaps) + 1.0) / 2.0
    total = raw.sum()
    if total > WEIGHT_EPS:
        norm = raw / total
    else:
        norm = (raw + WEIGHT_EPS) / (raw + WEIGHT_EPS).sum()
    return FusionWeights(raw, norm)


# ---------------------------------------------------------------------------
# tri-plane sampling
# ---------------------------------------------------------------------------

# (row coordinate, column coordinate) for xy, xz, yz
_PLANE_AXES = ((1, 0), (2, 0), (2, 1))


def in_cube(points: np.ndarray) -> np.ndarray:
    return np.all(np.abs(np.asarray(points).reshape(-1, 3)) <= 1.0 + 1e-9, axis=-1)


def bilinear_matrices(points: np.ndarray, resolution: int, dtype=np.float32) -> list[sp.csr_matrix]:
    """Sparse [P, S*S] interpolation matrices, one per plane.

    Points outside [-1, 1]^3 get empty rows, i.e. they sample zeros.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    P, S = pts.shape[0], resolution
    inside = in_cube(pts)
    rows_idx = np.flatnonzero(inside)
    mats = []
    for ra, ca in _PLANE_AXES:
        r = np.clip((pts[rows_idx, ra] + 1.0) * 0.5 * (S - 1), 0.0, S - 1)
        c = np.clip((pts[rows_idx, ca] + 1.0) * 0.5 * (S - 1), 0.0, S - 1)
        r0 = np.minimum(np.floor(r).astype(int), max(S - 2, 0))
        c0 = np.minimum(np.floor(c).astype(int), max(S - 2, 0))
        fr, fc = r - r0, c - c0
        r1 = np.minimum(r0 + 1, S - 1)
        c1 = np.minimum(c0 + 1, S - 1)
        data = np.concatenate([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
        cols = np.concatenate([r0 * S + c0, r0 * S + c1, r1 * S + c0, r1 * S + c1])
        rows = np.tile(rows_idx, 4)
        mats.append(sp.csr_matrix((data.astype(dtype), (rows, cols)), shape=(P, S * S)))
    return mats


def sample_points(tp: TriPlane, points: np.ndarray, mats: list | None = None) -> Tensor:
    """Summed bilinear samples of the three planes at ``points`` [P, 3] -> [P, F]."""
    S, F = tp.resolution, tp.features
    if mats is None:
        mats = bilinear_matrices(points, S, tp.xy.dtype)
    out = None
    for plane, M in zip(tp.planes(), mats):
        term = ops.sparse_matmul(M, ops.reshape(plane, (S * S, F)))
        out = term if out is None else ops.add(out, term)
    return out


def sample_triplane(tp: TriPlane, p) -> PointFeature:
    feat = sample_points(tp, np.asarray(p, dtype=np.float64).reshape(1, 3)).data[0]
    return PointFeature(float(feat[0]), feat[1:].copy())


def fuse_point(features: Sequence[PointFeature], w: FusionWeights) -> PointFeature:
    if len(features) != len(w.normalized):
        raise ContractError(f"{len(features)} features but {len(w.normalized)} weights")
    dens = sum(float(l) * f.density_logit for l, f in zip(w.normalized, features))
    feat = sum(float(l) * f.feature for l, f in zip(w.normalized, features))
    return PointFeature(float(dens), np.asarray(feat))


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------


def composite(
    point_features: Tensor, n_rays: int, n_samples: int, delta: float, occupied: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Alpha-composite [R*K, F] point features along rays; channel 0 is the density logit.

    ``occupied`` [R*K] marks samples inside the feature volume; density elsewhere
    is zero so empty space contributes nothing. Returns (features [R, F-1], opacity [R]).
    """
    F = point_features.shape[-1]
    x = ops.reshape(point_features, (n_rays, n_samples, F))
    sigma = ops.softplus(ops.index(x, (slice(None), slice(None), 0)))
    if occupied is not None:
        mask = np.asarray(occupied, dtype=sigma.dtype).reshape(n_rays, n_samples)
        sigma = ops.mul(sigma, Tensor(mask))
    feats = ops.index(x, (slice(None), slice(None), slice(1, None)))
    tau = ops.scale(sigma, delta)
    trans = ops.exp(ops.scale(ops.cumsum(tau, axis=1, exclusive=True), -1.0))
    alpha = ops.add(ops.scale(ops.exp(ops.scale(tau, -1.0)), -1.0), 1.0)
    w = ops.mul(trans, alpha)
    wb = ops.broadcast_to(ops.reshape(w, (n_rays, n_samples, 1)), (n_rays, n_samples, F - 1))
    out = ops.sum(ops.mul(wb, feats), axis=1)
    return out, ops.sum(w, axis=1)


def frame_points(target: CameraPose, input_i: CameraPose, points_world: np.ndarray) -> np.ndarray:
    """Carry world-space target samples into view i's object-centred tri-plane frame.

    The sample is first expressed in target-camera coordinates, moved into the
    input camera with the relative rigid transform, then shifted so the look-at
    point (world origin, at ``input_i.translation`` in camera space) is the cube centre.
    """
    p_t = target.extrinsic.apply(points_world)
    p_i = relative_transform(target, input_i).apply(p_t)
    return p_i - input_i.translation


def render_target_latent(
    triplanes: Sequence[TriPlane],
    input_poses: Sequence[CameraPose],
    target_pose: CameraPose,
    rays: RayBundle,
    rng: np.random.Generator | None = None,
    per_view: bool = False,
    weights: FusionWeights | None = None,
) -> RenderedLatent:
    """Fuse-then-composite render of the target view.

    ``rng=None`` samples bin midpoints (evaluation); otherwise depths are jittered.
    ``per_view`` additionally composites each view's features on its own.
    """
    if len(triplanes) != len(input_poses) or not triplanes:
        raise ContractError("triplanes and input_poses must be non-empty and aligned")
    if weights is None:
        weights = view_weights([azimuth_gap(target_pose.spherical, p.spherical) for p in input_poses])
    R, K = rays.num_rays, rays.samples_per_ray
    side = int(round(math.sqrt(R)))
    if side * side != R:
        raise DimensionError("ray bundle must cover a square latent grid")
    depths = rays.depths(rng)
    pts = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    pts = pts.reshape(-1, 3)
    delta = rays.deltas()

    view_feats, inside = [], []
    fused = None
    for tp, pose, lam in zip(triplanes, input_poses, weights.normalized):
        q = frame_points(target_pose, pose, pts)
        inside.append(in_cube(q))
        f = sample_points(tp, q)
        view_feats.append(f)
        term = ops.scale(f, float(lam))
        fused = term if fused is None else ops.add(fused, term)
    C = triplanes[0].features - 1
    grid, opacity = composite(fused, R, K, delta, np.all(inside, axis=0))
    out = RenderedLatent(ops.reshape(grid, (side, side, C)), ops.reshape(opacity, (side, side)))
    if per_view:
        out.per_view = [ops.reshape(composite(f, R, K, delta, m)[0], (side, side, C)) for f, m in zip(view_feats, inside)]
    return out
