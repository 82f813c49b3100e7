"""Image encoder and pose-conditioned tri-plane projector."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Conv2d, LayerNorm, Linear, Module, Parameter, Tensor, ops
from .autograd.tensor import DimensionError
from .camera import RelativePose, embed_relative
from .config import ModelConfig
from .fusion import ContractError, TriPlane


def split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, D = x.shape
    x = ops.reshape(x, (B, N, heads, D // heads))
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B * heads, N, D // heads))


def merge_heads(x: Tensor, batch: int) -> Tensor:
    BH, N, dh = x.shape
    heads = BH // batch
    x = ops.transpose(ops.reshape(x, (batch, heads, N, dh)), (0, 2, 1, 3))
    return ops.reshape(x, (batch, N, heads * dh))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kv_dim: int | None = None):
        kv_dim = dim if kv_dim is None else kv_dim
        self.q = Linear(dim, dim, rng)
        self.k = Linear(kv_dim, dim, rng)
        self.v = Linear(kv_dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.heads = heads

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        B = x.shape[0]
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(context), self.heads)
        v = split_heads(self.v(context), self.heads)
        return self.out(merge_heads(ops.attention(q, k, v), B))


class Block(Module):
    """Pre-norm transformer block; ``kind='cross'`` attends to the condition token instead of itself."""

    def __init__(self, kind: str, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.kind = kind
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        h = self.norm1(x)
        h = self.attn(h) if self.kind == "self" else self.attn(h, cond)
        x = ops.add(x, h)
        h = self.fc2(ops.gelu(self.fc1(self.norm2(x))))
        return ops.add(x, h)


class Encoder(Module):
    """Two stride-2 convolutions and a 3x3 projection: [B, H, W, 3] -> [B, H/4, W/4, d]."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.conv1 = Conv2d(3, 16, 3, rng, stride=2)
        self.conv2 = Conv2d(16, 32, 3, rng, stride=2)
        self.conv3 = Conv2d(32, cfg.latent_dim, 3, rng)

    def __call__(self, images: Tensor) -> Tensor:
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.image_res, cfg.image_res, 3):
            raise DimensionError(f"encoder expects [B, {cfg.image_res}, {cfg.image_res}, 3], got {images.shape}")
        if cfg.image_res != 4 * cfg.latent_res:
            raise DimensionError("encoder downsamples by exactly 4")
        x = ops.transpose(images, (0, 3, 1, 2))
        x = ops.silu(self.conv1(x))
        x = ops.silu(self.conv2(x))
        x = self.conv3(x)
        return ops.transpose(x, (0, 2, 3, 1))


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Align-corners linear interpolation matrix [n_out, n_in]."""
    A = np.zeros((n_out, n_in))
    if n_in == 1:
        A[:, 0] = 1.0
        return A
    if n_out == 1:
        A[0, (n_in - 1) // 2] = 1.0 if n_in % 2 else 0.5
        if n_in % 2 == 0:
            A[0, n_in // 2] = 0.5
        return A
    pos = np.linspace(0, n_in - 1, n_out)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    f = pos - i0
    A[np.arange(n_out), i0] = 1 - f
    A[np.arange(n_out), i0 + 1] += f
    return A


class Projector(Module):
    """Latent tokens + relative pose -> tri-plane.

    Self-attention mixes latent tokens; cross-attention reads a single token
    projected from the 4-vector camera embedding. Cross-attention output
    projections are zero-initialised, so at initialisation the tri-plane does
    not depend on the relative pose. The head emits, per token,
    an xy feature plus a depth profile for xz and one for yz; the profiles are
    averaged over the image row (for xz) or column (for yz).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, S, F = cfg.latent_dim, cfg.latent_res, cfg.feature_dim
        self.pos = Parameter(rng.normal(0, 0.02, size=(S * S, d)).astype(np.float32))
        self.cond = Linear(4, d, rng)
        self.blocks = [Block(kind, d, cfg.heads, cfg.mlp_ratio, rng) for kind in cfg.blocks]
        for blk in self.blocks:
            if blk.kind == "cross":
                # the pose path starts as a no-op and grows only where it helps
                blk.attn.out.weight.data[...] = 0.0
        self.norm = LayerNorm(d)
        self.trunk = Linear(d, d, rng)
        self.head = Linear(d, F + 2 * S * F, rng)

    def condition_token(self, emb: np.ndarray, dtype) -> Tensor:
        e = Tensor(np.asarray(emb, dtype=dtype).reshape(-1, 1, 4))
        return self.cond(e)

    def __call__(self, z: Tensor, emb: np.ndarray, view_conditioning: bool = True) -> list[TriPlane]:
        """``z``: [B, h, w, d] latents; ``emb``: [B, 4] camera embeddings."""
        cfg = self.cfg
        B, h, w, d = z.shape
        S, F = cfg.latent_res, cfg.feature_dim
        if (h, w, d) != (S, S, cfg.latent_dim):
            raise DimensionError(f"projector expects [B, {S}, {S}, {cfg.latent_dim}] latents, got {z.shape}")
        x = ops.reshape(z, (B, S * S, d))
        x = ops.add(x, ops.broadcast_to(ops.reshape(self.pos, (1, S * S, d)), (B, S * S, d)))
        cond = self.condition_token(emb, x.dtype)
        if not view_conditioning:
            cond = Tensor(np.zeros(cond.shape, dtype=x.dtype))
        for blk in self.blocks:
            x = blk(x, cond)
        x = self.head(ops.gelu(self.trunk(self.norm(x))))
        x = ops.reshape(x, (B, S, S, F + 2 * S * F))  # [B, y, x, ...]
        xy = ops.index(x, (slice(None), slice(None), slice(None), slice(0, F)))
        xz = ops.reshape(ops.index(x, (slice(None), slice(None), slice(None), slice(F, F + S * F))), (B, S, S, S, F))
        yz = ops.reshape(ops.index(x, (slice(None), slice(None), slice(None), slice(F + S * F, None))), (B, S, S, S, F))
        xz = ops.transpose(ops.mean(xz, axis=1), (0, 2, 1, 3))  # [B, z, x, F]
        yz = ops.transpose(ops.mean(yz, axis=2), (0, 2, 1, 3))  # [B, z, y, F]
        planes = []
        T = cfg.triplane_res
        A = _interp_matrix(T, S) if T != S else None
        for b in range(B):
            p = [ops.index(t, (b,)) for t in (xy, xz, yz)]
            if A is not None:
                p = [ops.contract(ops.contract(t, A, 0), A, 1) for t in p]
            planes.append(TriPlane(*p))
        return planes


class LiftingNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.projector = Projector(cfg, rng)

    def encode(self, images) -> Tensor:
        """[B, H, W, 3] (or a single [H, W, 3]) images in [0, 1] -> [B, h, w, d]."""
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if not isinstance(images, Tensor) or images.ndim == 3:
            images = Tensor(arr.astype(self.dtype))
        return self.encoder(images)

    @property
    def dtype(self):
        return self.encoder.conv1.weight.dtype

    def lift(self, z: Tensor, rps: Sequence[RelativePose], view_conditioning: bool = True) -> list[TriPlane]:
        emb = np.stack([embed_relative(rp) for rp in rps])
        return self.projector(z, emb, view_conditioning)

    def lift_all(self, views: Sequence[tuple[np.ndarray, RelativePose]], view_conditioning: bool = True) -> list[TriPlane]:
        """Encode and lift every (image, relative pose) pair; views are processed independently."""
        if not views:
            raise ContractError("lift_all needs at least one view")
        images = np.stack([np.asarray(img) for img, _ in views])
        z = self.encode(images)
        return self.lift(z, [rp for _, rp in views], view_conditioning)
