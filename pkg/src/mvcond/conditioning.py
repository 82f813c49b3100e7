"""Target-view feature injection into a small denoising U-Net.

The base denoiser is a reference-view conditioned U-Net (the stand-in for a
pretrained single-view novel-view model). Multi-view conditioning enters via
``InjectionBlock``s, one per encoder level, each of which refines the rendered
target latent with shifted-window cross-attention and adds a concat-conv
residual whose last convolution starts at zero.

Layouts: U-Net activations are NCHW, latents handed in from rendering are
channels-last ``[B, h, w, C]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import Conv2d, LayerNorm, Linear, Module, Tensor, ops
from .autograd.tensor import DimensionError
from .config import ConfigError, ModelConfig
from .fusion import ContractError
from .lifting import MultiHeadAttention, _interp_matrix


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def resample_latent(latent: Tensor, target_resolution: int) -> Tensor:
    """Bilinear (align-corners) resampling of ``[h, w, C]`` or ``[B, h, w, C]`` latents."""
    if target_resolution < 1:
        raise ValueError("target_resolution must be >= 1")
    lead = latent.ndim - 3
    if lead not in (0, 1):
        raise DimensionError(f"expected [h, w, C] or [B, h, w, C], got {latent.shape}")
    h, w = latent.shape[lead], latent.shape[lead + 1]
    out = latent
    if h != target_resolution:
        out = ops.contract(out, _interp_matrix(target_resolution, h), lead)
    if w != target_resolution:
        out = ops.contract(out, _interp_matrix(target_resolution, w), lead + 1)
    return out


def _upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    _, _, H, W = x.shape
    U_h = np.zeros((2 * H, H))
    U_h[np.arange(2 * H), np.arange(2 * H) // 2] = 1.0
    U_w = U_h if W == H else np.eye(W).repeat(2, axis=0)
    return ops.contract(ops.contract(x, U_h, 2), U_w, 3)


def _nchw(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 3, 1, 2))


def _nhwc(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 2, 3, 1))


# ---------------------------------------------------------------------------
# shifted-window cross-attention
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowConfig:
    window: int
    shift: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not 0 <= self.shift < self.window:
            raise ConfigError(f"shift must lie in [0, {self.window}), got {self.shift}")

    def validate(self, resolution: int) -> None:
        if resolution % self.window:
            raise ConfigError(f"window {self.window} does not divide resolution {resolution}")

    @classmethod
    def for_level(cls, cfg: ModelConfig, resolution: int, shifted: bool) -> "WindowConfig":
        """Clamp the configured window to the level; a window spanning the whole map is never shifted."""
        window = min(cfg.window, resolution)
        shift = cfg.shift if shifted and window < resolution else 0
        return cls(window, shift)


def window_partition(x: Tensor, window: int) -> Tensor:
    """[B, h, w, C] -> [B * nh * nw, window * window, C]."""
    B, h, w, C = x.shape
    x = ops.reshape(x, (B, h // window, window, w // window, window, C))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (B * (h // window) * (w // window), window * window, C))


def window_merge(x: Tensor, batch: int, h: int, w: int, window: int) -> Tensor:
    C = x.shape[-1]
    x = ops.reshape(x, (batch, h // window, w // window, window, window, C))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (batch, h, w, C))


class ShiftedWindowCrossAttention(Module):
    """Window-local cross-attention: queries from one latent, keys/values from another, plus a skip."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kv_dim: int | None = None):
        self.attn = MultiHeadAttention(dim, heads, rng, kv_dim=kv_dim)

    def __call__(self, q_latent: Tensor, kv_latent: Tensor, cfg: WindowConfig) -> Tensor:
        return shifted_window_cross_attn(q_latent, kv_latent, cfg, self.attn)


def shifted_window_cross_attn(
    q_latent: Tensor, kv_latent: Tensor, cfg: WindowConfig, attn: MultiHeadAttention
) -> Tensor:
    """Cross-attend within (optionally cyclically shifted) windows and add ``q_latent`` back.

    Accepts ``[h, w, C]`` or ``[B, h, w, C]``. No attention mask is applied
    across the wrap-around seam; with cross-attention between two aligned
    latents the seam only mixes tokens that are spatial neighbours modulo the
    roll, which is the tolerance the shift is meant to buy.
    """
    single = q_latent.ndim == 3
    if single:
        q_latent = ops.reshape(q_latent, (1,) + q_latent.shape)
        kv_latent = ops.reshape(kv_latent, (1,) + kv_latent.shape)
    if q_latent.ndim != 4 or q_latent.shape[:3] != kv_latent.shape[:3]:
        raise DimensionError(f"query {q_latent.shape} and key/value {kv_latent.shape} grids disagree")
    B, h, w, _ = q_latent.shape
    if h != w:
        raise DimensionError("latents must be square")
    cfg.validate(h)
    q, kv = q_latent, kv_latent
    if cfg.shift:
        q = ops.roll(q, (-cfg.shift, -cfg.shift), (1, 2))
        kv = ops.roll(kv, (-cfg.shift, -cfg.shift), (1, 2))
    out = attn(window_partition(q, cfg.window), window_partition(kv, cfg.window))
    out = window_merge(out, B, h, w, cfg.window)
    if cfg.shift:
        out = ops.roll(out, (cfg.shift, cfg.shift), (1, 2))
    out = ops.add(out, q_latent)
    return ops.reshape(out, out.shape[1:]) if single else out


# ---------------------------------------------------------------------------
# view-aware attention
# ---------------------------------------------------------------------------


class ViewAwareAttention(Module):
    """Per-pixel attention across the view axis.

    Keys are the projected view latents plus a projected camera-embedding
    token; values are the latents alone. The query defaults to the view mean,
    so the result does not depend on view order.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dim: int = 16, emb_dim: int = 4):
        self.q = Linear(channels, dim, rng)
        self.k = Linear(channels, dim, rng)
        self.emb = Linear(emb_dim, dim, rng)
        self.v = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng)

    def __call__(self, latents: Sequence[Tensor], embeddings: Sequence[np.ndarray], query: Tensor | None = None) -> Tensor:
        """``latents``: n tensors shaped ``[..., h, w, C]``; returns one tensor of that shape."""
        if not latents:
            raise ContractError("view-aware attention needs at least one view")
        if len(latents) != len(embeddings):
            raise ContractError(f"{len(latents)} latents but {len(embeddings)} embeddings")
        shape = latents[0].shape
        if any(z.shape != shape for z in latents):
            raise DimensionError("all view latents must share one shape")
        C = shape[-1]
        P = int(np.prod(shape[:-1]))
        n = len(latents)
        z = ops.stack([ops.reshape(t, (P, C)) for t in latents], axis=1)  # [P, n, C]
        if query is None:
            query = ops.mean(z, axis=1, keepdims=True)
        else:
            if query.shape != shape:
                raise DimensionError(f"query {query.shape} does not match latents {shape}")
            query = ops.reshape(query, (P, 1, C))
        dt = z.dtype
        e = self.emb(Tensor(np.stack([np.asarray(v, dtype=dt) for v in embeddings])))  # [n, D]
        D = e.shape[-1]
        keys = ops.add(self.k(z), ops.broadcast_to(ops.reshape(e, (1, n, D)), (P, n, D)))
        out = ops.attention(self.q(query), keys, self.v(z))  # [P, 1, C]
        return ops.reshape(self.out(out), shape)


def view_aware_attention(
    module: ViewAwareAttention, latents: Sequence, embeddings: Sequence[np.ndarray], query: Tensor | None = None
) -> Tensor:
    """Functional form accepting ``RenderedLatent``s or bare tensors."""
    grids = [getattr(z, "grid", z) for z in latents]
    return module(grids, embeddings, query)


# ---------------------------------------------------------------------------
# injection
# ---------------------------------------------------------------------------


class InjectionBlock(Module):
    """``o'_k = Conv([o_k, g]) + o_k`` where ``g`` is the window-attended target latent at this level."""

    def __init__(self, channels: int, latent_channels: int, resolution: int, cfg: ModelConfig, rng: np.random.Generator):
        self.resolution = resolution
        self.windows = (
            WindowConfig.for_level(cfg, resolution, shifted=False),
            WindowConfig.for_level(cfg, resolution, shifted=True),
        )
        heads = cfg.heads if channels % cfg.heads == 0 else 1
        self.proj = Linear(latent_channels, channels, rng)
        self.attn = [ShiftedWindowCrossAttention(channels, heads, rng) for _ in self.windows]
        self.conv = Conv2d(2 * channels, channels, 3, rng)
        self.zero_conv = Conv2d(channels, channels, 3, rng, zero=True)

    def __call__(self, o_k: Tensor, f_t: Tensor) -> Tensor:
        B, C, h, w = o_k.shape
        if h != self.resolution or w != self.resolution:
            raise DimensionError(f"injection block expects {self.resolution}x{self.resolution} maps, got {h}x{w}")
        if f_t.ndim != 4 or f_t.shape[0] != B:
            raise DimensionError(f"target latent must be [B={B}, h, w, C], got {f_t.shape}")
        kv = self.proj(resample_latent(f_t, h))
        g = _nhwc(o_k)
        for blk, wc in zip(self.attn, self.windows):
            g = blk(g, kv, wc)
        y = self.conv(ops.concat([o_k, _nchw(g)], axis=1))
        return ops.add(o_k, self.zero_conv(ops.silu(y)))


def inject(block: InjectionBlock, o_k: Tensor, f_t: Tensor) -> Tensor:
    return block(o_k, f_t)


# ---------------------------------------------------------------------------
# toy denoiser
# ---------------------------------------------------------------------------


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, time_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(cin, axis=1)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.time = Linear(time_dim, cout, rng)
        self.norm2 = LayerNorm(cout, axis=1)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.silu(self.norm1(x)))
        B, C, H, W = h.shape
        h = ops.add(h, ops.broadcast_to(ops.reshape(self.time(temb), (B, C, 1, 1)), (B, C, H, W)))
        h = self.conv2(ops.silu(self.norm2(h)))
        return ops.add(h, x if self.skip is None else self.skip(x))


class CameraCrossAttention(Module):
    """Cross-attention from feature-map tokens to a single camera-embedding token."""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator, emb_dim: int = 4):
        self.norm = LayerNorm(channels)
        self.cond = Linear(emb_dim, channels, rng)
        self.attn = MultiHeadAttention(channels, heads if channels % heads == 0 else 1, rng)

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        B, C, H, W = x.shape
        tokens = ops.reshape(_nhwc(x), (B, H * W, C))
        cond = ops.reshape(self.cond(emb), (B, 1, C))
        tokens = ops.add(tokens, self.attn(self.norm(tokens), cond))
        return _nchw(ops.reshape(tokens, (B, H, W, C)))


@dataclass
class DenoiserCond:
    """Conditioning for one batch: reference-view latent, relative camera embedding, optional injected latent."""

    reference: np.ndarray  # [B, C, h, w]
    embedding: np.ndarray  # [B, 4]
    injected: Tensor | None = None  # [B, h, w, C_f] target-view latent


LevelHook = Callable[[int, Tensor], Tensor]


class ToyDenoiser(Module):
    """Three-level U-Net (16 -> 8 -> 4) predicting noise on ``[B, C, h, w]`` latents.

    Input is ``concat[x_t, reference latent]``; camera cross-attention runs at
    the two coarser levels. ``hooks`` is called on the encoder output of each
    level before it feeds the skip connection and the next level.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c0, c1, c2 = cfg.unet_channels
        C = cfg.latent_channels
        td = cfg.time_dim
        self.time1 = Linear(td, td, rng)
        self.time2 = Linear(td, td, rng)
        self.conv_in = Conv2d(2 * C, c0, 3, rng)
        self.enc0 = ResBlock(c0, c0, td, rng)
        self.down1 = Conv2d(c0, c1, 3, rng, stride=2)
        self.enc1 = ResBlock(c1, c1, td, rng)
        self.cam1 = CameraCrossAttention(c1, cfg.heads, rng)
        self.down2 = Conv2d(c1, c2, 3, rng, stride=2)
        self.enc2 = ResBlock(c2, c2, td, rng)
        self.cam2 = CameraCrossAttention(c2, cfg.heads, rng)
        self.mid = ResBlock(c2, c2, td, rng)
        self.dec1 = ResBlock(c2 + c1, c1, td, rng)
        self.dec0 = ResBlock(c1 + c0, c0, td, rng)
        self.norm_out = LayerNorm(c0, axis=1)
        self.conv_out = Conv2d(c0, C, 3, rng)

    @property
    def level_channels(self) -> tuple[int, int, int]:
        return tuple(self.cfg.unet_channels)

    @property
    def level_resolutions(self) -> tuple[int, int, int]:
        r = self.cfg.latent_res
        return (r, r // 2, r // 4)

    @property
    def dtype(self):
        return self.conv_in.weight.dtype

    def check_timestep(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t))
        if not np.issubdtype(t.dtype, np.integer) or t.min() < 0 or t.max() >= self.cfg.timesteps:
            raise ContractError(f"timestep must be an integer in [0, {self.cfg.timesteps}), got {t}")
        return t

    def __call__(self, x_t: Tensor, t, cond: DenoiserCond, hooks: LevelHook | None = None) -> Tensor:
        cfg = self.cfg
        B = x_t.shape[0]
        C, r = cfg.latent_channels, cfg.latent_res
        if x_t.shape != (B, C, r, r):
            raise DimensionError(f"x_t must be [B, {C}, {r}, {r}], got {x_t.shape}")
        ref = np.asarray(cond.reference, dtype=x_t.dtype)
        if ref.shape != x_t.shape:
            raise DimensionError(f"reference latent {ref.shape} does not match x_t {x_t.shape}")
        t = self.check_timestep(t)
        if t.size == 1:
            t = np.repeat(t, B)
        dt = x_t.dtype
        temb = self.time2(ops.silu(self.time1(Tensor(timestep_embedding(t, cfg.time_dim, dt)))))
        emb = Tensor(np.asarray(cond.embedding, dtype=dt).reshape(B, 4))
        hook = hooks or (lambda k, o: o)

        h0 = self.enc0(self.conv_in(ops.concat([x_t, Tensor(ref)], axis=1)), temb)
        h0 = hook(0, h0)
        h1 = self.cam1(self.enc1(self.down1(h0), temb), emb)
        h1 = hook(1, h1)
        h2 = self.cam2(self.enc2(self.down2(h1), temb), emb)
        h2 = hook(2, h2)
        m = self.mid(h2, temb)
        u1 = self.dec1(ops.concat([_upsample2(m), h1], axis=1), temb)
        u0 = self.dec0(ops.concat([_upsample2(u1), h0], axis=1), temb)
        return self.conv_out(ops.silu(self.norm_out(u0)))


class ConditionedDenoiser(Module):
    """Base denoiser plus per-level injection blocks and the view-aware fusion of rendered latents."""

    def __init__(self, base: ToyDenoiser, rng: np.random.Generator):
        cfg = base.cfg
        self.cfg = cfg
        self.base = base
        self.inject = [
            InjectionBlock(c, cfg.latent_channels, r, cfg, rng)
            for c, r in zip(base.level_channels, base.level_resolutions)
        ]
        self.view_attn = ViewAwareAttention(cfg.latent_channels, rng)

    def base_parameters(self) -> dict:
        return {f"base.{k}": v for k, v in self.base.parameters().items()}

    def condition_latent(self, fused: Tensor, per_view: Sequence[Tensor], embeddings: Sequence[np.ndarray]) -> Tensor:
        """``f_t`` = fused render + view-aware attention over the single-view renders (queried by the fused one)."""
        return ops.add(fused, self.view_attn(per_view, embeddings, query=fused))

    def __call__(self, x_t: Tensor, t, cond: DenoiserCond) -> Tensor:
        if cond.injected is None:
            return self.base(x_t, t, cond)
        f_t = cond.injected
        return self.base(x_t, t, cond, hooks=lambda k, o: self.inject[k](o, f_t))


def denoise_step(model: Module, x_t: Tensor, t, cond: DenoiserCond) -> Tensor:
    """One noise prediction ``eps_theta(x_t, t, cond)``; ``t`` is checked against the schedule length."""
    base = model.base if isinstance(model, ConditionedDenoiser) else model
    base.check_timestep(t)
    return model(x_t, t, cond)
