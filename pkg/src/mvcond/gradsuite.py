"""Randomized 64-bit finite-difference checks over every differentiable op and module.

Each case builds float64 inputs from its own seed, reduces the output to a
scalar through a fixed random projection (so no gradient path is trivially
symmetric), and compares backprop with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .autograd import Conv2d, LayerNorm, Linear, Tensor, grad_check, ops
from .camera import SphericalPose, embed_relative, generate_rays, relative_pose, spherical_to_pose
from .conditioning import (
    ConditionedDenoiser,
    DenoiserCond,
    InjectionBlock,
    ShiftedWindowCrossAttention,
    ToyDenoiser,
    ViewAwareAttention,
    WindowConfig,
    resample_latent,
)
from .config import ModelConfig
from .fusion import TriPlane, composite, render_target_latent, sample_points
from .lifting import LiftingNet, MultiHeadAttention

TOLERANCE = 1e-4

# tiny model used for the module and end-to-end cases
SMALL = ModelConfig(
    image_res=16,
    latent_res=4,
    triplane_res=4,
    feature_dim=3,
    latent_dim=8,
    heads=2,
    mlp_ratio=2,
    samples_per_ray=6,
    window=2,
    shift=1,
    unet_channels=(4, 6, 8),
    time_dim=8,
    timesteps=10,
)


@dataclass
class CaseResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _t(rng, *shape, lo=None, hi=None) -> Tensor:
    if lo is None:
        data = rng.normal(size=shape)
    else:
        data = rng.uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = rng.normal(size=out.shape)
    return lambda y: ops.sum(ops.mul(y, w))


def _scalar(fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Wrap ``fn`` so its output is contracted with a fixed random tensor."""
    proj = _project(fn(), rng)
    return lambda: proj(fn())


def _module64(m, rng=None):
    m.astype(np.float64)
    if rng is not None:
        for p in m.parameters().values():
            if not np.any(p.data):
                p.data = rng.normal(0, 0.2, size=p.shape)
    return m


# ---------------------------------------------------------------------------
# case builders: each returns (fn, inputs)
# ---------------------------------------------------------------------------


def _unary(op, lo=None, hi=None):
    def build(rng):
        x = _t(rng, 3, 4, lo=lo, hi=hi)
        return (lambda: op(x)), [x]

    return build


def _binary(op):
    def build(rng):
        a, b = _t(rng, 2, 5), _t(rng, 2, 5)
        return (lambda: op(a, b)), [a, b]

    return build


def _build_add_bias(rng):
    x, b = _t(rng, 3, 4), _t(rng, 4)
    return (lambda: ops.add_bias(x, b)), [x, b]


def _build_scale(rng):
    x = _t(rng, 3, 4)
    c = rng.normal(size=(1, 4))
    return (lambda: ops.scale(x, c)), [x]


def _build_reshape_transpose(rng):
    x = _t(rng, 2, 3, 4)
    return (lambda: ops.transpose(ops.reshape(x, (4, 3, 2)), (2, 0, 1))), [x]


def _build_broadcast(rng):
    x = _t(rng, 3, 1)
    return (lambda: ops.broadcast_to(x, (3, 5))), [x]


def _build_concat_stack(rng):
    a, b = _t(rng, 2, 3), _t(rng, 2, 2)
    return (lambda: ops.stack([ops.concat([a, b], axis=1), ops.concat([b, a], axis=1)], axis=0)), [a, b]


def _build_index_roll(rng):
    x = _t(rng, 4, 5)
    return (lambda: ops.roll(ops.index(x, (slice(1, 4), slice(None, None, 2))), (1, -1), (0, 1))), [x]


def _build_reductions(rng):
    x = _t(rng, 3, 4, 2)
    return (lambda: ops.add(ops.sum(x, axis=1), ops.mean(x, axis=1))), [x]


def _build_cumsum(rng):
    x = _t(rng, 3, 6)
    exclusive = bool(rng.integers(2))
    return (lambda: ops.cumsum(x, axis=1, exclusive=exclusive)), [x]


def _build_matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 4, 5)
    return (lambda: ops.matmul(a, b)), [a, b]


def _build_matmul_shared(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    return (lambda: ops.matmul(a, b)), [a, b]


def _build_linear(rng):
    x, W, b = _t(rng, 5, 3), _t(rng, 3, 4), _t(rng, 4)
    return (lambda: ops.linear(x, W, b)), [x, W, b]


def _build_contract(rng):
    x = _t(rng, 3, 4, 2)
    A = rng.normal(size=(5, 4))
    return (lambda: ops.contract(x, A, 1)), [x]


def _build_sparse(rng):
    import scipy.sparse as sp

    M = sp.random(6, 5, density=0.5, random_state=int(rng.integers(1 << 30)), format="csr")
    x = _t(rng, 5, 3)
    return (lambda: ops.sparse_matmul(M, x)), [x]


def _build_softmax(rng):
    x = _t(rng, 3, 5)
    axis = int(rng.integers(2))
    return (lambda: ops.softmax(x, axis=axis)), [x]


def _build_attention(rng):
    q, k, v = _t(rng, 2, 3, 4), _t(rng, 2, 5, 4), _t(rng, 2, 5, 3)
    return (lambda: ops.attention(q, k, v)), [q, k, v]


def _build_layer_norm(rng):
    x, g, b = _t(rng, 2, 5, 3), _t(rng, 5), _t(rng, 5)
    return (lambda: ops.layer_norm(x, g, b, axis=1)), [x, g, b]


def _build_conv(stride):
    def build(rng):
        x, k, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)
        return (lambda: ops.conv2d(x, k, b, stride=stride)), [x, k, b]

    return build


def _build_losses(rng):
    p = _t(rng, 3, 4)
    target = rng.normal(size=(3, 4))
    return (lambda: ops.add(ops.mse(p, target), ops.sum_squared_error(p, target))), [p]


def _params(module, rng, limit: int = 3) -> list[Tensor]:
    ps = list(module.parameters().values())
    idx = rng.choice(len(ps), size=min(limit, len(ps)), replace=False)
    return [ps[i] for i in sorted(idx)]


def _build_layers(rng):
    lin, ln, conv = Linear(4, 3, rng), LayerNorm(3), Conv2d(3, 2, 3, rng)
    for m in (lin, ln, conv):
        _module64(m)
    x = _t(rng, 1, 4, 4, 4)

    def fn():
        h = ln(lin(ops.transpose(x, (0, 2, 3, 1))))
        return conv(ops.transpose(h, (0, 3, 1, 2)))

    return fn, [x, lin.weight, ln.gain, conv.weight]


def _build_mha(rng):
    m = _module64(MultiHeadAttention(4, 2, rng))
    x, c = _t(rng, 2, 3, 4), _t(rng, 2, 1, 4)
    return (lambda: m(x, c)), [x, c] + _params(m, rng)


def _build_triplane_sample(rng):
    S, F = 4, 3
    planes = [_t(rng, S, S, F) for _ in range(3)]
    pts = rng.uniform(-1.1, 1.1, size=(10, 3))
    return (lambda: sample_points(TriPlane(*planes), pts)), planes


def _build_composite(rng):
    R, K, F = 3, 5, 3
    x = _t(rng, R * K, F)

    def fn():
        grid, opacity = composite(x, R, K, 0.2)
        return ops.concat([grid, ops.reshape(opacity, (R, 1))], axis=1)

    return fn, [x]


def _build_render(rng):
    S, F = 4, 3
    n = int(rng.integers(1, 4))
    tps = [TriPlane(*[_t(rng, S, S, F, lo=-0.5, hi=0.5) for _ in range(3)]) for _ in range(n)]
    cams = [spherical_to_pose(SphericalPose(rng.uniform(0, 0.5), rng.uniform(0, 6.28), 2.2), 16) for _ in range(n)]
    tcam = spherical_to_pose(SphericalPose(0.2, rng.uniform(0, 6.28), 2.2), 16)
    rays = generate_rays(tcam, 1.2, 3.2, 3, 6)

    def fn():
        out = render_target_latent(tps, cams, tcam, rays, per_view=True)
        return ops.concat([out.grid, ops.reshape(out.opacity, (3, 3, 1)), out.per_view[-1]], axis=-1)

    return fn, [p for tp in tps for p in tp.planes()]


def _build_resample(rng):
    x = _t(rng, 4, 4, 2)
    r = int(rng.choice([2, 3, 7]))
    return (lambda: resample_latent(x, r)), [x]


def _build_swca(rng):
    m = _module64(ShiftedWindowCrossAttention(4, 2, rng))
    cfg = [WindowConfig(2, 1), WindowConfig(2, 0), WindowConfig(4, 0)][int(rng.integers(3))]
    q, kv = _t(rng, 4, 4, 4), _t(rng, 4, 4, 4)
    return (lambda: m(q, kv, cfg)), [q, kv] + _params(m, rng, 2)


def _build_vaa(rng):
    m = _module64(ViewAwareAttention(3, rng, dim=4))
    n = int(rng.integers(1, 4))
    zs = [_t(rng, 2, 2, 3) for _ in range(n)]
    embs = [rng.normal(size=4) for _ in range(n)]
    query = _t(rng, 2, 2, 3) if rng.integers(2) else None
    extra = [query] if query is not None else []
    return (lambda: m(zs, embs, query)), zs + extra + _params(m, rng, 2)


def _build_inject(rng):
    blk = _module64(InjectionBlock(4, 2, 4, SMALL, rng), rng)  # randomise the zero conv
    o, f = _t(rng, 1, 4, 4, 4), _t(rng, 1, 3, 3, 2)
    return (lambda: blk(o, f)), [o, f, blk.zero_conv.weight, blk.proj.weight]


def _build_denoiser(rng):
    base = _module64(ToyDenoiser(SMALL, rng))
    C = SMALL.latent_channels
    x = _t(rng, 1, C, 4, 4)
    cond = DenoiserCond(rng.normal(size=(1, C, 4, 4)), rng.normal(size=(1, 4)))
    t = int(rng.integers(SMALL.timesteps))
    return (lambda: base(x, t, cond)), [x] + _params(base, rng, 3)


def _build_chain(rng):
    """encode -> lift -> fuse/render -> view-aware attention -> inject -> denoise."""
    cfg = SMALL
    lifting = _module64(LiftingNet(cfg, rng), rng)  # randomise the zero-initialised pose path
    cd = _module64(ConditionedDenoiser(ToyDenoiser(cfg, rng), rng), rng)
    poses = [SphericalPose(0.1, 0.3, 2.2), SphericalPose(0.2, 3.4, 2.2)]
    target = SphericalPose(0.15, 1.7, 2.2)
    images = _t(rng, 2, 16, 16, 3, lo=0.0, hi=1.0)
    rps = [relative_pose(p, target) for p in poses]
    cams = [spherical_to_pose(p, 16) for p in poses]
    tcam = spherical_to_pose(target, 16)
    rays = generate_rays(tcam, cfg.near, cfg.far, cfg.latent_res, cfg.samples_per_ray)
    C = cfg.latent_channels
    x = rng.normal(size=(1, C, 4, 4))
    ref = rng.normal(size=(1, C, 4, 4))
    emb = embed_relative(rps[0])[None]
    embs = [embed_relative(rp) for rp in rps]

    def fn():
        tps = lifting.lift(lifting.encode(images), rps)
        r = render_target_latent(tps, cams, tcam, rays, per_view=True)
        f_t = cd.condition_latent(r.grid, r.per_view, embs)
        return cd(Tensor(x), 3, DenoiserCond(ref, emb, ops.reshape(f_t, (1,) + f_t.shape)))

    picks = [
        images,
        lifting.encoder.conv1.weight,
        lifting.projector.head.weight,
        lifting.projector.blocks[1].attn.v.weight,
        cd.view_attn.v.weight,
        cd.inject[0].zero_conv.weight,
        cd.base.conv_in.weight,
    ]
    return fn, picks


CASES: list[tuple[str, Callable, int]] = [
    # (name, builder, number of random seeds)
    ("add", _binary(ops.add), 3),
    ("sub", _binary(ops.sub), 3),
    ("mul", _binary(ops.mul), 3),
    ("add_bias", _build_add_bias, 2),
    ("scale", _build_scale, 2),
    ("square", _unary(ops.square), 2),
    ("exp", _unary(ops.exp), 2),
    ("log", _unary(ops.log, 0.5, 2.0), 2),
    ("sigmoid", _unary(ops.sigmoid), 2),
    ("tanh", _unary(ops.tanh), 2),
    ("relu", _unary(lambda x: ops.relu(x), 0.1, 1.0), 1),
    ("relu_neg", _unary(lambda x: ops.relu(x), -1.0, -0.1), 1),
    ("silu", _unary(ops.silu), 3),
    ("gelu", _unary(ops.gelu), 3),
    ("softplus", _unary(ops.softplus), 3),
    ("reshape_transpose", _build_reshape_transpose, 2),
    ("broadcast_to", _build_broadcast, 2),
    ("concat_stack", _build_concat_stack, 2),
    ("index_roll", _build_index_roll, 2),
    ("sum_mean", _build_reductions, 2),
    ("cumsum", _build_cumsum, 3),
    ("matmul", _build_matmul, 3),
    ("matmul_shared", _build_matmul_shared, 2),
    ("linear", _build_linear, 3),
    ("contract", _build_contract, 2),
    ("sparse_matmul", _build_sparse, 2),
    ("softmax", _build_softmax, 3),
    ("attention", _build_attention, 3),
    ("layer_norm", _build_layer_norm, 3),
    ("conv2d", _build_conv(1), 3),
    ("conv2d_stride2", _build_conv(2), 3),
    ("losses", _build_losses, 2),
    ("layers", _build_layers, 2),
    ("multi_head_attention", _build_mha, 3),
    ("triplane_sample", _build_triplane_sample, 3),
    ("composite", _build_composite, 3),
    ("render_target_latent", _build_render, 4),
    ("resample_latent", _build_resample, 3),
    ("shifted_window_cross_attn", _build_swca, 4),
    ("view_aware_attention", _build_vaa, 4),
    ("injection_block", _build_inject, 3),
    ("toy_denoiser", _build_denoiser, 2),
    ("full_chain", _build_chain, 2),
]


def iter_cases(seed: int = 0) -> Iterable[tuple[str, Callable, np.random.Generator]]:
    for ci, (name, build, reps) in enumerate(CASES):
        for r in range(reps):
            yield f"{name}[{r}]", build, np.random.default_rng([seed, ci, r])


def run_suite(seed: int = 0, max_coords: int = 12, on_result: Callable[[CaseResult], None] | None = None) -> list[CaseResult]:
    results = []
    for name, build, rng in iter_cases(seed):
        t0 = time.perf_counter()
        fn, inputs = build(rng)
        f = _scalar(fn, rng)
        try:
            err = grad_check(f, inputs, eps=1e-6, max_coords=max_coords, rng=rng)
        except (FloatingPointError, ValueError) as exc:  # report rather than abort the suite
            err = float("inf")
            name = f"{name} ({type(exc).__name__}: {exc})"
        res = CaseResult(name, err, time.perf_counter() - t0)
        results.append(res)
        if on_result:
            on_result(res)
    return results
