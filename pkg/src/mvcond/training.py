"""Diffusion plumbing, triplet sampling, the staged training loops, synthesis and evaluation.

Stages:
  0  pre-train the reference-conditioned base denoiser alone
  1  pre-train lifting on sparse-view latent reconstruction
  2  train injection, view-aware attention and (by default) lifting with the
     base denoiser frozen, on diffusion loss plus ``lambda_lift`` times the
     reconstruction loss

Every step draws its randomness from ``default_rng([seed, stage, step])`` so a
run resumed from a checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .autograd import Module, OptimizerState, Tensor, TrainingError, adam_step, no_grad, ops
from .autograd.tensor import DimensionError
from .camera import SphericalPose, embed_relative, generate_rays, relative_pose, spherical_to_pose
from .checkpoint import Checkpoint, save_checkpoint
from .conditioning import ConditionedDenoiser, DenoiserCond, ToyDenoiser
from .config import ConfigError, ModelConfig, RunConfig, TrainConfig
from .fusion import ContractError, RenderedLatent, render_target_latent
from .lifting import LiftingNet
from .metrics import psnr, ssim
from .scenes import MultiViewSample, View, decode_latent, target_latent_oracle

# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------


class NoiseSchedule:
    """Discrete DDPM schedule with precomputed ``alphas`` and ``alpha_bars``."""

    def __init__(self, betas: np.ndarray):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1 or np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("betas must be a non-empty vector in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)

    @classmethod
    def linear(cls, T: int = 100, beta_start: float | None = None, beta_end: float | None = None) -> "NoiseSchedule":
        """Linear betas. The defaults rescale the 1000-step range [1e-4, 0.02] by 1000/T,
        so the chain ends close to pure noise for any T (abar_T ~ 2e-5 at T = 100)."""
        scale = 1000.0 / T
        start = 1e-4 * scale if beta_start is None else beta_start
        end = min(0.02 * scale, 0.999) if beta_end is None else beta_end
        return cls(np.linspace(start, end, T))

    @property
    def T(self) -> int:
        return self.betas.size

    def check(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t))
        if not np.issubdtype(t.dtype, np.integer) or t.min() < 0 or t.max() >= self.T:
            raise ContractError(f"timestep must be an integer in [0, {self.T}), got {t}")
        return t


def ddpm_forward(x0: np.ndarray, t, schedule: NoiseSchedule, noise: np.ndarray) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is a scalar or one step per leading item."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if x0.shape != noise.shape:
        raise DimensionError(f"x0 {x0.shape} and noise {noise.shape} differ")
    t = schedule.check(t)
    ab = schedule.alpha_bars[t]
    if t.size > 1:
        if t.size != x0.shape[0]:
            raise DimensionError("one timestep per batch item expected")
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    else:
        ab = ab[0]
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(x0.dtype)


# ---------------------------------------------------------------------------
# triplets
# ---------------------------------------------------------------------------


@dataclass
class TripletSample:
    inputs: list[View]
    target: View
    input_indices: list[int]
    target_index: int


def opposing_index(k: int, n: int) -> int:
    if n % 2:
        raise ConfigError(f"ring of {n} views has no opposing view")
    return (k + n // 2) % n


def sample_triplet(sample: MultiViewSample, rng: np.random.Generator, third_prob: float = 0.5) -> TripletSample:
    """Primary view, its opposite on the same elevation ring, an optional third view, and a distinct target."""
    N = len(sample.views)
    if N < 4:
        raise ConfigError("triplet sampling needs at least 4 views")
    rings = sample.rings()
    k = int(rng.integers(N))
    ring = next(r for r in rings if k in r)
    if len(ring) < 4:
        raise ConfigError("each elevation ring needs at least 4 views")
    ids = [k, ring[opposing_index(ring.index(k), len(ring))]]
    use_third = rng.random() < third_prob
    rest = [i for i in range(N) if i not in ids]
    if use_third:
        ids.append(int(rest[rng.integers(len(rest))]))
        rest = [i for i in rest if i != ids[-1]]
    target = int(rest[rng.integers(len(rest))])
    return TripletSample([sample.views[i] for i in ids], sample.views[target], ids, target)


# ---------------------------------------------------------------------------
# model bundle and latents
# ---------------------------------------------------------------------------


class MultiViewModel(Module):
    """Lifting network plus the conditioned denoiser (which owns the base U-Net)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.lifting = LiftingNet(cfg, np.random.default_rng([seed, 1]))
        base = ToyDenoiser(cfg, np.random.default_rng([seed, 2]))
        self.denoiser = ConditionedDenoiser(base, np.random.default_rng([seed, 3]))

    @property
    def base(self) -> ToyDenoiser:
        return self.denoiser.base


def oracle_latent(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    return target_latent_oracle(image, cfg.latent_res, cfg.latent_channels)


def to_x0(latent: np.ndarray) -> np.ndarray:
    """[h, w, C] latent in [0, 1] -> [C, h, w] diffusion sample in [-1, 1]."""
    return (2.0 * np.asarray(latent) - 1.0).transpose(2, 0, 1)


def from_x0(x0: np.ndarray) -> np.ndarray:
    return (np.asarray(x0).transpose(1, 2, 0) + 1.0) / 2.0


def render_views(
    model: MultiViewModel,
    inputs: Sequence[View],
    target: SphericalPose,
    rng: np.random.Generator | None = None,
    per_view: bool = False,
    view_conditioning: bool = True,
) -> RenderedLatent:
    """Lift each posed input relative to ``target`` and render the fused target latent."""
    cfg = model.cfg
    rps = [relative_pose(v.pose, target) for v in inputs]
    tps = model.lifting.lift_all([(v.image, rp) for v, rp in zip(inputs, rps)], view_conditioning)
    cams = [spherical_to_pose(v.pose, cfg.image_res) for v in inputs]
    tcam = spherical_to_pose(target, cfg.image_res)
    rays = generate_rays(tcam, cfg.near, cfg.far, cfg.latent_res, cfg.samples_per_ray)
    return render_target_latent(tps, cams, tcam, rays, rng=rng, per_view=per_view)


def view_embeddings(inputs: Sequence[View], target: SphericalPose) -> list[np.ndarray]:
    return [embed_relative(relative_pose(v.pose, target)) for v in inputs]


def lift_loss(preds: Sequence[Tensor], targets: Sequence[np.ndarray]) -> Tensor:
    """Mean over the M supervised views of the summed squared latent error."""
    if not preds or len(preds) != len(targets):
        raise ContractError("lift_loss needs M >= 1 aligned predictions and targets")
    total = None
    for p, z in zip(preds, targets):
        z = np.asarray(z, dtype=p.dtype)
        if p.shape != z.shape:
            raise DimensionError(f"prediction {p.shape} and target {z.shape} differ")
        term = ops.sum_squared_error(p, z)
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / len(preds))


def total_loss(diffusion: Tensor | None, lift: Tensor | None, lambda_lift: float, mask_diffusion: bool = False) -> Tensor:
    """``L_diffusion + lambda_lift * L_lift``; either term may be masked out."""
    terms = []
    if diffusion is not None and not mask_diffusion:
        terms.append(diffusion)
    if lift is not None and lambda_lift > 0:
        terms.append(ops.scale(lift, lambda_lift))
    if not terms:
        raise ContractError("both loss terms are masked")
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out


# ---------------------------------------------------------------------------
# per-stage losses
# ---------------------------------------------------------------------------


@dataclass
class LossParts:
    total: Tensor
    lift: float | None = None
    diffusion: float | None = None


def _draw_triplets(dataset: Sequence[MultiViewSample], rng: np.random.Generator, n: int) -> list[TripletSample]:
    return [sample_triplet(dataset[int(rng.integers(len(dataset)))], rng) for _ in range(n)]


def stage1_loss(model: MultiViewModel, triplets: Sequence[TripletSample], rng=None, view_conditioning: bool = True) -> LossParts:
    cfg = model.cfg
    preds = [render_views(model, tr.inputs, tr.target.pose, rng, view_conditioning=view_conditioning).grid for tr in triplets]
    loss = lift_loss(preds, [oracle_latent(tr.target.image, cfg) for tr in triplets])
    return LossParts(loss, lift=loss.item())


def _diffusion_batch(model, triplets, rng, schedule, dtype):
    cfg = model.cfg
    x0 = np.stack([to_x0(oracle_latent(tr.target.image, cfg)) for tr in triplets]).astype(dtype)
    ref = np.stack([to_x0(oracle_latent(tr.inputs[0].image, cfg)) for tr in triplets]).astype(dtype)
    emb = np.stack([embed_relative(relative_pose(tr.inputs[0].pose, tr.target.pose)) for tr in triplets])
    t = rng.integers(schedule.T, size=len(triplets))
    noise = rng.standard_normal(x0.shape).astype(dtype)
    return ddpm_forward(x0, t, schedule, noise), t, noise, ref, emb


def stage0_loss(model: MultiViewModel, triplets: Sequence[TripletSample], rng, schedule: NoiseSchedule) -> LossParts:
    x_t, t, noise, ref, emb = _diffusion_batch(model, triplets, rng, schedule, model.base.dtype)
    pred = model.base(Tensor(x_t), t, DenoiserCond(ref, emb))
    loss = ops.mse(pred, noise)
    return LossParts(loss, diffusion=loss.item())


def conditioned_latent(model: MultiViewModel, tr: TripletSample, rng=None, view_conditioning=True, override=None):
    """``(f_t, fused render)`` for one triplet; ``override`` replaces every rendered latent (oracle probe)."""
    r = render_views(model, tr.inputs, tr.target.pose, rng, per_view=True, view_conditioning=view_conditioning)
    fused, per_view = r.grid, r.per_view
    if override is not None:
        fused = Tensor(np.asarray(override, dtype=fused.dtype))
        per_view = [fused] * len(r.per_view)
    f_t = model.denoiser.condition_latent(fused, per_view, view_embeddings(tr.inputs, tr.target.pose))
    return f_t, r.grid


def stage2_loss(
    model: MultiViewModel,
    triplets: Sequence[TripletSample],
    rng,
    schedule: NoiseSchedule,
    lambda_lift: float,
    view_conditioning: bool = True,
    render_rng=None,
) -> LossParts:
    cfg = model.cfg
    f_ts, grids = zip(*(conditioned_latent(model, tr, render_rng, view_conditioning) for tr in triplets))
    x_t, t, noise, ref, emb = _diffusion_batch(model, triplets, rng, schedule, model.base.dtype)
    pred = model.denoiser(Tensor(x_t), t, DenoiserCond(ref, emb, ops.stack(list(f_ts), axis=0)))
    diff = ops.mse(pred, noise)
    lift = lift_loss(list(grids), [oracle_latent(tr.target.image, cfg) for tr in triplets])
    return LossParts(total_loss(diff, lift, lambda_lift), lift=lift.item(), diffusion=diff.item())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def trainable_parameters(model: MultiViewModel, stage: int, tcfg: TrainConfig) -> dict:
    """Parameters optimised in ``stage``; everything else has ``requires_grad`` switched off."""
    params = model.parameters()
    if stage == 0:
        keep = lambda n: n.startswith("denoiser.base.")  # noqa: E731
    elif stage == 1:
        keep = lambda n: n.startswith("lifting.")  # noqa: E731
    elif stage == 2:
        def keep(n):
            if n.startswith("denoiser.base."):
                return not tcfg.freeze_base
            if n.startswith("lifting."):
                return tcfg.train_lifting
            return True
    else:
        raise ConfigError(f"unknown stage {stage}")
    chosen = {}
    for name, p in params.items():
        p.requires_grad = keep(name)
        if p.requires_grad:
            chosen[name] = p
    return chosen


def learning_rate(tcfg: TrainConfig, step: int) -> float:
    if tcfg.lr_schedule == "constant":
        return tcfg.lr
    return tcfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / tcfg.steps))


@dataclass
class TrainResult:
    model: MultiViewModel
    optimizer: OptimizerState
    stage: int
    step: int
    log: list[dict] = field(default_factory=list)


def step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stage), int(step)])


def train(
    stage: int,
    run: RunConfig,
    dataset: Sequence[MultiViewSample],
    model: MultiViewModel | None = None,
    optimizer: OptimizerState | None = None,
    start_step: int = 0,
    stop_at: int | None = None,
    log_path=None,
    on_step: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Run ``stage`` from ``start_step`` up to ``run.train.steps`` (or ``stop_at``)."""
    if not dataset:
        raise ContractError("training needs a non-empty dataset")
    tcfg = run.train.effective()
    model = model or MultiViewModel(run.model, tcfg.seed)
    schedule = NoiseSchedule.linear(run.model.timesteps)
    params = trainable_parameters(model, stage, tcfg)
    opt = optimizer or OptimizerState(lr=tcfg.lr)
    vc = not tcfg.ablations.no_view_conditioning
    end = tcfg.steps if stop_at is None else min(stop_at, tcfg.steps)
    log: list[dict] = []
    fh = open(log_path, "a") if log_path else None
    try:
        for step in range(start_step, end):
            rng = step_rng(tcfg.seed, stage, step)
            triplets = _draw_triplets(dataset, rng, tcfg.batch)
            if stage == 0:
                parts = stage0_loss(model, triplets, rng, schedule)
            elif stage == 1:
                parts = stage1_loss(model, triplets, rng, view_conditioning=vc)
            else:
                parts = stage2_loss(model, triplets, rng, schedule, tcfg.lambda_lift, vc, render_rng=rng)
            loss = parts.total.item()
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            model.zero_grad()
            parts.total.backward()
            adam_step(params, opt, lr=learning_rate(tcfg, step))
            rec = {"step": step, "loss": loss, "lift_loss": parts.lift, "diffusion_loss": parts.diffusion}
            log.append(rec)
            if fh and step % tcfg.log_every == 0:
                fh.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(step, rec)
    finally:
        if fh:
            fh.close()
    for p in model.parameters().values():
        p.requires_grad = True
    return TrainResult(model, opt, stage, end, log)


def train_stage0(run: RunConfig, dataset, model=None, **kw) -> TrainResult:
    return train(0, run, dataset, model, **kw)


def train_stage1(run: RunConfig, dataset, model=None, **kw) -> TrainResult:
    return train(1, run, dataset, model, **kw)


def train_stage2(run: RunConfig, dataset, model: MultiViewModel, **kw) -> TrainResult:
    if model is None:
        raise ContractError("stage 2 starts from a stage-1 model")
    return train(2, run, dataset, model, **kw)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _hash_model(cfg: ModelConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def save_training(path, result: TrainResult, run: RunConfig) -> Path:
    tensors = {f"param/{k}": v.data for k, v in result.model.parameters().items()}
    for k in sorted(result.optimizer.m):
        tensors[f"adam_m/{k}"] = result.optimizer.m[k]
        tensors[f"adam_v/{k}"] = result.optimizer.v[k]
    extra = {
        "stage": result.stage,
        "step": result.step,
        "adam_step": result.optimizer.step,
        "model_hash": _hash_model(run.model),
        "model": asdict(run.model),
        "train": json.loads(json.dumps(asdict(run.train.effective()))),
    }
    return save_checkpoint(path, tensors, run.hash(), extra)


def model_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig) -> MultiViewModel:
    if ckpt.extra.get("model_hash") not in (None, _hash_model(cfg)):
        raise ConfigError("checkpoint was trained with a different model configuration")
    model = MultiViewModel(cfg)
    params = {k[len("param/") :]: v for k, v in ckpt.tensors.items() if k.startswith("param/")}
    model.load_state_dict(params)
    return model


def optimizer_from_checkpoint(ckpt: Checkpoint, lr: float) -> OptimizerState:
    opt = OptimizerState(lr=lr, step=int(ckpt.extra.get("adam_step", 0)))
    for k, v in ckpt.tensors.items():
        if k.startswith("adam_m/"):
            opt.m[k[len("adam_m/") :]] = v.copy()
        elif k.startswith("adam_v/"):
            opt.v[k[len("adam_v/") :]] = v.copy()
    return opt


# ---------------------------------------------------------------------------
# held-out losses
# ---------------------------------------------------------------------------


def fixed_triplets(dataset: Sequence[MultiViewSample], count: int, seed: int) -> list[TripletSample]:
    rng = np.random.default_rng([int(seed), 99])
    return [sample_triplet(dataset[i % len(dataset)], rng) for i in range(count)]


def heldout_lift_loss(model: MultiViewModel, triplets: Sequence[TripletSample], view_conditioning: bool = True) -> float:
    with no_grad():
        vals = [stage1_loss(model, [tr], None, view_conditioning).lift for tr in triplets]
    return float(np.mean(vals))


def heldout_diffusion_losses(
    model: MultiViewModel,
    triplets: Sequence[TripletSample],
    seed: int = 0,
    conditioned: bool = True,
    draws: int = 4,
    view_conditioning: bool = True,
) -> dict:
    """Mean eps-prediction MSE (and lift loss) over fixed timesteps/noise per triplet."""
    schedule = NoiseSchedule.linear(model.cfg.timesteps)
    diffs, lifts = [], []
    with no_grad():
        for i, tr in enumerate(triplets):
            rng = np.random.default_rng([int(seed), 7, i])
            f_t, grid = conditioned_latent(model, tr, None, view_conditioning) if conditioned else (None, None)
            for _ in range(draws):
                x_t, t, noise, ref, emb = _diffusion_batch(model, [tr], rng, schedule, model.base.dtype)
                inj = ops.reshape(f_t, (1,) + f_t.shape) if f_t is not None else None
                pred = model.denoiser(Tensor(x_t), t, DenoiserCond(ref, emb, inj))
                diffs.append(ops.mse(pred, noise).item())
            if grid is not None:
                lifts.append(lift_loss([grid], [oracle_latent(tr.target.image, model.cfg)]).item())
    out = {"diffusion": float(np.mean(diffs))}
    if lifts:
        out["lift"] = float(np.mean(lifts))
    return out


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


@dataclass
class Synthesis:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    latent: np.ndarray  # [h, w, C] in [0, 1]


def synthesize(
    model: MultiViewModel,
    inputs: Sequence[View],
    target_pose: SphericalPose,
    sampler: str = "ddim",
    seed: int = 0,
    steps: int | None = None,
    latent_override: np.ndarray | None = None,
    max_inputs: int = 6,
) -> Synthesis:
    """Reverse diffusion conditioned on 1..``max_inputs`` posed views; the first view is the reference."""
    if not 1 <= len(inputs) <= max_inputs:
        raise ContractError(f"synthesis takes 1 to {max_inputs} input views, got {len(inputs)}")
    if sampler not in ("ddpm", "ddim"):
        raise ConfigError(f"unknown sampler '{sampler}'")
    cfg = model.cfg
    target_pose = SphericalPose(target_pose.theta, target_pose.phi, target_pose.radius)
    schedule = NoiseSchedule.linear(cfg.timesteps)
    dt = model.base.dtype
    tr = TripletSample(list(inputs), View(np.zeros((cfg.image_res, cfg.image_res, 3)), target_pose), [], -1)
    rng = np.random.default_rng([int(seed), 5])
    with no_grad():
        f_t, _ = conditioned_latent(model, tr, None, override=latent_override)
        inj = ops.reshape(f_t, (1,) + f_t.shape)
        ref = to_x0(oracle_latent(inputs[0].image, cfg))[None].astype(dt)
        emb = embed_relative(relative_pose(inputs[0].pose, target_pose))[None]
        cond = DenoiserCond(ref, emb, inj)
        x = rng.standard_normal(ref.shape).astype(dt)
        if sampler == "ddpm":
            for t in range(schedule.T - 1, -1, -1):
                eps = model.denoiser(Tensor(x), t, cond).data
                a, ab, b = schedule.alphas[t], schedule.alpha_bars[t], schedule.betas[t]
                mean = (x - b / math.sqrt(1 - ab) * eps) / math.sqrt(a)
                if t > 0:
                    var = b * (1 - schedule.alpha_bars[t - 1]) / (1 - ab)
                    x = (mean + math.sqrt(var) * rng.standard_normal(x.shape)).astype(dt)
                else:
                    x = mean.astype(dt)
        else:
            n = steps or 25
            ts = np.unique(np.linspace(0, schedule.T - 1, n).round().astype(int))[::-1]
            for i, t in enumerate(ts):
                eps = model.denoiser(Tensor(x), int(t), cond).data
                ab = schedule.alpha_bars[t]
                x0 = np.clip((x - math.sqrt(1 - ab) * eps) / math.sqrt(ab), -1, 1)
                ab_prev = schedule.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
                x = (math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps).astype(dt) if i + 1 < len(ts) else x0.astype(dt)
    latent = np.clip(from_x0(x[0]), 0.0, 1.0)
    return Synthesis(decode_latent(latent, cfg.image_res), latent)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def sweep_inputs(ring: Sequence[int], count: int, offset: int) -> list[int]:
    n = len(ring)
    if n % count:
        raise ConfigError(f"{count} evenly spaced inputs do not fit a ring of {n} views")
    return [ring[(offset + k * n // count) % n] for k in range(count)]


@dataclass
class EvalCase:
    scene: str
    elevation_deg: float
    view_count: int
    latent_psnr: float
    psnr: float
    ssim: float


def evaluate(
    model: MultiViewModel,
    eval_set: Sequence[MultiViewSample],
    view_counts: Sequence[int] = (2, 4, 6),
    seed: int = 0,
    synthesize_images: bool = False,
    sampler_steps: int = 10,
) -> list[EvalCase]:
    """Per (scene, elevation ring) pick one offset and one target shared by every view count.

    ``latent_psnr`` compares the fused rendered latent with the oracle target
    latent. Image metrics use the synthesized image when ``synthesize_images``
    is set, otherwise the decoded rendered latent.
    """
    if not eval_set:
        raise ContractError("evaluation set is empty")
    cfg = model.cfg
    cases = []
    for si, sample in enumerate(eval_set):
        for ri, ring in enumerate(sample.rings()):
            rng = np.random.default_rng([int(seed), si, ri])
            offset = int(rng.integers(len(ring)))
            used = set()
            for c in view_counts:
                used.update(sweep_inputs(ring, c, offset))
            free = [i for i in ring if i not in used]
            if not free:
                raise ConfigError("ring too small to hold out a target for every view count")
            target = sample.views[free[int(rng.integers(len(free)))]]
            gt_latent = oracle_latent(target.image, cfg)
            elev = round(math.degrees(target.pose.theta), 6)
            for c in view_counts:
                inputs = [sample.views[i] for i in sweep_inputs(ring, c, offset)]
                with no_grad():
                    grid = render_views(model, inputs, target.pose).grid.data.astype(np.float64)
                if synthesize_images:
                    img = synthesize(model, inputs, target.pose, "ddim", seed=si, steps=sampler_steps).image
                else:
                    img = decode_latent(np.clip(grid, 0, 1), cfg.image_res)
                cases.append(
                    EvalCase(sample.scene_id, elev, c, psnr(np.clip(grid, 0, 1), gt_latent), psnr(img, target.image), ssim(img, target.image))
                )
    return cases


def summarize(cases: Sequence[EvalCase]) -> list[dict]:
    """Rows per (elevation, view count) plus an ``"all"`` row per view count."""
    rows = []
    elevs = sorted({c.elevation_deg for c in cases})
    counts = sorted({c.view_count for c in cases})
    for elev in list(elevs) + ["all"]:
        for n in counts:
            sel = [c for c in cases if c.view_count == n and (elev == "all" or c.elevation_deg == elev)]
            if not sel:
                continue
            rows.append(
                {
                    "elevation_deg": elev,
                    "view_count": n,
                    "num_targets": len(sel),
                    "latent_psnr": float(np.mean([c.latent_psnr for c in sel])),
                    "psnr": float(np.mean([c.psnr for c in sel])),
                    "ssim": float(np.mean([c.ssim for c in sel])),
                }
            )
    return rows


def paired_trend_test(cases: Sequence[EvalCase], low: int, high: int) -> tuple[float, float]:
    """One-sided paired t-test of per-scene mean latent PSNR, ``high`` minus ``low``; returns (mean diff, p)."""
    scenes = sorted({c.scene for c in cases})

    def per_scene(n):
        return np.array([np.mean([c.latent_psnr for c in cases if c.scene == s and c.view_count == n]) for s in scenes])

    a, b = per_scene(low), per_scene(high)
    res = stats.ttest_rel(b, a, alternative="greater")
    return float(np.mean(b - a)), float(res.pvalue)


def write_report(out_dir, rows: list[dict], checkpoint: str, config_hash: str, num_scenes: int) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"checkpoint": checkpoint, "config_hash": config_hash, "num_scenes": num_scenes, "rows": rows}
    jpath = out_dir / "report.json"
    jpath.write_text(json.dumps(report, indent=2) + "\n")
    cpath = out_dir / "report.csv"
    with open(cpath, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return jpath, cpath


__all__ = [
    "NoiseSchedule",
    "ddpm_forward",
    "TripletSample",
    "sample_triplet",
    "MultiViewModel",
    "lift_loss",
    "total_loss",
    "train",
    "train_stage0",
    "train_stage1",
    "train_stage2",
    "synthesize",
    "evaluate",
]
