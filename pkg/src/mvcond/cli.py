"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or training error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import math
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import gradsuite
from .autograd import NumericsError, TrainingError, checked
from .camera import PoleError, SphericalPose
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .fusion import ContractError
from .scenes import View, load_dataset, load_png, make_dataset, save_png
from .training import (
    MultiViewModel,
    evaluate,
    fixed_triplets,
    heldout_diffusion_losses,
    heldout_lift_loss,
    model_from_checkpoint,
    optimizer_from_checkpoint,
    save_training,
    summarize,
    synthesize,
    train,
    write_report,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

ABLATIONS = {
    "no-recon": "no_recon_loss",
    "no-view-cond": "no_view_conditioning",
    "trainable-unet": "trainable_unet",
}
EVAL_INDEX_OFFSET = 100_000  # eval scenes use indices disjoint from any training split


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvcond", description="Multi-view conditioned novel-view synthesis at desk scale.")
    p.add_argument("--config", type=Path, help="run configuration JSON")
    p.add_argument("--seed", type=int, help="override every seed in the configuration")
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread limit (default 1)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--checked", action="store_true", help="raise on NaN/Inf in any op (same as MVCOND_CHECKED=1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("dataset", help="render a synthetic multi-view dataset")
    d.add_argument("--split", choices=("train", "eval"), default="train")

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    t.add_argument("--data", type=Path, required=True, help="dataset directory")
    t.add_argument("--init", type=Path, help="checkpoint to start from (required for stage 2)")
    t.add_argument("--resume", type=Path, help="continue an interrupted run of the same stage")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.add_argument("--stop-at", type=int, help="stop after this many steps (schedule still spans train.steps)")
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[])

    s = sub.add_parser("synth", help="synthesize target views from posed inputs")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--input", type=Path, action="append", required=True, help="input PNG (repeatable, first is the reference)")
    s.add_argument("--pose", action="append", default=[], help="THETA_DEG,PHI_DEG per input; else read from poses.json beside the image")
    s.add_argument("--target", help="THETA_DEG,PHI_DEG of the target view")
    s.add_argument("--sweep", type=int, help="emit a full azimuth orbit with this many frames at the reference elevation")
    s.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddim")
    s.add_argument("--steps", type=int, default=25, help="DDIM steps")

    e = sub.add_parser("eval", help="view-count sweep over an evaluation dataset")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--synthesize", action="store_true", help="score images produced by reverse diffusion")

    sub.add_parser("gradcheck", help="64-bit finite-difference suite")

    a = sub.add_parser("ablate", help="paired full-vs-ablated training run with held-out losses")
    a.add_argument("--ablation", choices=sorted(ABLATIONS), required=True)
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--heldout", type=Path, required=True)
    a.add_argument("--init", type=Path, help="starting checkpoint (required for stage-2 ablations)")
    a.add_argument("--steps", type=int)
    a.add_argument("--triplets", type=int, default=32)
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    run = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run = replace(
            run,
            data=replace(run.data, seed=args.seed),
            train=replace(run.train, seed=args.seed),
            eval=replace(run.eval, seed=args.seed),
        )
    return run


def _with_ablations(run: RunConfig, names) -> RunConfig:
    abl = run.train.ablations
    for name in names:
        abl = replace(abl, **{ABLATIONS[name]: True})
    return replace(run, train=replace(run.train, ablations=abl))


def _parse_angles(text: str) -> tuple[float, float]:
    try:
        theta, phi = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"expected THETA_DEG,PHI_DEG, got '{text}'") from exc
    return theta, phi


def _dataset(path: Path):
    if not path.is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    ds = load_dataset(path)
    if not ds:
        raise UsageError(f"no scenes found under {path}")
    return ds


def _load_model(path: Path, run: RunConfig):
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    ckpt = load_checkpoint(path)
    return model_from_checkpoint(ckpt, run.model), ckpt


def _print(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_dataset(args, run: RunConfig) -> int:
    if args.split == "train":
        d = run.data
        make_dataset(d.scenes, d.views, d.elevations_deg, d.resolution, args.out, seed=d.seed, radius=run.model.radius)
        n = d.scenes
    else:
        e = run.eval
        make_dataset(
            e.scenes, e.views, e.elevations_deg, run.data.resolution, args.out, seed=e.seed,
            radius=run.model.radius, first_index=EVAL_INDEX_OFFSET,
        )
        n = e.scenes
    _print(f"wrote {n} scenes to {args.out / 'scenes'}")
    return EXIT_OK


def cmd_train(args, run: RunConfig) -> int:
    if args.stage == 2 and not (args.init or args.resume):
        raise UsageError("stage 2 needs --init pointing at a stage-1 checkpoint")
    run = _with_ablations(run, args.ablate)
    tr = replace(run.train, stage=args.stage)
    if args.steps is not None:
        tr = replace(tr, steps=args.steps)
    run = replace(run, train=tr)
    dataset = _dataset(args.data)
    model, opt, start = None, None, 0
    if args.resume:
        if not args.resume.exists():
            raise UsageError(f"checkpoint {args.resume} does not exist")
        ckpt = load_checkpoint(args.resume, expected_hash=run.hash())
        if ckpt.extra.get("stage") != args.stage:
            raise UsageError(f"checkpoint is from stage {ckpt.extra.get('stage')}, not {args.stage}")
        model = model_from_checkpoint(ckpt, run.model)
        opt = optimizer_from_checkpoint(ckpt, run.train.lr)
        start = int(ckpt.extra["step"])
    elif args.init:
        model, _ = _load_model(args.init, run)
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": "train", "stage": args.stage, "config": run.to_dict(), "effective_train": _effective(run),
                "config_hash": run.hash(), "init": str(args.init) if args.init else None,
                "resume": str(args.resume) if args.resume else None}
    (args.out / "run.json").write_text(json.dumps(manifest, indent=2) + "\n")
    t0 = time.time()
    log_every = max(1, run.train.steps // 20)

    def progress(step, rec):
        if step % log_every == 0:
            _print(f"step {step:6d}  loss {rec['loss']:.5f}  ({time.time() - t0:.0f}s)")

    log_path = args.out / "train_log.jsonl"
    if not args.resume and log_path.exists():
        log_path.unlink()
    result = train(args.stage, run, dataset, model, opt, start, args.stop_at, log_path, progress)
    ckpt_dir = save_training(args.out / "checkpoint", result, run)
    _print(f"checkpoint written to {ckpt_dir} at step {result.step}")
    return EXIT_OK


def _effective(run: RunConfig) -> dict:
    return asdict(run.train.effective())


def _input_views(args) -> list[View]:
    if args.pose and len(args.pose) != len(args.input):
        raise UsageError("give one --pose per --input, or none to read poses.json")
    views = []
    for i, path in enumerate(args.input):
        if not path.is_file():
            raise UsageError(f"input image {path} does not exist")
        if args.pose:
            theta, phi = _parse_angles(args.pose[i])
            radius = None
        else:
            meta_path = path.parent / "poses.json"
            if not meta_path.is_file():
                raise UsageError(f"no pose given for {path} and no poses.json beside it")
            entries = {e["file"]: e for e in json.loads(meta_path.read_text())["views"]}
            if path.name not in entries:
                raise UsageError(f"{meta_path} has no pose for {path.name}")
            e = entries[path.name]
            theta, phi, radius = e["theta_deg"], e["phi_deg"], e["radius"]
        views.append((path, theta, phi, radius))
    return views


def cmd_synth(args, run: RunConfig) -> int:
    specs = _input_views(args)
    if args.target is None and args.sweep is None:
        raise UsageError("give --target or --sweep")
    model, _ = _load_model(args.ckpt, run)
    r = run.model.radius
    views = [View(load_png(p), SphericalPose.from_degrees(t, f, rad or r)) for p, t, f, rad in specs]
    if args.sweep:
        theta0 = math.degrees(views[0].pose.theta)
        targets = [(theta0, 360.0 * k / args.sweep) for k in range(args.sweep)]
    else:
        targets = [_parse_angles(args.target)]
    seed = run.train.seed if args.seed is None else args.seed
    args.out.mkdir(parents=True, exist_ok=True)
    for k, (theta, phi) in enumerate(targets):
        out = synthesize(model, views, SphericalPose.from_degrees(theta, phi, r), args.sampler, seed=seed, steps=args.steps)
        name = f"synth_{k:03d}.png" if args.sweep else "synth.png"
        save_png(out.image, args.out / name)
        _print(f"wrote {args.out / name} (theta {theta:g}, phi {phi:g})")
    return EXIT_OK


def cmd_eval(args, run: RunConfig) -> int:
    model, ckpt = _load_model(args.ckpt, run)
    eval_set = _dataset(args.data)
    cases = evaluate(model, eval_set, run.eval.view_counts, seed=run.eval.seed, synthesize_images=args.synthesize)
    rows = summarize(cases)
    jpath, cpath = write_report(args.out, rows, str(args.ckpt), ckpt.config_hash, len(eval_set))
    for row in rows:
        _print(
            f"elev {row['elevation_deg']!s:>5}  n={row['view_count']}  latent PSNR {row['latent_psnr']:.3f}  "
            f"PSNR {row['psnr']:.3f}  SSIM {row['ssim']:.4f}"
        )
    _print(f"wrote {jpath} and {cpath}")
    return EXIT_OK


def cmd_gradcheck(args, run: RunConfig) -> int:
    t0 = time.time()

    def report(res):
        _print(f"{'ok  ' if res.passed else 'FAIL'} {res.name:40s} rel err {res.error:.2e}")

    results = gradsuite.run_suite(seed=run.train.seed, on_result=report)
    failed = [r for r in results if not r.passed]
    _print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed in {time.time() - t0:.1f}s")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_ablate(args, run: RunConfig) -> int:
    field = ABLATIONS[args.ablation]
    stage = 1 if args.ablation == "no-view-cond" else 2
    if stage == 2 and not args.init:
        raise UsageError(f"--ablation {args.ablation} trains stage 2 and needs --init")
    tr = replace(run.train, stage=stage)
    if args.steps is not None:
        tr = replace(tr, steps=args.steps)
    run = replace(run, train=tr)
    dataset, heldout = _dataset(args.data), _dataset(args.heldout)
    triplets = fixed_triplets(heldout, args.triplets, run.eval.seed)
    results = {}
    for variant in ("full", args.ablation):
        vrun = run if variant == "full" else _with_ablations(run, [args.ablation])
        model = _load_model(args.init, vrun)[0] if args.init else MultiViewModel(vrun.model, vrun.train.seed)
        res = train(stage, vrun, dataset, model)
        if stage == 1:
            vc = not vrun.train.ablations.no_view_conditioning
            metrics = {"lift": heldout_lift_loss(res.model, triplets, vc)}
        else:
            metrics = heldout_diffusion_losses(res.model, triplets, seed=run.eval.seed)
            metrics["total"] = metrics["diffusion"] + run.train.lambda_lift * metrics["lift"]
        results[variant] = metrics
        _print(f"{variant:>16}: " + "  ".join(f"{k} {v:.5f}" for k, v in metrics.items()))
    key = "lift" if stage == 1 else ("diffusion" if field == "trainable_unet" else "total")
    summary = {"ablation": args.ablation, "stage": stage, "metric": key, "results": results,
               "full_better": results["full"][key] < results[args.ablation][key]}
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"ablate_{args.ablation}.json").write_text(json.dumps(summary, indent=2) + "\n")
    _print(f"full model better on held-out {key}: {summary['full_better']}")
    return EXIT_OK


COMMANDS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        run = _run_config(args)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads), checked(True) if args.checked else contextlib.nullcontext():
            return COMMANDS[args.command](args, run)
    except (UsageError, ConfigError, PoleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ContractError, TrainingError, NumericsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
