import json
import math
from dataclasses import replace

import jsonschema
import numpy as np
import pytest

from mvcond import training
from mvcond.autograd import ContractError, NumericsError, Tensor, TrainingError, checked, ops
from mvcond.autograd.tensor import DimensionError
from mvcond.camera import PoleError, SphericalPose
from mvcond.checkpoint import load_checkpoint
from mvcond.config import Ablations, ConfigError, DataConfig, RunConfig, TrainConfig, schema
from mvcond.gradsuite import SMALL
from mvcond.scenes import MultiViewSample, View, load_dataset, make_dataset, view_poses
from mvcond.training import (
    EvalCase,
    LossParts,
    MultiViewModel,
    NoiseSchedule,
    ddpm_forward,
    evaluate,
    fixed_triplets,
    learning_rate,
    lift_loss,
    model_from_checkpoint,
    opposing_index,
    optimizer_from_checkpoint,
    paired_trend_test,
    sample_triplet,
    save_training,
    stage0_loss,
    stage2_loss,
    summarize,
    sweep_inputs,
    synthesize,
    total_loss,
    train,
    write_report,
)


def fake_sample(n_views=16, elevations=(0.0,), res=4):
    poses = view_poses(n_views, elevations)
    return MultiViewSample("s", [View(np.zeros((res, res, 3), np.float32), p) for p in poses])


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    make_dataset(3, 4, None, SMALL.image_res, root, seed=3)
    return load_dataset(root)


def small_run(stage=1, steps=4, **kw):
    return RunConfig(
        data=DataConfig(scenes=3, views=4, resolution=SMALL.image_res, seed=3),
        model=SMALL,
        train=TrainConfig(stage=stage, steps=steps, lr=1e-3, **kw),
    )


def params_of(model):
    return {k: v.data.copy() for k, v in model.parameters().items()}


class TestNoiseSchedule:
    def test_linear(self):
        s = NoiseSchedule.linear()
        assert s.T == 100
        # the 1000-step range [1e-4, 0.02] rescaled by 1000/T
        assert s.betas[0] == pytest.approx(1e-3) and s.betas[-1] == pytest.approx(0.2)
        assert s.alpha_bars[-1] < 1e-4
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[0] == pytest.approx(0.999)
        np.testing.assert_allclose(s.alpha_bars, np.cumprod(1 - s.betas))

    def test_explicit_range(self):
        s = NoiseSchedule.linear(1000, 1e-4, 0.02)
        assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(0.02)
        assert s.alpha_bars[-1] == pytest.approx(np.prod(1 - np.linspace(1e-4, 0.02, 1000)))

    @pytest.mark.parametrize("T", [10, 100, 1000])
    def test_ends_near_pure_noise(self, T):
        assert NoiseSchedule.linear(T).alpha_bars[-1] < 1e-4

    @pytest.mark.parametrize("betas", [[0.0, 0.1], [0.5, 1.0], [], [[0.1]]])
    def test_invalid(self, betas):
        with pytest.raises(ConfigError):
            NoiseSchedule(np.array(betas))


class TestDDPMForward:
    def test_alpha_bar_one(self, rng):
        s = NoiseSchedule(np.array([1e-300]))
        x0, eps = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(ddpm_forward(x0, 0, s, eps), x0)

    def test_alpha_bar_zero(self, rng):
        s = NoiseSchedule(np.full(200, 0.99999))
        assert s.alpha_bars[-1] == 0.0
        x0, eps = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(ddpm_forward(x0, 199, s, eps), eps)

    @pytest.mark.parametrize("t", [5, 50, 99])
    def test_monte_carlo_variance(self, rng, t):
        s = NoiseSchedule.linear()
        x0 = np.full((20000, 4), 0.3)
        eps = rng.normal(size=x0.shape)
        x_t = ddpm_forward(x0, t, s, eps)
        var = x_t.var(axis=0)
        np.testing.assert_allclose(var, (1 - s.alpha_bars[t]) * eps.var(axis=0), rtol=0.05)
        np.testing.assert_allclose(x_t.mean(axis=0), math.sqrt(s.alpha_bars[t]) * 0.3, atol=0.05)

    def test_per_item_timesteps(self, rng):
        s = NoiseSchedule.linear()
        x0, eps = rng.normal(size=(2, 3, 5))
        out = ddpm_forward(x0, np.array([0, 60, 99]), s, eps)
        for i, t in enumerate([0, 60, 99]):
            np.testing.assert_allclose(out[i], ddpm_forward(x0[i], t, s, eps[i]))

    @pytest.mark.parametrize("t", [-1, 100, 1.5])
    def test_out_of_range(self, rng, t):
        with pytest.raises(ContractError):
            ddpm_forward(np.zeros(3), np.array(t), NoiseSchedule.linear(), np.zeros(3))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ddpm_forward(np.zeros(3), 0, NoiseSchedule.linear(), np.zeros(4))


class TestTriplets:
    def test_opposing(self):
        assert opposing_index(3, 16) == 11
        assert opposing_index(12, 16) == 4
        with pytest.raises(ConfigError):
            opposing_index(0, 15)

    def test_deterministic(self):
        sample = fake_sample()
        a = sample_triplet(sample, np.random.default_rng(5))
        b = sample_triplet(sample, np.random.default_rng(5))
        assert a.input_indices == b.input_indices and a.target_index == b.target_index

    def test_structure(self, rng):
        sample = fake_sample(8, (0.0, 20.0))
        rings = sample.rings()
        for _ in range(500):
            tr = sample_triplet(sample, rng)
            k, opp = tr.input_indices[:2]
            ring = next(r for r in rings if k in r)
            assert opp in ring
            assert ring.index(opp) == (ring.index(k) + 4) % 8
            assert len(set(tr.input_indices)) == len(tr.input_indices) in (2, 3)
            assert tr.target_index not in tr.input_indices

    def test_third_view_rate(self, rng):
        sample = fake_sample()
        present = sum(len(sample_triplet(sample, rng).inputs) == 3 for _ in range(10_000))
        assert abs(present / 10_000 - 0.5) <= 0.02

    def test_primary_uniform(self, rng):
        sample = fake_sample(8)
        counts = np.bincount([sample_triplet(sample, rng).input_indices[0] for _ in range(8000)], minlength=8)
        assert np.all(np.abs(counts / 8000 - 1 / 8) < 0.02)

    def test_invalid_rings(self, rng):
        with pytest.raises(ConfigError):
            sample_triplet(fake_sample(3), rng)
        with pytest.raises(ConfigError):
            sample_triplet(fake_sample(5), rng)


class TestLosses:
    def test_lift_loss_examples(self, rng):
        z = rng.normal(size=(2, 2, 1))
        assert lift_loss([Tensor(z)], [z]).item() == 0.0
        assert lift_loss([Tensor(np.full((2, 2, 1), 0.5))], [np.zeros((2, 2, 1))]).item() == pytest.approx(1.0)
        r = rng.normal(size=(3, 3, 2))
        one = lift_loss([Tensor(r)], [np.zeros_like(r)]).item()
        two = lift_loss([Tensor(2 * r)], [np.zeros_like(r)]).item()
        assert two == pytest.approx(4 * one, rel=1e-6)

    def test_lift_loss_averages_views(self):
        a, b = np.full((1, 1, 1), 1.0), np.full((1, 1, 1), 3.0)
        loss = lift_loss([Tensor(a), Tensor(b)], [np.zeros(1).reshape(1, 1, 1)] * 2).item()
        assert loss == pytest.approx((1 + 9) / 2)

    def test_lift_loss_errors(self):
        with pytest.raises(DimensionError):
            lift_loss([Tensor(np.zeros((2, 2, 1)))], [np.zeros((2, 2, 2))])
        with pytest.raises(ContractError):
            lift_loss([], [])

    def test_total_loss_decomposition(self):
        d, l = Tensor(np.array(0.7)), Tensor(np.array(2.0))
        assert total_loss(d, l, 0.0).item() == pytest.approx(0.7)
        assert total_loss(d, l, 0.5, mask_diffusion=True).item() == pytest.approx(1.0)
        assert total_loss(d, l, 0.5).item() == pytest.approx(1.7)
        with pytest.raises(ContractError):
            total_loss(d, l, 0.0, mask_diffusion=True)

    def test_stage2_step0_matches_base(self, tiny_data):
        model = MultiViewModel(SMALL, 0)
        triplets = fixed_triplets(tiny_data, 2, 0)
        s = NoiseSchedule.linear(SMALL.timesteps)
        cond = stage2_loss(model, triplets, np.random.default_rng(1), s, 1.0)
        base = stage0_loss(model, triplets, np.random.default_rng(1), s)
        assert cond.diffusion == base.diffusion
        pure = stage2_loss(model, triplets, np.random.default_rng(1), s, 0.0)
        assert pure.total.item() == pure.diffusion


class TestLearningRate:
    def test_cosine(self):
        cfg = TrainConfig(steps=100, lr=1e-3)
        assert learning_rate(cfg, 0) == pytest.approx(1e-3)
        assert learning_rate(cfg, 50) == pytest.approx(5e-4)
        assert learning_rate(replace(cfg, lr_schedule="constant"), 70) == 1e-3


class TestTraining:
    @pytest.mark.parametrize("stage", [0, 1])
    def test_deterministic(self, tiny_data, stage):
        a = train(stage, small_run(stage), tiny_data)
        b = train(stage, small_run(stage), tiny_data)
        for k, v in params_of(a.model).items():
            assert v.tobytes() == b.model.parameters()[k].data.tobytes()
        assert a.log == b.log

    def test_stage_touches_only_its_modules(self, tiny_data):
        init = MultiViewModel(SMALL, 0)
        before = params_of(init)
        res = train(1, small_run(1), tiny_data, model=init)
        after = params_of(res.model)
        changed = {k for k in before if not np.array_equal(before[k], after[k])}
        assert changed and all(k.startswith("lifting.") for k in changed)

    @pytest.mark.parametrize("ablation, base_changes", [(Ablations(), False), (Ablations(trainable_unet=True), True)])
    def test_stage2_freeze(self, tiny_data, ablation, base_changes):
        model = MultiViewModel(SMALL, 0)
        before = params_of(model)
        train(2, small_run(2, steps=3, ablations=ablation), tiny_data, model=model)
        after = params_of(model)
        base_keys = [k for k in before if k.startswith("denoiser.base.")]
        same = all(np.array_equal(before[k], after[k]) for k in base_keys)
        assert same != base_changes
        assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith("denoiser.inject."))

    def test_resume_bit_exact(self, tiny_data, tmp_path):
        run = small_run(1, steps=6)
        full = train(1, run, tiny_data)
        part = train(1, run, tiny_data, stop_at=3)
        save_training(tmp_path / "ck", part, run)
        ck = load_checkpoint(tmp_path / "ck", expected_hash=run.hash())
        assert ck.extra["step"] == 3
        model = model_from_checkpoint(ck, SMALL)
        opt = optimizer_from_checkpoint(ck, run.train.lr)
        rest = train(1, run, tiny_data, model=model, optimizer=opt, start_step=ck.extra["step"])
        for k, v in params_of(full.model).items():
            assert v.tobytes() == rest.model.parameters()[k].data.tobytes()
        assert full.log == part.log + rest.log

    def test_log_file(self, tiny_data, tmp_path):
        train(1, small_run(1, steps=2), tiny_data, log_path=tmp_path / "log.jsonl")
        lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in lines] == [0, 1]
        assert set(lines[0]) == {"step", "loss", "lift_loss", "diffusion_loss"}

    def test_divergence_names_step(self, tiny_data, monkeypatch):
        real = training.stage1_loss

        def poisoned(model, triplets, rng=None, view_conditioning=True):
            parts = real(model, triplets, rng, view_conditioning)
            if poisoned.calls == 2:
                parts = LossParts(ops.scale(parts.total, float("nan")), lift=float("nan"))
            poisoned.calls += 1
            return parts

        poisoned.calls = 0
        monkeypatch.setattr(training, "stage1_loss", poisoned)
        # unchecked mode: the loop itself must notice the bad loss
        with checked(False), pytest.raises(TrainingError, match="step 2"):
            train(1, small_run(1, steps=4), tiny_data)

    def test_checked_mode_catches_divergence_early(self, tiny_data, monkeypatch):
        real = training.stage1_loss

        def poisoned(model, triplets, rng=None, view_conditioning=True):
            parts = real(model, triplets, rng, view_conditioning)
            return LossParts(ops.scale(parts.total, float("nan")), lift=float("nan"))

        monkeypatch.setattr(training, "stage1_loss", poisoned)
        with checked(True), pytest.raises(NumericsError):
            train(1, small_run(1, steps=2), tiny_data)

    def test_empty_dataset(self):
        with pytest.raises(ContractError):
            train(1, small_run(1), [])

    def test_stage2_needs_model(self, tiny_data):
        with pytest.raises(ContractError):
            training.train_stage2(small_run(2), tiny_data, None)


class TestSynthesis:
    @pytest.mark.parametrize("sampler", ["ddim", "ddpm"])
    def test_deterministic_and_shape(self, tiny_data, sampler):
        model = MultiViewModel(SMALL, 0)
        views = tiny_data[0].views
        target = views[1].pose
        a = synthesize(model, views[:2], target, sampler, seed=4, steps=3)
        b = synthesize(model, views[:2], target, sampler, seed=4, steps=3)
        assert a.image.shape == (SMALL.image_res, SMALL.image_res, 3)
        assert a.latent.shape == (SMALL.latent_res, SMALL.latent_res, SMALL.latent_channels)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.image.min() >= 0 and a.image.max() <= 1

    def test_contracts(self, tiny_data):
        model = MultiViewModel(SMALL, 0)
        views = tiny_data[0].views
        with pytest.raises(ContractError):
            synthesize(model, [], views[0].pose)
        with pytest.raises(ContractError):
            synthesize(model, views[:3], views[0].pose, max_inputs=2)
        with pytest.raises(ConfigError):
            synthesize(model, views[:1], views[0].pose, sampler="euler")
        with pytest.raises(PoleError):
            synthesize(model, views[:1], SphericalPose(math.pi / 2, 0.0, 2.2))

    def test_override_changes_result(self, tiny_data):
        model = MultiViewModel(SMALL, 0)
        for blk in model.denoiser.inject:
            blk.zero_conv.weight.data = np.random.default_rng(0).normal(0, 0.2, size=blk.zero_conv.weight.shape).astype(np.float32)
        views = tiny_data[0].views
        override = np.full((SMALL.latent_res, SMALL.latent_res, SMALL.latent_channels), 0.5)
        a = synthesize(model, views[:2], views[2].pose, steps=3)
        b = synthesize(model, views[:2], views[2].pose, steps=3, latent_override=override)
        assert not np.array_equal(a.latent, b.latent)


class TestEvaluation:
    def test_sweep_inputs(self):
        ring = list(range(24))
        assert sweep_inputs(ring, 2, 5) == [5, 17]
        assert sweep_inputs(ring, 6, 22) == [22, 2, 6, 10, 14, 18]
        with pytest.raises(ConfigError):
            sweep_inputs(ring, 5, 0)

    def test_evaluate_and_report(self, tmp_path):
        make_dataset(2, 12, [0.0, 15.0], SMALL.image_res, tmp_path / "ev", seed=1, first_index=100000)
        ev = load_dataset(tmp_path / "ev")
        cases = evaluate(MultiViewModel(SMALL, 0), ev, (2, 4, 6))
        assert len(cases) == 2 * 2 * 3
        rows = summarize(cases)
        assert {r["elevation_deg"] for r in rows} == {0.0, 15.0, "all"}
        assert all(r["num_targets"] == 4 for r in rows if r["elevation_deg"] == "all")
        jpath, cpath = write_report(tmp_path / "out", rows, "ck", "hash", len(ev))
        report = json.loads(jpath.read_text())
        jsonschema.validate(report, schema("report"))
        assert cpath.read_text().splitlines()[0] == "elevation_deg,view_count,num_targets,latent_psnr,psnr,ssim"

    def test_empty_eval(self):
        with pytest.raises(ContractError):
            evaluate(MultiViewModel(SMALL, 0), [])

    def test_paired_trend(self):
        cases = []
        for s in range(10):
            for n, bump in ((2, 0.0), (6, 1.0 + 0.1 * s)):
                cases.append(EvalCase(f"s{s}", 0.0, n, 10.0 + s + bump, 0, 0))
        diff, p = paired_trend_test(cases, 2, 6)
        assert diff == pytest.approx(1.45)
        assert p < 1e-6
        _, p_rev = paired_trend_test(cases, 6, 2)
        assert p_rev > 0.99
