import math

import numpy as np
import pytest
import torch

from flowdiff.dataio import CheckpointError, ToyConfig, toy_dataset
from flowdiff.denoiser import DenoiserConfig, FlowDenoiser
from flowdiff.diffusion import make_schedule
from flowdiff.train import (
    TrainConfig,
    ema_update,
    evaluate,
    evaluate_with,
    fit,
    init_state,
    lr_policy,
    oracle_denoiser_for,
    restore_train_state,
    save_train_checkpoint,
    train_step,
    zero_flow_metrics,
)

TINY_MODEL = dict(base_channels=8, time_embed_dim=32)


def tiny_model(seed=0, **kw):
    torch.manual_seed(seed)
    return FlowDenoiser(DenoiserConfig(**{**TINY_MODEL, **kw}))


def tiny_dataset(n=4, size=(16, 16), seed=0):
    cfg = ToyConfig(image_size=size, max_translation=3.0, bg_translation=2.0,
                    sprite_radius=(3.0, 6.0), seed=seed)
    return toy_dataset(cfg, range(n))


class TestTrainStep:
    def test_loss_finite_and_nonnegative(self):
        model = tiny_model()
        state = init_state(model, TrainConfig(batch_size=2, seed=1))
        sched = make_schedule(8)
        _, loss = train_step(state, tiny_dataset(2), sched)
        assert math.isfinite(loss) and loss >= 0
        assert state.step == 1

    def test_deterministic_given_seeds(self):
        sched = make_schedule(8)
        batch = tiny_dataset(2)
        outs = []
        for _ in range(2):
            model = tiny_model(seed=5)
            state = init_state(model, TrainConfig(batch_size=2, seed=9))
            state, loss = train_step(state, batch, sched)
            outs.append((loss, {k: v.clone() for k, v in model.state_dict().items()}))
        assert outs[0][0] == outs[1][0]
        for k in outs[0][1]:
            assert torch.equal(outs[0][1][k], outs[1][1][k])

    def test_nan_loss_skips_update_and_halves_lr(self):
        model = tiny_model()
        with torch.no_grad():
            model.unet.stem.weight[0, 0, 0, 0] = float("nan")
        before = {k: v.clone() for k, v in model.state_dict().items()}
        state = init_state(model, TrainConfig(batch_size=2, lr=1e-4, seed=0))
        sched = make_schedule(8)
        state, loss = train_step(state, tiny_dataset(2), sched)
        assert not math.isfinite(loss)
        assert state.lr == pytest.approx(5e-5)
        assert state.skipped_steps == 1
        after = model.state_dict()
        for k in before:
            assert torch.equal(before[k].isnan(), after[k].isnan())
            both = before[k][~before[k].isnan()]
            assert torch.equal(both, after[k][~after[k].isnan()])

    def test_loss_decreases_on_fixed_batch(self):
        model = tiny_model(seed=2)
        state = init_state(model, TrainConfig(batch_size=4, lr=3e-4, seed=3,
                                              n_train=4, lr_window=10_000))
        sched = make_schedule(8)
        batch = tiny_dataset(4)
        losses = []
        for _ in range(60):
            state, loss = train_step(state, batch, sched)
            losses.append(loss)
        assert np.mean(losses[-10:]) < np.mean(losses[:10])


class TestEmaUpdate:
    def test_decay_zero_copies_weights(self):
        ema = {"a": torch.zeros(3)}
        w = {"a": torch.tensor([1.0, 2.0, 3.0])}
        ema_update(ema, w, 0.0)
        assert torch.equal(ema["a"], w["a"])

    def test_decay_one_keeps_ema(self):
        ema = {"a": torch.tensor([5.0, 6.0])}
        ema_update(ema, {"a": torch.tensor([1.0, 1.0])}, 1.0)
        assert torch.equal(ema["a"], torch.tensor([5.0, 6.0]))

    def test_two_updates_match_closed_form(self):
        # Oracle: d^2 e0 + (1 - d) (d w1 + w2)
        d = 0.9
        e0 = torch.tensor([1.0, -2.0])
        w1 = torch.tensor([0.5, 0.5])
        w2 = torch.tensor([-1.0, 3.0])
        ema = {"a": e0.clone()}
        ema_update(ema, {"a": w1}, d)
        ema_update(ema, {"a": w2}, d)
        expect = d * d * e0 + (1 - d) * (d * w1 + w2)
        assert torch.allclose(ema["a"], expect, atol=1e-7)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ema_update({"a": torch.zeros(3)}, {"a": torch.zeros(4)}, 0.5)

    def test_converges_to_frozen_weights(self):
        ema = {"a": torch.tensor([10.0], dtype=torch.float64)}
        w = {"a": torch.tensor([2.0], dtype=torch.float64)}
        for _ in range(500):
            ema_update(ema, w, 0.98)
        # geometric decay: residual = 8 * 0.98^500
        assert abs(ema["a"].item() - 2.0) <= 8 * 0.98 ** 500 + 1e-9


class TestLrPolicy:
    def test_flat_history_unchanged(self):
        hist = [1.0] * 300
        assert lr_policy(hist, 1e-4, window=200, spike_factor=5.0) == 1e-4

    def test_spike_halves(self):
        hist = [1.0] * 250 + [10.0]
        assert lr_policy(hist, 1e-4, window=200, spike_factor=5.0) == pytest.approx(5e-5)

    def test_nan_halves_regardless_of_history_length(self):
        assert lr_policy([float("nan")], 1e-4) == pytest.approx(5e-5)

    def test_floor_respected(self):
        assert lr_policy([float("nan")], 1.5e-6, floor=1e-6) == 1e-6

    def test_scripted_replay_sequence(self):
        # Oracle: replay a loss script through the policy step by step.
        script = [1.0] * 120 + [20.0] + [1.0] * 5 + [float("nan")] + [1.0] * 5
        lr = 1e-4
        seen = []
        hist = []
        for loss in script:
            hist.append(loss)
            lr = lr_policy(hist, lr, window=100, spike_factor=5.0)
            seen.append(lr)
        assert seen[119] == 1e-4          # flat so far
        assert seen[120] == pytest.approx(5e-5)   # spike fired
        assert seen[126] == pytest.approx(2.5e-5)  # nan fired
        assert seen[-1] == pytest.approx(2.5e-5)
        assert all(a >= b for a, b in zip(seen, seen[1:]))  # lr never rises


class TestEvaluate:
    def test_perfect_oracle_reaches_zero_epe(self):
        ds = tiny_dataset(3)
        sched = make_schedule(8)
        m = evaluate_with(oracle_denoiser_for, ds, sched, seed=4)
        assert m.epe <= 1e-3 and m.fl_all == 0.0

    def test_zero_flow_baseline_computable(self):
        ds = tiny_dataset(3)
        m = zero_flow_metrics(ds)
        assert m.epe > 0 and m.n_valid == 3 * 16 * 16

    def test_untrained_model_evaluates(self):
        ds = tiny_dataset(2)
        sched = make_schedule(4)
        m = evaluate(tiny_model(), ds, sched, seed=0)
        assert math.isfinite(m.epe) and 0 <= m.fl_all <= 100

    def test_aggregate_is_mean_of_per_image(self):
        # Oracle: recompute per-image metrics and average by hand.
        from flowdiff.flowcore import FlowField, compute_metrics

        ds = tiny_dataset(3)
        m = zero_flow_metrics(ds)
        per_image = []
        for s in ds:
            zero = FlowField(np.zeros(s.flow.shape), np.zeros(s.flow.shape))
            per_image.append(compute_metrics(zero, s.flow).epe)
        assert m.epe == pytest.approx(np.mean(per_image), abs=1e-12)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            zero_flow_metrics([])
        with pytest.raises(ValueError):
            evaluate(tiny_model(), [], make_schedule(4))


class TestCheckpointBridge:
    def test_save_restore_round_trip(self, tmp_path):
        sched = make_schedule(8)
        model = tiny_model(seed=7)
        cfg = TrainConfig(batch_size=2, seed=7, total_steps=3, eval_every=0)
        state = init_state(model, cfg)
        for _ in range(3):
            state, _ = train_step(state, tiny_dataset(2), sched)
        p = tmp_path / "ck.zip"
        save_train_checkpoint(state, {"note": "test"}, p)

        model2 = tiny_model(seed=99)  # different init, will be overwritten
        restored = restore_train_state(p, model2, cfg)
        assert restored.step == 3
        for k, v in model.state_dict().items():
            assert torch.equal(v, model2.state_dict()[k])
        for k, v in state.ema.items():
            assert torch.equal(v, restored.ema[k])

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        sched = make_schedule(8)
        data = tiny_dataset(4)

        def run(n_steps, state):
            for _ in range(n_steps):
                state, _ = train_step(state, data, sched)
            return state

        cfg = TrainConfig(batch_size=4, seed=11, total_steps=6, eval_every=0)
        straight = run(6, init_state(tiny_model(seed=11), cfg))

        half = run(3, init_state(tiny_model(seed=11), cfg))
        p = tmp_path / "half.zip"
        save_train_checkpoint(half, {}, p)
        resumed = run(3, restore_train_state(p, tiny_model(seed=0), cfg))

        for k, v in straight.model.state_dict().items():
            assert torch.equal(v, resumed.model.state_dict()[k]), k
        for k, v in straight.ema.items():
            assert torch.equal(v, resumed.ema[k]), k

    def test_resume_then_zero_steps_evaluates_identically(self, tmp_path):
        sched = make_schedule(6)
        model = tiny_model(seed=13)
        cfg = TrainConfig(batch_size=2, seed=13)
        state = init_state(model, cfg)
        for _ in range(2):
            state, _ = train_step(state, tiny_dataset(2), sched)
        ds = tiny_dataset(2, seed=5)
        before = evaluate(model, ds, sched, seed=21)

        p = tmp_path / "ck.zip"
        save_train_checkpoint(state, {}, p)
        model2 = tiny_model(seed=77)
        restore_train_state(p, model2, cfg)
        after = evaluate(model2, ds, sched, seed=21)
        assert before.epe == after.epe and before.fl_all == after.fl_all

    def test_mismatched_architecture_rejected(self, tmp_path):
        model = tiny_model()
        state = init_state(model, TrainConfig())
        p = tmp_path / "ck.zip"
        save_train_checkpoint(state, {}, p)
        other = FlowDenoiser(DenoiserConfig(base_channels=4, time_embed_dim=32))
        with pytest.raises(CheckpointError):
            restore_train_state(p, other, TrainConfig())


class TestFit:
    def test_short_run_writes_metrics_and_checkpoint(self, tmp_path):
        model = tiny_model(seed=17)
        sched = make_schedule(4)
        cfg = TrainConfig(batch_size=2, total_steps=4, eval_every=2, seed=17,
                          n_train=4)
        data = tiny_dataset(4)
        fit(model, sched, cfg, lambda i: data[i], eval_dataset=data[:1],
            out_dir=tmp_path, quiet=True)
        assert (tmp_path / "metrics.jsonl").exists()
        ckpts = list(tmp_path.glob("ckpt_*.zip"))
        assert len(ckpts) >= 1
        lines = (tmp_path / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) >= 4
