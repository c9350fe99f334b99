"""Training loop contracts: schedule, head batch multiplier, reproducibility."""

from __future__ import annotations

import math

import pytest
import torch

from calm.backbone import BackboneConfig, draw_noise_levels, inject_noise
from calm.heads import HeadConfig, draw_noise_states
from calm.model import Model, ModelConfig
from calm.nn import single_thread
from calm.rvq import RvqCodebooks, train_codebooks
from calm.sources import SourceSpec, sample_sequences
from calm.training import (
    TrainConfig,
    TrainError,
    TrainState,
    loss_variance_probe,
    lr_at,
    make_optimizer,
    save_train_checkpoint,
    train,
    train_step,
)

C, S = 3, 12


def tiny_model(kind="consistency", seed=0, **backbone_kw) -> Model:
    torch.manual_seed(seed)
    bb = dict(latent_dim=C, model_dim=16, mlp_dim=32, n_heads=2, n_layers=1, context=4)
    bb.update(backbone_kw)
    cfg = ModelConfig(
        backbone=BackboneConfig(**bb),
        head=HeadConfig(
            kind=kind,
            latent_dim=C,
            cond_dim=bb["model_dim"],
            hidden_dim=24,
            n_blocks=2,
            rq_levels=2,
            rq_codebook_size=6,
            rq_dim=8,
            rq_layers=1,
            rq_heads=2,
        ),
    )
    model = Model(cfg)
    if kind == "rq":
        frames = sample_sequences(SourceSpec(latent_dim=C, seq_len=S), 64, seed=5).reshape(-1, C)
        books = train_codebooks(frames, n_levels=2, codebook_size=6, iters=10, seed=6)
        model.head.set_codebooks(books.books)
    return model


def tiny_data(count=32, seed=1):
    return sample_sequences(SourceSpec(latent_dim=C, seq_len=S, ar_coeff=0.8), count, seed=seed)


class TestLrSchedule:
    def cfg(self):
        return TrainConfig(steps=1000, lr=3e-4, warmup_frac=0.05)

    def test_starts_at_zero(self):
        assert lr_at(0, self.cfg()) == 0.0

    def test_peak_at_warmup_end(self):
        cfg = self.cfg()
        assert lr_at(cfg.warmup_steps, cfg) == pytest.approx(cfg.lr)

    def test_zero_at_end(self):
        cfg = self.cfg()
        assert lr_at(cfg.steps, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_clamped_beyond_end(self):
        cfg = self.cfg()
        assert lr_at(cfg.steps + 500, cfg) == lr_at(cfg.steps, cfg)

    def test_cosine_midpoint(self):
        cfg = self.cfg()
        mid = cfg.warmup_steps + (cfg.steps - cfg.warmup_steps) // 2
        assert lr_at(mid, cfg) == pytest.approx(cfg.lr / 2, rel=0.01)

    def test_monotone_decay_after_warmup(self):
        cfg = self.cfg()
        values = [lr_at(s, cfg) for s in range(cfg.warmup_steps, cfg.steps + 1)]
        assert all(a >= b for a, b in zip(values[:-1], values[1:]))


class TestConfigValidation:
    def test_multiplier_minimum(self):
        with pytest.raises(TrainError):
            TrainConfig(head_batch_multiplier=0)

    def test_positive_lr(self):
        with pytest.raises(TrainError):
            TrainConfig(lr=0.0)


class TestHeadBatchMultiplier:
    def test_backbone_forward_count_independent_of_n(self):
        data = tiny_data()
        for n in (1, 4, 8):
            model = tiny_model(seed=0)
            cfg = TrainConfig(batch_size=8, steps=3, head_batch_multiplier=n, seed=0)
            gen = torch.Generator().manual_seed(0)
            opt = make_optimizer(model, cfg)
            state = TrainState()
            before = model.backbone.long_forward_sequences
            train_step(model, opt, data[:8], cfg, gen, state)
            assert model.backbone.long_forward_sequences - before == 8, n

    def test_n_one_matches_handwritten_plain_step_loss(self):
        # oracle: a directly-coded single-draw step on the same RNG stream
        model = tiny_model(seed=1)
        batch = tiny_data(8, seed=2)[:4]
        gen = torch.Generator().manual_seed(3)
        from calm.training import _continuous_loss

        loss_impl, _ = _continuous_loss(model, batch, 1, gen)

        gen2 = torch.Generator().manual_seed(3)
        b, s, c = batch.shape
        k, eps_inj = draw_noise_levels(b, s, c, gen2, dtype=batch.dtype)
        noised = inject_noise(batch, k, eps_inj)
        cond = model.backbone(batch, noised)
        state = draw_noise_states(batch.reshape(b * s, c), gen2)
        loss_hand, _ = model.head.loss(state, cond.z.reshape(b * s, -1))
        assert loss_impl.item() == loss_hand.item()

    def test_variance_reduction(self):
        model = tiny_model(seed=2)
        batch = tiny_data(8, seed=3)[:8]
        v1 = torch.tensor(loss_variance_probe(model, batch, n_draws=1, n_steps=200, seed=0)).var().item()
        v8 = torch.tensor(loss_variance_probe(model, batch, n_draws=8, n_steps=200, seed=1)).var().item()
        assert v8 <= v1 / 4, (v1, v8)

    def test_time_draws_distinct_within_step(self):
        gen = torch.Generator().manual_seed(0)
        state = draw_noise_states(torch.zeros(8 * 64, 2), gen)
        assert len(set(state.t.tolist())) == state.t.numel()


class TestNoiseRouting:
    def test_long_sees_noised_short_sees_clean(self):
        model = tiny_model(seed=3)
        model.backbone.tap_enabled = True
        batch = tiny_data(4, seed=4)[:4]
        cfg = TrainConfig(batch_size=4, steps=1, head_batch_multiplier=2, seed=0)
        gen = torch.Generator().manual_seed(0)
        opt = make_optimizer(model, cfg)
        train_step(model, opt, batch, cfg, gen, TrainState())
        assert torch.equal(model.backbone.last_short_input, batch)
        assert not torch.equal(model.backbone.last_long_input, batch)

    def test_injection_disabled_feeds_clean(self):
        model = tiny_model(seed=4, noise_injection=False)
        model.backbone.tap_enabled = True
        batch = tiny_data(4, seed=5)[:4]
        cfg = TrainConfig(batch_size=4, steps=1, seed=0)
        gen = torch.Generator().manual_seed(0)
        train_step(model, make_optimizer(model, cfg), batch, cfg, gen, TrainState())
        assert torch.equal(model.backbone.last_long_input, batch)


class TestTrainStep:
    def test_joint_gradients_reach_backbone(self):
        model = tiny_model(seed=5)
        data = tiny_data(16, seed=6)
        cfg = TrainConfig(batch_size=8, steps=5, head_batch_multiplier=2, seed=0)
        before = model.backbone.in_long.weight.clone()
        train(model, data, cfg)
        assert not torch.equal(before, model.backbone.in_long.weight)

    def test_non_finite_loss_skips_step(self):
        model = tiny_model(seed=6)
        batch = tiny_data(4, seed=7)[:4].clone()
        batch[0, 0, 0] = float("nan")
        cfg = TrainConfig(batch_size=4, steps=1, seed=0)
        opt = make_optimizer(model, cfg)
        params_before = [p.clone() for p in model.parameters()]
        state = TrainState()
        report = train_step(model, opt, batch, cfg, TorchGen(0), state)
        assert state.skipped == 1
        assert report.get("skipped") == 1.0
        for p0, p1 in zip(params_before, model.parameters()):
            assert torch.equal(p0, p1)

    def test_zero_learning_rate_changes_nothing(self):
        model = tiny_model(kind="rq", seed=7)
        batch = tiny_data(4, seed=8)[:4]
        opt = torch.optim.AdamW(model.parameters(), lr=1.0)
        for group in opt.param_groups:
            group["lr"] = 0.0
        from calm.training import _rq_loss

        loss, _ = _rq_loss(model, batch, TorchGen(0))
        loss.backward()
        params_before = [p.clone() for p in model.parameters()]
        opt.step()
        for p0, p1 in zip(params_before, model.parameters()):
            assert torch.equal(p0, p1)


class TestRqTraining:
    def test_initial_loss_near_log_vocab(self):
        model = tiny_model(kind="rq", seed=8)
        batch = tiny_data(8, seed=9)[:8]
        from calm.training import _rq_loss

        loss, _ = _rq_loss(model, batch, TorchGen(0))
        assert loss.item() == pytest.approx(math.log(6), rel=0.10)

    def test_overfits_single_sequence(self):
        model = tiny_model(kind="rq", seed=9, noise_injection=False)
        data = tiny_data(1, seed=10)
        cfg = TrainConfig(batch_size=1, steps=200, lr=3e-3, seed=0, log_every=50)
        rows: list[dict] = []
        train(model, data, cfg, log_rows=rows)
        from calm.training import _rq_loss

        final, _ = _rq_loss(model, data, TorchGen(0))
        assert final.item() < 0.5 * rows[0]["loss"], (rows[0]["loss"], final.item())


class TestReproducibility:
    def test_bit_identical_runs(self):
        with single_thread():
            results = []
            for _ in range(2):
                model = tiny_model(seed=10)
                data = tiny_data(16, seed=11)
                cfg = TrainConfig(batch_size=4, steps=100, head_batch_multiplier=2, seed=12, log_every=1000)
                state = train(model, data, cfg)
                results.append((state, [p.detach().clone() for p in model.parameters()]))
            assert results[0][0].loss_stats.mean == results[1][0].loss_stats.mean
            for a, b in zip(results[0][1], results[1][1]):
                assert torch.equal(a, b)

    def test_resume_is_bit_identical(self, tmp_path):
        with single_thread():
            data = tiny_data(16, seed=13)
            cfg = TrainConfig(batch_size=4, steps=60, seed=14, log_every=1000)
            straight = tiny_model(seed=15)
            train(straight, data, cfg)

            interrupted = tiny_model(seed=15)
            ckpt = tmp_path / "half.bin"
            train(interrupted, data, cfg, checkpoint_path=ckpt, until_step=30)
            resumed = tiny_model(seed=99)  # weights replaced by the checkpoint
            state = train(resumed, data, cfg, resume_from=ckpt)
            assert state.step == 60
            for a, b in zip(straight.parameters(), resumed.parameters()):
                assert torch.equal(a, b)

    def test_welford_stats_match_direct_variance(self):
        from calm.training import RunningStats

        gen = torch.Generator().manual_seed(0)
        xs = torch.randn(200, generator=gen).tolist()
        rs = RunningStats()
        for x in xs:
            rs.update(x)
        t = torch.tensor(xs, dtype=torch.float64)
        assert rs.mean == pytest.approx(t.mean().item(), rel=1e-9)
        assert rs.variance == pytest.approx(t.var().item(), rel=1e-6)


def TorchGen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)
