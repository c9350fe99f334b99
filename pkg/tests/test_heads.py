"""Sampler head contracts: boundary identity, the consistency objective
against a closed-form symbolic oracle, flow matching, and depth-causal
discrete decoding."""

from __future__ import annotations

import math

import pytest
import torch
import torch.nn as nn

from calm.heads import (
    T_MAX,
    ConsistencyHead,
    HeadConfig,
    HeadError,
    RqHead,
    TrigFlowHead,
    TrigNoiseState,
    build_head,
    consistency_apply,
    consistency_objective,
    draw_noise_states,
    flow_matching_loss,
    flow_velocity_target,
)
from calm.nn import jvp
from helpers import rel_err


def make_state(b=16, c=4, dtype=torch.float32, seed=0, t=None):
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.randn(b, c, generator=gen, dtype=dtype)
    eps = torch.randn(b, c, generator=gen, dtype=dtype)
    if t is None:
        t = torch.rand(b, generator=gen, dtype=dtype) * T_MAX
    return TrigNoiseState(x0=x0, eps=eps, t=t)


class ClosedFormVelocity(nn.Module):
    """F(x, t, z) = a * x + b * sin(t), with a, b as parameters."""

    def __init__(self, a: float, b: float, dtype=torch.float64):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(a, dtype=dtype))
        self.b = nn.Parameter(torch.tensor(b, dtype=dtype))

    def forward(self, x, t, z):
        return self.a * x + self.b * torch.sin(t).unsqueeze(-1)


class TestTrigNoiseState:
    def test_xt_recomputable(self):
        st = make_state()
        t = st.t.unsqueeze(-1)
        assert torch.equal(st.x_t, torch.cos(t) * st.x0 + torch.sin(t) * st.eps)

    def test_t_out_of_range_rejected(self):
        with pytest.raises(HeadError, match="pi/2"):
            TrigNoiseState(x0=torch.zeros(2, 2), eps=torch.zeros(2, 2), t=torch.tensor([0.1, 2.0]))

    def test_draws_cover_range(self):
        gen = torch.Generator().manual_seed(0)
        st = draw_noise_states(torch.zeros(10_000, 2), gen)
        assert st.t.min() >= 0 and st.t.max() <= T_MAX
        assert st.t.mean().item() == pytest.approx(T_MAX / 2, rel=0.05)


class TestConsistencyApply:
    def test_boundary_identity_exact(self):
        cfg = HeadConfig(kind="consistency", latent_dim=4, cond_dim=8)
        head = ConsistencyHead(cfg)
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(200, 4, generator=gen)
        z = torch.randn(200, 8, generator=gen)
        out = head.apply(x, torch.zeros(200), z)
        assert torch.equal(out, x)

    def test_trig_coefficients(self):
        # f - cos(t) x_t = -sin(t) F at t in {0, pi/4, pi/2}
        torch.manual_seed(1)
        cfg = HeadConfig(kind="consistency", latent_dim=3, cond_dim=6)
        head = ConsistencyHead(cfg)
        with torch.no_grad():
            head.F.out.weight.normal_()  # make F nonzero
            head.F.out.bias.normal_()
        gen = torch.Generator().manual_seed(2)
        x = torch.randn(8, 3, generator=gen)
        z = torch.randn(8, 6, generator=gen)
        for t_val in (0.0, math.pi / 4, math.pi / 2):
            t = torch.full((8,), t_val)
            f = head.apply(x, t, z)
            vel = head.F(x, t, z)
            expect = math.cos(t_val) * x - math.sin(t_val) * vel
            assert torch.allclose(f, expect, atol=1e-6)

    def test_fresh_head_is_pure_skip(self):
        # zero-initialized F collapses f to cos(t) x_t
        cfg = HeadConfig(kind="consistency", latent_dim=2, cond_dim=4)
        head = ConsistencyHead(cfg)
        gen = torch.Generator().manual_seed(3)
        x = torch.randn(5, 2, generator=gen)
        t = torch.rand(5, generator=gen) * T_MAX
        f = head.apply(x, t, torch.randn(5, 4, generator=gen))
        assert torch.allclose(f, torch.cos(t).unsqueeze(-1) * x, atol=1e-7)

    def test_terminal_time_is_negated_velocity(self):
        torch.manual_seed(4)
        cfg = HeadConfig(kind="consistency", latent_dim=3, cond_dim=4)
        head = ConsistencyHead(cfg)
        with torch.no_grad():
            head.F.out.weight.normal_()
        gen = torch.Generator().manual_seed(5)
        x = torch.randn(6, 3, generator=gen)
        z = torch.randn(6, 4, generator=gen)
        t = torch.full((6,), T_MAX)
        assert torch.allclose(head.apply(x, t, z), -head.F(x, t, z), atol=1e-6)

    def test_t_out_of_range_rejected(self):
        cfg = HeadConfig(kind="consistency", latent_dim=2, cond_dim=2)
        head = ConsistencyHead(cfg)
        with pytest.raises(HeadError):
            head.apply(torch.zeros(1, 2), torch.tensor([2.0]), torch.zeros(1, 2))


def hand_consistency_loss(a_s, b_s, a_t, b_t, x0, eps, t, w, clip):
    """Closed-form evaluation of the objective for F = a x + b sin(t)."""
    x_t = torch.cos(t) * x0 + torch.sin(t) * eps
    xdot = torch.cos(t) * eps - torch.sin(t) * x0
    student = a_s * x_t + b_s * torch.sin(t)
    teacher = a_t * x_t + b_t * torch.sin(t)
    df_dx = torch.cos(t) - torch.sin(t) * a_t
    df_dt_explicit = (
        -torch.sin(t) * x_t
        - torch.cos(t) * (a_t * x_t + b_t * torch.sin(t))
        - torch.sin(t) * b_t * torch.cos(t)
    )
    df_dt = df_dx * xdot + df_dt_explicit
    g = torch.cos(t) * df_dt
    if clip:
        g = g.clamp(-1.0, 1.0)
    r = student - teacher - g
    return (torch.exp(w) * r**2 - w).mean()


class TestConsistencyObjective:
    def test_all_terms_vanish(self):
        # fresh head (F = 0, w = 0) on a zero state: loss is exactly 0
        cfg = HeadConfig(kind="consistency", latent_dim=3, cond_dim=4)
        head = ConsistencyHead(cfg)
        state = TrigNoiseState(x0=torch.zeros(6, 3), eps=torch.zeros(6, 3), t=torch.rand(6) * T_MAX)
        loss, _ = head.loss(state, torch.zeros(6, 4))
        assert loss.item() == 0.0

    @pytest.mark.parametrize("clip", [False, True])
    def test_scalar_symbolic_oracle(self, clip):
        gen = torch.Generator().manual_seed(0)
        a_s, b_s = 0.7, -0.4
        a_t, b_t = 1.3, 0.9  # teacher differs so every term is exercised
        student = ClosedFormVelocity(a_s, b_s)
        teacher = ClosedFormVelocity(a_t, b_t)
        x0 = torch.randn(64, 1, generator=gen, dtype=torch.float64) * 2
        eps = torch.randn(64, 1, generator=gen, dtype=torch.float64)
        t = torch.rand(64, generator=gen, dtype=torch.float64) * T_MAX
        state = TrigNoiseState(x0=x0, eps=eps, t=t)
        w_val = 0.3

        loss, _ = consistency_objective(
            student,
            teacher,
            lambda tt: torch.full_like(tt, w_val),
            state,
            torch.zeros(64, 1, dtype=torch.float64),
            tangent_clip=clip,
        )
        expected = hand_consistency_loss(
            a_s, b_s, a_t, b_t, x0.squeeze(1), eps.squeeze(1), t, torch.tensor(w_val, dtype=torch.float64), clip
        )
        assert abs(loss.item() - expected.item()) <= 1e-10

    def test_scalar_case_with_zero_weight_is_plain_square(self):
        gen = torch.Generator().manual_seed(1)
        student = ClosedFormVelocity(0.5, 0.0)
        teacher = ClosedFormVelocity(1.5, 0.2)
        x0 = torch.randn(32, 1, generator=gen, dtype=torch.float64)
        eps = torch.randn(32, 1, generator=gen, dtype=torch.float64)
        t = torch.rand(32, generator=gen, dtype=torch.float64) * T_MAX
        state = TrigNoiseState(x0=x0, eps=eps, t=t)
        loss, stats = consistency_objective(
            student, teacher, lambda tt: torch.zeros_like(tt), state,
            torch.zeros(32, 1, dtype=torch.float64), tangent_clip=False,
        )
        # with w = 0 and D = 1 the loss is the mean squared residual
        assert loss.item() == pytest.approx(stats["residual_sq"], rel=1e-12)

    def test_weight_scales_loss_exponentially(self):
        # for fixed residual e, the loss term is exp(w) e / D - w
        gen = torch.Generator().manual_seed(2)
        student = ClosedFormVelocity(0.4, 0.1)
        teacher = ClosedFormVelocity(1.1, -0.3)
        x0 = torch.randn(16, 1, generator=gen, dtype=torch.float64)
        eps = torch.randn(16, 1, generator=gen, dtype=torch.float64)
        t = torch.rand(16, generator=gen, dtype=torch.float64) * T_MAX
        state = TrigNoiseState(x0=x0, eps=eps, t=t)
        z = torch.zeros(16, 1, dtype=torch.float64)
        losses = {}
        for w_val in (0.0, 1.0):
            loss, stats = consistency_objective(
                student, teacher, lambda tt, w=w_val: torch.full_like(tt, w), state, z, tangent_clip=False
            )
            losses[w_val] = (loss.item(), stats["residual_sq"])
        e = losses[0.0][1]
        assert losses[0.0][0] == pytest.approx(e, rel=1e-12)
        assert losses[1.0][0] == pytest.approx(math.e * e - 1.0, rel=1e-10)

    def test_teacher_receives_zero_gradient(self):
        torch.manual_seed(0)
        cfg = HeadConfig(kind="consistency", latent_dim=3, cond_dim=4, ema_decay=0.9)
        head = ConsistencyHead(cfg)
        for p in head.teacher.parameters():
            p.requires_grad_(True)
        with torch.no_grad():
            head.F.out.weight.normal_(std=0.3)
        gen = torch.Generator().manual_seed(1)
        state = make_state(b=8, c=3, seed=2)
        z = torch.randn(8, 4, generator=gen, requires_grad=True)
        loss, _ = head.loss(state, z)
        loss.backward()
        for p in head.teacher.parameters():
            assert p.grad is None or torch.equal(p.grad, torch.zeros_like(p.grad))
        assert z.grad is not None and z.grad.abs().sum() > 0
        assert head.F.out.weight.grad is not None

    def test_gradients_reach_student_and_weight(self):
        torch.manual_seed(3)
        cfg = HeadConfig(kind="consistency", latent_dim=2, cond_dim=4)
        head = ConsistencyHead(cfg)
        with torch.no_grad():
            head.F.out.weight.normal_(std=0.5)
        state = make_state(b=16, c=2, seed=4)
        z = torch.randn(16, 4)
        loss, _ = head.loss(state, z)
        loss.backward()
        assert head.w.net[-1].weight.grad is not None
        assert head.F.in_proj.weight.grad is not None

    def test_tangent_matches_finite_differences_over_t(self):
        # d f_teacher / d t along the trajectory vs central differences
        torch.manual_seed(5)
        cfg = HeadConfig(kind="consistency", latent_dim=3, cond_dim=4)
        head = ConsistencyHead(cfg).double()
        with torch.no_grad():
            head.F.out.weight.normal_(std=0.4)
            head.F.out.bias.normal_(std=0.2)
        gen = torch.Generator().manual_seed(6)
        x0 = torch.randn(10, 3, generator=gen, dtype=torch.float64)
        eps = torch.randn(10, 3, generator=gen, dtype=torch.float64)
        t = torch.rand(10, generator=gen, dtype=torch.float64) * (T_MAX - 0.2) + 0.1
        z = torch.randn(10, 4, generator=gen, dtype=torch.float64)

        def f_along_trajectory(tt):
            st = TrigNoiseState(x0=x0, eps=eps, t=tt)
            with torch.no_grad():
                return consistency_apply(head.F, st.x_t, tt, z)

        state = TrigNoiseState(x0=x0, eps=eps, t=t)
        dual = jvp(
            lambda xt, tt: consistency_apply(head.F, xt, tt, z), (state.x_t, t),
            (state.dxdt, torch.ones_like(t)),
        )
        h = 1e-4
        fd = (f_along_trajectory(t + h) - f_along_trajectory(t - h)) / (2 * h)
        assert rel_err(dual.tangent, fd) <= 1e-3


class TestTrigFlow:
    def test_exact_velocity_gives_zero_loss(self):
        state = make_state(b=8, c=3, seed=0)
        target = flow_velocity_target(state)

        class Oracle(nn.Module):
            def forward(self, x, t, z):
                return target

        loss, _ = flow_matching_loss(Oracle(), state, torch.zeros(8, 4))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_target_at_zero_time_is_noise(self):
        gen = torch.Generator().manual_seed(1)
        x0 = torch.randn(5, 3, generator=gen)
        eps = torch.randn(5, 3, generator=gen)
        state = TrigNoiseState(x0=x0, eps=eps, t=torch.zeros(5))
        assert torch.allclose(flow_velocity_target(state), eps)

    def test_fresh_head_loss_is_target_power(self):
        cfg = HeadConfig(kind="trigflow", latent_dim=4, cond_dim=6)
        head = TrigFlowHead(cfg)
        state = make_state(b=32, c=4, seed=2)
        loss, _ = head.loss(state, torch.zeros(32, 6))
        expect = (flow_velocity_target(state) ** 2).sum(-1).mean() / 4
        assert loss.item() == pytest.approx(expect.item(), rel=1e-6)


class TestRqHead:
    def make(self, levels=3, n=5, cond=6):
        torch.manual_seed(0)
        return RqHead(
            HeadConfig(
                kind="rq",
                latent_dim=4,
                cond_dim=cond,
                rq_levels=levels,
                rq_codebook_size=n,
                rq_dim=16,
                rq_layers=1,
                rq_heads=2,
            )
        )

    def test_uniform_logits_loss_is_log_n(self):
        head = self.make(levels=2, n=4)
        gen = torch.Generator().manual_seed(1)
        z = torch.randn(8, 6, generator=gen)
        codes = torch.randint(0, 4, (8, 2), generator=gen)
        loss, _ = head.loss(z, codes)
        assert loss.item() == pytest.approx(math.log(4), rel=1e-6)

    def test_confident_logits_drive_loss_to_zero(self):
        head = self.make(levels=1, n=3)
        with torch.no_grad():
            head.lin1.bias[1] = 50.0
        z = torch.zeros(4, 6)
        codes = torch.ones(4, 1, dtype=torch.int64)
        loss, _ = head.loss(z, codes)
        assert loss.item() < 1e-6

    def test_hand_computed_cross_entropy(self):
        head = self.make(levels=2, n=3)
        with torch.no_grad():
            for p in head.parameters():
                p.normal_(std=0.3)
        gen = torch.Generator().manual_seed(2)
        z = torch.randn(2, 6, generator=gen)  # two frames of a toy sequence
        codes = torch.tensor([[0, 2], [1, 1]])
        logits = head.logits(z, codes)
        total = 0.0
        for k, l in enumerate(logits):
            probs = torch.softmax(l, dim=-1)
            for b in range(2):
                total += -math.log(probs[b, codes[b, k]].item())
        loss, _ = head.loss(z, codes)
        assert loss.item() == pytest.approx(total / 4, rel=1e-5)

    def test_depth_causality(self):
        head = self.make(levels=4, n=5)
        with torch.no_grad():
            for p in head.parameters():
                p.normal_(std=0.3)
        gen = torch.Generator().manual_seed(3)
        z = torch.randn(3, 6, generator=gen)
        codes = torch.randint(0, 5, (3, 4), generator=gen)
        base = head.logits(z, codes)
        for k in range(4):
            bumped_codes = codes.clone()
            bumped_codes[:, k] = (bumped_codes[:, k] + 1) % 5
            bumped = head.logits(z, bumped_codes)
            for j in range(k + 1):
                assert torch.equal(base[j], bumped[j]), f"level {j + 1} saw code level {k + 1}"

    def test_out_of_range_code_rejected(self):
        head = self.make(levels=2, n=4)
        with pytest.raises(HeadError, match="range"):
            head.logits(torch.zeros(1, 6), torch.tensor([[7, 0]]))

    def test_greedy_sampling_at_zero_temperature(self):
        head = self.make(levels=2, n=4)
        with torch.no_grad():
            for p in head.parameters():
                p.normal_(std=0.5)
        gen = torch.Generator().manual_seed(4)
        z = torch.randn(3, 6, generator=gen)
        codes = head.sample_codes(z, temperature=0.0, generator=gen)
        l1 = head.logits(z, None)[0]
        assert torch.equal(codes[:, 0], l1.argmax(dim=-1))

    def test_dequantize_requires_codebooks(self):
        head = self.make(levels=2, n=4)
        with pytest.raises(HeadError, match="codebooks"):
            head.dequantize(torch.zeros(1, 2, dtype=torch.int64))
        books = [torch.randn(4, 4) for _ in range(2)]
        head.set_codebooks(books)
        codes = torch.tensor([[1, 3]])
        out = head.dequantize(codes)
        assert torch.allclose(out[0], books[0][1] + books[1][3])


def test_build_head_dispatch():
    assert isinstance(build_head(HeadConfig(kind="consistency")), ConsistencyHead)
    assert isinstance(build_head(HeadConfig(kind="trigflow")), TrigFlowHead)
    assert isinstance(build_head(HeadConfig(kind="rq")), RqHead)
    with pytest.raises(HeadError):
        HeadConfig(kind="diffusion")
