"""Next-frame sampler heads.

Three interchangeable heads map a conditioning vector to the next latent
frame: a continuous-time consistency model (one or few sampling steps), a
TrigFlow flow-matching head sampled by integrating its velocity ODE, and
a discrete head that decodes residual-quantizer codes depth by depth.

The trig noising schedule is x_t = cos(t) x_0 + sin(t) eps on t in
[0, pi/2], so the flow-matching velocity target is -sin(t) x_0 +
cos(t) eps and the consistency map is f = cos(t) x_t - sin(t) F(x_t, t, Z),
which satisfies f(x, 0) = x exactly.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F_
from torch.func import functional_call

from calm.nn import FourierTimeEmbedding, GatedMLP, NumericsError, TransformerBlock

Tensor = torch.Tensor

T_MAX = math.pi / 2
HEAD_KINDS = ("consistency", "trigflow", "rq")


class HeadError(ValueError):
    """Invalid head configuration or input."""


@dataclass
class HeadConfig:
    kind: str = "consistency"
    latent_dim: int = 8
    cond_dim: int = 64
    hidden_dim: int = 96
    n_blocks: int = 3
    time_freqs: int = 16
    tangent_clip: bool = True  # elementwise clamp of the teacher tangent term to [-1, 1]
    ema_decay: float = 0.0  # 0 keeps the teacher a stop-gradient copy of the student
    # discrete head
    rq_levels: int = 8
    rq_codebook_size: int = 64
    rq_dim: int = 64
    rq_layers: int = 2
    rq_heads: int = 2

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise HeadError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise HeadError("ema_decay must be in [0, 1)")


@dataclass
class TrigNoiseState:
    """Clean frames, their noise draws and times along the trig schedule."""

    x0: Tensor  # (B, C)
    eps: Tensor  # (B, C)
    t: Tensor  # (B,)

    def __post_init__(self):
        if self.x0.shape != self.eps.shape or self.t.shape != self.x0.shape[:1]:
            raise HeadError(
                f"inconsistent state shapes x0={tuple(self.x0.shape)} "
                f"eps={tuple(self.eps.shape)} t={tuple(self.t.shape)}"
            )
        if ((self.t < 0) | (self.t > T_MAX + 1e-6)).any():
            raise HeadError("t outside [0, pi/2]")

    @property
    def x_t(self) -> Tensor:
        t = self.t.unsqueeze(-1)
        return torch.cos(t) * self.x0 + torch.sin(t) * self.eps

    @property
    def dxdt(self) -> Tensor:
        """d x_t / d t along the noising trajectory."""
        t = self.t.unsqueeze(-1)
        return torch.cos(t) * self.eps - torch.sin(t) * self.x0


def draw_noise_states(x0: Tensor, generator: torch.Generator) -> TrigNoiseState:
    """Fresh (t, eps) draws for a batch of clean frames; t uniform on [0, pi/2]."""
    t = torch.rand(x0.shape[0], generator=generator, dtype=x0.dtype) * T_MAX
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    return TrigNoiseState(x0=x0, eps=eps, t=t)


class _CondBlock(nn.Module):
    """Residual MLP block whose input gets the conditioning added."""

    def __init__(self, hidden: int, cond_dim: int, time_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden)
        self.cond_z = nn.Linear(cond_dim, hidden)
        self.cond_t = nn.Linear(time_dim, hidden)
        self.mlp = GatedMLP(hidden, hidden)

    def forward(self, h: Tensor, z: Tensor, temb: Tensor) -> Tensor:
        return h + self.mlp(self.norm(h) + self.cond_z(z) + self.cond_t(temb))


class VelocityMLP(nn.Module):
    """F(x, t, Z): the network under both continuous heads.

    The final projection is zero-initialized so a fresh head outputs 0,
    which makes the consistency map collapse to cos(t) x_t at init.
    """

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        self.time_emb = FourierTimeEmbedding(config.time_freqs)
        self.in_proj = nn.Linear(config.latent_dim, config.hidden_dim)
        self.blocks = nn.ModuleList(
            _CondBlock(config.hidden_dim, config.cond_dim, self.time_emb.out_dim)
            for _ in range(config.n_blocks)
        )
        self.out_norm = nn.LayerNorm(config.hidden_dim)
        self.out = nn.Linear(config.hidden_dim, config.latent_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: Tensor, t: Tensor, z: Tensor) -> Tensor:
        temb = self.time_emb(t)
        h = self.in_proj(x)
        for block in self.blocks:
            h = block(h, z, temb)
        return self.out(self.out_norm(h))


class TimeWeight(nn.Module):
    """Adaptive per-time log-weight, clamped to [-10, 10] for safety."""

    def __init__(self, time_freqs: int = 16, hidden: int = 32):
        super().__init__()
        self.time_emb = FourierTimeEmbedding(time_freqs)
        self.net = nn.Sequential(
            nn.Linear(self.time_emb.out_dim, hidden), nn.SiLU(), nn.Linear(hidden, 1)
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, t: Tensor) -> Tensor:
        return self.net(self.time_emb(t)).squeeze(-1).clamp(-10.0, 10.0)


def _check_t(t: Tensor) -> None:
    if ((t < -1e-9) | (t > T_MAX + 1e-6)).any():
        raise HeadError("t outside [0, pi/2]")


def consistency_apply(velocity: nn.Module, x_t: Tensor, t: Tensor, z: Tensor) -> Tensor:
    """f(x_t, t, Z) = cos(t) x_t - sin(t) F(x_t, t, Z)."""
    _check_t(t)
    tb = t.unsqueeze(-1)
    return torch.cos(tb) * x_t - torch.sin(tb) * velocity(x_t, t, z)


def consistency_objective(
    student: nn.Module,
    teacher: nn.Module,
    weight_fn,
    state: TrigNoiseState,
    z: Tensor,
    tangent_clip: bool = True,
) -> tuple[Tensor, dict[str, float]]:
    """The consistency training objective over any velocity networks.

    The teacher branch is frozen: its value and the total derivative of its
    consistency map along the noising trajectory (forward-mode, with the
    trajectory tangent dx_t/dt plus the explicit time dependence) are
    computed on detached parameters and detached conditioning. Gradients
    flow through the student term only, including into Z.
    """
    x_t = state.x_t
    t = state.t
    _check_t(t)
    d = float(state.x0.shape[1])
    teacher_params = {k: v.detach() for k, v in teacher.named_parameters()}
    teacher_params.update({k: v.detach() for k, v in teacher.named_buffers()})
    z_detached = z.detach()

    def f_teacher(x_in: Tensor, t_in: Tensor) -> Tensor:
        vel = functional_call(teacher, teacher_params, (x_in, t_in, z_detached))
        tb = t_in.unsqueeze(-1)
        return torch.cos(tb) * x_in - torch.sin(tb) * vel

    with torch.no_grad():
        _, df_dt = torch.func.jvp(f_teacher, (x_t, t), (state.dxdt, torch.ones_like(t)))
        if not torch.isfinite(df_dt).all():
            raise NumericsError("consistency_loss", "non-finite trajectory tangent")
        teacher_val = functional_call(teacher, teacher_params, (x_t, t, z_detached))
        g = torch.cos(t).unsqueeze(-1) * df_dt
        if tangent_clip:
            g = g.clamp(-1.0, 1.0)
        target = teacher_val + g

    student_val = student(x_t, t, z)
    w = weight_fn(t)
    sq = ((student_val - target) ** 2).sum(dim=-1)
    loss = (torch.exp(w) / d * sq - w).mean()
    stats = {
        "residual_sq": sq.mean().item(),
        "weight_mean": w.mean().item(),
        "tangent_norm": g.norm(dim=-1).mean().item(),
    }
    return loss, stats


def flow_velocity_target(state: TrigNoiseState) -> Tensor:
    """Exact schedule velocity -sin(t) x_0 + cos(t) eps."""
    tb = state.t.unsqueeze(-1)
    return -torch.sin(tb) * state.x0 + torch.cos(tb) * state.eps


def flow_matching_loss(
    velocity: nn.Module, state: TrigNoiseState, z: Tensor
) -> tuple[Tensor, dict[str, float]]:
    """Per-dimension MSE of a velocity network against the exact target."""
    _check_t(state.t)
    target = flow_velocity_target(state)
    pred = velocity(state.x_t, state.t, z)
    loss = ((pred - target) ** 2).sum(dim=-1).mean() / state.x0.shape[1]
    return loss, {"velocity_sq": (pred**2).sum(dim=-1).mean().item()}


class ConsistencyHead(nn.Module):
    """Continuous-time consistency head with an adaptive time weighting."""

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        self.F = VelocityMLP(config)
        self.w = TimeWeight(config.time_freqs)
        self.teacher: VelocityMLP | None = None
        if config.ema_decay > 0:
            self.teacher = copy.deepcopy(self.F)
            for p in self.teacher.parameters():
                p.requires_grad_(False)

    def update_teacher(self) -> None:
        """EMA update of the teacher after an optimizer step (if enabled)."""
        if self.teacher is None:
            return
        d = self.config.ema_decay
        with torch.no_grad():
            for pt, ps in zip(self.teacher.parameters(), self.F.parameters()):
                pt.mul_(d).add_(ps, alpha=1 - d)

    def apply(self, x_t: Tensor, t: Tensor, z: Tensor) -> Tensor:
        return consistency_apply(self.F, x_t, t, z)

    def loss(self, state: TrigNoiseState, z: Tensor) -> tuple[Tensor, dict[str, float]]:
        teacher = self.teacher if self.teacher is not None else self.F
        return consistency_objective(
            self.F, teacher, self.w, state, z, tangent_clip=self.config.tangent_clip
        )


class TrigFlowHead(nn.Module):
    """Flow-matching head; its velocity field is integrated at sampling time."""

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        self.F = VelocityMLP(config)

    def velocity(self, x: Tensor, t: Tensor, z: Tensor) -> Tensor:
        return self.F(x, t, z)

    def loss(self, state: TrigNoiseState, z: Tensor) -> tuple[Tensor, dict[str, float]]:
        return flow_matching_loss(self.F, state, z)


class RqHead(nn.Module):
    """Depth-causal decoder of residual-quantizer codes.

    Level-1 logits come from a linear map of Z; deeper levels come from a
    small causal transformer over [Z, code_1, ..., code_{k-1}] so that the
    logits for level k never see codes at level >= k.
    """

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        k, n, d = config.rq_levels, config.rq_codebook_size, config.rq_dim
        self.lin1 = nn.Linear(config.cond_dim, n)
        nn.init.zeros_(self.lin1.weight)
        nn.init.zeros_(self.lin1.bias)
        self.z_proj = nn.Linear(config.cond_dim, d)
        self.code_embed = nn.ModuleList(nn.Embedding(n, d) for _ in range(k - 1))
        self.depth_pos = nn.Parameter(torch.randn(k, d) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, 2 * d, config.rq_heads, rotary=False) for _ in range(config.rq_layers)
        )
        self.ln = nn.LayerNorm(d)
        self.proj_deep = nn.ModuleList(nn.Linear(d, n) for _ in range(k - 1))
        for proj in self.proj_deep:
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
        self.register_buffer("codebooks", torch.zeros(k, n, config.latent_dim), persistent=True)
        self.register_buffer("codebooks_set", torch.zeros(1, dtype=torch.int64), persistent=True)

    def set_codebooks(self, books: list[Tensor]) -> None:
        """Install frozen quantizer codebooks used for dequantization."""
        k, n, c = self.codebooks.shape
        if len(books) != k:
            raise HeadError(f"expected {k} codebooks, got {len(books)}")
        for i, b in enumerate(books):
            if b.shape != (n, c):
                raise HeadError(f"codebook {i} shape {tuple(b.shape)} != ({n}, {c})")
            self.codebooks[i] = b
        self.codebooks_set.fill_(1)

    def dequantize(self, codes: Tensor) -> Tensor:
        """Sum of codebook vectors for (B, K) code indices."""
        if int(self.codebooks_set) == 0:
            raise HeadError("codebooks not installed; call set_codebooks first")
        out = torch.zeros(codes.shape[0], self.codebooks.shape[2], dtype=self.codebooks.dtype)
        for k in range(self.config.rq_levels):
            out = out + self.codebooks[k][codes[:, k]]
        return out

    def logits(self, z: Tensor, codes: Tensor | None = None) -> list[Tensor]:
        """Teacher-forced per-level logits [l^1 .. l^K], each (B, N).

        codes (B, K) supplies levels 1..K-1 as depth context; only the
        level-1 logits are produced when codes is None.
        """
        out = [self.lin1(z)]
        if self.config.rq_levels == 1 or codes is None:
            return out
        if codes.shape[1] < self.config.rq_levels - 1:
            raise HeadError(f"need {self.config.rq_levels - 1} context code levels, got {codes.shape[1]}")
        if int(codes.max()) >= self.config.rq_codebook_size:
            raise HeadError("code index out of codebook range")
        slots = [self.z_proj(z)]
        for k in range(self.config.rq_levels - 1):
            slots.append(self.code_embed[k](codes[:, k]))
        h = torch.stack(slots, dim=1) + self.depth_pos.to(z.dtype)
        for block in self.blocks:
            h = block(h)
        h = self.ln(h)
        for k in range(self.config.rq_levels - 1):
            out.append(self.proj_deep[k](h[:, k + 1]))
        return out

    def loss(self, z: Tensor, codes: Tensor) -> tuple[Tensor, dict[str, float]]:
        """Cross-entropy over all levels, averaged per token."""
        logits = self.logits(z, codes)
        per_level = [F_.cross_entropy(l, codes[:, k]) for k, l in enumerate(logits)]
        loss = torch.stack(per_level).mean()
        return loss, {"per_token_nll": loss.item()}

    def sample_codes(self, z: Tensor, temperature: float, generator: torch.Generator) -> Tensor:
        """Ancestral sampling over depth; temperature 0 decodes greedily."""
        b = z.shape[0]
        k_levels = self.config.rq_levels
        codes = torch.zeros(b, k_levels, dtype=torch.int64)
        for k in range(k_levels):
            logits = self.logits(z, codes if k > 0 else None)[k]
            if temperature <= 0:
                codes[:, k] = logits.argmax(dim=-1)
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                codes[:, k] = torch.multinomial(probs, 1, generator=generator).squeeze(1)
        return codes


def build_head(config: HeadConfig) -> nn.Module:
    """Instantiate the head named by config.kind."""
    if config.kind == "consistency":
        return ConsistencyHead(config)
    if config.kind == "trigflow":
        return TrigFlowHead(config)
    return RqHead(config)
