"""Autoregressive generation with every head: one/few-step consistency
sampling, Euler integration of the flow ODE, ancestral code decoding, and
Gaussian temperature control, with per-stage wall-time accounting."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import torch

from calm.backbone import GenerationSession
from calm.heads import ConsistencyHead, RqHead, T_MAX, TrigFlowHead
from calm.model import Model
from calm.sources import LatentSequence, NormStats

Tensor = torch.Tensor


class SamplingError(ValueError):
    """Invalid sampler configuration or model state."""


@dataclass
class SamplerConfig:
    n_steps: int = 1
    temperature: float = 1.0
    seed: int = 0
    max_frames: int = 64
    allow_untrained: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise SamplingError("n_steps must be >= 1")
        if self.temperature <= 0:
            raise SamplingError("temperature must be positive")
        if self.max_frames < 1:
            raise SamplingError("max_frames must be >= 1")

def validate_sampler(config: SamplerConfig, head_kind: str) -> None:
    """Single-step sampling is a consistency-head capability only.

    The discrete head ignores n_steps (one depth pass per frame).
    """
    if head_kind == "trigflow" and config.n_steps == 1:
        raise SamplingError("n_steps=1 is only valid for the consistency head, not trigflow")


def gaussian_temperature_noise(
    shape: tuple[int, ...], temperature: float, generator: torch.Generator, dtype: torch.dtype = torch.float32
) -> Tensor:
    """Initial sampler noise with variance 1/sqrt(temperature).

    Standard normal draws scaled by temperature**(-1/4); at temperature 1
    this is plain N(0, I) and the scale vanishes as temperature grows.
    """
    if temperature <= 0:
        raise SamplingError("temperature must be positive")
    eps = torch.randn(shape, generator=generator, dtype=dtype)
    return eps * temperature ** (-0.25)


def consistency_time_grid(n_steps: int) -> list[float]:
    """Uniform decreasing grid on (0, pi/2], starting at the terminal time."""
    return [T_MAX * (n_steps - i) / n_steps for i in range(n_steps)]


def sample_frame_consistency(
    head: ConsistencyHead, z: Tensor, n_steps: int, temperature: float, generator: torch.Generator
) -> Tensor:
    """Predict-then-renoise sampling; one step is a single consistency map.

    Every stochastic injection, the initial draw and each renoising, uses
    the temperature-scaled noise.
    """
    if n_steps < 1:
        raise SamplingError("n_steps must be >= 1")
    b, c = z.shape[0], head.config.latent_dim
    grid = consistency_time_grid(n_steps)
    x = gaussian_temperature_noise((b, c), temperature, generator, dtype=z.dtype)
    x_hat = x
    for i, t_val in enumerate(grid):
        t = torch.full((b,), t_val, dtype=z.dtype)
        x_hat = head.apply(x, t, z)
        if i + 1 < len(grid):
            t_next = grid[i + 1]
            fresh = gaussian_temperature_noise((b, c), temperature, generator, dtype=z.dtype)
            x = math.cos(t_next) * x_hat + math.sin(t_next) * fresh
    return x_hat


def sample_frame_trigflow(
    head: TrigFlowHead, z: Tensor, n_steps: int, temperature: float, generator: torch.Generator
) -> Tensor:
    """Euler integration of dx/dt = F(x, t, Z) from the terminal time to 0."""
    if n_steps < 1:
        raise SamplingError("n_steps must be >= 1")
    b, c = z.shape[0], head.config.latent_dim
    x = gaussian_temperature_noise((b, c), temperature, generator, dtype=z.dtype)
    dt = T_MAX / n_steps
    for i in range(n_steps):
        t = torch.full((b,), T_MAX - i * dt, dtype=z.dtype)
        x = x - dt * head.velocity(x, t, z)
    return x


def sample_frame_rq(
    head: RqHead,
    z: Tensor,
    temperature: float,
    generator: torch.Generator,
    stats: NormStats | None = None,
) -> tuple[Tensor, Tensor]:
    """Depth-ancestral code sampling; the frame is the dequantized sum,
    mapped back through the corpus stats when provided."""
    codes = head.sample_codes(z, temperature, generator)
    frame = head.dequantize(codes).to(z.dtype)
    if stats is not None:
        frame = stats.denormalize(frame)
    return codes, frame


def sample_next_frame(model: Model, z: Tensor, config: SamplerConfig, generator: torch.Generator) -> Tensor:
    """Dispatch one normalized-space frame draw for the model's head."""
    head = model.head
    if isinstance(head, ConsistencyHead):
        return sample_frame_consistency(head, z, config.n_steps, config.temperature, generator)
    if isinstance(head, TrigFlowHead):
        return sample_frame_trigflow(head, z, config.n_steps, config.temperature, generator)
    if isinstance(head, RqHead):
        _, frame = sample_frame_rq(head, z, config.temperature, generator, stats=None)
        return frame
    raise SamplingError(f"cannot sample from head {type(head).__name__}")


@dataclass
class FrameTiming:
    index: int
    backbone_s: float
    sampler_s: float
    other_s: float

    @property
    def total_s(self) -> float:
        return self.backbone_s + self.sampler_s + self.other_s


@dataclass
class GenerationTrace:
    """Generated sequence plus per-frame stage wall times."""

    sequence: LatentSequence
    prompt_frames: int
    frame_times: list[FrameTiming] = field(default_factory=list)
    prefill_s: float = 0.0

    @property
    def n_generated(self) -> int:
        return self.sequence.seq_len - self.prompt_frames

    @property
    def frame_rate(self) -> float:
        return self.sequence.frame_rate

    def total_seconds(self) -> float:
        return self.prefill_s + sum(ft.total_s for ft in self.frame_times)

    def stage_seconds(self) -> dict[str, float]:
        return {
            "backbone": self.prefill_s + sum(ft.backbone_s for ft in self.frame_times),
            "sampler": sum(ft.sampler_s for ft in self.frame_times),
            "other": sum(ft.other_s for ft in self.frame_times),
        }

    @property
    def rtf(self) -> float:
        """Generated audio seconds per wall second."""
        wall = self.total_seconds()
        return (self.n_generated / self.frame_rate) / wall if wall > 0 else float("inf")

    def csv_rows(self) -> list[tuple[int, str, int]]:
        rows: list[tuple[int, str, int]] = [(-1, "prefill", round(self.prefill_s * 1e6))]
        for ft in self.frame_times:
            rows.append((ft.index, "backbone", round(ft.backbone_s * 1e6)))
            rows.append((ft.index, "sampler", round(ft.sampler_s * 1e6)))
            rows.append((ft.index, "other", round(ft.other_s * 1e6)))
        return rows


def generate(
    model: Model,
    prompt: Tensor | None,
    config: SamplerConfig,
    frame_rate: float = 25.0,
) -> GenerationTrace:
    """Frame-by-frame continuation of a raw-space prompt.

    The loop runs in normalized latent space with KV caching; emitted
    frames are fed back exactly as generated (no inference-time noising)
    and the full sequence is denormalized at the end.
    """
    validate_sampler(config, model.head_kind)
    if not config.allow_untrained and int(model.train_steps) == 0:
        raise SamplingError("model has no recorded training steps; pass allow_untrained=True to override")
    c = model.config.backbone.latent_dim
    if prompt is None:
        prompt = torch.zeros(0, c)
    if prompt.dim() != 2 or prompt.shape[1] != c:
        raise SamplingError(f"prompt must be (P, {c}), got {tuple(prompt.shape)}")
    p = prompt.shape[0]
    if p > config.max_frames:
        raise SamplingError(f"prompt of {p} frames exceeds max_frames={config.max_frames}")
    generator = torch.Generator().manual_seed(config.seed)
    norm_prompt = model.normalize(prompt)

    with torch.no_grad():
        session = GenerationSession(model.backbone, batch=1)
        t0 = time.perf_counter()
        session.prefill(norm_prompt.unsqueeze(0) if p > 0 else None)
        prefill_s = time.perf_counter() - t0

        frames: list[Tensor] = []
        timings: list[FrameTiming] = []
        for s in range(p, config.max_frames):
            frame_start = time.perf_counter()
            cond = session.next_conditioning()
            t_backbone = time.perf_counter() - frame_start

            t1 = time.perf_counter()
            new_frame = sample_next_frame(model, cond.z, config, generator)
            t_sampler = time.perf_counter() - t1

            t2 = time.perf_counter()
            if s + 1 < config.max_frames:
                session.append(new_frame)
            t_backbone += time.perf_counter() - t2

            frames.append(new_frame.squeeze(0))
            total = time.perf_counter() - frame_start
            timings.append(
                FrameTiming(
                    index=s,
                    backbone_s=t_backbone,
                    sampler_s=t_sampler,
                    other_s=max(0.0, total - t_backbone - t_sampler),
                )
            )

        if frames:
            generated = torch.stack(frames, dim=0)
            full_norm = torch.cat([norm_prompt, generated], dim=0)
        else:
            full_norm = norm_prompt
        full_raw = model.denormalize(full_norm)
    return GenerationTrace(
        sequence=LatentSequence(full_raw, frame_rate),
        prompt_frames=p,
        frame_times=timings,
        prefill_s=prefill_s,
    )


def reference_generate(model: Model, prompt: Tensor | None, config: SamplerConfig, frame_rate: float = 25.0) -> Tensor:
    """Cache-free loop recomputing the full forward every frame.

    Consumes randomness in the same order as generate(); used to check
    KV-cache equivalence.
    """
    validate_sampler(config, model.head_kind)
    c = model.config.backbone.latent_dim
    if prompt is None:
        prompt = torch.zeros(0, c)
    p = prompt.shape[0]
    generator = torch.Generator().manual_seed(config.seed)
    history = model.normalize(prompt).unsqueeze(0)
    with torch.no_grad():
        for s in range(p, config.max_frames):
            z_long = model.backbone.forward_long_next(history)
            if model.config.backbone.use_short_context:
                z_short = model.backbone.short_window(history)
            else:
                z_short = torch.zeros_like(z_long)
            frame = sample_next_frame(model, z_long + z_short, config, generator)
            history = torch.cat([history, frame.unsqueeze(1)], dim=1)
    return model.denormalize(history.squeeze(0))


def sample_conditional(
    model: Model, history_raw: Tensor, n: int, config: SamplerConfig
) -> Tensor:
    """n independent draws of the next frame after a fixed raw-space history."""
    validate_sampler(config, model.head_kind)
    generator = torch.Generator().manual_seed(config.seed)
    hist = model.normalize(history_raw).unsqueeze(0)
    with torch.no_grad():
        z_long = model.backbone.forward_long_next(hist)
        if model.config.backbone.use_short_context:
            z_short = model.backbone.short_window(hist)
        else:
            z_short = torch.zeros_like(z_long)
        z = (z_long + z_short).expand(n, -1)
        frames = sample_next_frame(model, z, config, generator)
    return model.denormalize(frames)
