"""Training loops for the continuous and discrete model families.

One step computes the backbone conditioning once per sequence and then
evaluates the head loss on N independently drawn (t, eps) pairs (the head
batch multiplier), averaging their losses into a single optimizer update.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from calm.backbone import draw_noise_levels, inject_noise
from calm.heads import ConsistencyHead, RqHead, TrigNoiseState, draw_noise_states
from calm.model import Model
from calm.nn import NumericsError
from calm.nn.checkpoint import load_tensors, save_tensors
from calm.rvq import RvqCodebooks, rvq_decode, rvq_encode

Tensor = torch.Tensor


class TrainError(ValueError):
    """Invalid training configuration or data."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 1000
    lr: float = 1e-3
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    head_batch_multiplier: int = 8
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.head_batch_multiplier < 1:
            raise TrainError("head_batch_multiplier must be >= 1")
        if self.lr <= 0:
            raise TrainError("lr must be positive")
        if self.batch_size < 1 or self.steps < 1:
            raise TrainError("batch_size and steps must be positive")

    @property
    def warmup_steps(self) -> int:
        return max(1, round(self.warmup_frac * self.steps))


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    step = min(step, config.steps)
    w = config.warmup_steps
    if step <= w:
        return config.lr * step / w
    span = max(1, config.steps - w)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


@dataclass
class RunningStats:
    """Welford accumulator over per-step losses."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, value: float) -> None:
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (value - self.mean)

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0


@dataclass
class TrainState:
    step: int = 0
    skipped: int = 0
    loss_stats: RunningStats = field(default_factory=RunningStats)


def make_optimizer(model: Model, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )


def _sample_batch(data: Tensor, batch_size: int, generator: torch.Generator) -> Tensor:
    idx = torch.randint(0, data.shape[0], (batch_size,), generator=generator)
    return data[idx]


def _continuous_loss(
    model: Model, batch: Tensor, n_draws: int, generator: torch.Generator
) -> tuple[Tensor, dict[str, float]]:
    """Backbone once per sequence, head loss averaged over n_draws (t, eps) draws."""
    b, s, c = batch.shape
    noised = None
    if model.config.backbone.noise_injection:
        k, eps_inj = draw_noise_levels(b, s, c, generator, dtype=batch.dtype)
        noised = inject_noise(batch, k, eps_inj)
    cond = model.backbone(batch, noised)
    z = cond.z.reshape(b * s, -1)
    x0 = batch.reshape(b * s, c)
    if n_draws > 1:
        z = z.unsqueeze(0).expand(n_draws, -1, -1).reshape(n_draws * b * s, -1)
        x0 = x0.unsqueeze(0).expand(n_draws, -1, -1).reshape(n_draws * b * s, c)
    state = draw_noise_states(x0, generator)
    return model.head.loss(state, z)


def _rq_loss(
    model: Model, batch: Tensor, generator: torch.Generator
) -> tuple[Tensor, dict[str, float]]:
    """Quantize the batch with the frozen codebooks and fit the code logits."""
    head = model.head
    if not isinstance(head, RqHead):
        raise TrainError("rq loss requires an rq head")
    b, s, c = batch.shape
    books = RvqCodebooks(list(head.codebooks.unbind(0)))
    with torch.no_grad():
        codes, quant, _ = rvq_encode(batch.reshape(b * s, c), books)
    deq = quant.reshape(b, s, c)
    noised = None
    if model.config.backbone.noise_injection:
        k, eps_inj = draw_noise_levels(b, s, c, generator, dtype=batch.dtype)
        noised = inject_noise(deq, k, eps_inj)
    cond = model.backbone(deq, noised)
    return head.loss(cond.z.reshape(b * s, -1), codes)


def train_step(
    model: Model,
    optimizer: torch.optim.Optimizer,
    batch: Tensor,
    config: TrainConfig,
    generator: torch.Generator,
    state: TrainState,
) -> dict[str, float]:
    """One update; non-finite losses skip the step and bump the skip counter."""
    lr = lr_at(state.step + 1, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    try:
        if model.head_kind == "rq":
            loss, stats = _rq_loss(model, batch, generator)
        else:
            loss, stats = _continuous_loss(model, batch, config.head_batch_multiplier, generator)
    except NumericsError as err:
        state.skipped += 1
        state.step += 1
        optimizer.zero_grad(set_to_none=True)
        return {"loss": float("nan"), "lr": lr, "skipped": 1.0, "error": str(err)}
    report = {"loss": loss.item(), "lr": lr, **stats}
    if not torch.isfinite(loss):
        state.skipped += 1
        state.step += 1
        optimizer.zero_grad(set_to_none=True)
        report["skipped"] = 1.0
        return report
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    if isinstance(model.head, ConsistencyHead):
        model.head.update_teacher()
    with torch.no_grad():
        model.train_steps += 1
    state.step += 1
    state.loss_stats.update(report["loss"])
    return report


def loss_variance_probe(
    model: Model, batch: Tensor, n_draws: int, n_steps: int, seed: int = 0
) -> list[float]:
    """Per-step loss values at frozen parameters over repeated head draws.

    The conditioning is computed once on clean frames so the only
    randomness is the head's (t, eps) sampling; with N draws averaged per
    step the estimator variance shrinks as 1/N.
    """
    generator = torch.Generator().manual_seed(seed)
    b, s, c = batch.shape
    with torch.no_grad():
        cond = model.backbone(batch)
        z = cond.z.reshape(b * s, -1)
        x0 = batch.reshape(b * s, c)
        zr = z.unsqueeze(0).expand(n_draws, -1, -1).reshape(n_draws * b * s, -1)
        x0r = x0.unsqueeze(0).expand(n_draws, -1, -1).reshape(n_draws * b * s, c)
        values = []
        for _ in range(n_steps):
            state = draw_noise_states(x0r, generator)
            loss, _ = model.head.loss(state, zr)
            values.append(loss.item())
    return values


def save_train_checkpoint(
    path: str | Path,
    model: Model,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
    state: TrainState,
) -> None:
    """Model, optimizer moments, RNG stream and counters, bit-exact."""
    extra: dict[str, Tensor] = {
        "train.step": torch.tensor(state.step, dtype=torch.int64),
        "train.skipped": torch.tensor(state.skipped, dtype=torch.int64),
        "train.loss_count": torch.tensor(state.loss_stats.count, dtype=torch.int64),
        "train.loss_mean": torch.tensor(state.loss_stats.mean, dtype=torch.float64),
        "train.loss_m2": torch.tensor(state.loss_stats.m2, dtype=torch.float64),
        "train.rng": generator.get_state(),
    }
    names = {id(p): n for n, p in model.named_parameters()}
    for param, opt_state in optimizer.state.items():
        name = names.get(id(param))
        if name is None:
            continue
        for key in ("exp_avg", "exp_avg_sq"):
            extra[f"opt.{name}.{key}"] = opt_state[key]
        extra[f"opt.{name}.step"] = opt_state["step"].to(torch.float64)
    model.save(path, extra)


def load_train_checkpoint(
    path: str | Path, config: TrainConfig, model: Model | None = None
) -> tuple[Model, torch.optim.Optimizer, torch.Generator, TrainState]:
    """Rebuild model, optimizer and RNG stream exactly as checkpointed.

    When a target model is passed, its weights are overwritten in place and
    the optimizer binds to that instance's parameters.
    """
    loaded, extra = Model.load(path)
    if model is None:
        model = loaded
    else:
        model.load_state_dict(loaded.state_dict())
    optimizer = make_optimizer(model, config)
    names = dict(model.named_parameters())
    for name, param in names.items():
        key = f"opt.{name}.exp_avg"
        if key not in extra:
            continue
        optimizer.state[param] = {
            "step": extra[f"opt.{name}.step"].to(torch.float32),
            "exp_avg": extra[f"opt.{name}.exp_avg"],
            "exp_avg_sq": extra[f"opt.{name}.exp_avg_sq"],
        }
    generator = torch.Generator()
    generator.set_state(extra["train.rng"])
    state = TrainState(
        step=int(extra["train.step"]),
        skipped=int(extra["train.skipped"]),
        loss_stats=RunningStats(
            count=int(extra["train.loss_count"]),
            mean=float(extra["train.loss_mean"]),
            m2=float(extra["train.loss_m2"]),
        ),
    )
    return model, optimizer, generator, state


def train(
    model: Model,
    data: Tensor,
    config: TrainConfig,
    log_rows: list[dict[str, float]] | None = None,
    checkpoint_path: str | Path | None = None,
    resume_from: str | Path | None = None,
    until_step: int | None = None,
) -> TrainState:
    """Run the step loop over a normalized (count, S, C) data tensor.

    Data order and every stochastic draw come from one seeded generator,
    so a fixed (config, seed, corpus) triple reproduces the run exactly in
    single-threaded mode, and resuming from a checkpoint continues it.
    until_step interrupts the run early (the schedule still follows
    config.steps), which models a mid-run shutdown.
    """
    if data.dim() != 3 or data.shape[0] < 1:
        raise TrainError(f"expected (count, S, C) training data, got {tuple(data.shape)}")
    if data.shape[2] != model.config.backbone.latent_dim:
        raise TrainError(
            f"corpus latent dim {data.shape[2]} != model latent dim {model.config.backbone.latent_dim}"
        )
    if resume_from is not None:
        _, optimizer, generator, state = load_train_checkpoint(resume_from, config, model=model)
    else:
        optimizer = make_optimizer(model, config)
        generator = torch.Generator().manual_seed(config.seed)
        state = TrainState()
    start = time.perf_counter()
    stop = config.steps if until_step is None else min(until_step, config.steps)
    while state.step < stop:
        batch = _sample_batch(data, config.batch_size, generator)
        report = train_step(model, optimizer, batch, config, generator, state)
        if log_rows is not None and (state.step % config.log_every == 0 or state.step == config.steps):
            log_rows.append(
                {
                    "step": state.step,
                    "loss": report["loss"],
                    "lr": report["lr"],
                    "wall_s": time.perf_counter() - start,
                }
            )
        if (
            checkpoint_path is not None
            and config.checkpoint_every > 0
            and state.step % config.checkpoint_every == 0
        ):
            save_train_checkpoint(checkpoint_path, model, optimizer, generator, state)
    if checkpoint_path is not None:
        save_train_checkpoint(checkpoint_path, model, optimizer, generator, state)
    return state
