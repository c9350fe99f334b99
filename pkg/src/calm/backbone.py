"""Dual-context conditioning: a causal long-range transformer fed noised
frames during training, a short-context transformer over the most recent
clean frames, and their sum as the per-step conditioning vector."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from calm.nn import KVCache, TransformerBlock

Tensor = torch.Tensor


class BackboneError(ValueError):
    """Invalid backbone configuration or input."""


@dataclass
class BackboneConfig:
    latent_dim: int = 8
    model_dim: int = 64
    mlp_dim: int = 128
    n_heads: int = 4
    n_layers: int = 2
    n_layers_short: int = 1
    context: int = 10  # length of the clean short-context window
    use_short_context: bool = True
    noise_injection: bool = True

    def __post_init__(self):
        if self.context < 1:
            raise BackboneError("context must be >= 1")
        if self.model_dim % self.n_heads != 0:
            raise BackboneError(f"model_dim {self.model_dim} not divisible by {self.n_heads} heads")
        if self.n_layers < 1 or (self.use_short_context and self.n_layers_short < 1):
            raise BackboneError("need at least one layer per enabled transformer")


def draw_noise_levels(
    batch: int, seq_len: int, latent_dim: int, generator: torch.Generator, dtype: torch.dtype = torch.float32
) -> tuple[Tensor, Tensor]:
    """Per-position noise levels k ~ U(0,1) and standard-normal frames."""
    k = torch.rand(batch, seq_len, 1, generator=generator, dtype=dtype)
    eps = torch.randn(batch, seq_len, latent_dim, generator=generator, dtype=dtype)
    return k, eps


def inject_noise(x: Tensor, k: Tensor, eps: Tensor) -> Tensor:
    """Variance-preserving corruption sqrt(k) * eps + sqrt(1 - k) * x."""
    if ((k < 0) | (k > 1)).any():
        raise BackboneError("noise level k outside [0, 1]")
    return torch.sqrt(k) * eps + torch.sqrt(1.0 - k) * x


@dataclass
class Conditioning:
    """Long and short context features; the head consumes their sum."""

    z_long: Tensor
    z_short: Tensor

    def __post_init__(self):
        if self.z_long.shape != self.z_short.shape:
            raise BackboneError(
                f"z_long {tuple(self.z_long.shape)} and z_short {tuple(self.z_short.shape)} differ"
            )

    @property
    def z(self) -> Tensor:
        return self.z_long + self.z_short


def condition(z_long: Tensor, z_short: Tensor) -> Conditioning:
    """Fuse the two context features; both addends stay inspectable."""
    return Conditioning(z_long=z_long, z_short=z_short)


class Backbone(nn.Module):
    """Produces the conditioning vector for every position of a sequence.

    Position s is conditioned on frames before s only: the long transformer
    sees [BOS, x^1 .. x^{s-1}] (noised during training), the short one sees
    the last `context` clean frames, left-padded with a learned embedding.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c, d = config.latent_dim, config.model_dim
        self.in_long = nn.Linear(c, d)
        self.bos_long = nn.Parameter(torch.randn(d) * 0.02)
        self.blocks_long = nn.ModuleList(
            TransformerBlock(d, config.mlp_dim, config.n_heads, rotary=True)
            for _ in range(config.n_layers)
        )
        self.ln_long = nn.LayerNorm(d)
        if config.use_short_context:
            self.in_short = nn.Linear(c, d)
            self.bos_short = nn.Parameter(torch.randn(d) * 0.02)
            self.pos_short = nn.Parameter(torch.randn(config.context, d) * 0.02)
            self.blocks_short = nn.ModuleList(
                TransformerBlock(d, config.mlp_dim, config.n_heads, rotary=False)
                for _ in range(config.n_layers_short)
            )
            self.ln_short = nn.LayerNorm(d)
        # instrumentation: sequences processed by the long transformer
        self.long_forward_sequences = 0
        self.tap_enabled = False
        self.last_long_input: Tensor | None = None
        self.last_short_input: Tensor | None = None

    @property
    def cond_dim(self) -> int:
        return self.config.model_dim

    def _long_tokens(self, frames: Tensor) -> Tensor:
        b, s, _ = frames.shape
        bos = self.bos_long.to(frames.dtype).expand(b, 1, -1)
        if s == 1:
            return bos
        return torch.cat([bos, self.in_long(frames[:, :-1])], dim=1)

    def forward_long(self, frames: Tensor, caches: list[KVCache] | None = None) -> Tensor:
        """(B, S, C) history -> (B, S, D); row s depends on frames < s only."""
        self.long_forward_sequences += frames.shape[0]
        h = self._long_tokens(frames)
        for i, block in enumerate(self.blocks_long):
            h = block(h, caches[i] if caches is not None else None)
        return self.ln_long(h)

    def forward_long_next(self, history: Tensor) -> Tensor:
        """Cache-free reference: conditioning after a (B, n, C) history."""
        b = history.shape[0]
        bos = self.bos_long.to(history.dtype).expand(b, 1, -1)
        if history.shape[1] == 0:
            h = bos
        else:
            h = torch.cat([bos, self.in_long(history)], dim=1)
        for block in self.blocks_long:
            h = block(h)
        return self.ln_long(h[:, -1])

    def forward_short(self, frames: Tensor) -> Tensor:
        """(B, S, C) clean history -> (B, S, D) from the trailing K-frame windows."""
        if not self.config.use_short_context:
            raise BackboneError("short-context transformer is disabled in this configuration")
        b, s, _ = frames.shape
        k, d = self.config.context, self.config.model_dim
        emb = self.in_short(frames)
        pad = self.bos_short.to(frames.dtype).expand(b, k, d)
        padded = torch.cat([pad, emb], dim=1)  # window for s is padded[:, s : s + k]
        windows = padded.unfold(1, k, 1)[:, :s].permute(0, 1, 3, 2)
        h = windows.reshape(b * s, k, d) + self.pos_short.to(frames.dtype)
        for block in self.blocks_short:
            h = block(h)
        return self.ln_short(h[:, -1]).reshape(b, s, d)

    def short_window(self, recent: Tensor) -> Tensor:
        """(B, <=K, C) most recent clean frames -> (B, D) for the next position."""
        b = recent.shape[0]
        k, d = self.config.context, self.config.model_dim
        n = recent.shape[1]
        if n > k:
            recent = recent[:, -k:]
            n = k
        pad = self.bos_short.to(recent.dtype).expand(b, k - n, d)
        emb = self.in_short(recent) if n > 0 else recent.new_zeros(b, 0, d)
        h = torch.cat([pad, emb], dim=1) + self.pos_short.to(recent.dtype)
        for block in self.blocks_short:
            h = block(h)
        return self.ln_short(h[:, -1])

    def forward(self, clean: Tensor, noised: Tensor | None = None, record_taps: bool | None = None) -> Conditioning:
        """Conditioning for every position; the long path consumes `noised`
        when provided (training with noise injection), the short path always
        consumes clean frames."""
        long_input = noised if noised is not None else clean
        z_long = self.forward_long(long_input)
        if self.config.use_short_context:
            z_short = self.forward_short(clean)
        else:
            z_short = torch.zeros_like(z_long)
        if self.tap_enabled if record_taps is None else record_taps:
            self.last_long_input = long_input.detach().clone()
            self.last_short_input = clean.detach().clone()
        return condition(z_long, z_short)


class GenerationSession:
    """Incremental decoding state over one backbone: KV caches plus the
    clean-frame history that feeds the short-context window."""

    def __init__(self, backbone: Backbone, batch: int = 1):
        self.backbone = backbone
        self.batch = batch
        self.caches = [KVCache() for _ in backbone.blocks_long]
        self.history: Tensor | None = None  # (B, n, C) clean frames fed so far
        self._z_long_next: Tensor | None = None

    def prefill(self, frames: Tensor | None) -> None:
        """Feed [BOS, frames...] through the long transformer."""
        bb = self.backbone
        dtype = bb.bos_long.dtype
        bos = bb.bos_long.expand(self.batch, 1, -1)
        if frames is None or frames.shape[1] == 0:
            tokens = bos
            self.history = torch.zeros(self.batch, 0, bb.config.latent_dim, dtype=dtype)
        else:
            tokens = torch.cat([bos, bb.in_long(frames)], dim=1)
            self.history = frames
        h = tokens
        for block, cache in zip(bb.blocks_long, self.caches):
            h = block(h, cache)
        self._z_long_next = bb.ln_long(h[:, -1])

    def append(self, frame: Tensor) -> None:
        """Push one generated clean frame (B, C) into both contexts."""
        bb = self.backbone
        self.history = torch.cat([self.history, frame.unsqueeze(1)], dim=1)
        h = bb.in_long(frame.unsqueeze(1))
        for block, cache in zip(bb.blocks_long, self.caches):
            h = block(h, cache)
        self._z_long_next = bb.ln_long(h[:, -1])

    def next_conditioning(self) -> Conditioning:
        """Conditioning for the next frame after everything fed so far."""
        if self._z_long_next is None:
            raise BackboneError("session not prefixed; call prefill() first")
        z_long = self._z_long_next
        if self.backbone.config.use_short_context:
            z_short = self.backbone.short_window(self.history)
        else:
            z_short = torch.zeros_like(z_long)
        return condition(z_long, z_short)
