"""Toy waveform autoencoder: procedural harmonic waveforms are split into
per-frame windows, encoded to diagonal-Gaussian latents by an MLP plus
causal transformer stack, and decoded back. Trained with reconstruction
and KL terms only. Exists to exercise the encode-then-model path end to
end; the analytic sources remain the quality oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from calm.nn import NumericsError, TransformerBlock
from calm.sources import Corpus

Tensor = torch.Tensor


@dataclass
class VaeConfig:
    window_len: int = 32  # waveform samples per latent frame
    latent_dim: int = 8
    hidden_dim: int = 32
    n_layers: int = 1
    n_heads: int = 2
    kl_weight: float = 0.01

    def __post_init__(self):
        if self.kl_weight <= 0:
            raise ValueError("kl_weight must be positive")


def toy_waveforms(
    n: int, n_frames: int, window_len: int, seed: int = 0, n_harmonics: int = 3, amp_ar: float = 0.9
) -> Tensor:
    """Procedural training audio: harmonics with AR-modulated amplitudes.

    Returns (n, n_frames * window_len) waveforms in roughly [-1, 1].
    """
    gen = torch.Generator().manual_seed(seed)
    total = n_frames * window_len
    t = torch.arange(total, dtype=torch.float32)
    out = torch.zeros(n, total)
    for i in range(n):
        base = 0.02 + 0.08 * torch.rand(1, generator=gen).item()
        phase = 2 * math.pi * torch.rand(n_harmonics, generator=gen)
        amps = torch.zeros(n_harmonics, n_frames)
        amps[:, 0] = torch.rand(n_harmonics, generator=gen)
        drive = 0.3 * torch.randn(n_harmonics, n_frames, generator=gen)
        for f in range(1, n_frames):
            amps[:, f] = amp_ar * amps[:, f - 1] + drive[:, f]
        per_sample = amps.repeat_interleave(window_len, dim=1)
        for h in range(n_harmonics):
            out[i] += per_sample[h] * torch.sin(2 * math.pi * base * (h + 1) * t + phase[h])
    return out / n_harmonics


def kl_standard_normal(mean: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mean, exp(logvar)) || N(0, 1)), summed over dims, averaged over rows."""
    per_dim = 0.5 * (mean**2 + logvar.exp() - 1.0 - logvar)
    return per_dim.sum(dim=-1).mean()


def reconstruction_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared waveform error; zero iff the reconstruction is exact."""
    return (x - x_hat).pow(2).mean()


class WaveformVae(nn.Module):
    """Window MLP encoder/decoder around causal transformer stacks."""

    def __init__(self, config: VaeConfig):
        super().__init__()
        self.config = config
        c, h, w = config.latent_dim, config.hidden_dim, config.window_len
        self.enc_in = nn.Sequential(nn.Linear(w, h), nn.SiLU(), nn.Linear(h, h))
        self.enc_blocks = nn.ModuleList(
            TransformerBlock(h, 2 * h, config.n_heads) for _ in range(config.n_layers)
        )
        self.to_mean = nn.Linear(h, c)
        self.to_logvar = nn.Linear(h, c)
        self.dec_in = nn.Linear(c, h)
        self.dec_blocks = nn.ModuleList(
            TransformerBlock(h, 2 * h, config.n_heads) for _ in range(config.n_layers)
        )
        self.dec_out = nn.Sequential(nn.Linear(h, h), nn.SiLU(), nn.Linear(h, w))

    def _frame(self, waveforms: Tensor) -> Tensor:
        b, total = waveforms.shape
        w = self.config.window_len
        if total % w != 0:
            raise ValueError(f"waveform length {total} not a multiple of window {w}")
        return waveforms.reshape(b, total // w, w)

    def encode(self, waveforms: Tensor) -> tuple[Tensor, Tensor]:
        """(B, samples) -> per-frame posterior (mean, logvar), each (B, S, C)."""
        h = self.enc_in(self._frame(waveforms))
        for block in self.enc_blocks:
            h = block(h)
        return self.to_mean(h), self.to_logvar(h)

    def decode(self, latents: Tensor) -> Tensor:
        """(B, S, C) -> (B, samples) reconstructed waveforms."""
        h = self.dec_in(latents)
        for block in self.dec_blocks:
            h = block(h)
        frames = self.dec_out(h)
        return frames.reshape(frames.shape[0], -1)

    def forward(self, waveforms: Tensor, generator: torch.Generator | None = None) -> tuple[Tensor, Tensor, Tensor]:
        mean, logvar = self.encode(waveforms)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + (0.5 * logvar).exp() * noise
        return self.decode(z), mean, logvar


def vae_loss(model: WaveformVae, waveforms: Tensor, generator: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
    """(reconstruction, kl) loss terms for a waveform batch."""
    x_hat, mean, logvar = model(waveforms, generator)
    return reconstruction_loss(waveforms, x_hat), kl_standard_normal(mean, logvar)


def vae_train_step(
    model: WaveformVae,
    optimizer: torch.optim.Optimizer,
    waveforms: Tensor,
    generator: torch.Generator | None = None,
) -> dict[str, float]:
    """One optimizer update; aborts with diagnostics on a non-finite loss."""
    recon, kl = vae_loss(model, waveforms, generator)
    loss = recon + model.config.kl_weight * kl
    if not torch.isfinite(loss):
        raise NumericsError(
            "vae_train_step", f"non-finite loss (recon={recon.item()!r}, kl={kl.item()!r})"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {"loss": loss.item(), "recon": recon.item(), "kl": kl.item()}


def encode_corpus(
    model: WaveformVae,
    waveforms: Tensor,
    frame_rate: float,
    use_samples: bool = True,
    seed: int = 0,
) -> Corpus:
    """Encode waveforms into a latent corpus, from posterior samples or means."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        mean, logvar = model.encode(waveforms)
        if use_samples:
            z = mean + (0.5 * logvar).exp() * torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
        else:
            z = mean
    return Corpus(data=z, frame_rate=frame_rate)
