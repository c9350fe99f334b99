"""Transformer building blocks: causal attention with KV caching, gated MLPs,
rotary embeddings and Fourier time features."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor


class CacheError(RuntimeError):
    """KV cache shape or position mismatch."""


class KVCache:
    """Per-layer key/value memory for incremental causal decoding."""

    def __init__(self) -> None:
        self.k: Tensor | None = None
        self.v: Tensor | None = None

    @property
    def pos(self) -> int:
        return 0 if self.k is None else self.k.shape[2]

    def update(self, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        """Append new keys/values and return the full cached tensors."""
        if k.shape != v.shape:
            raise CacheError(f"key shape {tuple(k.shape)} != value shape {tuple(v.shape)}")
        if self.k is None:
            self.k, self.v = k, v
        else:
            if self.k.shape[:2] != k.shape[:2] or self.k.shape[3] != k.shape[3]:
                raise CacheError(
                    f"cached layout {tuple(self.k.shape)} incompatible with update {tuple(k.shape)}"
                )
            self.k = torch.cat([self.k, k], dim=2)
            self.v = torch.cat([self.v, v], dim=2)
        return self.k, self.v


def causal_attention(q: Tensor, k: Tensor, v: Tensor, cache: KVCache | None = None) -> Tensor:
    """Scaled-dot-product attention where position s attends positions <= s.

    Tensors are (batch, heads, time, head_dim). With a cache, the incoming
    chunk is appended after the cached history and each new query attends
    the history plus its own causal prefix.
    """
    past = 0
    if cache is not None:
        past = cache.pos
        k, v = cache.update(k, v)
    tq, tk = q.shape[2], k.shape[2]
    if past == 0 and tq == tk:
        return F.scaled_dot_product_attention(q, k, v, is_causal=True)
    if past + tq != tk:
        raise CacheError(f"{tq} queries at offset {past} do not line up with {tk} keys")
    if tq == 1:
        return F.scaled_dot_product_attention(q, k, v)
    i = torch.arange(tq, device=q.device).unsqueeze(1)
    j = torch.arange(tk, device=q.device).unsqueeze(0)
    mask = j <= (i + past)
    return F.scaled_dot_product_attention(q, k, v, attn_mask=mask)


def rotary_angles(positions: Tensor, head_dim: int, base: float = 10000.0) -> tuple[Tensor, Tensor]:
    """cos/sin tables of shape (len(positions), head_dim/2)."""
    half = head_dim // 2
    inv = base ** (-torch.arange(half, dtype=torch.float64) / half)
    ang = positions.to(torch.float64).unsqueeze(-1) * inv
    return torch.cos(ang), torch.sin(ang)


def apply_rotary(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotate (B, H, T, Dh) query/key pairs by per-position angles."""
    cos = cos.to(x.dtype)
    sin = sin.to(x.dtype)
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class CausalSelfAttention(nn.Module):
    """Multi-head causal self-attention with optional rotary positions."""

    def __init__(self, dim: int, n_heads: int, rotary: bool = True):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.rotary = rotary
        if rotary and self.head_dim % 2 != 0:
            raise ValueError("rotary attention needs an even head dim")
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor, cache: KVCache | None = None) -> Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        if self.rotary:
            offset = cache.pos if cache is not None else 0
            pos = torch.arange(offset, offset + t, device=x.device)
            cos, sin = rotary_angles(pos, self.head_dim)
            cos, sin = cos.to(x.device), sin.to(x.device)
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)
        y = causal_attention(q, k, v, cache)
        return self.out(y.transpose(1, 2).reshape(b, t, d))


class GatedMLP(nn.Module):
    """SiLU-gated feed-forward layer."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w_in = nn.Linear(dim, 2 * hidden)
        self.w_out = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        u, g = self.w_in(x).chunk(2, dim=-1)
        return self.w_out(u * F.silu(g))


class TransformerBlock(nn.Module):
    """Pre-norm causal block: attention then gated MLP, both residual."""

    def __init__(self, dim: int, mlp_dim: int, n_heads: int, rotary: bool = True):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, n_heads, rotary=rotary)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = GatedMLP(dim, mlp_dim)

    def forward(self, x: Tensor, cache: KVCache | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), cache)
        return x + self.mlp(self.ln2(x))


class FourierTimeEmbedding(nn.Module):
    """cos/sin features of a scalar time input at geometrically spaced frequencies.

    The band tops out low enough to keep features smooth over [0, pi/2];
    consistency training relies on that smoothness to propagate the
    boundary condition to the terminal time.
    """

    def __init__(self, n_freqs: int = 16, min_freq: float = 0.25, max_freq: float = 8.0):
        super().__init__()
        ratio = (max_freq / min_freq) ** (1.0 / (n_freqs - 1))
        freqs = min_freq * ratio ** torch.arange(n_freqs, dtype=torch.float64)
        self.register_buffer("freqs", freqs, persistent=True)
        self.out_dim = 2 * n_freqs

    def forward(self, t: Tensor) -> Tensor:
        ang = t.unsqueeze(-1) * self.freqs.to(t.dtype)
        return torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)
