"""Residual vector quantization: a hierarchy of codebooks where level k
quantizes the residual left by levels < k. Codebooks are learned with
EMA k-means and dead codes are re-seeded from batch samples."""

from __future__ import annotations

from dataclasses import dataclass

import torch

Tensor = torch.Tensor


class RvqError(ValueError):
    """Invalid codebook or input layout."""


@dataclass
class RvqCodebooks:
    """K codebooks, each (N_k, C)."""

    books: list[Tensor]

    def __post_init__(self):
        if not self.books:
            raise RvqError("need at least one codebook")
        c = self.books[0].shape[1]
        for k, b in enumerate(self.books):
            if b.dim() != 2 or b.shape[0] < 1:
                raise RvqError(f"codebook {k} must be (N_k, C) with N_k >= 1")
            if b.shape[1] != c:
                raise RvqError(f"codebook {k} has dim {b.shape[1]}, expected {c}")
            if not torch.isfinite(b).all():
                raise RvqError(f"codebook {k} has non-finite entries")

    @property
    def n_levels(self) -> int:
        return len(self.books)

    @property
    def latent_dim(self) -> int:
        return self.books[0].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [b.shape[0] for b in self.books]

    def state_tensors(self, prefix: str = "rvq.") -> dict[str, Tensor]:
        return {f"{prefix}book{k}": b for k, b in enumerate(self.books)}

    @classmethod
    def from_state_tensors(cls, tensors: dict[str, Tensor], prefix: str = "rvq.") -> "RvqCodebooks":
        books = []
        k = 0
        while f"{prefix}book{k}" in tensors:
            books.append(tensors[f"{prefix}book{k}"])
            k += 1
        return cls(books)


def _nearest(x: Tensor, book: Tensor) -> Tensor:
    """Index of the nearest codebook row for each row of x."""
    return torch.cdist(x, book).argmin(dim=1)


def rvq_encode(x: Tensor, books: RvqCodebooks) -> tuple[Tensor, Tensor, Tensor]:
    """Greedy residual quantization of frames.

    x may be (C,) or (N, C). Returns (codes, quantized, residual) where
    codes is (..., K) long, quantized is the sum of selected vectors and
    residual = x - quantized.
    """
    squeeze = x.dim() == 1
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[1] != books.latent_dim:
        raise RvqError(f"input dim {x.shape[1]} does not match codebook dim {books.latent_dim}")
    resid = x
    quant = torch.zeros_like(x)
    codes = []
    for book in books.books:
        idx = _nearest(resid, book.to(x.dtype))
        chosen = book.to(x.dtype)[idx]
        quant = quant + chosen
        resid = resid - chosen
        codes.append(idx)
    codes_t = torch.stack(codes, dim=1)
    if squeeze:
        return codes_t[0], quant[0], resid[0]
    return codes_t, quant, resid


def rvq_decode(codes: Tensor, books: RvqCodebooks, dtype: torch.dtype = torch.float32) -> Tensor:
    """Sum of selected codebook vectors for (..., K) code indices."""
    squeeze = codes.dim() == 1
    if squeeze:
        codes = codes.unsqueeze(0)
    if codes.shape[-1] != books.n_levels:
        raise RvqError(f"got {codes.shape[-1]} code levels, codebooks have {books.n_levels}")
    out = torch.zeros(*codes.shape[:-1], books.latent_dim, dtype=dtype)
    for k, book in enumerate(books.books):
        idx = codes[..., k]
        if int(idx.max()) >= book.shape[0] or int(idx.min()) < 0:
            raise RvqError(f"code index out of range for level {k} (size {book.shape[0]})")
        out = out + book.to(dtype)[idx]
    return out[0] if squeeze else out


def train_codebooks(
    frames: Tensor,
    n_levels: int,
    codebook_size: int,
    iters: int = 30,
    decay: float = 0.99,
    dead_threshold: float = 1.0,
    seed: int = 0,
) -> RvqCodebooks:
    """Fit K codebooks level by level with EMA k-means on the residuals.

    frames: (N, C) training latents. Cluster-size and centroid-sum EMAs
    use the given decay; codes whose EMA size drops below dead_threshold
    are re-seeded from random batch samples.
    """
    if frames.dim() != 2 or frames.shape[0] < codebook_size:
        raise RvqError(f"need at least {codebook_size} frames, got {tuple(frames.shape)}")
    gen = torch.Generator().manual_seed(seed)
    resid = frames.clone().float()
    books = []
    for _level in range(n_levels):
        perm = torch.randperm(resid.shape[0], generator=gen)[:codebook_size]
        centroids = resid[perm].clone()
        ema_count = torch.ones(codebook_size)
        ema_sum = centroids.clone()
        for _ in range(iters):
            idx = _nearest(resid, centroids)
            onehot = torch.zeros(resid.shape[0], codebook_size)
            onehot[torch.arange(resid.shape[0]), idx] = 1.0
            count = onehot.sum(dim=0)
            vec_sum = onehot.T @ resid
            ema_count.mul_(decay).add_(count, alpha=1 - decay)
            ema_sum.mul_(decay).add_(vec_sum, alpha=1 - decay)
            centroids = ema_sum / ema_count.clamp_min(1e-12).unsqueeze(1)
            dead = ema_count < dead_threshold
            if dead.any():
                take = torch.randint(0, resid.shape[0], (int(dead.sum()),), generator=gen)
                centroids[dead] = resid[take]
                ema_count[dead] = 1.0
                ema_sum[dead] = centroids[dead]
        books.append(centroids)
        idx = _nearest(resid, centroids)
        resid = resid - centroids[idx]
    return RvqCodebooks(books)
