"""Synthetic latent-sequence sources, normalization and corpus files.

The gaussian-ar and gaussian-mixture-ar processes have closed-form
next-frame conditionals, which makes them usable as ground-truth oracles
for trained samplers. The toy-vae kind routes through a trained waveform
autoencoder instead and has no analytic conditional.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch

Tensor = torch.Tensor

SOURCE_KINDS = ("gaussian-ar", "gaussian-mixture-ar", "toy-vae")

DEFAULT_LATENT_DIM = 8
DEFAULT_SEQ_LEN = 64
DEFAULT_FRAME_RATE = 25.0


class SourceError(ValueError):
    """Invalid source specification or stats."""


@dataclass(frozen=True)
class SourceSpec:
    """Parameters of a synthetic latent-sequence process."""

    kind: str = "gaussian-ar"
    latent_dim: int = DEFAULT_LATENT_DIM
    seq_len: int = DEFAULT_SEQ_LEN
    frame_rate: float = DEFAULT_FRAME_RATE
    ar_coeff: float = 0.9
    innovation_scale: float = 1.0
    mixture_weights: tuple[float, ...] = (1.0,)
    mixture_means: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise SourceError(f"unknown source kind {self.kind!r}; expected one of {SOURCE_KINDS}")
        if self.latent_dim < 1 or self.seq_len < 1:
            raise SourceError("latent_dim and seq_len must be positive")
        if not abs(self.ar_coeff) < 1:
            raise SourceError(f"AR coefficient {self.ar_coeff} must have magnitude < 1 for stationarity")
        if self.innovation_scale <= 0:
            raise SourceError("innovation_scale must be positive")
        if self.kind == "gaussian-mixture-ar":
            if len(self.mixture_weights) != len(self.mixture_means):
                raise SourceError("mixture_weights and mixture_means must have equal length")
            if not self.mixture_weights:
                raise SourceError("mixture needs at least one component")
            if any(w < 0 for w in self.mixture_weights):
                raise SourceError("mixture weights must be non-negative")
            if abs(sum(self.mixture_weights) - 1.0) > 1e-9:
                raise SourceError(f"mixture weights sum to {sum(self.mixture_weights)}, expected 1")

    @property
    def stationary_std(self) -> float:
        """Stationary per-channel std of the AR(1) recursion without offsets."""
        return self.innovation_scale / math.sqrt(1.0 - self.ar_coeff**2)

    def offsets(self, dtype: torch.dtype = torch.float32) -> Tensor:
        """Per-component innovation mean offsets, broadcast over channels: (J, C)."""
        j = len(self.mixture_means)
        out = torch.tensor(self.mixture_means, dtype=dtype).unsqueeze(1)
        return out.expand(j, self.latent_dim)


@dataclass
class LatentSequence:
    """A sequence of continuous latent frames, (seq_len, latent_dim)."""

    frames: Tensor
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        if self.frames.dim() != 2 or self.frames.shape[0] < 1:
            raise SourceError(f"frames must be (S, C) with S >= 1, got {tuple(self.frames.shape)}")

    @property
    def seq_len(self) -> int:
        return self.frames.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.seq_len / self.frame_rate


def sample_sequences(
    spec: SourceSpec,
    count: int,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Draw (count, seq_len, latent_dim) sequences from an analytic source."""
    if spec.kind == "toy-vae":
        raise SourceError("toy-vae sequences come from an encoder; use vae.encode_corpus")
    gen = generator if generator is not None else torch.Generator().manual_seed(seed if seed is not None else 0)
    c, s = spec.latent_dim, spec.seq_len
    a, sig = spec.ar_coeff, spec.innovation_scale
    if count == 0:
        return torch.empty(0, s, c, dtype=dtype)
    eps = torch.randn(count, s, c, generator=gen, dtype=dtype)
    out = torch.empty(count, s, c, dtype=dtype)
    out[:, 0] = eps[:, 0] * spec.stationary_std
    offs = None
    if spec.kind == "gaussian-mixture-ar":
        weights = torch.tensor(spec.mixture_weights, dtype=dtype)
        comp = torch.multinomial(weights.expand(count * s, -1), 1, replacement=True, generator=gen)
        offs = spec.offsets(dtype)[comp.view(count, s)]
    for i in range(1, s):
        out[:, i] = a * out[:, i - 1] + sig * eps[:, i]
        if offs is not None:
            out[:, i] += offs[:, i]
    return out


def conditional_samples(
    spec: SourceSpec, prev_frame: Tensor, n: int, generator: torch.Generator, dtype: torch.dtype = torch.float32
) -> Tensor:
    """Draw n samples from the exact next-frame conditional given x^{s-1}."""
    if spec.kind == "toy-vae":
        raise SourceError("toy-vae has no closed-form conditional")
    prev = prev_frame.to(dtype).view(1, spec.latent_dim)
    mean = spec.ar_coeff * prev
    eps = torch.randn(n, spec.latent_dim, generator=generator, dtype=dtype)
    if spec.kind == "gaussian-mixture-ar":
        weights = torch.tensor(spec.mixture_weights, dtype=dtype)
        comp = torch.multinomial(weights.expand(n, -1), 1, replacement=True, generator=generator).squeeze(1)
        mean = mean + spec.offsets(dtype)[comp]
    return mean + spec.innovation_scale * eps


@dataclass
class NormStats:
    """Per-channel mean/std computed over a training corpus."""

    mean: Tensor
    std: Tensor

    @classmethod
    def from_frames(cls, frames: Tensor) -> "NormStats":
        """Fit stats over (N, C) or (B, S, C) frames; zero-variance channels are an error."""
        flat = frames.reshape(-1, frames.shape[-1]).to(torch.float64)
        mean = flat.mean(dim=0)
        std = flat.std(dim=0, unbiased=False)
        bad = (std <= 0).nonzero().flatten().tolist()
        if bad:
            raise SourceError(f"zero-variance channel(s) {bad}: cannot normalize")
        return cls(mean=mean.to(frames.dtype), std=std.to(frames.dtype))

    @classmethod
    def identity(cls, latent_dim: int, dtype: torch.dtype = torch.float32) -> "NormStats":
        return cls(mean=torch.zeros(latent_dim, dtype=dtype), std=torch.ones(latent_dim, dtype=dtype))

    def normalize(self, x: Tensor) -> Tensor:
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def denormalize(self, x: Tensor) -> Tensor:
        return x * self.std.to(x.dtype) + self.mean.to(x.dtype)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()}, indent=2) + "\n"
        )

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        raw = json.loads(Path(path).read_text())
        return cls(mean=torch.tensor(raw["mean"], dtype=torch.float32), std=torch.tensor(raw["std"], dtype=torch.float32))


# Corpus files: fixed header then row-major little-endian frames.
_CORPUS_MAGIC = b"LSEQ"
_CORPUS_VERSION = 1
_CORPUS_DTYPES = {0: torch.float32, 1: torch.float64}


@dataclass
class Corpus:
    """A stack of equal-length latent sequences."""

    data: Tensor  # (count, seq_len, latent_dim)
    frame_rate: float = DEFAULT_FRAME_RATE

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def seq_len(self) -> int:
        return self.data.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.data.shape[2]

    def sequence(self, i: int) -> LatentSequence:
        return LatentSequence(self.data[i], self.frame_rate)


def save_corpus(path: str | Path, corpus: Corpus) -> None:
    """Write a corpus file: header (dims, frame rate, count) + LE payload."""
    data = corpus.data
    if data.dim() != 3:
        raise SourceError(f"corpus data must be (count, S, C), got {tuple(data.shape)}")
    code = {torch.float32: 0, torch.float64: 1}.get(data.dtype)
    if code is None:
        raise SourceError(f"unsupported corpus dtype {data.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CORPUS_MAGIC)
        fh.write(
            struct.pack(
                "<HBIIQd",
                _CORPUS_VERSION,
                code,
                corpus.latent_dim,
                corpus.seq_len,
                corpus.count,
                corpus.frame_rate,
            )
        )
        arr = data.detach().contiguous().numpy()
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_corpus(path: str | Path) -> Corpus:
    """Read a corpus file written by save_corpus."""
    import numpy as np

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CORPUS_MAGIC:
        raise SourceError(f"not a corpus file: {path}")
    version, code, c, s, count, frame_rate = struct.unpack_from("<HBIIQd", blob, 4)
    if version != _CORPUS_VERSION:
        raise SourceError(f"unsupported corpus version {version}")
    if code not in _CORPUS_DTYPES:
        raise SourceError(f"unknown corpus dtype code {code}")
    dtype = _CORPUS_DTYPES[code]
    np_dtype = np.dtype("float32" if dtype == torch.float32 else "float64").newbyteorder("<")
    header = struct.calcsize("<HBIIQd") + 4
    n = count * s * c
    arr = np.frombuffer(blob, dtype=np_dtype, count=n, offset=header)
    if header + arr.nbytes != len(blob):
        raise SourceError(f"corpus payload size mismatch in {path}")
    data = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True)).reshape(count, s, c)
    return Corpus(data=data, frame_rate=frame_rate)
