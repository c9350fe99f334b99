"""Quality and efficiency evaluation: Frechet distance over fixed seeded
embeddings, pairwise-similarity diversity, energy two-sample oracle tests,
and wall-time benchmarking with speedup/sampler-share accounting."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import torch

from calm.sources import SourceSpec, conditional_samples

Tensor = torch.Tensor


class EvalError(ValueError):
    """Invalid evaluation input."""


class Embedder:
    """Fixed random linear projection of flattened frame windows, then tanh.

    Frozen at construction from a seed; the same embedder must be applied
    to every system being compared.
    """

    def __init__(self, latent_dim: int, window_len: int = 16, embed_dim: int = 32, seed: int = 0):
        self.latent_dim = latent_dim
        self.window_len = window_len
        self.embed_dim = embed_dim
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        n_in = window_len * latent_dim
        self.proj = torch.randn(n_in, embed_dim, generator=gen, dtype=torch.float64) / math.sqrt(n_in)

    def window_embeddings(self, frames: Tensor) -> Tensor:
        """(S, C) frames -> (n_windows, E) embeddings of non-overlapping windows."""
        s, c = frames.shape
        if c != self.latent_dim:
            raise EvalError(f"embedder expects {self.latent_dim} channels, got {c}")
        w = self.window_len
        if s < w:
            raise EvalError(f"sequence of {s} frames shorter than window {w}")
        n = s // w
        flat = frames[: n * w].reshape(n, w * c).to(torch.float64)
        return torch.tanh(flat @ self.proj)

    def sequence_embedding(self, frames: Tensor) -> Tensor:
        """Single pooled embedding per generation: mean over window embeddings."""
        return self.window_embeddings(frames).mean(dim=0)

    def embed_set(self, sequences: Tensor) -> Tensor:
        """(N, S, C) -> all window embeddings stacked, for distribution fitting."""
        n_seq, s, c = sequences.shape
        if c != self.latent_dim:
            raise EvalError(f"embedder expects {self.latent_dim} channels, got {c}")
        w = self.window_len
        if s < w:
            raise EvalError(f"sequences of {s} frames shorter than window {w}")
        n = s // w
        flat = sequences[:, : n * w].reshape(n_seq * n, w * c).to(torch.float64)
        return torch.tanh(flat @ self.proj)

    def sequence_embeddings(self, sequences: Tensor) -> Tensor:
        """(N, S, C) -> one pooled embedding per sequence, (N, E)."""
        n_seq, s, _ = sequences.shape
        n = s // self.window_len
        return self.embed_set(sequences).reshape(n_seq, n, self.embed_dim).mean(dim=1)


@dataclass
class FrechetReport:
    """Frechet distance between Gaussians fitted to two embedding sets."""

    distance: float
    mean_a: Tensor
    mean_b: Tensor
    cov_a: Tensor
    cov_b: Tensor
    count_a: int
    count_b: int
    ci_low: float | None = None
    ci_high: float | None = None
    jittered: bool = False


def _sqrtm_psd(mat: Tensor) -> Tensor:
    """Symmetric PSD square root via eigendecomposition, clipping negatives at 0."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = torch.linalg.eigh(sym)
    vals = vals.clamp_min(0.0)
    return (vecs * vals.sqrt()) @ vecs.T


def _gaussian_moments(x: Tensor) -> tuple[Tensor, Tensor]:
    mu = x.mean(dim=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    return mu, cov


def frechet_from_moments(
    mean_a: Tensor, cov_a: Tensor, mean_b: Tensor, cov_b: Tensor, jitter: float = 1e-6
) -> tuple[float, bool]:
    """Squared Frechet distance between two Gaussians; returns (value, jitter applied)."""
    mean_a, cov_a = mean_a.double(), cov_a.double()
    mean_b, cov_b = mean_b.double(), cov_b.double()
    jittered = False
    for cov in (cov_a, cov_b):
        if torch.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < 1e-10:
            jittered = True
    if jittered:
        eye = torch.eye(cov_a.shape[0], dtype=torch.float64)
        cov_a = cov_a + jitter * eye
        cov_b = cov_b + jitter * eye
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    d2 = ((mean_a - mean_b) ** 2).sum() + torch.trace(cov_a) + torch.trace(cov_b) - 2 * torch.trace(cross)
    return max(float(d2), 0.0), jittered


def frechet_distance(
    emb_a: Tensor,
    emb_b: Tensor,
    n_bootstrap: int = 200,
    seed: int = 0,
) -> FrechetReport:
    """Fit Gaussians to two embedding sets and report their Frechet distance.

    Needs at least E+1 samples per set. A bootstrap percentile interval
    (95%) over resampled embeddings is attached when n_bootstrap > 0.
    """
    emb_a = emb_a.double()
    emb_b = emb_b.double()
    e = emb_a.shape[1]
    if emb_b.shape[1] != e:
        raise EvalError(f"embedding dims differ: {e} vs {emb_b.shape[1]}")
    if emb_a.shape[0] < e + 1 or emb_b.shape[0] < e + 1:
        raise EvalError(f"need at least {e + 1} samples per set to fit {e}-dim Gaussians")
    mu_a, cov_a = _gaussian_moments(emb_a)
    mu_b, cov_b = _gaussian_moments(emb_b)
    d2, jittered = frechet_from_moments(mu_a, cov_a, mu_b, cov_b)
    ci_low = ci_high = None
    if n_bootstrap > 0:
        gen = torch.Generator().manual_seed(seed)
        draws = []
        for _ in range(n_bootstrap):
            ia = torch.randint(0, emb_a.shape[0], (emb_a.shape[0],), generator=gen)
            ib = torch.randint(0, emb_b.shape[0], (emb_b.shape[0],), generator=gen)
            ma, ca = _gaussian_moments(emb_a[ia])
            mb, cb = _gaussian_moments(emb_b[ib])
            draws.append(frechet_from_moments(ma, ca, mb, cb)[0])
        draws.sort()
        ci_low = draws[max(0, int(0.025 * n_bootstrap) - 1)]
        ci_high = draws[min(n_bootstrap - 1, int(math.ceil(0.975 * n_bootstrap)) - 1)]
    return FrechetReport(
        distance=d2,
        mean_a=mu_a,
        mean_b=mu_b,
        cov_a=cov_a,
        cov_b=cov_b,
        count_a=emb_a.shape[0],
        count_b=emb_b.shape[0],
        ci_low=ci_low,
        ci_high=ci_high,
        jittered=jittered,
    )


def diversity(embeddings: Tensor) -> float:
    """Mean cosine similarity over all unordered pairs of embeddings."""
    n = embeddings.shape[0]
    if n < 2:
        raise EvalError("diversity needs at least 2 generations")
    x = embeddings.double()
    norms = x.norm(dim=1)
    if (norms == 0).any():
        raise EvalError("zero-norm embedding in diversity computation")
    unit = x / norms.unsqueeze(1)
    gram = unit @ unit.T
    off_sum = gram.sum() - gram.diagonal().sum()
    return float(off_sum / (n * (n - 1)))


def energy_distance(x: Tensor, y: Tensor) -> float:
    """Unbiased two-sample energy distance estimate."""
    x, y = x.double(), y.double()
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise EvalError("energy distance needs at least 2 samples per set")
    dxy = torch.cdist(x, y).mean()
    dxx = torch.cdist(x, x).sum() / (n * (n - 1))
    dyy = torch.cdist(y, y).sum() / (m * (m - 1))
    return float(2 * dxy - dxx - dyy)


def energy_test(x: Tensor, y: Tensor, n_perm: int = 199, seed: int = 0) -> tuple[float, float]:
    """Permutation two-sample energy test; returns (statistic, p-value).

    All pairwise distances are computed once on the pooled sample; each
    permutation re-labels rows and re-reads the three block sums.
    """
    x, y = x.double(), y.double()
    n, m = x.shape[0], y.shape[0]
    pooled = torch.cat([x, y], dim=0)
    dist = torch.cdist(pooled, pooled)
    total = pooled.shape[0]

    def stat_for(mask_a: Tensor) -> Tensor:
        # mask_a: (total, P) with exactly n ones per column
        row = dist @ mask_a  # (total, P): row[i, p] = sum_j in A of d(i, j)
        s_aa = (mask_a * row).sum(dim=0)
        s_a_all = row.sum(dim=0)
        s_ab = s_a_all - s_aa
        s_all = dist.sum()
        s_bb = s_all - 2 * s_ab - s_aa
        return 2 * s_ab / (n * m) - s_aa / (n * (n - 1)) - s_bb / (m * (m - 1))

    obs_mask = torch.zeros(total, 1, dtype=torch.float64)
    obs_mask[:n, 0] = 1.0
    obs = stat_for(obs_mask).item()

    gen = torch.Generator().manual_seed(seed)
    masks = torch.zeros(total, n_perm, dtype=torch.float64)
    for p in range(n_perm):
        idx = torch.randperm(total, generator=gen)[:n]
        masks[idx, p] = 1.0
    perm_stats = stat_for(masks)
    p_value = (1.0 + (perm_stats >= obs).sum().item()) / (n_perm + 1.0)
    return obs, p_value


@dataclass
class OracleTestResult:
    statistic: float
    p_value: float
    n: int


def conditional_oracle_test(
    sample_model: Callable[[Tensor, int, int], Tensor],
    spec: SourceSpec,
    history: Tensor,
    n: int,
    seed: int = 0,
    n_perm: int = 199,
) -> OracleTestResult:
    """Compare model next-frame samples against the analytic conditional.

    sample_model(history, n, seed) must return (n, C) draws of the frame
    following the given (h, C) history. The analytic source provides the
    ground-truth conditional given the last history frame.
    """
    if n < 100:
        raise EvalError(f"need n >= 100 oracle samples, got {n}")
    model_draws = sample_model(history, n, seed)
    gen = torch.Generator().manual_seed(seed + 1)
    oracle_draws = conditional_samples(spec, history[-1], n, gen, dtype=torch.float64)
    stat, p = energy_test(model_draws, oracle_draws, n_perm=n_perm, seed=seed + 2)
    return OracleTestResult(statistic=stat, p_value=p, n=n)


class TraceLike(Protocol):
    """What bench() needs from a generation trace."""

    n_generated: int
    frame_rate: float

    def total_seconds(self) -> float: ...

    def stage_seconds(self) -> dict[str, float]: ...


@dataclass
class SystemTiming:
    name: str
    overall_speedup: float
    sampler_speedup: float
    pct_time_in_sampler: float
    rtf: float
    median_total: float
    median_sampler: float
    n_frames: int


@dataclass
class BenchReport:
    """Per-system timing summary against a named baseline."""

    baseline: str
    rows: list[SystemTiming] = field(default_factory=list)

    def row(self, name: str) -> SystemTiming:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def csv_rows(self) -> list[dict[str, object]]:
        return [
            {
                "system": r.name,
                "overall_speedup": f"{r.overall_speedup:.4f}",
                "sampler_speedup": f"{r.sampler_speedup:.4f}",
                "pct_time_in_sampler": f"{r.pct_time_in_sampler:.2f}",
                "rtf": f"{r.rtf:.4f}",
                "median_total_s": f"{r.median_total:.6f}",
                "median_sampler_s": f"{r.median_sampler:.6f}",
            }
            for r in self.rows
        ]


def bench(
    systems: Sequence[tuple[str, Callable[[int], TraceLike]]],
    baseline: str | None = None,
    n_runs: int = 20,
    n_warmup: int = 3,
) -> BenchReport:
    """Time every system over shared seeds; medians after warmup runs.

    Each system is a (name, run) pair where run(seed) performs one full
    generation and returns its trace. All systems must generate the same
    number of frames.
    """
    if n_runs < 1:
        raise EvalError("need at least one timed run")
    names = [name for name, _ in systems]
    baseline = baseline or names[0]
    if baseline not in names:
        raise EvalError(f"baseline {baseline!r} not among systems {names}")

    totals: dict[str, list[float]] = {}
    samplers: dict[str, list[float]] = {}
    frames: dict[str, int] = {}
    frame_rate = None
    for name, run in systems:
        for w in range(n_warmup):
            run(10_000 + w)
        t_list, s_list = [], []
        for r in range(n_runs):
            trace = run(r)
            t_list.append(trace.total_seconds())
            s_list.append(trace.stage_seconds().get("sampler", 0.0))
            if name in frames and frames[name] != trace.n_generated:
                raise EvalError(f"{name} generated varying frame counts")
            frames[name] = trace.n_generated
            frame_rate = trace.frame_rate
        totals[name] = t_list
        samplers[name] = s_list
    counts = set(frames.values())
    if len(counts) > 1:
        raise EvalError(f"systems generated different frame counts: {frames}")

    base_total = statistics.median(totals[baseline])
    base_sampler = statistics.median(samplers[baseline])
    report = BenchReport(baseline=baseline)
    for name in names:
        med_t = statistics.median(totals[name])
        med_s = statistics.median(samplers[name])
        report.rows.append(
            SystemTiming(
                name=name,
                overall_speedup=base_total / med_t,
                sampler_speedup=base_sampler / med_s if med_s > 0 else float("inf"),
                pct_time_in_sampler=100.0 * med_s / med_t,
                rtf=(frames[name] / frame_rate) / med_t if frame_rate else 0.0,
                median_total=med_t,
                median_sampler=med_s,
                n_frames=frames[name],
            )
        )
    return report


def render_table(headers: list[str], rows: list[list[str]]) -> str:
    """Aligned-column plain-text table."""
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"


def render_bench_table(report: BenchReport, fad: dict[str, tuple[float, float | None, float | None]] | None = None) -> str:
    """Benchmark rows in the comparison-table layout, optionally with FAD."""
    headers = ["System", "Overall Speedup", "Sampler Speedup", "% Time in Sampler", "RTF"]
    if fad is not None:
        headers.append("FAD")
    rows = []
    for r in report.rows:
        row = [
            r.name,
            f"x{r.overall_speedup:.2f}",
            f"x{r.sampler_speedup:.2f}" if math.isfinite(r.sampler_speedup) else "-",
            f"{r.pct_time_in_sampler:.1f}%",
            f"x{r.rtf:.2f}",
        ]
        if fad is not None:
            if r.name in fad:
                d, lo, hi = fad[r.name]
                row.append(f"{d:.3f}" + (f" [{lo:.3f}, {hi:.3f}]" if lo is not None else ""))
            else:
                row.append("-")
        rows.append(row)
    return render_table(headers, rows)
