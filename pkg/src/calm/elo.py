"""Bayesian Bradley-Terry ratings from pairwise comparisons.

Strengths follow a Gamma(alpha0, beta0) prior and are iterated to the
posterior-mean fixed point; ratings map through E = 400 log10(S) + c with
credible intervals read off the Gamma posterior percentiles. Ties count
as half a win for each side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import scipy.stats

OUTCOMES = ("a_wins", "b_wins", "tie")


class EloError(ValueError):
    """Invalid comparison records or fit parameters."""


@dataclass(frozen=True)
class ComparisonRecord:
    system_a: str
    system_b: str
    outcome: str

    def __post_init__(self):
        if self.system_a == self.system_b:
            raise EloError(f"self-comparison for {self.system_a!r}")
        if self.outcome not in OUTCOMES:
            raise EloError(f"outcome {self.outcome!r} not in {OUTCOMES}")


@dataclass
class EloRating:
    system: str
    strength: float
    elo: float
    ci_low: float
    ci_high: float


def win_probability(elo_a: float, elo_b: float) -> float:
    """P(A beats B) = 1 / (1 + 10^((E_B - E_A) / 400))."""
    return 1.0 / (1.0 + 10.0 ** ((elo_b - elo_a) / 400.0))


def tally(
    records: Iterable[ComparisonRecord], systems: Sequence[str]
) -> tuple[dict[str, float], dict[tuple[str, str], int]]:
    """Half-win tie expansion: per-system win totals and pair counts."""
    index = set(systems)
    wins = {s: 0.0 for s in systems}
    pairs: dict[tuple[str, str], int] = {}
    for rec in records:
        for s in (rec.system_a, rec.system_b):
            if s not in index:
                raise EloError(f"record references unknown system {s!r}")
        key = (min(rec.system_a, rec.system_b), max(rec.system_a, rec.system_b))
        pairs[key] = pairs.get(key, 0) + 1
        if rec.outcome == "a_wins":
            wins[rec.system_a] += 1.0
        elif rec.outcome == "b_wins":
            wins[rec.system_b] += 1.0
        else:
            wins[rec.system_a] += 0.5
            wins[rec.system_b] += 0.5
    return wins, pairs


def _pair_count(pairs: dict[tuple[str, str], int], a: str, b: str) -> int:
    return pairs.get((min(a, b), max(a, b)), 0)


def elo_of_strength(strength: float, c: float = 2000.0) -> float:
    return 400.0 * math.log10(strength) + c


def fit(
    records: Iterable[ComparisonRecord],
    systems: Sequence[str] | None = None,
    alpha0: float = 0.1,
    beta0: float = 0.1,
    c: float = 2000.0,
    iters: int = 30,
) -> list[EloRating]:
    """Iterate the Gamma-posterior mean update to its fixed point.

    S_A <- (alpha0 + w_A) / (beta0 + sum_B n_AB / (S_A + S_B)); with no
    data every system sits at S = alpha0 / beta0 = 1, i.e. E = c. The 95%
    interval maps the 2.5th/97.5th Gamma posterior percentiles through the
    same strength-to-rating transform.
    """
    records = list(records)
    if systems is None:
        seen: list[str] = []
        for rec in records:
            for s in (rec.system_a, rec.system_b):
                if s not in seen:
                    seen.append(s)
        systems = seen
    wins, pairs = tally(records, systems)
    strength = {s: alpha0 / beta0 for s in systems}
    for _ in range(iters):
        new = {}
        for a in systems:
            denom = beta0
            for b in systems:
                if b == a:
                    continue
                n_ab = _pair_count(pairs, a, b)
                if n_ab:
                    denom += n_ab / (strength[a] + strength[b])
            new[a] = (alpha0 + wins[a]) / denom
        strength = new

    ratings = []
    for a in systems:
        alpha_post = alpha0 + wins[a]
        beta_post = beta0
        for b in systems:
            if b != a:
                n_ab = _pair_count(pairs, a, b)
                if n_ab:
                    beta_post += n_ab / (strength[a] + strength[b])
        low, high = scipy.stats.gamma.ppf([0.025, 0.975], a=alpha_post, scale=1.0 / beta_post)
        ratings.append(
            EloRating(
                system=a,
                strength=strength[a],
                elo=elo_of_strength(strength[a], c),
                ci_low=elo_of_strength(float(low), c),
                ci_high=elo_of_strength(float(high), c),
            )
        )
    return ratings


def sweep_delta(
    records: Iterable[ComparisonRecord],
    systems: Sequence[str] | None = None,
    alpha0: float = 0.1,
    beta0: float = 0.1,
    iters: int = 30,
) -> float:
    """Largest strength change produced by one extra update sweep."""
    base = {r.system: r.strength for r in fit(records, systems, alpha0, beta0, iters=iters)}
    more = {r.system: r.strength for r in fit(records, systems, alpha0, beta0, iters=iters + 1)}
    return max(abs(more[s] - base[s]) for s in base)
