"""Token distributions, deterministic sorting and knee truncation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

PROB_TOL = 1e-6


class DistributionError(ValueError):
    pass


@dataclass(frozen=True)
class TokenDistribution:
    """Next-token distribution, possibly sparse.

    ``probs`` enumerates some tokens explicitly; whatever mass they do not
    cover is carried in ``residual_mass`` (remote providers only expose top-k).
    """

    probs: Mapping[int, float]
    residual_mass: float = 0.0
    vocab_size: int | None = None

    def __post_init__(self):
        probs = {int(k): float(v) for k, v in self.probs.items()}
        object.__setattr__(self, "probs", probs)
        for tok, p in probs.items():
            if not 0.0 <= p <= 1.0:
                raise DistributionError(f"probability of token {tok} out of range: {p}")
        if self.residual_mass < 0.0:
            raise DistributionError(f"negative residual mass: {self.residual_mass}")
        total = sum(probs.values()) + self.residual_mass
        if abs(total - 1.0) > PROB_TOL:
            raise DistributionError(f"distribution sums to {total}, not 1")
        if self.vocab_size is not None and len(probs) > self.vocab_size:
            raise DistributionError("more enumerated tokens than vocabulary entries")

    @classmethod
    def from_topk(cls, probs: Mapping[int, float], vocab_size: int | None = None) -> "TokenDistribution":
        """Build from a truncated top-k listing; the remainder becomes residual mass."""
        probs = {int(k): float(v) for k, v in probs.items()}
        total = sum(probs.values())
        if total > 1.0:
            # provider rounding can push the listed mass slightly above 1
            if total - 1.0 > PROB_TOL:
                probs = {k: v / total for k, v in probs.items()}
            total = 1.0
            residual = 0.0
        else:
            residual = min(max(1.0 - total, 0.0), 1.0)
        return cls(probs, residual, vocab_size)

    def __len__(self) -> int:
        return len(self.probs)

    def get(self, token: int) -> float:
        return self.probs.get(token, 0.0)

    def argmax(self) -> int:
        return sort_descending(self)[0][0]


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[tuple[int, float], ...]
    knee_index: int
    covered_mass: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple((int(t), float(p)) for t, p in self.candidates))
        if self.knee_index < 1 or len(self.candidates) != self.knee_index:
            raise DistributionError("candidate count must equal the knee index")
        object.__setattr__(self, "covered_mass", sum(p for _, p in self.candidates))

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(t for t, _ in self.candidates)

    def __contains__(self, token: int) -> bool:
        return token in self.ids

    def __len__(self) -> int:
        return self.knee_index


def _rank_key(item: tuple[int, float]):
    tok, p = item
    return (-p, tok)


def sort_descending(dist: TokenDistribution | Mapping[int, float]) -> list[tuple[int, float]]:
    """Enumerated tokens by probability, highest first; ties go to the lower id."""
    probs = dist.probs if isinstance(dist, TokenDistribution) else dist
    if not probs:
        raise DistributionError("empty distribution")
    return sorted(probs.items(), key=_rank_key)


def knee_index(sorted_probs: list[float]) -> int:
    """1-based k maximizing ``p[k] - p[k+1]``; the first maximum wins."""
    n = len(sorted_probs)
    if n == 0:
        raise DistributionError("empty distribution")
    if n == 1:
        return 1
    best_k, best_gap = 1, sorted_probs[0] - sorted_probs[1]
    for k in range(2, n):
        gap = sorted_probs[k - 1] - sorted_probs[k]
        if gap > best_gap:
            best_k, best_gap = k, gap
    return best_k


def knee_truncate(dist: TokenDistribution) -> CandidateSet:
    ranked = sort_descending(dist)
    k = knee_index([p for _, p in ranked])
    return CandidateSet(tuple(ranked[:k]), k)
