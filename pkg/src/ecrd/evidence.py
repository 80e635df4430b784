"""Evidence pool and evidence-based candidate scoring.

Each evidence sentence supports a candidate token by the mean of the
candidate's probability over all prefixes of the sentence; the pool
averages those supports. Region annotations ride along with an evidence
for inspection only and are never read while scoring.
"""

from __future__ import annotations

import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ecrd.backends import BackendError, ScoringBackend
from ecrd.dist import CandidateSet

ZERO_SUPPORT = 1e-12
GLOBAL = "global_description"
DECIDER = "decider"


class EvidenceError(ValueError):
    pass


class ScoringError(BackendError):
    def __init__(self, message: str, *, evidence_id: str, prefix_len: int, attempts: int = 1):
        super().__init__(message, attempts=attempts)
        self.evidence_id = evidence_id
        self.prefix_len = prefix_len


@dataclass(frozen=True)
class RegionAnnotation:
    bbox: tuple[float, float, float, float]
    label: str | None = None

    def __post_init__(self):
        if len(self.bbox) != 4:
            raise EvidenceError("bbox needs four coordinates")
        object.__setattr__(self, "bbox", tuple(self.bbox))
        x0, y0, x1, y1 = self.bbox
        if min(self.bbox) < 0 or x0 > x1 or y0 > y1:
            raise EvidenceError(f"invalid bbox {self.bbox}")

    def to_dict(self) -> dict:
        return {"bbox": list(self.bbox), "label": self.label}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegionAnnotation":
        return cls(tuple(d["bbox"]), d.get("label"))


@dataclass(frozen=True)
class Provenance:
    kind: str
    step: int | None = None

    def __post_init__(self):
        if self.kind not in (GLOBAL, DECIDER):
            raise EvidenceError(f"unknown provenance kind {self.kind!r}")
        if self.kind == DECIDER and self.step is None:
            raise EvidenceError("decider evidence must record its step")

    @classmethod
    def global_description(cls) -> "Provenance":
        return cls(GLOBAL)

    @classmethod
    def decider(cls, step: int) -> "Provenance":
        return cls(DECIDER, step)


@dataclass(frozen=True)
class Evidence:
    id: str
    text: str
    tokens: tuple[int, ...]
    provenance: Provenance
    annotations: tuple[RegionAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if not self.tokens:
            raise EvidenceError(f"evidence {self.id!r} has no tokens")

    @classmethod
    def from_text(cls, id: str, text: str, tokenizer, provenance: Provenance,
                  annotations: Iterable[RegionAnnotation] = ()) -> "Evidence":
        return cls(id, text, tuple(tokenizer.tokenize(text)), provenance, tuple(annotations))

    def __len__(self) -> int:
        return len(self.tokens)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "tokens": list(self.tokens),
            "provenance": {"kind": self.provenance.kind, "step": self.provenance.step},
            "annotations": [a.to_dict() for a in self.annotations],
        }

    @classmethod
    def from_dict(cls, d: Mapping, tokenizer=None) -> "Evidence":
        tokens = d.get("tokens")
        if tokens is None:
            if tokenizer is None:
                raise EvidenceError(f"evidence {d['id']!r} carries no tokens and no tokenizer was given")
            tokens = tokenizer.tokenize(d["text"])
        prov = d["provenance"]
        return cls(d["id"], d["text"], tuple(tokens), Provenance(prov["kind"], prov.get("step")),
                   tuple(RegionAnnotation.from_dict(a) for a in d.get("annotations", [])))


class EvidencePool:
    """Append-only ordered evidence collection for one decode."""

    def __init__(self, evidences: Iterable[Evidence] = ()):
        self._evidences: list[Evidence] = []
        self._ids: set[str] = set()
        for ev in evidences:
            self.append(ev)

    def append(self, ev: Evidence) -> "EvidencePool":
        if ev.id in self._ids:
            raise EvidenceError(f"duplicate evidence id {ev.id!r}")
        self._evidences.append(ev)
        self._ids.add(ev.id)
        return self

    @property
    def evidences(self) -> tuple[Evidence, ...]:
        return tuple(self._evidences)

    @property
    def N(self) -> int:
        return len(self._evidences)

    def __len__(self) -> int:
        return len(self._evidences)

    def __iter__(self):
        return iter(tuple(self._evidences))

    def __getitem__(self, i: int) -> Evidence:
        return self._evidences[i]

    def __eq__(self, other):
        return isinstance(other, EvidencePool) and self.evidences == other.evidences

    def to_dict(self) -> dict:
        return {"evidences": [ev.to_dict() for ev in self._evidences]}

    @classmethod
    def from_dict(cls, d: Mapping, tokenizer=None) -> "EvidencePool":
        return cls(Evidence.from_dict(e, tokenizer) for e in d["evidences"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path, tokenizer=None) -> "EvidencePool":
        return cls.from_dict(json.loads(Path(path).read_text()), tokenizer)


def append(pool: EvidencePool, ev: Evidence) -> EvidencePool:
    return pool.append(ev)


class PrefixSupportCache:
    """Conditionals keyed by (evidence id, prefix length, token).

    With ``precision="float16"`` values are stored at half precision; the
    round trip then loses up to ~5e-4 absolute on probabilities in [0, 1].
    """

    def __init__(self, precision: str = "float64"):
        if precision not in ("float64", "float32", "float16"):
            raise ValueError(f"unsupported cache precision {precision!r}")
        self.precision = precision
        self._dtype = np.dtype(precision)
        self._store: dict[tuple[str, int, int], float] = {}
        self._lock = threading.Lock()

    def get(self, ev_id: str, j: int, token: int) -> float | None:
        v = self._store.get((ev_id, j, token))
        return None if v is None else float(v)

    def put(self, ev_id: str, j: int, token: int, value: float) -> None:
        stored = value if self.precision == "float64" else self._dtype.type(value)
        with self._lock:
            self._store.setdefault((ev_id, j, token), stored)

    def __contains__(self, key) -> bool:
        return key in self._store

    def __len__(self) -> int:
        return len(self._store)


@dataclass
class EvidenceDistribution:
    r: dict[int, float]
    pooled: dict[int, float]
    fallback: bool = False


class EvidenceScorer:
    """Scores candidate tokens against evidence through a scoring backend.

    The evidence prefix is wrapped in ``template`` (``{prefix}`` marks where
    the prefix tokens go) before querying the backend. Backends that declare
    concurrent support can be fanned out over evidences with ``max_workers``.
    """

    def __init__(self, backend: ScoringBackend, *, template: str = "{prefix}", ctx: str | None = None,
                 precision: str = "float64", max_workers: int = 1):
        if template.count("{prefix}") != 1:
            raise ValueError("template must contain exactly one '{prefix}' placeholder")
        self.backend = backend
        self.template = template
        self.ctx = ctx
        self.cache = PrefixSupportCache(precision)
        self.max_workers = max_workers if backend.capabilities.concurrent else 1
        self._wrap: tuple[tuple[int, ...], tuple[int, ...]] | None = None

    def _wrapping(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if self._wrap is None:
            head, tail = self.template.split("{prefix}")
            tok = self.backend.tokenize
            self._wrap = (tuple(tok(head)) if head.strip() else (), tuple(tok(tail)) if tail.strip() else ())
        return self._wrap

    def prefix_context(self, ev: Evidence, j: int) -> list[int]:
        """Token context for ``e_<j`` (``j`` is 1-based; ``j=1`` is the empty prefix)."""
        head, tail = self._wrapping()
        return [*head, *ev.tokens[: j - 1], *tail]

    def conditionals(self, tokens: Sequence[int], ev: Evidence) -> list[dict[int, float]]:
        """``p(t | e_<j)`` for every requested token and every j in 1..L."""
        rows = []
        for j in range(1, len(ev) + 1):
            missing = [t for t in tokens if (ev.id, j, t) not in self.cache]
            if missing:
                try:
                    got = self.backend.score_conditionals(missing, self.prefix_context(ev, j), self.ctx)
                except BackendError as e:
                    raise ScoringError(f"scoring evidence {ev.id!r} at prefix {j}: {e}",
                                       evidence_id=ev.id, prefix_len=j,
                                       attempts=getattr(e, "attempts", 1)) from e
                for t in missing:
                    p = float(got[t])
                    if not 0.0 <= p <= 1.0:
                        raise ScoringError(f"conditional {p} out of range", evidence_id=ev.id, prefix_len=j)
                    self.cache.put(ev.id, j, t, p)
            rows.append({t: self.cache.get(ev.id, j, t) for t in tokens})
        return rows

    def support(self, tokens: Sequence[int], ev: Evidence) -> dict[int, float]:
        rows = self.conditionals(tokens, ev)
        L = len(ev)
        return {t: sum(row[t] for row in rows) / L for t in tokens}

    def pooled_means(self, tokens: Sequence[int], pool: EvidencePool) -> dict[int, float]:
        if pool.N == 0:
            raise EvidenceError("empty evidence pool")
        tokens = list(tokens)
        evs = pool.evidences
        if self.max_workers > 1 and len(evs) > 1:
            with ThreadPoolExecutor(self.max_workers) as ex:
                supports = list(ex.map(lambda ev: self.support(tokens, ev), evs))
        else:
            supports = [self.support(tokens, ev) for ev in evs]
        N = len(evs)
        return {t: sum(s[t] for s in supports) / N for t in tokens}

    def vdgd_scores(self, tokens: Sequence[int], desc: Evidence) -> dict[int, float]:
        rows = self.conditionals(tokens, desc)
        return {t: min(_neg_log(row[t]) for row in rows) for t in tokens}


def _neg_log(p: float) -> float:
    return math.inf if p <= 0.0 else -math.log(p)


def _as_scorer(backend) -> EvidenceScorer:
    return backend if isinstance(backend, EvidenceScorer) else EvidenceScorer(backend)


def prefix_mean_support(w: int, ev: Evidence, backend) -> float:
    return _as_scorer(backend).support([w], ev)[w]


def pooled_score(w: int, pool: EvidencePool, backend) -> float:
    """Negative log of the pool-averaged support; ``inf`` when nothing supports ``w``."""
    return _neg_log(_as_scorer(backend).pooled_means([w], pool)[w])


def evidence_distribution(cands: CandidateSet, pool: EvidencePool, backend) -> EvidenceDistribution:
    """Evidence-induced distribution over the candidate set.

    ``exp(-S(w))`` is the pooled mean itself, so the softmax over candidates
    reduces to normalizing the pooled means. If no candidate has support the
    result is uniform and ``fallback`` is set.
    """
    ids = cands.ids
    pooled = _as_scorer(backend).pooled_means(ids, pool)
    if all(pooled[t] < ZERO_SUPPORT for t in ids):
        return EvidenceDistribution({t: 1.0 / len(ids) for t in ids}, pooled, fallback=True)
    z = sum(pooled[t] for t in ids)
    return EvidenceDistribution({t: pooled[t] / z for t in ids}, pooled)


def vdgd_min_kl(w: int, desc: Evidence, backend) -> float:
    """Best-prefix deviation ``min_j -log p(w | d_<j)`` of the description baseline."""
    return _as_scorer(backend).vdgd_scores([w], desc)[w]
