"""Threshold sweeps over frozen traces or live decodes of a prompt corpus."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from ecrd.engine import DecodeTrace, replay

DEFAULT_GRID = (0.00, 0.02, 0.04, 0.06, 0.08, 0.12, 0.16)
COLUMNS = ("delta", "r", "mean_time", "score")


@dataclass(frozen=True)
class SweepRow:
    delta: float
    r: float
    mean_time: float | None = None
    score: float | None = None


@dataclass
class SweepReport:
    rows: list[SweepRow]

    def __post_init__(self):
        deltas = [row.delta for row in self.rows]
        if any(b <= a for a, b in zip(deltas, deltas[1:])):
            raise ValueError("sweep grid must be strictly increasing")

    @property
    def grid(self) -> list[float]:
        return [row.delta for row in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in self.rows:
            w.writerow([repr(row.delta), repr(row.r),
                        "" if row.mean_time is None else repr(row.mean_time),
                        "" if row.score is None else repr(row.score)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SweepReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            opt = lambda k: float(rec[k]) if rec.get(k) not in (None, "") else None
            rows.append(SweepRow(float(rec["delta"]), float(rec["r"]), opt("mean_time"), opt("score")))
        return cls(rows)


def check_grid(grid: Sequence[float]) -> list[float]:
    grid = [float(d) for d in grid]
    if not grid:
        raise ValueError("empty delta grid")
    if any(not 0.0 <= d <= 1.0 for d in grid):
        raise ValueError("grid values must lie in [0, 1]")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly increasing")
    return grid


def sweep_frozen(traces: Sequence[DecodeTrace], grid: Sequence[float] = DEFAULT_GRID) -> SweepReport:
    """Mean replayed trigger count per threshold. Times are not observed on replay and stay empty."""
    grid = check_grid(grid)
    if not traces:
        raise ValueError("empty corpus")
    rows = []
    for d in grid:
        counts = [replay(t, d).triggers for t in traces]
        rows.append(SweepRow(d, sum(counts) / len(counts)))
    return SweepReport(rows)


@dataclass(frozen=True)
class CorpusItem:
    id: str
    prompt: str
    context_id: str | None = None
    global_description: str | None = None
    answer: str | None = None
    verdicts: list | None = None


def read_corpus(path: str | Path) -> list[CorpusItem]:
    items = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if line.strip():
            d = json.loads(line)
            d.setdefault("id", str(i))
            items.append(CorpusItem(**d))
    if not items:
        raise ValueError(f"empty corpus: {path}")
    return items


def exact_match(text: str, answer: str) -> bool:
    return " ".join(text.split()) == " ".join(answer.split())


def sweep_decode(items: Sequence[CorpusItem], grid: Sequence[float],
                 run: Callable[[CorpusItem, float], DecodeTrace], jobs: int = 1) -> SweepReport:
    """Decode every corpus item at every threshold via ``run(item, delta)``.

    The score column is exact-match accuracy over items that carry an answer
    and stays empty when none do.
    """
    grid = check_grid(grid)
    if not items:
        raise ValueError("empty corpus")
    rows = []
    for d in grid:
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as ex:
                traces = list(ex.map(lambda it: run(it, d), items))
        else:
            traces = [run(it, d) for it in items]
        r = sum(t.decider_calls for t in traces) / len(traces)
        mean_time = sum(t.totals["wall_time"] for t in traces) / len(traces)
        keyed = [(it, t) for it, t in zip(items, traces) if it.answer is not None]
        score = (sum(exact_match(t.final_text, it.answer) for it, t in keyed) / len(keyed)) if keyed else None
        rows.append(SweepRow(d, r, mean_time, score))
    return SweepReport(rows)
