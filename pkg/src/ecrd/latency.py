"""Linear end-to-end latency model: time per question = t0 + l0 * decider calls."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class LatencyModel:
    t0: float
    l0: float
    residual: float
    n: int = 0

    def predict(self, r: float) -> float:
        return self.t0 + self.l0 * r

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "LatencyModel":
        return cls(**json.loads(Path(path).read_text()))


def fit_latency_model(observations: Iterable[tuple[float, float]]) -> LatencyModel:
    """Ordinary least squares over (calls, seconds) pairs; residual is the RMSE."""
    obs = np.asarray(list(observations), dtype=float)
    if obs.ndim != 2 or obs.shape[1] != 2 or len(obs) < 2:
        raise ValueError("need at least two (r, T) observations")
    r, T = obs[:, 0], obs[:, 1]
    if np.all(r == r[0]):
        raise ValueError("underdetermined: all observations share one decider-call count")
    X = np.column_stack([np.ones_like(r), r])
    (t0, l0), *_ = np.linalg.lstsq(X, T, rcond=None)
    rmse = float(np.sqrt(np.mean((T - X @ np.array([t0, l0])) ** 2)))
    if t0 <= 0:
        raise ValueError(f"fitted base time {t0:.4g} s is not positive")
    return LatencyModel(float(t0), float(l0), rmse, len(obs))


def read_observations(path: str | Path) -> list[tuple[float, float]]:
    """Observations from CSV (columns ``r`` and ``T`` or ``mean_time``) or JSON."""
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        return [(float(o["r"]), float(o["T"])) if isinstance(o, dict) else (float(o[0]), float(o[1]))
                for o in data]
    out = []
    with path.open(newline="") as f:
        for row in csv.DictReader(f):
            t = row.get("T") or row.get("mean_time")
            if t in (None, ""):
                continue
            out.append((float(row["r"]), float(t)))
    return out
