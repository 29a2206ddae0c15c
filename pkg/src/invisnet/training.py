"""Shared training-loop pieces: batching, divergence guard, loss logs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DivergenceError(RuntimeError):
    pass


@dataclass
class History:
    columns: Sequence[str]
    rows: list[list[float]] = field(default_factory=list)

    def append(self, *values: float) -> None:
        self.rows.append([float(v) for v in values])

    def column(self, name: str) -> list[float]:
        i = list(self.columns).index(name)
        return [r[i] for r in self.rows]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([f"{v:.10g}" for v in r])


class DivergenceGuard:
    """Abort when the epoch loss exceeds ``factor`` x the first epoch for ``patience`` epochs in a row."""

    def __init__(self, factor: float = 10.0, patience: int = 3, name: str = "training"):
        self.factor = factor
        self.patience = patience
        self.name = name
        self.initial: float | None = None
        self.strikes = 0

    def update(self, loss: float) -> None:
        if not np.isfinite(loss):
            raise DivergenceError(f"{self.name}: loss became non-finite ({loss})")
        if self.initial is None:
            self.initial = loss
            return
        if loss > self.factor * self.initial:
            self.strikes += 1
            if self.strikes >= self.patience:
                raise DivergenceError(
                    f"{self.name}: loss {loss:.4g} above {self.factor}x initial {self.initial:.4g} "
                    f"for {self.patience} consecutive epochs"
                )
        else:
            self.strikes = 0


def minibatches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def cosine_lr(base: float, step: int, total: int, floor: float = 0.05) -> float:
    """Cosine decay from ``base`` to ``floor * base`` over ``total`` steps."""
    if total <= 1:
        return base
    frac = min(step / (total - 1), 1.0)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))
