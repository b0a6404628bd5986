"""Forecast comparison: the entropy game and bootstrap intervals on its score.

Each forecaster turns a predictor row into a normalized density grid over
the response. Scores compare the log of the interpolated grid densities at
the observed responses, summed over the test set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import ExampleSet
from .dimred import Reducer
from .flow import FlowModel
from .forecast import (
    DENSITY_FLOOR,
    NOMINAL,
    DensityGrid,
    GridSpec,
    OutOfDistributionError,
    conditional_density,
    contour_levels,
    hit,
)


class Forecaster:
    """Anything that maps one predictor row to a :class:`DensityGrid`."""

    name = "forecaster"

    def grid_for(self, x) -> DensityGrid:
        raise NotImplementedError


@dataclass(frozen=True)
class FlowForecaster(Forecaster):
    reducer: Reducer
    model: FlowModel
    grid: GridSpec
    name: str = "flow"

    def grid_for(self, x) -> DensityGrid:
        t = self.reducer.apply(np.atleast_2d(x))[0]
        return conditional_density(self.model, t, self.grid)


@dataclass(frozen=True)
class DensityForecaster(Forecaster):
    """Forecaster from an explicit conditional density ``fn(Y_points, x) -> densities``."""

    fn: Callable
    grid: GridSpec
    name: str = "density"

    def grid_for(self, x) -> DensityGrid:
        vals = np.asarray(self.fn(self.grid.points(), np.asarray(x)), dtype=float)
        total = vals.sum() * self.grid.cell_area
        if not total > 0:
            raise OutOfDistributionError("forecast density vanishes on the grid")
        return DensityGrid(self.grid, (vals / total).reshape(self.grid.n))


@dataclass(frozen=True)
class ForecastRecord:
    """Per-example outcome of one forecaster on one dataset."""

    log_density: np.ndarray  # ln of the interpolated density at y_i (floor-substituted)
    floored: np.ndarray      # True where the floor density was substituted
    hits: np.ndarray         # (n, 2) at the nominal levels
    skipped: np.ndarray      # out-of-distribution conditioning

    @property
    def n(self) -> int:
        return len(self.log_density)


def evaluate_forecaster(forecaster: Forecaster, dataset: ExampleSet, probs=NOMINAL) -> ForecastRecord:
    """One grid per example feeds both the hit flags and the log score."""
    n = len(dataset)
    logd = np.empty(n)
    floored = np.zeros(n, dtype=bool)
    hits = np.zeros((n, len(probs)), dtype=bool)
    skipped = np.zeros(n, dtype=bool)
    for i in range(n):
        y = dataset.responses[i]
        try:
            g = forecaster.grid_for(dataset.predictors[i])
        except OutOfDistributionError:
            skipped[i] = floored[i] = True
            logd[i] = math.log(DENSITY_FLOOR)
            continue
        hits[i] = hit(g, contour_levels(g, probs), y)
        dens = g.interpolate(y)
        if dens > 0:
            logd[i] = math.log(dens)
        else:
            floored[i] = True
            logd[i] = math.log(g.floor())
    return ForecastRecord(logd, floored, hits, skipped)


@dataclass(frozen=True)
class EntropyGame:
    score: float
    differences: np.ndarray
    floored_a: int
    floored_b: int

    @property
    def n(self) -> int:
        return len(self.differences)


def entropy_game_from(a: ForecastRecord, b: ForecastRecord) -> EntropyGame:
    """Score sum_i ln q_A(y_i) - ln q_B(y_i); positive means A is sharper.

    Per-example differences are negated exactly when A and B swap, and the
    correctly rounded sum preserves that, so the score is antisymmetric.
    """
    if a.n != b.n:
        raise ValueError("forecast records cover different datasets")
    diff = a.log_density - b.log_density
    return EntropyGame(math.fsum(diff), diff, int(a.floored.sum()), int(b.floored.sum()))


def entropy_game(forecaster_a: Forecaster, forecaster_b: Forecaster, test: ExampleSet) -> EntropyGame:
    return entropy_game_from(evaluate_forecaster(forecaster_a, test), evaluate_forecaster(forecaster_b, test))


def bootstrap_interval(differences, level: float = 0.95, resamples: int = 2000, seed: int = 0,
                       statistic: str = "sum") -> tuple[float, float]:
    """Percentile bootstrap interval of the summed (or mean) per-example differences."""
    d = np.asarray(differences, dtype=float)
    if d.size == 0:
        raise ValueError("no differences to resample")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    if resamples < 1:
        raise ValueError("resamples must be positive")
    rng = np.random.default_rng(seed)
    n = d.size
    stats = np.empty(resamples)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, resamples, chunk):
        stop = min(resamples, start + chunk)
        idx = rng.integers(0, n, size=(stop - start, n))
        stats[start:stop] = d[idx].sum(axis=1)
    if statistic == "mean":
        stats /= n
    elif statistic != "sum":
        raise ValueError(f"unknown statistic {statistic!r}")
    alpha = (1 - level) / 2
    lo, hi = np.quantile(stats, [alpha, 1 - alpha])
    return float(lo), float(hi)
