"""Conditional forecast densities, highest-density contours and calibration.

A forecast for one example is the flow's joint density over (y, t) sliced
at the example's reduced predictors t and renormalized over a regular
response grid. Contours are superlevel sets of grid cells; an observation
is a hit when its bilinearly interpolated density reaches the threshold.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import ExampleSet
from .dimred import Reducer
from .flow import FlowModel

log = logging.getLogger(__name__)

NOMINAL = (Fraction("0.683"), Fraction("0.954"))
SCORE_WEIGHTS = (Fraction(13, 23), Fraction(10, 23))
DENSITY_FLOOR = 1e-300
MAX_SKIP_FRACTION = 0.01


class OutOfDistributionError(ValueError):
    """Every grid cell has negligible joint density at the given conditioning vector."""


@dataclass(frozen=True)
class GridSpec:
    lo: tuple
    hi: tuple
    n: tuple = (128, 128)

    def __post_init__(self):
        if len(self.lo) != 2 or len(self.hi) != 2 or len(self.n) != 2:
            raise ValueError("the response grid is two-dimensional")
        if any(h <= l for l, h in zip(self.lo, self.hi)) or min(self.n) < 2:
            raise ValueError("grid bounds must be increasing with at least 2 cells per axis")

    @classmethod
    def from_responses(cls, Y, expand: float = 0.25, n: int = 128) -> "GridSpec":
        """Bounding box of ``Y`` widened by ``expand`` times its width on each side."""
        Y = np.asarray(Y, dtype=float)
        lo, hi = Y.min(axis=0), Y.max(axis=0)
        pad = expand * np.where(hi > lo, hi - lo, 1.0)
        return cls(tuple(float(v) for v in lo - pad), tuple(float(v) for v in hi + pad), (n, n))

    @property
    def step(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / np.asarray(self.n)

    @property
    def cell_area(self) -> float:
        return float(np.prod(self.step))

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(self.lo[k] + (np.arange(self.n[k]) + 0.5) * self.step[k] for k in range(2))

    def points(self) -> np.ndarray:
        g1, g2 = self.centers()
        Y1, Y2 = np.meshgrid(g1, g2, indexing="ij")
        return np.column_stack([Y1.ravel(), Y2.ravel()])

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "n": list(self.n)}

    @classmethod
    def from_dict(cls, doc) -> "GridSpec":
        return cls(tuple(float(v) for v in doc["lo"]), tuple(float(v) for v in doc["hi"]),
                   tuple(int(v) for v in doc["n"]))


@dataclass(frozen=True)
class DensityGrid:
    spec: GridSpec
    values: np.ndarray  # (n1, n2) cell-centered densities

    @property
    def cell_area(self) -> float:
        return self.spec.cell_area

    def mass(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def floor(self) -> float:
        positive = self.values[self.values > 0]
        return float(positive.min()) if positive.size else DENSITY_FLOOR

    def inside(self, y) -> bool:
        y = np.asarray(y, dtype=float)
        return bool(np.all(np.isfinite(y)) and all(self.spec.lo[k] <= y[k] <= self.spec.hi[k]
                                                    for k in range(2)))

    def interpolate(self, y) -> float:
        """Bilinear interpolation between cell centers; 0 outside the grid box.

        Within half a cell of the box edge the edge value is held constant.
        """
        if not self.inside(y):
            return 0.0
        idx, frac = [], []
        for k in range(2):
            u = (float(y[k]) - self.spec.lo[k]) / self.spec.step[k] - 0.5
            u = min(max(u, 0.0), self.spec.n[k] - 1.0)
            i = min(int(math.floor(u)), self.spec.n[k] - 2)
            idx.append(i)
            frac.append(u - i)
        (i, j), (fx, fy) = idx, frac
        v = self.values
        return float((1 - fx) * (1 - fy) * v[i, j] + fx * (1 - fy) * v[i + 1, j]
                     + (1 - fx) * fy * v[i, j + 1] + fx * fy * v[i + 1, j + 1])


@dataclass(frozen=True)
class ContourLevel:
    prob: float
    threshold: float
    mass: float


@dataclass(frozen=True)
class CalibrationReport:
    hr683: Fraction
    hr954: Fraction
    score: Fraction
    n: int
    skipped: int = 0

    def to_dict(self) -> dict:
        return {"hit_rate_683": float(self.hr683), "hit_rate_954": float(self.hr954),
                "score": float(self.score), "score_exact": str(self.score),
                "n": self.n, "skipped": self.skipped}


# --- densities ----------------------------------------------------------------------

def conditional_density(model: FlowModel, t, grid: GridSpec) -> DensityGrid:
    """q(y | t) on the grid: joint density at (y_cell, t) over its Riemann sum."""
    t = np.asarray(t, dtype=float).reshape(-1)
    if t.size != model.m or not np.all(np.isfinite(t)):
        raise ValueError(f"conditioning vector must be {model.m} finite values")
    Y = grid.points()
    Z = np.hstack([Y, np.broadcast_to(t, (len(Y), t.size))])
    with np.errstate(all="ignore"):
        logq = model.log_density(Z)
    logq = np.where(np.isfinite(logq), logq, -np.inf)
    top = logq.max()
    if not top >= math.log(DENSITY_FLOOR):
        raise OutOfDistributionError(f"joint density below {DENSITY_FLOOR:g} on the whole grid "
                                     f"at t = {t.tolist()}")
    w = np.exp(logq - top)
    values = w / (w.sum() * grid.cell_area)
    return DensityGrid(grid, values.reshape(grid.n))


def hdr_threshold(grid: DensityGrid, prob: float) -> ContourLevel:
    """Smallest superlevel set of cells whose mass reaches ``prob`` (ties included)."""
    if not 0 < prob < 1:
        raise ValueError("contour probability must be in (0, 1)")
    flat = grid.values.ravel()
    order = np.argsort(-flat, kind="stable")
    dens = flat[order]
    cum = np.cumsum(dens) * grid.cell_area
    positive = int(np.count_nonzero(dens > 0))
    k = int(np.searchsorted(cum, prob, side="left"))
    k = min(k, max(positive - 1, 0))
    threshold = float(dens[k])
    mass = float(flat[flat >= threshold].sum() * grid.cell_area)
    return ContourLevel(float(prob), threshold, mass)


def contour_levels(grid: DensityGrid, probs=NOMINAL) -> tuple:
    return tuple(hdr_threshold(grid, float(p)) for p in probs)


def hit(grid: DensityGrid, levels, y_obs) -> tuple:
    """Per-level hit flags; observations outside the grid box miss every level."""
    if not grid.inside(y_obs):
        return tuple(False for _ in levels)
    dens = grid.interpolate(y_obs)
    return tuple(bool(dens >= lv.threshold) for lv in levels)


# --- calibration --------------------------------------------------------------------

def _exact(x) -> Fraction:
    if isinstance(x, (Fraction, int)):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    # shortest round-trip decimal, so 0.683 means 683/1000
    return Fraction(repr(float(x)))


def calibration_score(hr683, hr954, weights=SCORE_WEIGHTS, nominal=NOMINAL) -> Fraction:
    """Weighted absolute deviation of hit rates from nominal, in exact arithmetic."""
    h = (_exact(hr683), _exact(hr954))
    if any(not 0 <= v <= 1 for v in h):
        raise ValueError("hit rates must lie in [0, 1]")
    w = tuple(_exact(x) for x in weights)
    return sum((wk * abs(_exact(nk) - hk) for wk, nk, hk in zip(w, nominal, h)), Fraction(0))


def forecast_hits(model: FlowModel, T, Y, grid: GridSpec, probs=NOMINAL):
    """Hit flags (n, len(probs)) and an OOD skip mask for conditioning rows ``T``."""
    T, Y = np.atleast_2d(T), np.atleast_2d(Y)
    hits = np.zeros((len(T), len(probs)), dtype=bool)
    skipped = np.zeros(len(T), dtype=bool)
    for i in range(len(T)):
        try:
            g = conditional_density(model, T[i], grid)
        except OutOfDistributionError:
            skipped[i] = True
            continue
        hits[i] = hit(g, contour_levels(g, probs), Y[i])
    return hits, skipped


def report_from_hits(hits, skipped, weights=SCORE_WEIGHTS) -> CalibrationReport:
    n = len(hits)
    n_skip = int(skipped.sum())
    if n == 0:
        raise ValueError("no examples to score")
    if n_skip > MAX_SKIP_FRACTION * n:
        raise OutOfDistributionError(f"{n_skip} of {n} examples have out-of-distribution "
                                     f"conditioning (limit {MAX_SKIP_FRACTION:.0%})")
    used = n - n_skip
    hr = tuple(Fraction(int(hits[~skipped, j].sum()), used) for j in range(2))
    return CalibrationReport(hr[0], hr[1], calibration_score(*hr, weights=weights), used, n_skip)


def hit_rate(model: FlowModel, reducer: Reducer, dataset: ExampleSet, grid: GridSpec,
             weights=SCORE_WEIGHTS) -> CalibrationReport:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    hits, skipped = forecast_hits(model, reducer.apply(dataset.predictors), dataset.responses, grid)
    return report_from_hits(hits, skipped, weights)


def select_checkpoint(checkpoints, reducer: Reducer, validation: ExampleSet, grid: GridSpec,
                      weights=SCORE_WEIGHTS, max_examples: int | None = None, seed: int = 0):
    """Checkpoint with the lowest validation calibration score; ties go to the later step.

    Returns ``(checkpoint, [(step, CalibrationReport), ...])``. With
    ``max_examples`` a fixed seeded subset of the validation set is scored.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if max_examples is not None and len(validation) > max_examples:
        rows = np.sort(np.random.default_rng(seed).choice(len(validation), max_examples, replace=False))
        validation = validation.subset(rows)
    scored = []
    for cp in checkpoints:
        rep = hit_rate(cp.model, reducer, validation, grid, weights)
        scored.append((cp.step, rep))
        log.debug("checkpoint %d: hit rates %.3f / %.3f, score %.4f", cp.step,
                  float(rep.hr683), float(rep.hr954), float(rep.score))
    best = min(range(len(checkpoints)), key=lambda i: (scored[i][1].score, -checkpoints[i].step))
    return checkpoints[best], scored


# --- export -------------------------------------------------------------------------

def write_density_grid(grid: DensityGrid, path, levels=(), t=None) -> tuple[Path, Path]:
    """CSV of cell centers and densities plus a JSON sidecar with axes and contours."""
    path = Path(path)
    g1, g2 = grid.spec.centers()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y1", "y2", "density"])
        for i, a in enumerate(g1):
            for j, b in enumerate(g2):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(grid.values[i, j]))])
    side = path.with_suffix(".json")
    doc = {"axes": [{"lo": grid.spec.lo[k], "hi": grid.spec.hi[k], "n": grid.spec.n[k]} for k in range(2)],
           "cell_area": grid.cell_area,
           "contours": [{"prob": lv.prob, "threshold": lv.threshold, "mass": lv.mass} for lv in levels]}
    if t is not None:
        doc["t"] = [float(v) for v in np.ravel(t)]
    side.write_text(json.dumps(doc, indent=2))
    return path, side
