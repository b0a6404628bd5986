"""Gridded wind series: CSV ingest, example windowing, seasonal splits, synthetic data.

CSV interchange format (header required, rows in any order)::

    time,row,col,u,v,year,season

``time`` is a non-negative integer step index (3-hour units), ``row``/``col``
are 0-based lattice coordinates, ``u``/``v`` are wind components in m/s and
``season`` is one of Q1..Q4. Every (time, row, col) triple inside a
(year, season) slice must be present.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

SEASONS = ("Q1", "Q2", "Q3", "Q4")
CSV_COLUMNS = ("time", "row", "col", "u", "v", "year", "season")


class DataFormatError(ValueError):
    """Malformed or incomplete grid series input."""


@dataclass(frozen=True)
class GridSeries:
    """Time-indexed lattice of (u, v) wind vectors.

    ``values`` has shape (T, rows, cols, 2). ``years`` and ``seasons`` label
    every timestep; a slice is a maximal run of equal labels with unit time
    stride.
    """

    times: np.ndarray
    values: np.ndarray
    years: np.ndarray
    seasons: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 4 or values.shape[-1] != 2 or values.shape[0] != times.shape[0]:
            raise DataFormatError(f"values must have shape (T, rows, cols, 2), got {values.shape}")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise DataFormatError("times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise DataFormatError("values contain non-finite entries")
        years = np.asarray(self.years, dtype=np.int64)
        seasons = np.asarray(self.seasons, dtype="<U2")
        if years.shape != times.shape or seasons.shape != times.shape:
            raise DataFormatError("year/season labels must have one entry per timestep")
        bad = set(seasons.tolist()) - set(SEASONS)
        if bad:
            raise DataFormatError(f"unknown season labels: {sorted(bad)}")
        for name, arr in (("times", times), ("values", values), ("years", years), ("seasons", seasons)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def rows(self) -> int:
        return self.values.shape[1]

    @property
    def cols(self) -> int:
        return self.values.shape[2]

    def __len__(self):
        return self.times.shape[0]

    def slices(self) -> list[tuple[int, int]]:
        """Half-open index ranges of the (year, season) slices, in time order."""
        if len(self) == 0:
            return []
        brk = ((np.diff(self.times) != 1)
               | (self.years[1:] != self.years[:-1])
               | (self.seasons[1:] != self.seasons[:-1]))
        edges = np.concatenate([[0], np.nonzero(brk)[0] + 1, [len(self)]])
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def equals(self, other: "GridSeries") -> bool:
        return (np.array_equal(self.times, other.times)
                and self.values.tobytes() == other.values.tobytes()
                and np.array_equal(self.years, other.years)
                and np.array_equal(self.seasons, other.seasons))


def load_grid_series(path) -> GridSeries:
    """Read and validate a grid series CSV."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if sorted(header) != sorted(CSV_COLUMNS):
            raise DataFormatError(f"{path}: header must contain exactly {','.join(CSV_COLUMNS)}, got {header}")
        col = {name: header.index(name) for name in CSV_COLUMNS}
        t_l, r_l, c_l, u_l, v_l, y_l, s_l = [], [], [], [], [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                t, r, c = int(rec[col["time"]]), int(rec[col["row"]]), int(rec[col["col"]])
                u, v = float(rec[col["u"]]), float(rec[col["v"]])
                yr = int(rec[col["year"]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            season = rec[col["season"]].strip()
            if not (math.isfinite(u) and math.isfinite(v)):
                raise DataFormatError(f"{path}:{lineno}: non-finite wind value")
            if t < 0 or r < 0 or c < 0:
                raise DataFormatError(f"{path}:{lineno}: negative time/row/col")
            if season not in SEASONS:
                raise DataFormatError(f"{path}:{lineno}: unknown season {season!r}")
            t_l.append(t), r_l.append(r), c_l.append(c), u_l.append(u), v_l.append(v)
            y_l.append(yr), s_l.append(season)
    if not t_l:
        raise DataFormatError(f"{path}: no data rows")

    rows, cols = max(r_l) + 1, max(c_l) + 1

    label = {}
    for t, yr, s in zip(t_l, y_l, s_l):
        if label.setdefault(t, (yr, s)) != (yr, s):
            raise DataFormatError(f"{path}: time {t} carries conflicting year/season labels")

    # each (year, season) slice must cover a contiguous run of times
    span = {}
    for t, key in label.items():
        lo, hi = span.get(key, (t, t))
        span[key] = (min(lo, t), max(hi, t))
    times = sorted({t for lo, hi in span.values() for t in range(lo, hi + 1)})
    pos = {t: i for i, t in enumerate(times)}
    if len(pos) != sum(hi - lo + 1 for lo, hi in span.values()):
        raise DataFormatError(f"{path}: (year, season) slices overlap in time")

    filled = np.zeros((len(times), rows, cols), dtype=bool)
    values = np.zeros((len(times), rows, cols, 2))
    for t, r, c, u, v in zip(t_l, r_l, c_l, u_l, v_l):
        i = pos[t]
        if filled[i, r, c]:
            raise DataFormatError(f"{path}: duplicate entry for (time={t}, row={r}, col={c})")
        filled[i, r, c] = True
        values[i, r, c] = (u, v)
    if not filled.all():
        i, r, c = np.argwhere(~filled)[0]
        raise DataFormatError(
            f"{path}: gap at (time={times[i]}, row={r}, col={c}); "
            f"{int((~filled).sum())} cells missing in total")
    return GridSeries(np.array(times), values,
                      [label[t][0] for t in times], [label[t][1] for t in times])


def write_grid_series(series: GridSeries, path) -> None:
    """Write ``series`` as CSV; floats use shortest round-trip repr."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i, t in enumerate(series.times):
            yr, s = int(series.years[i]), str(series.seasons[i])
            for r in range(series.rows):
                for c in range(series.cols):
                    u, v = series.values[i, r, c]
                    w.writerow((int(t), r, c, repr(float(u)), repr(float(v)), yr, s))


# --- examples ----------------------------------------------------------------

@dataclass(frozen=True)
class ExampleSet:
    """Paired samples: responses (N, p) and flattened predictor windows (N, d).

    Predictor layout is lag-major (newest first), then row-major lattice, then
    (u, v); see :func:`predictor_index`.
    """

    responses: np.ndarray
    predictors: np.ndarray
    k: int
    center: tuple[int, int]
    rows: int
    cols: int
    years: np.ndarray
    seasons: np.ndarray
    times: np.ndarray = field(default=None)  # time of the newest lag per example

    def __post_init__(self):
        if self.times is None:
            object.__setattr__(self, "times", np.zeros(len(self.responses), dtype=np.int64))
        if self.predictors.shape[1] != self.rows * self.cols * 2 * (self.k + 1):
            raise ValueError("predictor width does not match rows*cols*2*(k+1)")

    def __len__(self):
        return self.responses.shape[0]

    @property
    def p(self) -> int:
        return self.responses.shape[1]

    @property
    def d(self) -> int:
        return self.predictors.shape[1]

    def subset(self, idx) -> "ExampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ExampleSet(self.responses[idx], self.predictors[idx], self.k, self.center,
                          self.rows, self.cols, self.years[idx], self.seasons[idx], self.times[idx])


def predictor_index(lag: int, row: int, col: int, comp: int, rows: int, cols: int) -> int:
    """Column of (lag, row, col, component) in a flattened predictor row."""
    return ((lag * rows + row) * cols + col) * 2 + comp


def build_examples(series: GridSeries, k: int = 3, center: tuple[int, int] | None = None) -> ExampleSet:
    """Window a series into (response, predictor) examples.

    Within each slice of length T, example i (k <= i <= T-2) uses steps
    i, i-1, ..., i-k as predictors and the center cell at step i+1 as the
    response. Windows never cross slice boundaries.
    """
    if k < 0:
        raise ValueError("lag count must be non-negative")
    if center is None:
        center = (series.rows // 2, series.cols // 2)
    r0, c0 = center
    if not (0 <= r0 < series.rows and 0 <= c0 < series.cols):
        raise ValueError(f"center {center} outside {series.rows}x{series.cols} lattice")
    flat = series.values.reshape(len(series), -1)
    resp, pred, yrs, sns, tms = [], [], [], [], []
    for a, b in series.slices():
        T = b - a
        if T < k + 2:
            raise ValueError(
                f"slice ({int(series.years[a])}, {series.seasons[a]}) has {T} steps; "
                f"need at least k+2 = {k + 2}")
        newest = np.arange(a + k, b - 1)
        pred.append(np.concatenate([flat[newest - lag] for lag in range(k + 1)], axis=1))
        resp.append(series.values[newest + 1, r0, c0])
        yrs.append(series.years[newest])
        sns.append(series.seasons[newest])
        tms.append(series.times[newest])
    if not pred:
        raise ValueError("series is empty")
    return ExampleSet(np.concatenate(resp), np.concatenate(pred), k, (r0, c0),
                      series.rows, series.cols, np.concatenate(yrs), np.concatenate(sns),
                      np.concatenate(tms))


# --- splits ----------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    test_year: int
    test_season: str
    prior_years: int = 10
    fractions: tuple[float, float, float] = (0.4, 0.4, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.prior_years < 1:
            raise ValueError("prior_years must be >= 1")
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ValueError(f"split fractions must be three positive numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(self.fractions)}")


class Splits(NamedTuple):
    dr_train: ExampleSet
    jm_train: ExampleSet
    validation: ExampleSet
    test: ExampleSet


def split_indices(examples: ExampleSet, spec: SplitSpec, m: int = 2) -> dict[str, np.ndarray]:
    test_mask = (examples.years == spec.test_year) & (examples.seasons == spec.test_season)
    if not test_mask.any():
        raise ValueError(f"no examples for test season ({spec.test_year}, {spec.test_season})")
    prior = range(spec.test_year - spec.prior_years, spec.test_year)
    present = set(examples.years[examples.seasons == spec.test_season].tolist())
    missing = [y for y in prior if y not in present]
    if missing:
        raise ValueError(f"season {spec.test_season} missing for prior years {missing}")
    pool = np.nonzero((examples.seasons == spec.test_season)
                      & np.isin(examples.years, list(prior)))[0]
    if len(pool) < 3 * (examples.p + m):
        raise ValueError(f"pool of {len(pool)} examples is too small for covariance estimation")
    perm = np.random.default_rng(spec.seed).permutation(pool)
    n1 = int(round(spec.fractions[0] * len(pool)))
    n2 = int(round(spec.fractions[1] * len(pool)))
    parts = np.split(perm, [n1, n1 + n2])
    if any(len(p) == 0 for p in parts):
        raise ValueError("a split came out empty; increase the pool or adjust fractions")
    return {"dr_train": np.sort(parts[0]), "jm_train": np.sort(parts[1]),
            "validation": np.sort(parts[2]), "test": np.nonzero(test_mask)[0]}


def make_splits(examples: ExampleSet, spec: SplitSpec, m: int = 2) -> Splits:
    """Test = the requested season; pool = same season in the preceding years, shuffled and cut."""
    idx = split_indices(examples, spec, m)
    return Splits(*(examples.subset(idx[k]) for k in ("dr_train", "jm_train", "validation", "test")))


# --- synthetic generators --------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    family: str = "gaussian-var"   # or "ring"
    rows: int = 5
    cols: int = 5
    steps: int = 1504              # timesteps per (year, season) slice
    first_year: int = 1990
    n_years: int = 11
    seasons: tuple[str, ...] = ("Q1",)
    # gaussian-var
    self_coef: float = 0.5
    neighbor_coef: float = 0.3
    rotation: float = 0.1
    smooth_amp: float = 0.2
    noise: float = 1.0
    noise_corr_length: float = 0.0  # Gaussian kernel length (cells) of innovation correlation
    uv_corr: float = 0.0            # innovation correlation between u and v at a cell
    nuisance_cells: int = 0
    nuisance_coef: float = 0.95
    nuisance_scale: float = 3.0
    # ring
    ring_radius: float = 8.0
    ring_width: float = 0.6
    phase_step: float = 0.25
    phase_noise: float = 0.2
    phase_gradient: float = 0.3
    obs_noise: float = 0.3

    def __post_init__(self):
        if self.family not in ("gaussian-var", "ring"):
            raise ValueError(f"unknown process family {self.family!r}")
        if self.rows < 1 or self.cols < 1 or self.steps < 1 or self.n_years < 1:
            raise ValueError("lattice size, steps and n_years must be positive")
        if set(self.seasons) - set(SEASONS):
            raise ValueError(f"unknown seasons {self.seasons}")


def adversarial_pca_config(**overrides) -> SynthConfig:
    """Generator whose leading predictor principal components carry no response information.

    Eight edge cells follow a shared, persistent, high-variance factor that
    is decoupled from the rest of the lattice, so they dominate predictor
    variance. The response cell is driven mostly by its four neighbours, so
    a learned combination of cells beats picking the two best single cells.
    """
    base = dict(nuisance_cells=8, self_coef=0.3, neighbor_coef=0.8)
    base.update(overrides)
    return SynthConfig(**base)


def nuisance_cells(config: SynthConfig) -> list[int]:
    """Flat indices of the decoupled high-variance cells, farthest from center first."""
    rc, cc = config.rows // 2, config.cols // 2
    cells = [(-(abs(r - rc) + abs(c - cc)), r * config.cols + c)
             for r in range(config.rows) for c in range(config.cols) if (r, c) != (rc, cc)]
    cells.sort()
    if config.nuisance_cells > len(cells):
        raise ValueError("more nuisance cells than available lattice cells")
    return sorted(i for _, i in cells[: config.nuisance_cells])


def var_coefficients(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Transition matrix A and innovation factor L of the vector autoregression.

    State layout matches one predictor lag: row-major cells, then (u, v).
    Innovations are ``L @ eps`` with standard normal ``eps``.
    """
    R, C = config.rows, config.cols
    n = R * C
    nuis = set(nuisance_cells(config))
    A = np.zeros((2 * n, 2 * n))
    for r in range(R):
        for c in range(C):
            i = r * C + c
            if i in nuis:
                A[2 * i, 2 * i] = A[2 * i + 1, 2 * i + 1] = config.nuisance_coef
                continue
            a = config.self_coef * (1.0 + config.smooth_amp
                                    * math.cos(math.pi * (r + 0.5) / R) * math.cos(math.pi * (c + 0.5) / C))
            A[2 * i, 2 * i] = A[2 * i + 1, 2 * i + 1] = a
            A[2 * i, 2 * i + 1] = config.rotation
            A[2 * i + 1, 2 * i] = -config.rotation
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                j = rr * C + cc
                if 0 <= rr < R and 0 <= cc < C and j not in nuis:
                    A[2 * i, 2 * j] += config.neighbor_coef / 4.0
                    A[2 * i + 1, 2 * j + 1] += config.neighbor_coef / 4.0
    info = [i for i in range(n) if i not in nuis]
    rr, cc = np.divmod(np.array(info), C)
    if config.noise_corr_length > 0:
        d2 = (rr[:, None] - rr[None]) ** 2 + (cc[:, None] - cc[None]) ** 2
        K = np.exp(-d2 / (2.0 * config.noise_corr_length ** 2)) + 1e-10 * np.eye(len(info))
    else:
        K = np.eye(len(info))
    uv = np.linalg.cholesky(np.array([[1.0, config.uv_corr], [config.uv_corr, 1.0]]))
    block = config.noise * np.kron(np.linalg.cholesky(K), uv)
    comps = np.ravel([[2 * i, 2 * i + 1] for i in info]).astype(int)
    L = np.zeros((2 * n, 2 * n + 2))
    L[np.ix_(comps, comps)] = block
    for i in nuis:
        L[2 * i, 2 * i] = L[2 * i + 1, 2 * i + 1] = 0.1 * config.noise
        L[2 * i, 2 * n] = L[2 * i + 1, 2 * n + 1] = config.nuisance_scale
    if not nuis:
        L = L[:, : 2 * n]
    return A, L


def gen_synthetic(config: SynthConfig, seed: int = 0) -> GridSeries:
    """Reproducible synthetic series, one independent slice per (year, season)."""
    rng = np.random.default_rng(seed)
    if config.family == "gaussian-var":
        A, L = var_coefficients(config)
        rho = float(np.max(np.abs(np.linalg.eigvals(A))))
        if rho >= 1.0:
            raise ValueError(f"unstable autoregression: spectral radius {rho:.4f} >= 1")
        stat_cov = solve_discrete_lyapunov(A, L @ L.T)
        chol = np.linalg.cholesky(0.5 * (stat_cov + stat_cov.T))
    blocks, years, seasons = [], [], []
    for y in range(config.first_year, config.first_year + config.n_years):
        for s in config.seasons:
            if config.family == "gaussian-var":
                blocks.append(_simulate_var(A, L, chol, config, rng))
            else:
                blocks.append(_simulate_ring(config, rng))
            years += [y] * config.steps
            seasons += [s] * config.steps
    values = np.concatenate(blocks)
    # slices are separated by a one-step gap so times stay strictly increasing
    times = np.concatenate([np.arange(config.steps) + i * (config.steps + 1) for i in range(len(blocks))])
    return GridSeries(times, values, years, seasons)


def _simulate_var(A, L, chol, config, rng):
    n = A.shape[0]
    s = chol @ rng.standard_normal(n)
    eps = rng.standard_normal((config.steps, L.shape[1])) @ L.T
    out = np.empty((config.steps, n))
    for t in range(config.steps):
        out[t] = s
        s = A @ s + eps[t]
    return out.reshape(config.steps, config.rows, config.cols, 2)


def _simulate_ring(config, rng):
    T = config.steps
    phase = rng.uniform(0, 2 * np.pi) + np.cumsum(
        config.phase_step + config.phase_noise * rng.standard_normal(T))
    # radius wanders around the ring as an AR(1) with unit-ish memory
    rad = np.empty(T)
    z = rng.standard_normal()
    for t in range(T):
        z = 0.8 * z + 0.6 * rng.standard_normal()
        rad[t] = config.ring_radius + config.ring_width * z
    rc, cc = config.rows // 2, config.cols // 2
    r_idx, c_idx = np.meshgrid(np.arange(config.rows), np.arange(config.cols), indexing="ij")
    offset = config.phase_gradient * ((r_idx - rc) + (c_idx - cc))
    ang = phase[:, None, None] + offset[None]
    u = rad[:, None, None] * np.cos(ang)
    v = rad[:, None, None] * np.sin(ang)
    out = np.stack([u, v], axis=-1)
    return out + config.obs_noise * rng.standard_normal(out.shape)
