"""Experiment configuration, orchestration, persistence and report files.

One experiment = one (test year, season). For every reducer kind the
pipeline runs splits -> reduction -> flow training -> checkpoint selection
-> test forecasts, then plays the entropy game between every pair of
kinds. Stage outputs are cached under the output directory keyed by a hash
of everything they depend on.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import itertools
import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import SEASONS, SplitSpec, SynthConfig, build_examples, load_grid_series, make_splits
from .dimred import Reducer, ReducerTrainConfig, gridpoint_reducer, pca_reducer, train_reducer
from .evaluate import FlowForecaster, bootstrap_interval, entropy_game_from, evaluate_forecaster
from .flow import FlowModel, FlowTrainConfig, train_flow
from .forecast import GridSpec, report_from_hits, select_checkpoint

log = logging.getLogger(__name__)

REPORT_VERSION = "report-v1"
REDUCER_KINDS = ("information", "grid-pick", "pca")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# --- configuration ----------------------------------------------------------------

def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_SYNTH_DEFAULTS = SynthConfig()

# section -> key -> (parser, default)
SCHEMA = {
    "data": {"path": (str, ""), "k": (int, 3), "center_row": (int, -1), "center_col": (int, -1)},
    "experiment": {"test_year": (int, 2000), "test_season": (str, "Q1"), "prior_years": (int, 10),
                   "reducers": (_names, REDUCER_KINDS), "m": (int, 2), "seed": (int, 0),
                   "fractions": (_floats, (0.4, 0.4, 0.2))},
    "reducer": {"architecture": (str, "shallow-net"), "hidden": (int, 64), "iterations": (int, 2000),
                "lr": (float, 0.01), "beta1": (float, 0.99), "beta2": (float, 0.99),
                "jitter": (float, 1e-6), "batch": (str, "auto")},
    "flow": {"steps": (int, 1200), "batch": (int, 150), "lr": (float, 0.01), "beta1": (float, 0.99),
             "beta2": (float, 0.99), "warmup": (int, 300), "interval": (int, 100), "depth": (int, 7),
             "width": (int, 32), "components": (int, 5), "pairs": (int, 1)},
    "forecast": {"grid_n": (int, 128), "grid_expand": (float, 0.25), "weight_683": (str, "13/23"),
                 "weight_954": (str, "10/23"), "validation_max": (int, 0)},
    "bootstrap": {"resamples": (int, 2000), "level": (float, 0.95)},
    "synth": {f.name: ((_names if f.name == "seasons" else type(getattr(_SYNTH_DEFAULTS, f.name))),
                       getattr(_SYNTH_DEFAULTS, f.name)) for f in fields(SynthConfig)},
    "query": {"run_dir": (str, ""), "reducer": (str, "information"), "t": (_floats, ()),
              "example": (int, -1)},
    "report": {"runs": (_names, ())},
}


@dataclass(frozen=True)
class ExperimentConfig:
    sections: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.sections[section]

    def to_dict(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items()}
                for s, kv in self.sections.items()}

    @property
    def seed(self) -> int:
        return self.sections["experiment"]["seed"]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        sections = {s: dict(kv) for s, kv in self.sections.items()}
        sections["experiment"]["seed"] = int(seed)
        return ExperimentConfig(sections)

    def reducer_config(self, seed) -> ReducerTrainConfig:
        r = dict(self.sections["reducer"])
        batch = r.pop("batch")
        return ReducerTrainConfig(batch=batch if batch in ("auto", "full") else int(batch), seed=seed, **r)

    def flow_config(self, seed) -> FlowTrainConfig:
        return FlowTrainConfig(seed=seed, **self.sections["flow"])

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.sections["synth"])

    def split_spec(self, seed) -> SplitSpec:
        e = self.sections["experiment"]
        return SplitSpec(e["test_year"], e["test_season"], e["prior_years"], e["fractions"], seed)

    def score_weights(self):
        from fractions import Fraction
        f = self.sections["forecast"]
        return Fraction(f["weight_683"]), Fraction(f["weight_954"])


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Validate INI text against :data:`SCHEMA`; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for s in cp.sections():
        if s not in SCHEMA:
            raise ConfigError(f"unknown config section [{s}]")
        for k, raw in cp.items(s):
            if k not in SCHEMA[s]:
                raise ConfigError(f"unknown config key {k!r} in [{s}]")
            parser = SCHEMA[s][k][0]
            try:
                sections[s][k] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {s}.{k}: {exc}") from None
    for (s, k), v in (overrides or {}).items():
        sections[s][k] = v
    _check(sections)
    return ExperimentConfig(sections)


def load_config(path, overrides=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def _check(s):
    e = s["experiment"]
    bad = [r for r in e["reducers"] if r not in REDUCER_KINDS]
    if bad or not e["reducers"]:
        raise ConfigError(f"reducers must be drawn from {REDUCER_KINDS}, got {list(e['reducers'])}")
    if e["test_season"] not in SEASONS:
        raise ConfigError(f"test_season must be one of {SEASONS}")
    if e["m"] < 1 or s["data"]["k"] < 0 or e["prior_years"] < 1:
        raise ConfigError("m and prior_years must be positive, k non-negative")
    if len(e["fractions"]) != 3 or min(e["fractions"]) <= 0 or abs(sum(e["fractions"]) - 1) > 1e-9:
        raise ConfigError("fractions must be three positive numbers summing to 1")
    if s["reducer"]["architecture"] not in ("affine", "shallow-net"):
        raise ConfigError("reducer.architecture must be affine or shallow-net")
    if s["reducer"]["batch"] not in ("auto", "full") and not s["reducer"]["batch"].isdigit():
        raise ConfigError("reducer.batch must be 'auto', 'full' or a positive integer")
    if not 0 < s["bootstrap"]["level"] < 1 or s["bootstrap"]["resamples"] < 1:
        raise ConfigError("bootstrap level must be in (0, 1) and resamples positive")
    if s["forecast"]["grid_n"] < 2:
        raise ConfigError("forecast.grid_n must be at least 2")
    try:
        ExperimentConfig(s).score_weights()
        FlowTrainConfig(**s["flow"])
        SynthConfig(**s["synth"])
    except (ValueError, ZeroDivisionError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


# --- seeds and hashing ------------------------------------------------------------

def derive_seed(master: int, label: str) -> int:
    """Per-stage seed from a labeled hash; independent across labels."""
    digest = hashlib.sha256(f"{int(master)}/{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


# --- persistence ---------------------------------------------------------------------

def save_model(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj.to_dict()))
    tmp.replace(path)
    return path


def load_model(path):
    """Load a reducer or flow artifact, dispatching on its version field."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"cannot parse model file {path}: {exc}") from None
    version = doc.get("version") if isinstance(doc, dict) else None
    if isinstance(version, str) and version.startswith("reducer-"):
        return Reducer.from_dict(doc)
    if isinstance(version, str) and version.startswith("flow-"):
        return FlowModel.from_dict(doc)
    raise ValueError(f"model file {path} has unknown version {version!r}; "
                     "expected 'reducer-v1' or 'flow-v1'")


def _cached(path, key):
    meta = Path(str(path) + ".key")
    if Path(path).exists() and meta.exists() and meta.read_text() == key:
        return load_model(path)
    return None


def _store(obj, path, key):
    save_model(obj, path)
    Path(str(path) + ".key").write_text(key)


# --- pipeline ------------------------------------------------------------------------

def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        return inner
    return wrap


@_stage("data")
def _load_examples(config):
    d = config["data"]
    if not d["path"]:
        raise ValueError("data.path is required")
    series = load_grid_series(d["path"])
    center = None if d["center_row"] < 0 else (d["center_row"], d["center_col"])
    return build_examples(series, d["k"], center), file_digest(d["path"])


@_stage("reduce")
def _fit_reducer(kind, splits, config, seed):
    m = config["experiment"]["m"]
    if kind == "information":
        return train_reducer(splits.dr_train, m, config.reducer_config(seed), splits.validation)
    if kind == "grid-pick":
        return gridpoint_reducer(splits.dr_train, m)
    return pca_reducer(splits.dr_train.predictors, m)


@_stage("flow")
def _fit_flow(splits, reducer, config, seed, grid):
    f = config["forecast"]
    _, checkpoints, history = train_flow(splits.jm_train, splits.validation, reducer,
                                         config.flow_config(seed))
    if not checkpoints:
        raise ValueError("flow training produced no checkpoints")
    best, scored = select_checkpoint(checkpoints, reducer, splits.validation, grid,
                                     config.score_weights(), f["validation_max"] or None, seed)
    selection = [{"step": step, **rep.to_dict(),
                  "validation_loglik": next(c.validation_loglik for c in checkpoints if c.step == step)}
                 for step, rep in scored]
    return best.model, {"selected_step": best.step, "checkpoints": selection,
                        "final_train_loss": history.loss[-1], "rollbacks": history.rollbacks}


def run_experiment(config: ExperimentConfig, out_dir) -> dict:
    """Full pipeline for one (year, season); writes artifacts and report files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    master = config.seed
    seeds = {label: derive_seed(master, label) for label in ("split", "reducer", "flow", "bootstrap")}
    examples, data_hash = _load_examples(config)
    e = config["experiment"]
    try:
        splits = make_splits(examples, config.split_spec(seeds["split"]), e["m"])
    except ValueError as exc:
        raise StageError("split", exc) from exc
    grid = GridSpec.from_responses(splits.jm_train.responses, config["forecast"]["grid_expand"],
                                   config["forecast"]["grid_n"])
    base_key = {"data": data_hash, "data_cfg": config["data"], "experiment": config["experiment"]}

    per_kind, records = {}, {}
    for kind in e["reducers"]:
        kdir = out / "models" / kind
        rkey = _digest({**base_key, "kind": kind, "reducer": config["reducer"] if kind == "information" else None,
                        "seed": seeds["reducer"]})
        reducer = _cached(kdir / "reducer.json", rkey)
        if reducer is None:
            log.info("%s: fitting reducer", kind)
            reducer = _fit_reducer(kind, splits, config, derive_seed(seeds["reducer"], kind))
            _store(reducer, kdir / "reducer.json", rkey)
        fkey = _digest({"reducer": rkey, "flow": config["flow"], "forecast": config["forecast"],
                        "seed": seeds["flow"]})
        model = _cached(kdir / "flow.json", fkey)
        sel_path = kdir / "selection.json"
        if model is None or not sel_path.exists():
            log.info("%s: training flow", kind)
            model, selection = _fit_flow(splits, reducer, config, derive_seed(seeds["flow"], kind), grid)
            sel_path.parent.mkdir(parents=True, exist_ok=True)
            sel_path.write_text(json.dumps(selection))
            _store(model, kdir / "flow.json", fkey)
        selection = json.loads(sel_path.read_text())
        log.info("%s: scoring test season", kind)
        rec = _score(FlowForecaster(reducer, model, grid, kind), splits.test)
        records[kind] = rec
        cal = report_from_hits(rec.hits, rec.skipped, config.score_weights())
        per_kind[kind] = {"calibration": cal.to_dict(),
                          "mean_test_loglik": float(np.mean(rec.log_density)),
                          "floored": int(rec.floored.sum()),
                          "selection": selection,
                          "reducer_meta": {"kind": reducer.kind, "m": reducer.m}}

    games = []
    b = config["bootstrap"]
    for ka, kb in itertools.permutations(e["reducers"], 2):
        game = entropy_game_from(records[ka], records[kb])
        # resample the canonical orientation so swapped pairs get exactly mirrored intervals
        sign = 1.0 if ka < kb else -1.0
        lo, hi = bootstrap_interval(sign * game.differences, b["level"], b["resamples"],
                                    derive_seed(seeds["bootstrap"], "|".join(sorted((ka, kb)))))
        if sign < 0:
            lo, hi = -hi, -lo
        games.append({"a": ka, "b": kb, "score": game.score, "lo": lo, "hi": hi, "n": game.n,
                      "floored_a": game.floored_a, "floored_b": game.floored_b})

    report = {
        "version": REPORT_VERSION,
        "experiment": f"{e['test_year']}-{e['test_season']}",
        "config": config.to_dict(),
        "seeds": {"master": master, **seeds},
        "data_hash": data_hash,
        "sizes": {k: len(v) for k, v in splits._asdict().items()},
        "grid": grid.to_dict(),
        "reducers": per_kind,
        "entropy_games": games,
        "provenance": {"started": started, "finished": time.time()},
    }
    emit_report(report, out)
    return report


@_stage("test")
def _score(forecaster, test):
    return evaluate_forecaster(forecaster, test)


def report_body(report: dict) -> bytes:
    """Canonical bytes of a report with timestamps removed."""
    body = {k: v for k, v in report.items() if k != "provenance"}
    return json.dumps(body, sort_keys=True, indent=1).encode()


def emit_report(report: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.json", out / "hitrates.csv", out / "likelihoods.csv", out / "entropy_games.csv"]
        paths[0].write_text(json.dumps(report, sort_keys=True, indent=1))
        _write_rows(paths[1], ["experiment", "reducer", "contour", "hit_rate", "n"], hitrate_rows(report))
        _write_rows(paths[2], ["experiment", "reducer", "mean_test_loglik", "n"], likelihood_rows(report))
        _write_rows(paths[3], ["experiment", "a", "b", "score", "lo", "hi", "n", "floored_a", "floored_b"],
                    game_rows(report))
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return paths


def hitrate_rows(report):
    for kind, r in report["reducers"].items():
        c = r["calibration"]
        yield [report["experiment"], kind, "0.683", repr(c["hit_rate_683"]), c["n"]]
        yield [report["experiment"], kind, "0.954", repr(c["hit_rate_954"]), c["n"]]


def likelihood_rows(report):
    for kind, r in report["reducers"].items():
        yield [report["experiment"], kind, repr(r["mean_test_loglik"]), r["calibration"]["n"]]


def game_rows(report):
    for g in report["entropy_games"]:
        yield [report["experiment"], g["a"], g["b"], repr(g["score"]), repr(g["lo"]), repr(g["hi"]),
               g["n"], g["floored_a"], g["floored_b"]]


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def aggregate_reports(run_dirs, out_dir) -> list[Path]:
    """Concatenate the CSV rows of many runs (one report.json per directory)."""
    reports = []
    for d in run_dirs:
        path = Path(d) / "report.json"
        try:
            reports.append(json.loads(path.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read report {path}: {exc}") from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = [("hitrates.csv", ["experiment", "reducer", "contour", "hit_rate", "n"], hitrate_rows),
             ("likelihoods.csv", ["experiment", "reducer", "mean_test_loglik", "n"], likelihood_rows),
             ("entropy_games.csv", ["experiment", "a", "b", "score", "lo", "hi", "n", "floored_a",
                                    "floored_b"], game_rows)]
    written = []
    for name, header, fn in specs:
        _write_rows(out / name, header, itertools.chain.from_iterable(fn(r) for r in reports))
        written.append(out / name)
    return written
