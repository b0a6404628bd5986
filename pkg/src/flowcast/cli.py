"""``forecastctl <verb> --config <path> [--out <dir>] [--seed <n>]``

Exit status is 0 on success, 2 for configuration or schema errors and 1
for anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataFormatError, build_examples, gen_synthetic, load_grid_series, write_grid_series
from .experiment import (ConfigError, aggregate_reports, file_digest, load_config, load_model,
                         run_experiment)
from .forecast import GridSpec, conditional_density, contour_levels, write_density_grid

log = logging.getLogger("forecastctl")

VERBS = ("ingest", "synth", "run", "forecast", "report")


def _ingest(config, out):
    d = config["data"]
    if not d["path"]:
        raise ConfigError("[data] path is required for ingest")
    series = load_grid_series(d["path"])
    center = None if d["center_row"] < 0 else (d["center_row"], d["center_col"])
    ex = build_examples(series, d["k"], center)
    per_slice = {}
    for year, season in zip(ex.years, ex.seasons):
        key = f"{int(year)}-{season}"
        per_slice[key] = per_slice.get(key, 0) + 1
    summary = {"path": str(d["path"]), "sha256_16": file_digest(d["path"]),
               "rows": series.rows, "cols": series.cols, "timesteps": len(series),
               "examples": len(ex), "predictor_dim": ex.d, "examples_per_slice": per_slice}
    text = json.dumps(summary, indent=1)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "ingest.json").write_text(text)
    print(text)


def _synth(config, out):
    series = gen_synthetic(config.synth_config(), config.seed)
    target = Path(out or ".") / "synthetic.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_grid_series(series, target)
    print(target)


def _run(config, out):
    report = run_experiment(config, out or "run")
    for kind, r in report["reducers"].items():
        c = r["calibration"]
        print(f"{kind:12s} hit rates {c['hit_rate_683']:.3f} / {c['hit_rate_954']:.3f}  "
              f"mean test loglik {r['mean_test_loglik']:.4f}")


def _forecast(config, out):
    q = config["query"]
    if not q["run_dir"]:
        raise ConfigError("[query] run_dir is required for forecast")
    run_dir = Path(q["run_dir"])
    report = json.loads((run_dir / "report.json").read_text())
    grid = GridSpec.from_dict(report["grid"])
    kdir = run_dir / "models" / q["reducer"]
    reducer, model = load_model(kdir / "reducer.json"), load_model(kdir / "flow.json")
    if q["t"]:
        t = np.asarray(q["t"], dtype=float)
    elif q["example"] >= 0:
        d = config["data"]
        center = None if d["center_row"] < 0 else (d["center_row"], d["center_col"])
        ex = build_examples(load_grid_series(d["path"]), d["k"], center)
        t = reducer.apply(ex.predictors[q["example"]][None])[0]
    else:
        raise ConfigError("[query] needs either t or example")
    if t.size != model.m:
        raise ConfigError(f"[query] t has {t.size} values, the model conditions on {model.m}")
    g = conditional_density(model, t, grid)
    target = Path(out or ".") / "forecast.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_density_grid(g, target, contour_levels(g), t)
    print(target)


def _report(config, out):
    runs = config["report"]["runs"]
    if not runs:
        raise ConfigError("[report] runs lists no run directories")
    for path in aggregate_reports(runs, out or "."):
        print(path)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forecastctl", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", required=True, help="INI experiment configuration")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="master seed, overrides [experiment] seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {} if args.seed is None else {("experiment", "seed"): args.seed}
        config = load_config(args.config, overrides)
        {"ingest": _ingest, "synth": _synth, "run": _run, "forecast": _forecast,
         "report": _report}[args.verb](config, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
