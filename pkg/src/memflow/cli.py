"""``memflow <experiment> --config <path> [--seed N] [--out DIR] [--threads N] [--plots]``.

Exit status: 0 when every property check passes, 2 when the run completed but
a check failed, 1 on configuration or numerical errors.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import EXPERIMENTS, SCHEMA_VERSION, load_config
from .errors import MemflowError
from .experiments import run_experiment

log = logging.getLogger("memflow")

EXIT_OK, EXIT_ERROR, EXIT_CHECK_FAILED = 0, 1, 2


def _plain(x):
    """JSON-safe copy; non-finite floats become strings."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    return x


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_series(out: Path, name: str, columns, rows) -> Path:
    path = out / f"{name}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def echo_config(cfg: dict) -> dict:
    """The resolved config as embedded in the summary (output location omitted)."""
    echo = copy.deepcopy(cfg)
    echo.pop("output", None)
    return echo


def build_summary(cfg: dict, result) -> dict:
    return _plain({
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg["experiment"],
        "config": echo_config(cfg),
        "metrics": result.metrics,
        "checks": result.checks,
        "passed": result.passed,
        "provenance": {"master_seed": int(cfg["seed"]), "package_version": __version__,
                       "rng": "PCG64 streams from SeedSequence(master_seed, spawn_key=(particle, phase))"},
    })


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def run(cfg: dict, out: Path, workers: int = 1, plots: bool = False) -> tuple[dict, int]:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = run_experiment(cfg, workers)
    wall = time.perf_counter() - t0
    summary = build_summary(cfg, result)
    (out / "config.resolved.json").write_text(dumps(_plain(echo_config(cfg))))
    (out / "summary.json").write_text(dumps(summary))
    (out / "timing.json").write_text(dumps({"wall_seconds": wall, "threads": workers}))
    for name, (cols, rows) in result.series.items():
        write_series(out, name, cols, rows)
    if cfg.get("params", {}).get("save_paths") and "ensemble" in result.artifacts:
        result.artifacts["ensemble"].save(out / "paths", cfg["model"]["id"], int(cfg["seed"]))
    if plots:
        from .plotting import emit_plots
        emit_plots(result.series, out)
    return summary, EXIT_OK if result.passed else EXIT_CHECK_FAILED


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memflow", description="Experiments for path-distribution dependent SDEs "
                                                           "with fading memory.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on this)")
    p.add_argument("--plots", action="store_true", help="also render PNG figures")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"memflow {__version__}")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        cfg = load_config(args.config, args.experiment)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise MemflowError("--seed must fit in 64 unsigned bits")
            cfg["seed"] = args.seed
        out = Path(args.out if args.out is not None else cfg["output"]["dir"])
        summary, code = run(cfg, out, args.threads, args.plots)
    except MemflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for name, ok in summary["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'}\t{name}")
    print(f"{'PASS' if summary['passed'] else 'FAIL'}\t{summary['experiment']}\t{out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
