"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 partial failure
(some seeds failed), 3 internal error. Progress goes to stderr; experiment
data goes to files. Only ``metrics``, ``compare`` and ``prox-demo`` print
results to stdout.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DRCLError
from .runner import SUMMARY_METRICS, run_experiment
from .solver import prox_l1_weighted

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("drcl")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seeds", None):
        overrides.append(f"seeds=[{args.seeds}]")
    return ExperimentConfig(load_config(args.config, overrides))


def cmd_run(args) -> int:
    cfg = _load(args)
    log.info("running %s (config %s) for seeds %s -> %s", cfg.method, cfg.hash, cfg.seeds, cfg.output_dir)
    records = run_experiment(cfg)
    failed = [r.seed for r in records if not r.ok]
    if failed:
        log.warning("%d of %d seeds failed: %s", len(failed), len(records), failed)
        return EXIT_PARTIAL
    log.info("done; outputs in %s", cfg.output_dir)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args)
    log.info("config ok: method=%s hash=%s", cfg.method, cfg.hash)
    return EXIT_OK


def read_matrix_csv(path) -> dict:
    """Accuracy matrices keyed by seed.

    Accepts the long ``seed,row,col,accuracy`` format written by ``run`` or a
    headerless square matrix with blanks above the diagonal.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"matrix file not found: {path}")
    rows = list(csv.reader(path.read_text().splitlines()))
    if rows and rows[0][:4] == ["seed", "row", "col", "accuracy"]:
        cells = defaultdict(dict)
        for seed, i, j, v in (r[:4] for r in rows[1:] if r):
            cells[int(seed)][(int(i), int(j))] = float(v)
        out = {}
        for seed, entries in sorted(cells.items()):
            T = max(i for i, _ in entries) + 1
            r = np.full((T, T), np.nan)
            for (i, j), v in entries.items():
                r[i, j] = v
            out[seed] = M.AccuracyMatrix.from_array(r)
        return out
    r = np.array([[float(c) if c.strip() else np.nan for c in row] for row in rows if row])
    return {0: M.AccuracyMatrix.from_array(r)}


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def cmd_metrics(args) -> int:
    mats = read_matrix_csv(args.matrix)
    print(f"{'seed':>6} {'T':>4} " + " ".join(f"{m:>24}" for m in SUMMARY_METRICS))
    for seed, m in mats.items():
        s = M.summarize(m)
        print(f"{seed:>6} {m.T:>4} " + " ".join(f"{_fmt(s[k]):>24}" for k in SUMMARY_METRICS))
    return EXIT_OK


def _load_summary(d):
    p = Path(d) / "summary.json"
    if not p.is_file():
        raise ConfigError(f"no summary.json in {d}")
    return json.loads(p.read_text())


def cmd_compare(args) -> int:
    a, b = _load_summary(args.dir_a), _load_summary(args.dir_b)
    if a["tasks"] != b["tasks"]:
        log.error("task specifications differ; runs are not comparable")
        return EXIT_USAGE
    print(f"{'metric':<26} {'A (' + a['method'] + ')':>22} {'B (' + b['method'] + ')':>22} {'B - A':>10}")
    for name in SUMMARY_METRICS:
        ma, mb = a["aggregate"]["metrics"].get(name), b["aggregate"]["metrics"].get(name)
        cell = lambda m: "n/a" if m is None else f"{m['mean']:.4f} ± {m['std']:.4f}"
        delta = "n/a" if ma is None or mb is None else f"{mb['mean'] - ma['mean']:+.4f}"
        print(f"{name:<26} {cell(ma):>22} {cell(mb):>22} {delta:>10}")
    return EXIT_OK


def cmd_prox_demo(args) -> int:
    z = prox_l1_weighted(np.array(args.values), np.full(len(args.values), args.x_old), args.tau)
    for v, out in zip(args.values, z):
        print(f"{v:g} -> {out:g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drcl", description="Douglas-Rachford continual learning experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("-c", "--config", required=True)
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    run.add_argument("--seeds", help="comma separated seeds, replaces config seeds")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a config file")
    val.add_argument("-c", "--config", required=True)
    val.add_argument("--set", action="append", metavar="KEY=VALUE")
    val.set_defaults(func=cmd_validate)

    met = sub.add_parser("metrics", help="metrics from an accuracy matrix CSV")
    met.add_argument("matrix")
    met.set_defaults(func=cmd_metrics)

    cmp_ = sub.add_parser("compare", help="compare two run directories")
    cmp_.add_argument("dir_a")
    cmp_.add_argument("dir_b")
    cmp_.set_defaults(func=cmd_compare)

    demo = sub.add_parser("prox-demo", help="evaluate the weighted soft-threshold")
    demo.add_argument("--tau", type=float, required=True)
    demo.add_argument("--x-old", type=float, required=True)
    demo.add_argument("values", type=float, nargs="+")
    demo.set_defaults(func=cmd_prox_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s", force=True)
    try:
        return args.func(args)
    except (ConfigError, DRCLError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
