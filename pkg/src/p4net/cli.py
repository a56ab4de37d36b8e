"""Command-line entry point: ``p4net run | gridsearch | plot``."""
from __future__ import annotations

import argparse
import logging
import re
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import METHODS, parse_config
from .errors import P4NetError
from .runner import grid_search, read_metrics, run_repeats

_RUN_FILE = re.compile(r"^(?P<method>.+)_seed(?P<seed>\d+)\.csv$")


def _print_config(cfg, out) -> None:
    print("# resolved configuration", file=out)
    for key, value in cfg.resolved().items():
        print(f"{key} = {value}", file=out)


def cmd_run(args) -> int:
    cfg = parse_config(args.config, method=args.method, seed=args.seed, repeats=args.repeats)
    _print_config(cfg, sys.stdout)
    results = run_repeats(cfg, args.out)
    print("# results")
    for res in results:
        where = f" -> {res.path}" if res.path else ""
        print(f"{res.method} seed={res.seed} final_acc={res.final_accuracy:.4f} "
              f"messages={res.messages} bytes={res.bytes_sent}{where}")
    accs = [r.final_accuracy for r in results]
    print(f"mean final_acc={np.mean(accs):.4f} over {len(accs)} run(s)")
    return 0


def cmd_gridsearch(args) -> int:
    cfg = parse_config(args.config, method=args.method, seed=args.seed)
    _print_config(cfg, sys.stdout)
    records = grid_search(cfg)
    print("lr0,clip,lr_local,final_acc")
    for rec in records:
        print(f"{rec['lr0']:g},{rec['clip']:g},{rec['lr_local']:g},{rec['final_acc']:.4f}")
    best = records[0]
    print(f"# best: lr0 = {best['lr0']:g}, clip = {best['clip']:g}")
    return 0


def collect_curves(in_dir) -> dict:
    """Mean test accuracy per round for each method found in ``in_dir``.

    Files must be named ``<method>_seed<N>.csv``; accuracy is averaged over
    clients within a file, then over seeds.
    """
    per_method = defaultdict(list)
    for path in sorted(Path(in_dir).glob("*.csv")):
        m = _RUN_FILE.match(path.name)
        if not m:
            continue
        by_round = defaultdict(list)
        for row in read_metrics(path):
            by_round[int(row["round"])].append(float(row["test_acc"]))
        per_method[m["method"]].append({r: float(np.mean(v)) for r, v in by_round.items()})
    curves = {}
    for method, runs in per_method.items():
        rounds = sorted(set.intersection(*(set(r) for r in runs)))
        curves[method] = (rounds, [float(np.mean([run[r] for run in runs])) for r in rounds])
    return curves


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = collect_curves(args.in_dir)
    if not curves:
        raise P4NetError(f"no <method>_seed<N>.csv files in {args.in_dir}")
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(curves):
        rounds, acc = curves[method]
        ax.plot(rounds, acc, marker="o", markersize=3, label=method)
    ax.set_xlabel("communication round")
    ax.set_ylabel("mean test accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg")
    plt.close(fig)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p4net", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one method, optionally repeated over seeds")
    run.add_argument("--config", required=True, help="flat key = value config file")
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--seed", type=int)
    run.add_argument("--repeats", type=int)
    run.add_argument("--out", help="directory for <method>_seed<N>.csv metrics files")
    run.set_defaults(func=cmd_run)

    grid = sub.add_parser("gridsearch", help="search lr0 x clip on the reserved evaluation clients")
    grid.add_argument("--config", required=True)
    grid.add_argument("--method", choices=METHODS)
    grid.add_argument("--seed", type=int)
    grid.set_defaults(func=cmd_gridsearch)

    plot = sub.add_parser("plot", help="accuracy-vs-round SVG from a directory of metrics files")
    plot.add_argument("--in", dest="in_dir", required=True)
    plot.add_argument("--out", required=True)
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (P4NetError, OSError) as exc:
        print(f"p4net: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
