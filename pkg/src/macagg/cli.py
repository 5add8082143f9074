"""Command line entry point.

    python -m macagg.cli run configs/static-10B.toml --scheme "Agg(16)" --out run.csv
    python -m macagg.cli sweep configs/sweep-good.toml --out sweep.csv
    python -m macagg.cli label --traces 2000 --out dataset.csv
    python -m macagg.cli fit dataset.csv --out curves.csv
    python -m macagg.cli dynamic configs/step.toml --out timeline.csv

CSV columns are listed in README.md.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from . import adaptation, config, experiment
from .auth import AggScheme
from .channel import LengthProfile, generate_traces


def _write(rows: Iterable[dict], out: Optional[str]) -> None:
    rows = list(rows)
    fh: TextIO = open(out, "w", newline="") if out else sys.stdout
    try:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    finally:
        if out:
            fh.close()


def cmd_run(args: argparse.Namespace) -> None:
    sc = config.load_scenario(args.config)
    over = {k: v for k, v in (("seed", args.seed), ("messages", args.messages), ("scheme", args.scheme)) if v is not None}
    sc = replace(sc, **over)
    presets = config.load_presets(args.channels)
    schemes = [sc.scheme] if args.scheme or not args.all_schemes else [
        "Trad", "Agg(2)", "Agg(4)", "Agg(8)", "Agg(16)", "R2D2(8,50)", "R2D2(8,100)"]
    rows = []
    for s in schemes:
        rep = experiment.run_scenario(replace(sc, scheme=s), presets)
        rows.append({"scenario": sc.name, "seed": sc.seed, **rep.row()})
    _write(rows, args.out)


def cmd_sweep(args: argparse.Namespace) -> None:
    cfg = config.load_sweep(args.config)
    presets = config.load_presets(args.channels)
    seed = cfg["seed"] if args.seed is None else args.seed
    messages = cfg["messages"] if args.messages is None else args.messages
    rows = experiment.sweep(presets[cfg["channel"]], cfg["payloads"], [AggScheme.parse(s) for s in cfg["schemes"]],
                            messages, seed)
    _write(({"channel": cfg["channel"], **r.row()} for r in rows), args.out)


def cmd_label(args: argparse.Namespace) -> None:
    presets = config.load_presets(args.channels)
    shape: Optional[LengthProfile] = presets[args.shape].profile if args.shape else None
    traces = generate_traces(args.traces, packets=args.messages or 2000, profile=shape,
                             seed=0 if args.seed is None else args.seed)
    candidates = sorted({s for f in ("agg", "r2d2") for s in adaptation.family_schemes(f)},
                        key=lambda s: s.aggressiveness, reverse=True)
    points = adaptation.label_optimal(traces, args.payloads, candidates)
    adaptation.write_dataset(points, args.out or "dataset.csv")


def fit_curves(points: Sequence[adaptation.LabeledPoint], families: Sequence[str], k: int = 15,
               per_steps: int = 601) -> list[adaptation.BoundaryCurve]:
    """KNN-fill the plane per family and fit every boundary the data supports."""
    curves = []
    pers = np.linspace(0.0, adaptation.PER_SCALE, per_steps)
    payloads = range(adaptation.PAYLOAD_DOMAIN[0], adaptation.PAYLOAD_DOMAIN[1] + 1, 2)
    for fam in families:
        sub = adaptation.relabel(points, adaptation.family_schemes(fam))
        grid = adaptation.KnnMap(sub, k).grid(payloads, pers)
        curves += adaptation.fit_family(grid, fam)
    return curves


def cmd_fit(args: argparse.Namespace) -> None:
    points = adaptation.read_dataset(args.dataset)
    curves = fit_curves(points, args.family, args.k)
    adaptation.write_curves(curves, args.out or "curves.csv")
    for cv in curves:
        print(f"{cv.family}: {cv.below} | {cv.above}: a={cv.a:.4g} b={cv.b:.4g} c={cv.c:.4g} rms={cv.residual:.2g}")


def cmd_dynamic(args: argparse.Namespace) -> None:
    sched = config.load_schedule(args.config, config.load_presets(args.channels))
    family = args.family or sched["family"]
    curves = adaptation.read_curves(args.curves) if args.curves else config.default_curves()
    seed = sched["seed"] if args.seed is None else args.seed
    segs = sched["segments"]
    if args.messages is not None:
        scale = args.messages / sum(s.packets for s in segs)
        segs = [replace(s, packets=max(1, round(s.packets * scale))) for s in segs]
    rep = experiment.run_dynamic(segs, family, curves, payload_len=sched["payload_len"],
                                 rate_hz=sched["rate_hz"], seed=seed)
    switches = dict(rep.switch_log)
    current = rep.switch_log[0][1]
    rows = []
    marks = sorted(switches)
    for end, per, gp in rep.per_timeline:
        for m in marks:
            if m < end:
                current = switches[m]
        rows.append({"packet": end, "seconds": f"{end / rep.rate_hz:.1f}", "window_per": f"{per:.6f}",
                     "window_goodput": f"{gp:.6f}", "scheme": current})
    _write(rows, args.out)
    print(f"{family}: overall goodput {rep.authenticated_goodput:.4f}, {len(rep.switch_log) - 1} switches",
          file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="macagg", description="MAC aggregation experiments")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="CSV output path (default: stdout)")
        p.add_argument("--messages", type=int)
        p.add_argument("--channels", help="channel preset TOML (default: bundled presets)")

    p = sub.add_parser("run", help="full pipeline for one scenario")
    p.add_argument("config")
    p.add_argument("--scheme")
    p.add_argument("--all-schemes", action="store_true")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="payload x scheme grid on a stitched trace")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("label", help="generate traces and label the best scheme per point")
    p.add_argument("--traces", type=int, default=2000)
    p.add_argument("--payloads", type=int, nargs="+", default=[1, 5, 10, 15, 20, 30, 40, 50, 60, 70, 80, 91])
    p.add_argument("--shape", default="good", help="preset whose length profile shapes every trace")
    common(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("fit", help="fit boundary curves to a labelled dataset")
    p.add_argument("dataset")
    p.add_argument("--family", nargs="+", default=["agg", "r2d2"])
    p.add_argument("--k", type=int, default=15)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("dynamic", help="adaptive run over a channel schedule")
    p.add_argument("config")
    p.add_argument("--family")
    p.add_argument("--curves")
    common(p)
    p.set_defaults(func=cmd_dynamic)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
