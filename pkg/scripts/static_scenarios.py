"""Full-pipeline goodput, energy and delay for the three static deployment scenarios.

    python3 scripts/static_scenarios.py --messages 20000
"""
import argparse
import csv
from pathlib import Path

from macagg.experiment import delay_profile, run_scenario, static_scenario

SCHEMES = ["Trad", "Agg(2)", "Agg(4)", "Agg(8)", "Agg(16)", "R2D2(8,50)", "R2D2(8,100)", "R2D2(8,200)"]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--messages", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--channel", default="good")
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(exist_ok=True)
    rows, delays = [], []
    for name in ("static-10B", "static-30B", "static-70B"):
        for scheme in SCHEMES:
            sc = static_scenario(name, scheme, messages=args.messages, seed=args.seed, channel=args.channel)
            rep = run_scenario(sc)
            rows.append({"scenario": name, **rep.row()})
            delays += [{"scenario": name, "scheme": scheme, "follow_ups": d, "seconds": f"{s:g}",
                        "fraction": f"{f:.6f}"} for d, s, f in delay_profile(rep)]
            print(f"{name} {scheme:12s} goodput {rep.authenticated_goodput:.4f}")
    for path, data in ((out / "static.csv", rows), (out / "static-delay.csv", delays)):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(data[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(data)


if __name__ == "__main__":
    main()
