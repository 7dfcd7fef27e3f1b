"""Run one study condition at desk scale and print its recovery, power and diagnostics tables.

    python3 scripts/desk_condition.py --condition K12_q0.8_J150_n60_x1-1_z1-1 --reps 100 --out runs/ref
"""
import argparse
import logging

import pandas as pd

from npmlca import harness
from npmlca.io import RecordStore


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--condition", default="77", help="grid id or condition label")
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--seed", type=int, default=20240611)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ids = harness.parse_condition_selector(args.condition)
    store = RecordStore(args.out)
    cfg = harness.StudyConfig(args.seed, args.reps, ids, args.jobs)
    harness.run_study(cfg, store, lambda d, t: logging.info("%d/%d", d, t))
    recs = store.read_all()
    pd.set_option("display.width", 200)
    for name in ("recovery", "power", "classification", "diagnostics"):
        print(f"\n== {name}")
        print(harness.REPORTS[name](recs).to_string(index=False))


if __name__ == "__main__":
    main()
