"""Command-line interface: ``npmlca fit|simulate|replicate|report``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .estimator import FitOptions, fit
from .io import (
    FormatError,
    RecordStore,
    atomic_write,
    infer_spec,
    params_to_dict,
    read_condition,
    read_dataset_csv,
    read_json,
    write_dataset_csv,
    write_json,
    write_truth_csv,
)
from .model import ModelError
from .simulator import ConditionError, build_true_parameters, generate_dataset

log = logging.getLogger("npmlca")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_VALUE = 4


def _write_csv(df, path: Path) -> None:
    atomic_write(path, df.to_csv(index=False, lineterminator="\n"))


def cmd_fit(args) -> int:
    cfg = read_json(args.config, "model") if args.config else {}
    L = args.classes or cfg.get("L")
    M = args.site_classes or cfg.get("M")
    if not L or not M:
        raise ModelError("level-1 and level-2 class counts are required (--classes/--site-classes or config L/M)")
    min_size = cfg.get("min_site_size", 5)
    data, dropped = read_dataset_csv(args.data, min_size, args.keep_small_sites)
    spec = infer_spec(data, int(L), int(M), cfg.get("n_categories"))
    opts = replace(FitOptions(seed=args.seed), **cfg.get("fit", {}))
    if args.starts is not None:
        opts = replace(opts, n_starts=args.starts, n_refine=min(opts.n_refine, args.starts))
    result = fit(data, spec, opts)
    if not result.converged:
        log.warning("fit did not converge; reports are flagged")
    out = Path(args.out)
    doc = harness.fit_to_dict(result, data)
    doc["dropped_sites"] = dropped
    doc["options"] = {k: v for k, v in vars(opts).items() if k != "start_values"}
    write_json(out / "fit.json", doc, "fit")
    crp = harness.crp_table(result)
    _write_csv(crp, out / "crp.csv")
    stats = harness.fit_stats_table(result)
    _write_csv(stats, out / "fit_stats.csv")
    _write_csv(harness.odds_ratio_table(result, args.alpha), out / "odds_ratios.csv")
    _write_csv(harness.composition_table(result, data), out / "composition.csv")
    print(stats.to_string(index=False))
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.condition_id is not None:
        cond = harness.condition_by_id(args.condition_id)
    elif args.condition:
        cond = read_condition(args.condition)
    else:
        raise ModelError("give a condition file or --condition-id")
    truth = build_true_parameters(cond)
    data = generate_dataset(cond, truth, args.seed)
    out = Path(args.out)
    write_dataset_csv(out / "data.csv", data)
    write_truth_csv(out / "truth.csv", data)
    write_json(out / "params.json", {"condition": cond.to_dict(), "seed": args.seed,
                                     "params": params_to_dict(truth)}, "truth")
    print(f"wrote {data.N} rows in {data.J} sites to {out}")
    return EXIT_OK


def cmd_replicate(args) -> int:
    overrides = {}
    if args.config:
        doc = read_json(args.config, "study")
        overrides = doc.get("fit_overrides", {})
        seed = args.seed if args.seed is not None else doc["master_seed"]
        reps = args.reps or doc.get("reps", 500)
        conds = (harness.parse_condition_selector(args.conditions) if args.conditions
                 else tuple(doc.get("conditions", range(1, 97))))
    else:
        seed = 0 if args.seed is None else args.seed
        reps = args.reps or 500
        conds = harness.parse_condition_selector(args.conditions)
    config = harness.StudyConfig(seed, reps, conds, args.jobs, overrides)
    store = RecordStore(args.out)

    def progress(done, total):
        log.info("%d/%d replications written", done, total)

    n = harness.run_study(config, store, progress)
    print(f"{n} new record(s); store holds {len(store)}")
    return EXIT_OK


def cmd_report(args) -> int:
    store = RecordStore(args.store)
    records = store.read_all()
    if not records:
        raise FormatError(f"no records in {args.store}")
    kinds = list(harness.REPORTS) if args.kind == "all" else [args.kind]
    out = Path(args.out) if args.out else store.root / "reports"
    for kind in kinds:
        fn = harness.REPORTS[kind]
        df = fn(records, args.alpha) if kind == "power" else fn(records)
        _write_csv(df, out / f"{kind}.csv")
        print(f"wrote {out / (kind + '.csv')} ({len(df)} rows)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npmlca", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a conditional NP-MLCA model to a dataset CSV")
    f.add_argument("data")
    f.add_argument("--config", help="model config JSON (L, M, fit options)")
    f.add_argument("--classes", type=int, help="number of level-1 classes")
    f.add_argument("--site-classes", type=int, help="number of level-2 classes")
    f.add_argument("--starts", type=int, help="number of random starts")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--alpha", type=float, default=0.05)
    f.add_argument("--keep-small-sites", action="store_true")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="generate one dataset for a study condition")
    s.add_argument("condition", nargs="?", help="condition JSON file")
    s.add_argument("--condition-id", type=int, help="grid position 1..96 instead of a file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("replicate", help="run replications into a resumable record store")
    r.add_argument("--config", help="study config JSON")
    r.add_argument("--seed", type=int, help="master seed")
    r.add_argument("--reps", type=int, help="replications per condition (default 500)")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--conditions", help="'all', ids/ranges like '1-4,77' or condition labels")
    r.add_argument("--out", required=True, help="record store directory")
    r.set_defaults(func=cmd_replicate)

    t = sub.add_parser("report", help="summarise a record store into CSV tables")
    t.add_argument("store")
    t.add_argument("--kind", default="all", choices=["all", *harness.REPORTS])
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--out")
    t.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FormatError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConditionError, ModelError, ValueError) as exc:
        print(f"invalid value: {exc}", file=sys.stderr)
        return EXIT_VALUE


if __name__ == "__main__":
    sys.exit(main())
