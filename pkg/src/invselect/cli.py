"""Command-line entry point: ``invselect {generate,run,sweep,replicate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import ExperimentConfig, generate_dataset, replicate_error_rates, resweep, run_experiment
from .models import Dataset
from .streams import SeededStream

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 2, 1


def _load_config(args) -> ExperimentConfig:
    d = {}
    if args.config:
        d = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        d["root_seed"] = args.seed
    if args.preset is not None:
        d["preset"] = args.preset
    if getattr(args, "misspecified", False):
        d["misspecified"] = True
    for key in ("n", "m", "scenario", "replicates"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if getattr(args, "linear_only", False):
        d["linear_only"] = True
    return ExperimentConfig.from_dict(d)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with ExperimentConfig fields")
    p.add_argument("--seed", type=int, help="root seed (unsigned 64-bit)")
    p.add_argument("--preset", choices=("paper", "desk"), help="chain budget preset")
    p.add_argument("--misspecified", action="store_true", help="drop the true model from the roster")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenario", choices=("single_covariate", "two_covariate"))
    p.add_argument("--n", type=int, help="number of sites")
    p.add_argument("--m", type=int, help="replicates per site")
    p.add_argument("--linear-only", action="store_true", help="two-covariate roster without GP models")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invselect", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", help="simulate and write a dataset")
    _add_common(g)
    r = sub.add_parser("run", help="run the full selection pipeline")
    _add_common(r)
    r.add_argument("--dataset", help="dataset JSON to analyse instead of simulating")
    r.add_argument("--dump-chains", action="store_true", help="write forward-chain CSVs")
    s = sub.add_parser("sweep", help="recompute decisions.csv from a finished run directory")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--config", help="unused; accepted for symmetry")
    s.add_argument("--seed", type=int)
    s.add_argument("--preset", choices=("paper", "desk"))
    s.add_argument("--misspecified", action="store_true")
    s.add_argument("-v", "--verbose", action="count", default=0)
    p = sub.add_parser("replicate", help="average cFDR/cFNR over seeded dataset replicates")
    _add_common(p)
    p.add_argument("--replicates", type=int, help="number of replicates S")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        if args.command == "sweep":
            table = resweep(out)
            print(f"wrote {out / 'decisions.csv'} ({len(table.beta_grid)} rows)")
            return EXIT_OK
        cfg = _load_config(args)
        if args.command == "generate":
            data, truth = generate_dataset(cfg, SeededStream(cfg.root_seed, ("data",)))
            out.mkdir(parents=True, exist_ok=True)
            (out / "dataset.json").write_text(json.dumps(data.to_dict(), indent=1) + "\n")
            (out / "truth.json").write_text(json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n")
            (out / "config.json").write_text(cfg.to_json() + "\n")
            print(f"wrote {out / 'dataset.json'}")
            return EXIT_OK
        if args.command == "run":
            if args.dump_chains:
                cfg.dump_chains = True
            data = None
            if args.dataset:
                data = Dataset.from_dict(json.loads(Path(args.dataset).read_text()))
            res = run_experiment(cfg, out, dataset=data)
            if res.failures:
                print(f"partial failure; see {out / 'failures.json'}", file=sys.stderr)
                return EXIT_PARTIAL
            print(f"wrote results to {out}")
            return EXIT_OK
        if args.command == "replicate":
            est = replicate_error_rates(cfg, out_dir=out)
            print(f"wrote {out / 'replicates.csv'} ({len(est.seeds)} replicates)")
            return EXIT_PARTIAL if est.n_failed else EXIT_OK
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
