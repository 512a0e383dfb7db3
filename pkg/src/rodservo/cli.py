"""Command-line entry point: ``rodservo <subcommand> [options]``.

Every subcommand accepts the global ``--seed``, ``--out-dir`` and
``--config`` flags.  Subcommand flags fill config keys; setting the same key
both in the config file and on the command line is an error, so each run is
described by exactly one flat config.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import bench
from .errors import RodServoError

log = logging.getLogger("rodservo")

# (flag, config key, help) per subcommand
_FLAGS = {
    "gen-dataset": [
        ("--n-samples", "n_samples", "number of samples (default 5000)"),
        ("--n-points", "n_points", "centerline points N (default 50)"),
        ("--out", "out", "dataset file (default dataset.txt)"),
    ],
    "train-dae": [
        ("--dataset", "dataset", "dataset file"),
        ("--p", "p", "latent dimension (default 4)"),
        ("--epochs", "epochs", "training epochs (default 50)"),
        ("--out", "out", "model file (default dae.txt)"),
    ],
    "eval-features": [
        ("--models", "models", "comma-separated model files"),
        ("--dataset", "dataset", "dataset file"),
        ("--pca", "pca", "comma-separated PCA dimensions fitted on the training split"),
        ("--report", "report", "CSV report (default features.csv)"),
    ],
    "extract-centerline": [
        ("--mask", "mask", "plain PGM mask (omit for a synthetic rod)"),
        ("--neurons", "neurons", "chain length N (default 50)"),
        ("--anchor", "anchor", "u,v pixel the chain starts nearest to"),
        ("--out", "out", "centerline text file (default centerline.txt)"),
    ],
    "validate-jacobian": [
        ("--method", "method", "bfgs|dfp|sr1|r1 or all (default all)"),
        ("--trajectory", "trajectory", "trajectory kind (circle)"),
        ("--model", "model", "feature model file (default: PCA on a fresh dataset)"),
        ("--out", "out", "CSV file (default jacobian.csv)"),
    ],
    "servo": [
        ("--method", "method", "bfgs|dfp|sr1|r1 or all (default all)"),
        ("--target", "target", "target centerline, 'x y' rows"),
        ("--model", "model", "feature model file (default: PCA on a fresh dataset)"),
        ("--out", "out", "trace CSV (default trace.csv)"),
    ],
    "stability-check": [
        ("--p", "p", "feature dimension (default 4)"),
        ("--q", "q", "command dimension (default 4)"),
        ("--n-steps", "n_steps", "recursion steps (default 100)"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--out-dir", default=".", help="directory for all outputs")
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--plotdata", action="store_true",
                        help="also write one .dat plot-data file per report table")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rodservo",
                                     description="Shape-servoing experiments on simulated elastic rods.")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in bench.KINDS:
        sp = sub.add_parser(kind, parents=[common])
        for flag, key, text in _FLAGS[kind]:
            sp.add_argument(flag, dest=key, help=text)
    return parser


def spec_from_args(args) -> bench.ExperimentSpec:
    config = bench.load_config(args.config) if args.config else {}
    for _, key, _ in _FLAGS[args.kind]:
        value = getattr(args, key, None)
        if value is None:
            continue
        if key in config:
            raise bench.ConfigError(f"'{key}' is set both in {args.config} and on the command line")
        config[key] = value
    return bench.ExperimentSpec(args.kind, config, args.seed, args.out_dir, args.config)


def _print_tables(report):
    for t in report.tables.values():
        if len(t.rows) > 20:
            continue
        print(f"[{t.name}]")
        print("  " + "  ".join(t.header[:-2]))
        for row in t.rows:
            print("  " + "  ".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row[:-2]))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = spec_from_args(args)
        report = bench.run(spec)
        if args.plotdata:
            report.artifacts += bench.emit_plotdata(report, spec.out_dir)
    except (RodServoError, ValueError, OSError) as exc:
        print(f"rodservo {args.kind}: error: {exc}", file=sys.stderr)
        return 1
    _print_tables(report)
    for path in report.artifacts:
        print(f"wrote {path}")
    print(f"seed {spec.seed}  config {report.config_hash}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
