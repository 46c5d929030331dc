"""Command-line entry point: ``tsddnet <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .data import DataError
from .experiment import ConfigError, RunExistsError, build_config, cmd_ablate, cmd_eval, cmd_gen_data, \
    cmd_sweep_p, cmd_train, cmd_visualize
from .train import DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--data", dest="data_dir", help="dataset directory (manifest.csv inside)")
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("--p", type=float)
    p.add_argument("--k-candidates", dest="k_candidates", type=int)
    p.add_argument("--iterations", dest="n_outer_iterations", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--variant", choices=["B", "CS", "SD", "FULL"])
    p.add_argument("--folds", type=int, dest="n_folds", help="number of cross-validation folds")
    p.add_argument("--only-folds", dest="folds", help="comma-separated fold indices to run (default all)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run with the same config")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tsddnet", description="two-stage weakly supervised lesion detection and diagnosis")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--patients", type=int, default=60)
    g.add_argument("--images-per-patient", type=int, default=5)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--jitter", type=float, default=0.25)
    g.add_argument("--seed", type=int, default=0)

    for name, text in (("train", "train and evaluate one variant"), ("ablate", "train all four variants")):
        _config_flags(sub.add_parser(name, help=text))
    s = sub.add_parser("sweep-p", help="one training run per annotated fraction p")
    _config_flags(s)
    s.add_argument("--p-list", required=True, help="comma-separated p values")

    e = sub.add_parser("eval", help="re-evaluate a run's saved bundles")
    e.add_argument("run")
    v = sub.add_parser("visualize", help="overlay original, stored and predicted boxes")
    v.add_argument("run")
    v.add_argument("image_ids", nargs="+")
    v.add_argument("--out")
    return ap


_CONFIG_KEYS = ("data_dir", "profile", "p", "k_candidates", "n_outer_iterations", "alpha", "beta", "variant",
                "n_folds", "folds", "seed", "out_dir")


def _config(args):
    over = {k: getattr(args, k) for k in _CONFIG_KEYS}
    for kv in args.set:
        if "=" not in kv:
            raise ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        over[k.strip()] = v.strip()
    return build_config(args.config, over)


def run(args) -> int:
    if args.command == "gen-data":
        path = cmd_gen_data(args.out, args.patients, args.images_per_patient, args.size, args.jitter, args.seed)
        print(path)
    elif args.command in ("train", "ablate"):
        cfg = _config(args)
        fn = cmd_train if args.command == "train" else cmd_ablate
        print(fn(cfg, force=args.force))
    elif args.command == "sweep-p":
        try:
            ps = [float(v) for v in args.p_list.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"bad --p-list {args.p_list!r}") from None
        sweep, _ = cmd_sweep_p(_config(args), ps, force=args.force)
        print(sweep)
    elif args.command == "eval":
        cmd_eval(args.run)
        print(args.run)
    elif args.command == "visualize":
        for p in cmd_visualize(args.run, args.image_ids, args.out):
            print(p)
    return EXIT_OK


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, RunExistsError) as e:
        print(f"tsddnet: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, KeyError, FileNotFoundError) as e:
        print(f"tsddnet: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"tsddnet: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
