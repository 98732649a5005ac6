"""Command-line entry points.

    kml train <config>                  run episodic training
    kml transfer <config> <checkpoint>  measure transference from a checkpoint
    kml paramcount <arch>               generator parameter accounting
    kml verify-film [--seed --trials]   two-path modulation equivalence check
    kml report <run_dir>                consolidate a run directory

Exit codes: 0 ok, 1 I/O, 2 configuration, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

from ..errors import ConfigurationError, ContractViolation, DivergenceError
from . import runner


def _cmd_train(args) -> int:
    out = runner.run_train(args.config)
    print(f"wrote {out['history']}")
    print(f"wrote {out['checkpoint']}")
    return 0


def _cmd_transfer(args) -> int:
    out = runner.run_transfer(args.config, args.checkpoint)
    print(f"wrote {out['records']}")
    print(f"wrote {out['summary']}")
    print(f"mean lr = {out['mean_lr']!r}")
    return 0


def _cmd_paramcount(args) -> int:
    rep = runner.run_paramcount(args.arch, embedding_dim=args.embedding_dim, rank=args.rank)
    if args.json:
        print(json.dumps(rep, indent=2, sort_keys=True))
        return 0
    print(f"arch {rep['arch']}  embedding_dim {rep['embedding_dim']}  rank {rep['rank']}")
    print(f"{'layer':>6} {'single_mlp':>14} {'simplified':>12}")
    singles = rep["single_mlp"]["per_layer"]
    simples = rep["simplified"]["per_layer"]
    for i, (a, b) in enumerate(zip(singles, simples), start=1):
        print(f"{i:>6} {a:>14,} {b:>12,}")
    print(f"{'total':>6} {rep['single_mlp']['total']:>14,} {rep['simplified']['total']:>12,}")
    print(f"reduction factor (instantiated counts): {rep['reduction_factor_instantiated']:.1f}")
    if "reference" in rep:
        ref = rep["reference"]
        print(f"reduction factor (reference table rows {ref['simplified']['per_layer']},"
              f" total {ref['simplified']['total']:,}): {ref['reduction_factor']:.1f}")
    return 0


def _cmd_verify_film(args) -> int:
    rep = runner.run_verify_film(seed=args.seed, trials=args.trials)
    if args.json:
        print(json.dumps(rep, indent=2, sort_keys=True))
        return 0
    for mode in ("f64", "f32"):
        r = rep[mode]
        print(f"{mode}: max relative error {r['max_rel_error']!r} over {r['trials']} trials; "
              f"identity trial error {r['identity_error']!r}")
    return 0


def _cmd_report(args) -> int:
    rep = runner.run_report(args.run_dir)
    overall = rep["accuracy"]["overall"]
    print(f"wrote {args.run_dir}/report.json")
    print(f"overall accuracy {overall['mean']:.4f} +- {overall['half_width95']:.4f} "
          f"({overall['episodes']} episodes)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kml", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run episodic training from a config file")
    t.add_argument("config")
    t.set_defaults(func=_cmd_train)

    tr = sub.add_parser("transfer", help="measure transference from a checkpoint")
    tr.add_argument("config")
    tr.add_argument("checkpoint")
    tr.set_defaults(func=_cmd_transfer)

    pc = sub.add_parser("paramcount", help="generator parameter accounting")
    pc.add_argument("arch", help="desk-conv | desk-dense | paper-4conv")
    pc.add_argument("--embedding-dim", type=int, default=128)
    pc.add_argument("--rank", type=int, default=1)
    pc.add_argument("--json", action="store_true")
    pc.set_defaults(func=_cmd_paramcount)

    vf = sub.add_parser("verify-film", help="two-path modulation equivalence check")
    vf.add_argument("--seed", type=int, default=0)
    vf.add_argument("--trials", type=int, default=100)
    vf.add_argument("--json", action="store_true")
    vf.set_defaults(func=_cmd_verify_film)

    rp = sub.add_parser("report", help="consolidate a run directory into report.json")
    rp.add_argument("run_dir")
    rp.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ContractViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
