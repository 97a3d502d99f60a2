"""Command-line entry point: ``ssplab <command> [flags]``.

Exit codes: 0 success, 2 config error, 3 missing prerequisite artifact,
4 numeric failure (non-finite loss or objective), 1 anything else raised by
the lab.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import ExperimentConfig, load_config
from .decontam import DEFAULT_NGRAM, run_decontam
from .errors import ConfigError, SSPLabError


def _run_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="experiment config (JSON); defaults apply to omitted fields")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true", help="skip stages already complete in the manifest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssplab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in [
        ("sft-train", "warm start + per-subdomain SFT with periodic checkpoints"),
        ("probe", "Pass@K probe curves for every SFT checkpoint"),
        ("merge", "select per-subdomain specialists and fuse them"),
        ("rl-train", "run the RL stage list from the fused checkpoint"),
        ("report", "write report/summary.csv and report/summary.json"),
        ("pipeline", "sft-train, probe, merge, rl-train, eval and report in one go"),
    ]:
        _run_args(sub.add_parser(name, help=help_))

    ev = sub.add_parser("eval", help="Pass@1 / Pass@K table for a checkpoint")
    _run_args(ev)
    ev.add_argument("--checkpoint", default="final", help="init | fused | final | path to a checkpoint file")
    ev.add_argument("--split", choices=["train", "probe", "holdout"])
    ev.add_argument("--n", type=int)
    ev.add_argument("--k", type=int)

    dc = sub.add_parser("decontam", help="drop training records sharing an n-gram with evaluation text")
    dc.add_argument("--train", required=True, help="line-delimited training records")
    dc.add_argument("--eval", required=True, action="append", help="evaluation records (repeatable)")
    dc.add_argument("--out", required=True, help="kept records")
    dc.add_argument("--removed", help="removed records")
    dc.add_argument("--report", help="audit report (JSONL)")
    dc.add_argument("--ngram", type=int, default=DEFAULT_NGRAM, help="gram length in words (default 10)")
    dc.add_argument("--text-field", help="treat lines as JSON objects and read text from this field")

    dflt = sub.add_parser("default-config", help="print the default experiment config")
    dflt.add_argument("--seed", type=int, default=0)
    return parser


def _print_table(table: dict):
    print(f"checkpoint {table['checkpoint']}  split={table['split']}  n={table['n']}  K={table['K']}")
    print(f"{'subdomain':<12} {'problems':>8} {'pass@1':>8} {'pass@K':>8}")
    for r in table["rows"]:
        print(f"{r['subdomain']:<12} {r['problems']:>8} {r['pass1']:>8.4f} {r['passk']:>8.4f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "default-config":
            print(json.dumps(ExperimentConfig(seed=args.seed).to_dict(), indent=2))
            return 0
        if args.command == "decontam":
            if args.ngram < 1:
                raise ConfigError("--ngram must be >= 1")
            stats = run_decontam(args.train, args.eval, args.out, args.removed, args.report, args.ngram, args.text_field)
            print(json.dumps(stats))
            return 0

        cfg = load_config(args.config, seed=args.seed)
        with harness.Run(cfg, args.out, resume=args.resume) as run:
            if args.command == "sft-train":
                harness.cmd_sft_train(run)
            elif args.command == "probe":
                for c in harness.cmd_probe(run):
                    print(json.dumps({"subdomain": c.subdomain, "points": c.points}))
            elif args.command == "merge":
                snap = harness.cmd_merge(run)
                print(f"fused checkpoint at step {snap.step}: {run.manifest['stages']['merge']['fused']}")
            elif args.command == "rl-train":
                snap = harness.cmd_rl_train(run)
                print(f"final checkpoint at step {snap.step}: {run.manifest['stages']['rl']['final']}")
            elif args.command == "eval":
                _print_table(harness.cmd_eval(run, args.checkpoint, args.split, args.n, args.k))
            elif args.command == "report":
                print(harness.cmd_report(run))
            elif args.command == "pipeline":
                for tag, table in harness.run_pipeline(run).items():
                    print(f"[{tag}]")
                    _print_table(table)
        return 0
    except SSPLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
