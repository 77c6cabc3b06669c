"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 missing artifact dependency, 4 bad data or
config, 5 internal error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4, 5
STRATEGY_CHOICES = ("paratool", "average", "top1", "oracle", "no_finetune")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default", help="preset (default, smoke, published) or JSON file")
    common.add_argument("--seed", type=int, action="append", help="run seed; repeatable; overrides the config")
    common.add_argument("--name", help="experiment name (directory under the runs root)")
    common.add_argument("--root", help="artifact root; defaults to $PARATOOL_RUNS or ./runs")
    common.add_argument("--backbone", help="reuse a trained backbone checkpoint")
    common.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1, deterministic)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="paratool", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")
    sub.add_parser("synth", parents=[common], help="generate the toolset and trace corpus")
    sub.add_parser("pretrain", parents=[common], help="train the backbone if needed, then per-tool adapters")
    sub.add_parser("train-gate", parents=[common], help="train the gating network on frozen embeddings")
    sub.add_parser("finetune", parents=[common], help="joint adapter fine-tuning under the frozen gate")
    ev = sub.add_parser("eval", parents=[common], help="evaluate one composition strategy on the test split")
    ev.add_argument("--strategy", choices=STRATEGY_CHOICES, default="paratool")
    sub.add_parser("ablate", parents=[common], help="evaluate every strategy")
    sub.add_parser("theory", parents=[common], help="gradient-norm bound and radius checks")
    fl = sub.add_parser("flops", parents=[common], help="context vs parameter inference FLOPs")
    fl.add_argument("--profiles", help="extra workload profiles (JSON list or JSON lines)")
    sub.add_parser("report", parents=[common], help="render flat tables from structured records")
    ra = sub.add_parser("run-all", parents=[common], help="synth through report for every seed")
    ra.add_argument("--skip-theory", action="store_true")
    ad = sub.add_parser("adapters", parents=[common], help="inspect adapter stores")
    ad.add_argument("action", choices=("ls", "export"))
    ad.add_argument("--stage", type=int, choices=(1, 3), default=3)
    ad.add_argument("--tools", help="comma-separated tool ids for export")
    ad.add_argument("--out", help="output path for export")
    return p


def _run(args) -> int:
    # heavy imports only after the thread cap is in the environment
    from . import config as cfgmod
    from .runner import Run

    cfg = cfgmod.load(args.config)
    if args.seed:
        cfg.seeds = list(args.seed)
    if args.name:
        cfg.name = args.name
    if args.backbone:
        cfg.backbone_path = args.backbone
    if args.verb == "flops" and args.profiles:
        cfg.flops.profiles = args.profiles
    run = Run(cfg, args.root)
    seeds = cfg.seeds
    verb = args.verb
    if verb == "run-all":
        rows = run.run_all(theory=not args.skip_theory)
        print((run.report_dir() / "summary_mean.tsv").read_text(), end="")
        return EXIT_OK
    run.archive_config()
    if verb == "flops":
        print(run.flops().table(), end="")
        return EXIT_OK
    if verb == "report":
        run.report()
        print((run.report_dir() / "summary.tsv").read_text(), end="")
        return EXIT_OK
    if verb == "adapters":
        return _adapters(run, args)
    for seed in seeds:
        if verb == "synth":
            c = run.synth(seed)
            print(f"seed {seed}: {len(c.tools)} tools, {len(c.train)} train / {len(c.validation)} validation / "
                  f"{len(c.test)} test, {c.removed} removed by decontamination")
        elif verb == "pretrain":
            run.pretrain(seed)
            print(f"seed {seed}: stage-1 adapters -> {run.stage1_path(seed)}")
        elif verb == "train-gate":
            run.train_gate(seed)
            print(f"seed {seed}: gate -> {run.gate_path(seed)}")
        elif verb == "finetune":
            run.finetune(seed)
            print(f"seed {seed}: stage-3 adapters -> {run.stage3_path(seed)}")
        elif verb == "eval":
            rep = run.eval(seed, args.strategy)
            s = rep.summary()
            print(f"seed {seed} {s['strategy']}: pass {s['pass_rate']:.4f} gating {s['gating_accuracy']:.4f} "
                  f"action {s['action_accuracy']:.4f} (n={s['n']})")
        elif verb == "ablate":
            run.ablate(seed)
            print((run.report_dir(seed) / "ablation.tsv").read_text(), end="")
        elif verb == "theory":
            run.theory(seed)
            print((run.report_dir(seed) / "theory.tsv").read_text(), end="")
    return EXIT_OK


def _adapters(run, args) -> int:
    from .adapter import describe_store, load_store, save_store

    for seed in run.cfg.seeds:
        path = run.stage1_path(seed) if args.stage == 1 else run.stage3_path(seed)
        run.store(seed, args.stage)  # dependency check
        if args.action == "ls":
            print(f"seed {seed}: {describe_store(path)}")
        else:
            ids = [int(t) for t in args.tools.split(",")] if args.tools else None
            store = load_store(path, ids)
            out = args.out or str(path.with_name(f"export_stage{args.stage}.ptad"))
            save_store(store, out)
            print(f"seed {seed}: exported tools {store.ids()} -> {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(max(1, args.threads))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .binfile import FormatError
    from .config import ConfigError
    from .runner import DependencyError
    from .synth import ParseError
    from .vocab import VocabError

    try:
        return _run(args)
    except DependencyError as e:
        print(f"paratool: dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ConfigError, FormatError, VocabError, ParseError, KeyError, ValueError, OSError) as e:
        print(f"paratool: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # pragma: no cover - last-resort categorisation
        print(f"paratool: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
