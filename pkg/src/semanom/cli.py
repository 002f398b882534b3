"""Command line entry point: ``semanom {split,train,score,eval,report,run}``.

Exit status is 0 on success, 2 for usage errors (bad flags, missing config
file) and 1 for any other failure. Errors are printed as a single
``error: ...`` line on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .experiment import (ConfigError, ExperimentConfig, ExperimentRecord, build_splits, emit_comparison,
                         run_experiment, score_stage, train_stage)
from .metrics import average_precision, pr_curve, read_scores_csv, write_pr_csv


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semanom", description="Semantic anomaly detection benchmark.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{split,train,score,eval,report,run}")

    def with_config(name, help_text, resume=False):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, metavar="PATH", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", metavar="DIR", help="override the output directory")
        if resume:
            sp.add_argument("--resume", action="store_true", help="reuse finished work in the output directory")
        return sp

    with_config("split", "print the hold-out splits of the configured dataset")
    with_config("train", "train one classifier per (split, trial) cell", resume=True)
    with_config("score", "score test sets with trained classifiers and baselines")
    with_config("run", "train, score and evaluate every cell and write the record", resume=True)

    ev = sub.add_parser("eval", help="average precision of a scores CSV")
    ev.add_argument("scores", metavar="SCORES_CSV")
    ev.add_argument("flags", nargs="?", metavar="FLAGS_CSV", help="example_index,is_anomaly rows")
    ev.add_argument("--pr", metavar="PATH", help="also write the PR curve as CSV")

    rp = sub.add_parser("report", help="render record(s) as a table")
    rp.add_argument("records", nargs="+", metavar="RECORD", help="record.json or an output directory")
    rp.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    rp.add_argument("--titles", help="comma-separated block titles, one per record")
    return p


def _load_config(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cfg = ExperimentConfig.load(path)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _record_path(p: str) -> Path:
    path = Path(p)
    return path / "record.json" if path.is_dir() else path


def _dispatch(args) -> None:
    cmd = args.command
    if cmd == "eval":
        scored = read_scores_csv(args.scores, args.flags)
        res = average_precision(scored)
        if args.pr:
            write_pr_csv(pr_curve(scored), args.pr)
        print(json.dumps({"average_precision": res.average_precision, "skew": res.skew,
                          "n_pos": res.n_pos, "n_neg": res.n_neg}))
        return
    if cmd == "report":
        records = [ExperimentRecord.load(_record_path(p)) for p in args.records]
        titles = args.titles.split(",") if args.titles else [""] * len(records)
        if len(titles) != len(records):
            raise UsageError(f"{len(titles)} titles given for {len(records)} records")
        sys.stdout.write(emit_comparison(list(zip(titles, records)), args.format))
        return

    cfg = _load_config(args)
    if cmd == "split":
        rows = [{"split": s.held_out_class, "held_out": s.held_out_name, "n_train": len(s.train),
                 "n_test": len(s), "skew": s.skew} for s in build_splits(cfg)]
        if args.out is not None:
            Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
            (Path(cfg.output_dir) / "splits.json").write_text(json.dumps(rows, indent=2) + "\n")
        for r in rows:
            print(f"{r['split']}\t{r['held_out']}\ttrain={r['n_train']}\ttest={r['n_test']}\tskew={r['skew']:.4f}")
    elif cmd == "train":
        if not cfg.needs_model:
            raise ConfigError("no model scorer configured, nothing to train")
        done = train_stage(cfg, resume=args.resume, log=_log)
        print(f"trained {len(done)} cell(s) into {Path(cfg.output_dir) / 'models'}")
    elif cmd == "score":
        results = score_stage(cfg, log=_log)
        print(json.dumps(results, indent=2, sort_keys=True))
    elif cmd == "run":
        record = run_experiment(cfg, resume=args.resume, log=_log)
        _log(f"computed {len(record.computed)} cell(s); record at {Path(cfg.output_dir) / 'record.json'}")
        sys.stdout.write(emit_comparison([("", record)]))


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        _dispatch(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
