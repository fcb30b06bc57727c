"""Command-line entry point: ``tglearn <subcommand> [options]``.

Exit codes: 0 ok, 1 other library error, 2 config error, 3 missing
dependency (an upstream artifact), 4 numeric error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, DependencyError, NumericError, TGError

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--workdir", default="run", help="directory for artifacts (default: run)")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tglearn", description="Two-stage textual-graph learning.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic graph (or ingest data.input_dir)")
    _common(p)
    p.add_argument("--rho", type=float, help="semantic correlation override")
    p.add_argument("--out", help="data directory (default: <workdir>/data)")

    p = sub.add_parser("pretrain-mlm", help="masked-LM pretraining of the encoder")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--out")

    p = sub.add_parser("finetune", help="supervised finetuning of a pretrained encoder")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--ckpt", help="pretrained encoder checkpoint")
    p.add_argument("--task", choices=["nodecls", "link"])
    p.add_argument("--peft", choices=["lora", "full"])
    p.add_argument("--out")

    p = sub.add_parser("embed", help="extract a feature cache from an encoder checkpoint")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--provenance", default="finetuned",
                   choices=["fixed", "finetuned", "finetuned-full"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("bow", help="bag-of-words feature cache")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--out")

    p = sub.add_parser("train-gnn", help="train a stage-two model on a feature cache")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--features", required=True)
    p.add_argument("--arch", choices=["mlp", "gcn", "sage"])
    p.add_argument("--task", choices=["nodecls", "link"])
    p.add_argument("--out", help="output prefix (default: <workdir>/gnn_<arch>)")

    p = sub.add_parser("evaluate", help="comparison table from GNN reports")
    _common(p)
    p.add_argument("--reports", nargs="+", required=True,
                   help="report files named as SOURCE:ARCH=PATH or plain paths")
    p.add_argument("--sota", help="architecture designated as the strong model")
    p.add_argument("--out")

    p = sub.add_parser("ensemble", help="weighted average of prediction files")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--weights", nargs="+", type=float)
    p.add_argument("--split", default="valid", choices=["train", "valid", "test"])
    p.add_argument("--out")

    p = sub.add_parser("search", help="random hyperparameter search")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--stage", choices=["lm", "gnn"])
    p.add_argument("--trials", type=int)
    p.add_argument("--features", help="feature cache (gnn stage)")
    p.add_argument("--ckpt", help="pretrained encoder (lm stage)")
    p.add_argument("--out")

    p = sub.add_parser("project-features", help="2-D principal-component export")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--features", required=True)
    p.add_argument("--per-class", type=int)
    p.add_argument("--out")

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _common(p)
    p.add_argument("--rho", type=float, help="semantic correlation override")
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    overrides = {"seed": args.seed}
    if getattr(args, "rho", None) is not None:
        overrides["data.semantic_correlation"] = args.rho
    if getattr(args, "task", None) is not None:
        overrides["stage1.task"] = args.task
        overrides["gnn.task"] = args.task
    if getattr(args, "peft", None) is not None:
        overrides["stage1.peft"] = args.peft
    if getattr(args, "arch", None) is not None:
        overrides["gnn.arch"] = args.arch
    if getattr(args, "sota", None) is not None:
        overrides["eval.sota"] = args.sota
    if getattr(args, "stage", None) is not None:
        overrides["hpo.stage"] = args.stage
    if getattr(args, "trials", None) is not None:
        overrides["hpo.trials"] = args.trials
    if getattr(args, "per_class", None) is not None:
        overrides["eval.project_per_class"] = args.per_class
    return apply_overrides(cfg, overrides)


def _data_dir(args) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(args.workdir) / "data"


def _echo(key, path):
    print(f"{key}: {path}")


def _parse_report_arg(text: str):
    if "=" in text:
        label, path = text.split("=", 1)
        src, _, arch = label.partition(":")
        return (src, arch or src), Path(path)
    path = Path(text)
    rep = P.load_report(path)
    arch, _, src = rep.name.partition("-")
    return (src or rep.name, arch), path


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as err:
        print(f"missing dependency: {err}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (NumericError, FloatingPointError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except TGError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


def _dispatch(args) -> int:
    cfg = _config(args)
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    cmd = args.command

    if cmd == "gen-data":
        out = Path(args.out) if args.out else work / "data"
        for k, v in P.gen_data(cfg, out).items():
            _echo(k, v)
    elif cmd == "pretrain-mlm":
        _echo("encoder", P.pretrain(cfg, _data_dir(args), args.out or work / "encoder_pretrained.stgm"))
    elif cmd == "finetune":
        ckpt = args.ckpt or work / "encoder_pretrained.stgm"
        out = Path(args.out) if args.out else work / "encoder_finetuned.stgm"
        hist = out.with_suffix(".history.csv")
        P.finetune(cfg, _data_dir(args), ckpt, out, hist, verbose=args.verbose)
        _echo("encoder", out)
        _echo("history", hist)
    elif cmd == "embed":
        _echo("features", P.embed(cfg, _data_dir(args), args.ckpt, args.out, args.provenance))
    elif cmd == "bow":
        _echo("features", P.bow(cfg, _data_dir(args), args.out or work / P.SOURCE_FILES["bow"]))
    elif cmd == "train-gnn":
        prefix = Path(args.out) if args.out else work / f"gnn_{cfg.gnn.arch}"
        report, _ = P.train_stage2(cfg, _data_dir(args), args.features, cfg.gnn.arch, prefix,
                                   verbose=args.verbose)
        print(report.to_text(), end="")
        for suffix in (".stgg", ".report.txt", ".pred.npy"):
            _echo(suffix.lstrip("."), prefix.with_suffix(suffix))
    elif cmd == "evaluate":
        reports = {}
        for text in args.reports:
            key, path = _parse_report_arg(text)
            reports[key] = P.load_report(path)
        table = P.comparison_csv(P.comparison_rows(reports, cfg.eval.sota))
        out = Path(args.out) if args.out else work / "comparison.csv"
        P.atomic_write_text(out, table)
        print(table, end="")
        _echo("comparison", out)
    elif cmd == "ensemble":
        weights = args.weights or cfg.eval.ensemble_weights or None
        res = P.run_ensemble(_data_dir(args), args.preds, weights, args.split)
        for path, acc in zip(args.preds, res["members"]):
            print(f"member {path}: {args.split}_acc = {acc:.6f}")
        print(f"ensemble: {args.split}_acc = {res['ensemble']:.6f}")
        if args.out:
            P.save_array(args.out, res["probabilities"])
            _echo("ensemble", args.out)
    elif cmd == "search":
        out = Path(args.out) if args.out else work / f"search_{cfg.hpo.stage}.csv"
        result = P.run_stage_search(cfg, _data_dir(args), out, features=args.features, ckpt=args.ckpt,
                                  verbose=args.verbose)
        print(f"best trial {result.best.trial_id}: objective = {result.best.objective:.6f}")
        _echo("trial_log", out)
    elif cmd == "project-features":
        out = args.out or work / "projection.csv"
        _echo("projection", P.project(_data_dir(args), args.features, out, cfg.eval.project_per_class,
                                      cfg.seed))
    elif cmd == "pipeline":
        P.pipeline(cfg, work, verbose=args.verbose, log=lambda s: print(s, flush=True))
    return EXIT_OK


def main():
    np.seterr(over="ignore", under="ignore")
    sys.exit(run())


if __name__ == "__main__":
    main()
