"""Command-line interface.

Subcommands cover each pipeline stage plus the full run, dataset statistics,
export, and the reasoning-budget evaluation harness. Exit codes: 0 success,
2 config error, 4 provider auth failure, 3 any stage failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .budget import EvalItem, run_natural, sweep_budgets
from .core import ConversationSample, read_jsonl, write_jsonl
from .pipeline import ConfigError, PipelineConfig, PipelineRunner, StageFailure, build_provider
from .provider import AuthError, ProviderError
from .stats import compute_stats, render_stats_table, write_stats_csv
from .tokenizer import get_tokenizer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_AUTH = 4

STAGE_COMMANDS = ("topics", "generate", "expand", "ingest", "filter", "dialogue", "judge", "export")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="pipeline config file (YAML)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--resume", action="store_true", help="skip stages with valid checkpoints")
    common.add_argument("--provider", choices=("scripted", "http"), help="override the provider kind")
    common.add_argument("--workdir", metavar="DIR", help="override the run working directory")
    common.add_argument("--dry-run", action="store_true", help="print the resolved config and stage plan, run nothing")
    common.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="cotforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="run the full pipeline")
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run only the {name} stage")

    stats = sub.add_parser("stats", parents=[common], help="compute dataset statistics over a samples file")
    stats.add_argument("--input", metavar="PATH", help="samples JSONL (default: the run's kept samples)")
    stats.add_argument("--out", metavar="DIR", help="where to write stats files (default: alongside the input)")

    beval = sub.add_parser("budget-eval", parents=[common], help="accuracy-versus-reasoning-budget evaluation")
    beval.add_argument("--items", metavar="PATH", required=True, help="items JSONL: {id, prompt, reference_answer}")
    beval.add_argument("--out", metavar="DIR", help="output directory (default: <workdir>/budget_eval)")
    beval.add_argument("--budgets", metavar="N,N,...", help="override the budget grid")
    beval.add_argument("--attempts", type=int, metavar="N", help="attempts per item for pass@1 averaging")
    beval.add_argument("--base-seed", type=int, default=0, help="base sampling seed for attempts")
    beval.add_argument(
        "--no-forcing",
        action="store_true",
        help="baseline without length forcing; reports the natural reasoning-length distribution",
    )
    return parser


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    config = PipelineConfig.load(args.config)
    if args.seed is not None:
        config = PipelineConfig.from_mapping({**config.to_dict(), "seed": args.seed})
    if args.provider is not None:
        config.provider.kind = args.provider
    if args.workdir is not None:
        config.workdir = args.workdir
    return config


def _print_dry_run(config: PipelineConfig) -> None:
    plan = [name for name in ("topics", "generate", "expand", "ingest", "filter", "dialogue", "judge", "export")
            if config.stages.enabled.get(name, True) and (name != "ingest" or config.ingest_sources)]
    payload = {"config": config.to_dict(), "stage_plan": plan, "config_hash": config.config_hash()}
    print(json.dumps(payload, indent=2, sort_keys=True))


def _cmd_run(args: argparse.Namespace, config: PipelineConfig) -> int:
    runner = PipelineRunner(config, resume=args.resume)
    manifest = runner.run()
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_stage(args: argparse.Namespace, config: PipelineConfig) -> int:
    runner = PipelineRunner(config, resume=args.resume)
    wanted = args.command
    for name, fn, inputs, outputs, cfg_subtree in runner._stage_sequence():
        if name != wanted:
            continue
        runner.workdir.mkdir(parents=True, exist_ok=True)
        runner.ckpt_dir.mkdir(parents=True, exist_ok=True)
        runner.reports_dir.mkdir(parents=True, exist_ok=True)
        entry = runner._run_stage(name, fn, inputs, outputs, cfg_subtree)
        print(json.dumps(entry, indent=2, sort_keys=True))
        if entry["status"] == "failed":
            raise StageFailure(name, RuntimeError(entry.get("error", "")))
        return EXIT_OK
    raise ConfigError(f"stage {wanted!r} is not part of this run (ingest needs configured sources)")


def _cmd_stats(args: argparse.Namespace, config: PipelineConfig) -> int:
    input_path = Path(args.input) if args.input else Path(config.workdir) / "samples_kept.jsonl"
    if not input_path.exists():
        raise ConfigError(f"no samples file at {input_path}")
    out_dir = Path(args.out) if args.out else input_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    tokenizer = get_tokenizer(config.tokenizer)
    samples = read_jsonl(input_path, model=ConversationSample)
    entries = ((config.export.dataset_name, config.export.category, s) for s in samples)
    stats = compute_stats(entries, tokenizer)
    write_stats_csv(stats, out_dir / "stats.csv")
    (out_dir / "stats.txt").write_text(render_stats_table(stats) + "\n", encoding="utf-8")
    from .plotting import save_stats_figure

    save_stats_figure(stats, out_dir / "stats.png")
    print(render_stats_table(stats))
    return EXIT_OK


def _cmd_budget_eval(args: argparse.Namespace, config: PipelineConfig) -> int:
    spec = config.budget
    overrides = {}
    if args.budgets:
        overrides["budgets"] = tuple(int(b) for b in args.budgets.split(","))
    if args.attempts:
        overrides["attempts_per_item"] = args.attempts
    if overrides:
        from dataclasses import replace

        spec = replace(spec, **overrides)
    items = list(read_jsonl(args.items, model=EvalItem))
    if not items:
        raise ConfigError(f"no items in {args.items}")
    tokenizer = get_tokenizer(config.tokenizer)
    provider = build_provider(config.provider, tokenizer)
    out_dir = Path(args.out) if args.out else Path(config.workdir) / "budget_eval"
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.no_forcing:
        result = run_natural(
            items, spec, provider, tokenizer,
            sampling=config.provider.sampling(),
            base_seed=args.base_seed,
            max_workers=config.provider.max_in_flight,
        )
        write_jsonl([s.to_dict() for s in result.per_item], out_dir / "baseline_per_item.jsonl")
        summary = {
            "accuracy": result.accuracy,
            "reasoning_token_stats": result.reasoning_token_stats,
            "attempts_per_item": spec.attempts_per_item,
        }
        (out_dir / "baseline_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
        print(json.dumps(summary, indent=2, sort_keys=True))
        return EXIT_OK

    curve, transcripts = sweep_budgets(
        items, spec, provider, tokenizer,
        sampling=config.provider.sampling(),
        base_seed=args.base_seed,
        max_workers=config.provider.max_in_flight,
    )
    write_jsonl([t.to_dict() for t in transcripts], out_dir / "transcripts.jsonl")
    with open(out_dir / "curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["budget", "accuracy"])
        for point in curve:
            writer.writerow([point.budget, point.accuracy])
    from .plotting import save_budget_curve

    save_budget_curve(curve, out_dir / "curve.png")
    for point in curve:
        print(f"budget {point.budget:>6d}: pass@1 {point.accuracy:.4f}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = _load_config(args)
        if args.dry_run:
            _print_dry_run(config)
            return EXIT_OK
        if args.command == "run":
            return _cmd_run(args, config)
        if args.command in STAGE_COMMANDS:
            return _cmd_stage(args, config)
        if args.command == "stats":
            return _cmd_stats(args, config)
        if args.command == "budget-eval":
            return _cmd_budget_eval(args, config)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AuthError as exc:
        print(f"provider auth failure: {exc}", file=sys.stderr)
        return EXIT_AUTH
    except (StageFailure, ProviderError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
