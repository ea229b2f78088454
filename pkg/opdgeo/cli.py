"""Command-line entry point: train, analyze, quadsim, effopd-report, reproduce."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import pandas as pd
from joblib import Parallel, delayed

from .config import ANALYSES, ExperimentConfig, config_digest, load_config, resolve_output_root
from .effopd import read_events
from .errors import ConfigError, OpdGeoError
from .pipeline.align import AlignmentHandler
from .pipeline.base import Handler, chain
from .pipeline.compare import CompareHandler
from .pipeline.loader import RunLoader
from .pipeline.metrics import SpectralMetricsHandler
from .pipeline.quadsim import QuadsimHandler
from .pipeline.save_csv import ReportSaver
from .pipeline.scale import ScalingHandler
from .pipeline.sweep import WindowSweepHandler
from .pipeline.truncate import TruncationHandler
from .quadsim import quadsim_report
from .reproduce import reproduce
from .store import (
    RunManifest,
    load_metrics,
    manifest_digest,
    open_run,
    with_provenance,
    write_run,
    write_table,
)
from .toylab.task import SyntheticTask
from .toylab.trainer import make_base, make_teacher, speedup_to_target, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def parse_seeds(text: str) -> tuple[int, ...]:
    """Parse a comma-separated seed list."""
    try:
        seeds = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"--seeds:0: '{text}' is not a comma-separated list of integers") from exc
    if not seeds:
        raise ConfigError("--seeds:0: at least one seed is required")
    return seeds


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) with --seeds and --jobs applied."""
    cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
    if args.seeds is not None:
        cfg = replace(cfg, seeds=parse_seeds(args.seeds))
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs:0: jobs must be >= 1")
        cfg = replace(cfg, jobs=args.jobs)
    return cfg


def print_summary(title: str, values: dict) -> None:
    """Print a readable summary block."""
    print(f"=== {title} ===")
    for key, value in values.items():
        if isinstance(value, float):
            print(f"{key + ':':<24}{value:.4f}")
        else:
            print(f"{key + ':':<24}{value}")
    print()


def _train_seed(cfg: ExperimentConfig, seed: int, base, teacher, root: Path) -> RunManifest:
    run = train(cfg, seed, base, teacher)
    return write_run(run, cfg, root, teacher.get_params())


def cmd_train(args: argparse.Namespace) -> int:
    """Train one run per seed and write the run directories."""
    cfg = resolve_config(args)
    root = resolve_output_root(args.out, cfg)
    task = SyntheticTask(cfg.task)

    logger.info("preparing base and teacher (config %s)", config_digest(cfg)[:12])
    base = make_base(task, cfg.model, cfg.supervised)
    teacher = make_teacher(task, cfg.model, cfg.supervised, base=base)

    manifests = Parallel(n_jobs=cfg.jobs)(
        delayed(_train_seed)(cfg, seed, base, teacher, root) for seed in cfg.seeds
    )
    for manifest in manifests:
        metrics = load_metrics(manifest)
        last = metrics.iloc[-1]
        print_summary(
            f"Run summary ({manifest.mode}, seed {manifest.seed})",
            {
                "run": str(manifest.directory),
                "checkpoints": len(manifest.checkpoints),
                "final accuracy": float(last["accuracy"]),
                "final |dW|_F": float(last["delta_norm"]),
                "manifest digest": manifest_digest(manifest.directory)[:16],
            },
        )
    return EXIT_OK


def build_pipeline(
        run_path: Path,
        selections: Sequence[str],
        output_dir: Path,
        against: Path | None = None,
        jobs: int = 1,
) -> Handler:
    """Loader, the selected analysis stages in canonical order, comparison, saver."""
    stages: list[Handler] = [RunLoader(run_path)]
    if against is not None:
        stages.append(RunLoader(against, key="other"))
    factories = {
        "metrics": SpectralMetricsHandler,
        "align": AlignmentHandler,
        "truncate": TruncationHandler,
        "scale": ScalingHandler,
        "sweep": lambda: WindowSweepHandler(jobs=jobs),
        "quadsim": lambda: QuadsimHandler(jobs=jobs),
    }
    stages += [factories[name]() for name in ANALYSES if name in selections]
    if against is not None:
        stages.append(CompareHandler())
    stages.append(ReportSaver(output_dir))
    return chain(*stages)


def cmd_analyze(args: argparse.Namespace) -> int:
    """Run the selected analyses on a stored run."""
    run = open_run(args.run)
    cfg = run.experiment_config()
    if args.select is not None:
        selections = tuple(part.strip() for part in args.select.split(",") if part.strip())
        unknown = sorted(set(selections) - set(ANALYSES))
        if unknown:
            raise ConfigError(f"--select:0: unknown analyses {unknown}, expected a subset of {ANALYSES}")
    else:
        selections = cfg.analysis.selections
    output_dir = args.out if args.out is not None else run.directory / "analysis"

    pipeline = build_pipeline(args.run, selections, output_dir, args.against, jobs=args.jobs or cfg.jobs)
    context = pipeline.handle({})
    print_summary(
        f"Analysis ({run.run_id})",
        {"selections": ",".join(selections), "files": len(context["written"]), "output": str(output_dir)},
    )
    return EXIT_OK


def cmd_quadsim(args: argparse.Namespace) -> int:
    """Run the quadratic-theory checks and write a JSON report."""
    cfg = resolve_config(args)
    root = resolve_output_root(args.out, cfg)
    if args.seeds is not None:
        cfg = replace(cfg, quadsim=replace(cfg.quadsim, seed=cfg.seeds[0]))
    digest = config_digest(cfg)
    report = quadsim_report(cfg.quadsim, jobs=cfg.jobs)
    report = {"config_digest": digest, "seed": cfg.quadsim.seed, **report}

    path = root / f"quadsim-{digest[:12]}" / "report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print_summary(
        "Quadratic theory",
        {
            "oracle max rel err": report["oracle"]["max_relative_error"],
            "oracle pass": report["oracle"]["pass"],
            "lock-in violations": report["lockin"]["violations"],
            "coupling monotone": report["coupling"]["monotone"],
            "RL var > OPD var": report["variance"]["rl_exceeds_opd"],
            "report": str(path),
        },
    )
    return EXIT_OK


def effopd_summary(run: RunManifest, vanilla: RunManifest | None = None) -> tuple[pd.DataFrame, dict]:
    """Event table of an EffOPD run and, against a vanilla run, the step speedup."""
    if run.events is None:
        raise ConfigError(f"{run.directory / 'manifest.json'}:0: run {run.run_id} has no event log")
    events = read_events(run.directory / run.events)
    table = pd.DataFrame(
        [
            {
                "n": e.n,
                "t": e.t,
                "accepted_k": e.accepted_k,
                "base_score": e.base_score,
                "accepted_score": e.accepted_score,
                "direction_norm": e.direction_norm,
                "candidates": len(e.scores),
                "failures": len(e.failures),
                "wallclock_ms": e.wallclock_ms,
            }
            for e in events
        ]
    )
    summary = {
        "events": len(events),
        "accepted_events": sum(e.accepted_k > 0 for e in events),
        "mean_accepted_k": float(table["accepted_k"].mean()) if len(events) else 0.0,
    }
    if vanilla is not None:
        summary |= speedup_to_target(load_metrics(vanilla), load_metrics(run))
    return table, summary


def cmd_effopd_report(args: argparse.Namespace) -> int:
    """Summarize the extrapolation events of an EffOPD run."""
    run = open_run(args.run)
    vanilla = open_run(args.against) if args.against is not None else None
    table, summary = effopd_summary(run, vanilla)
    output_dir = args.out if args.out is not None else run.directory / "effopd"
    write_table(with_provenance(table, run.config_digest, run.seed), output_dir / "events.csv")
    report = {"run_id": run.run_id, "config_digest": run.config_digest, "seed": run.seed, **summary}
    (output_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print_summary(f"EffOPD ({run.run_id})", summary)
    return EXIT_OK


def cmd_reproduce(args: argparse.Namespace) -> int:
    """Train OPD, RL and EffOPD per seed from one base and check the desk-scale claims."""
    cfg = resolve_config(args)
    root = resolve_output_root(args.out, cfg)
    digest = config_digest(cfg)
    task = SyntheticTask(cfg.task)

    logger.info("preparing base and teacher (config %s)", digest[:12])
    base = make_base(task, cfg.model, cfg.supervised)
    teacher = make_teacher(task, cfg.model, cfg.supervised, base=base)
    frame, summary = reproduce(cfg, base, teacher, jobs=cfg.jobs)

    output_dir = root / f"reproduce-{digest[:12]}"
    table = frame.copy()
    table.insert(0, "config_digest", digest)
    write_table(table, output_dir / "seeds.csv")
    report = {"config_digest": digest, **summary}
    (output_dir / "summary.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print_summary(
        f"Reproduction ({len(cfg.seeds)} seeds)",
        {**summary["checks"], "output": str(output_dir)},
    )
    return EXIT_OK


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Build the parser and parse ``argv``."""
    parser = argparse.ArgumentParser(prog="opdgeo", description="Parameter-update geometry lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", type=Path, default=None, help="output root (overrides OPDGEO_OUT)")
        p.add_argument("--jobs", type=int, default=None, help="parallel worker slots")

    p_train = sub.add_parser("train", help="train OPD / RL / EffOPD runs")
    p_train.add_argument("--config", type=Path, default=None)
    p_train.add_argument("--seeds", type=str, default=None, help="comma-separated seeds")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_analyze = sub.add_parser("analyze", help="analyze a stored run")
    p_analyze.add_argument("run", type=Path)
    p_analyze.add_argument("--select", type=str, default=None, help=f"subset of {','.join(ANALYSES)}")
    p_analyze.add_argument("--against", type=Path, default=None, help="second run for a paired comparison")
    common(p_analyze)
    p_analyze.set_defaults(func=cmd_analyze)

    p_quad = sub.add_parser("quadsim", help="check the quadratic theory")
    p_quad.add_argument("--config", type=Path, default=None)
    p_quad.add_argument("--seeds", type=str, default=None)
    common(p_quad)
    p_quad.set_defaults(func=cmd_quadsim)

    p_eff = sub.add_parser("effopd-report", help="summarize EffOPD extrapolation events")
    p_eff.add_argument("run", type=Path)
    p_eff.add_argument("--against", type=Path, default=None, help="vanilla OPD run")
    common(p_eff)
    p_eff.set_defaults(func=cmd_effopd_report)

    p_rep = sub.add_parser("reproduce", help="multi-seed OPD / RL / EffOPD comparison")
    p_rep.add_argument("--config", type=Path, default=None)
    p_rep.add_argument("--seeds", type=str, default=None, help="comma-separated seeds")
    common(p_rep)
    p_rep.set_defaults(func=cmd_reproduce)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    """Run a subcommand and map failures to exit codes 2 (config) and 3 (runtime)."""
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (OpdGeoError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
