#!/usr/bin/env python3
"""
Command-line driver for hotpath-evolve.

    evolve_cli.py analyze  --config engine.yaml
    evolve_cli.py optimize --config engine.yaml [--seed N] [--mode M] [--iterations N] [--out DIR] [--resume]
    evolve_cli.py report   RUN_DIR [RUN_DIR ...] [--csv PATH] [--tail N]

Exit codes: 0 success, 1 unexpected error, 2 configuration error,
3 baseline invalid, 4 input error, 5 missing artifacts.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema

from config import ConfigurationError, EngineConfig, load_engine_config, setup_logging
from eval_cascade import EvaluationError, cascade_from_config
from evo_engine import (
    CHECKPOINT_FILE,
    ITERATION_LOG_FILE,
    BaselineInvalidError,
    EngineMode,
    EvolutionConfig,
    EvolutionEngine,
    IterationOutcome,
    RunSummary,
    resolve_mode,
)
from mcts_engine import MctsConfig
from mutators import DEFAULT_GOAL, REPAIR_SLOTS, EvolveBlockError, PromptTemplate, build_context, build_provider
from profile_graph import (
    DEFAULT_TAU_FREQ,
    DEFAULT_TAU_TIME_MS,
    TARGET_REPORT_SCHEMA,
    GraphError,
    ProfileFormatError,
    SelectionThresholds,
    build_target_report,
    load_weighted_graph,
    render_target_table,
    select_targets,
)
from program_db import CheckpointError, DatabaseError
from refiner import RefinerConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_BASELINE_INVALID = 3
EXIT_INPUT = 4
EXIT_MISSING_ARTIFACTS = 5

TARGET_REPORT_FILE = "target_report.json"
RUN_SUMMARY_FILE = "run_summary.json"
TREE_FILE = "tree.json"

TARGET_REPORT_DOCUMENT_SCHEMA = {
    "type": "object",
    "required": ["thresholds", "targets", "warnings"],
    "properties": {
        "thresholds": {
            "type": "object",
            "required": ["tau_time_ms", "tau_freq"],
            "properties": {
                "tau_time_ms": {"type": "number", "minimum": 0},
                "tau_freq": {"type": "integer", "minimum": 0},
            },
        },
        "targets": TARGET_REPORT_SCHEMA,
        "warnings": {"type": "array", "items": {"type": "string"}},
    },
}

RUN_SUMMARY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["iterations_run", "valid_count", "best_candidate_id", "best_score",
                 "average_score", "per_iteration_log", "mode", "seed", "search", "migrations", "candidate_count"],
    "properties": {
        "iterations_run": {"type": "integer", "minimum": 0},
        "valid_count": {"type": "integer", "minimum": 0},
        "best_candidate_id": {"type": ["integer", "null"]},
        "best_score": {"type": "number", "minimum": 0, "maximum": 1},
        "average_score": {"type": "number", "minimum": 0, "maximum": 1},
        "per_iteration_log": {
            "type": "array",
            "items": {
                "type": "array",
                "minItems": 2,
                "maxItems": 2,
                "prefixItems": [{"type": "integer", "minimum": 1}, {"enum": [o.value for o in IterationOutcome]}],
            },
        },
        "mode": {"enum": [m.value for m in EngineMode]},
        "seed": {"type": "integer"},
        "search": {"enum": ["evolution", "mcts"]},
        "migrations": {"type": "integer", "minimum": 0},
        "candidate_count": {"type": "integer", "minimum": 0},
    },
}

ITERATION_RECORD_SCHEMA = {
    "type": "object",
    "required": ["iteration", "outcome", "parent_id", "candidate_id", "score", "summary"],
    "properties": {
        "iteration": {"type": "integer", "minimum": 1},
        "outcome": {"enum": [o.value for o in IterationOutcome]},
        "parent_id": {"type": ["integer", "null"]},
        "candidate_id": {"type": ["integer", "null"]},
        "score": {"type": ["number", "null"]},
        "summary": {"type": "string"},
        "diagnostics": {"type": "string"},
    },
}

TREE_DUMP_SCHEMA = {
    "type": "object",
    "required": ["nodes"],
    "properties": {
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "parent", "children", "V", "N"],
                "properties": {
                    "id": {"type": "integer"},
                    "parent": {"type": ["integer", "null"]},
                    "children": {"type": "array", "items": {"type": "integer"}},
                    "V": {"type": "number"},
                    "N": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}

CSV_COLUMNS = ("run", "mode", "search", "seed", "iterations_run", "valid_count", "average_score",
               "best_score")


class ArtifactError(Exception):
    """Raised when run artifacts are missing or malformed."""
    pass


def write_json(path: Path, document, schema: dict):
    """Validate against `schema` and write with sorted keys."""
    try:
        jsonschema.validate(document, schema)
    except jsonschema.ValidationError as e:
        raise ArtifactError(f"refusing to write {path.name}: {e.message}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")


def _overrides(args) -> Dict[str, object]:
    return {
        "seed": getattr(args, "seed", None),
        "iterations": getattr(args, "iterations", None),
        "mode": getattr(args, "mode", None),
        "out": getattr(args, "out", None),
    }


def _load(args) -> EngineConfig:
    config = load_engine_config(args.config, _overrides(args), env_file=getattr(args, "env_file", None))
    setup_logging(
        log_file=config.log_settings.get("file"),
        debug=args.debug or config.log_settings.get("debug", False),
        json_lines=config.log_settings.get("json_lines", False),
    )
    return config


def _thresholds(config: EngineConfig) -> SelectionThresholds:
    return SelectionThresholds(
        tau_time=config.selection.get("tau_time_ms", DEFAULT_TAU_TIME_MS),
        tau_freq=config.selection.get("tau_freq", DEFAULT_TAU_FREQ),
    )


# -- analyze ------------------------------------------------------------

def cmd_analyze(args) -> int:
    """Rank hotspot targets and write the target report."""
    config = _load(args)
    graph = load_weighted_graph(config.inputs["call_graph"], config.inputs.get("profile"))
    thresholds = _thresholds(config)
    rows = build_target_report(graph, thresholds)

    document = {
        "thresholds": {"tau_time_ms": thresholds.tau_time, "tau_freq": thresholds.tau_freq},
        "targets": rows,
        "warnings": list(graph.profile_warnings),
    }
    path = config.output_dir / TARGET_REPORT_FILE
    write_json(path, document, TARGET_REPORT_DOCUMENT_SCHEMA)

    print(f"Components: {len(graph.nodes)}  Edges: {len(graph.edges)}  "
          f"Thresholds: {thresholds.tau_time} ms / {thresholds.tau_freq} calls")
    print(render_target_table(rows))
    for warning in graph.profile_warnings:
        print(f"warning: {warning}")
    print(f"\nTarget report written to {path}")
    return EXIT_OK


# -- optimize -----------------------------------------------------------

def _target_component(config: EngineConfig, args, graph) -> str:
    component = args.component or config.inputs.get("target_component")
    if component:
        return component
    targets = select_targets(graph, _thresholds(config))
    if not targets:
        raise ConfigurationError("no target_component configured and no component exceeds the selection thresholds")
    logger.info(f"No target component configured; using top-ranked {targets[0]}")
    return targets[0]


def build_engine(config: EngineConfig, args) -> EvolutionEngine:
    """Wire the configured graph, context, cascade, provider and engine together."""
    target = args.target or config.inputs.get("target_source")
    if not target:
        raise ConfigurationError("no target source: pass --target or set inputs.target_source")
    target_path = Path(target)
    if not target_path.exists():
        raise ConfigurationError(f"target source not found: {target_path}")
    seed_program = target_path.read_text()

    graph = load_weighted_graph(config.inputs["call_graph"], config.inputs.get("profile"))
    component = _target_component(config, args, graph)

    try:
        cascade_config, stages = cascade_from_config(config.cascade)
        evolution = EvolutionConfig.from_sections(config.evolution, config.islands, cascade_config)
        mcts_config = MctsConfig(**config.mcts)
        refiner_config = RefinerConfig(**config.refiner)
        mode = resolve_mode(config.mode, config.flags)
    except (EvaluationError, DatabaseError, ValueError, TypeError) as e:
        raise ConfigurationError(str(e))

    context = build_context(
        seed_program, component, graph,
        goal=config.prompts.get("goal") or DEFAULT_GOAL,
        constraints=config.prompts.get("constraints", ""),
        diff_mode=evolution.diff_mode,
    )
    provider = build_provider(config.provider, config.base_dir, seed=config.seed)
    kwargs = dict(
        output_dir=config.output_dir,
        template=PromptTemplate.from_file(config.prompts["optimize"]) if "optimize" in config.prompts else None,
        repair_template=PromptTemplate.from_file(config.prompts["repair"], REPAIR_SLOTS)
        if "repair" in config.prompts else None,
        refiner_config=refiner_config,
        search=config.search,
        mcts_config=mcts_config,
        source_name=target_path.name,
    )

    logger.info(f"Optimizing {component} in {target_path.name}: mode {mode.value}, search {config.search}, "
                f"seed {evolution.seed}, {evolution.max_iterations} iterations")
    if args.resume:
        checkpoint = config.output_dir / CHECKPOINT_FILE
        if not checkpoint.exists():
            raise ArtifactError(f"nothing to resume: {checkpoint} does not exist")
        return EvolutionEngine.from_checkpoint(checkpoint, seed_program, context, evolution, provider, stages,
                                               mode=mode, **kwargs)
    return EvolutionEngine(seed_program, context, evolution, provider, stages, mode=mode, **kwargs)


def cmd_optimize(args) -> int:
    """Run one optimization and write its artifacts to the output directory."""
    config = _load(args)
    engine = build_engine(config, args)
    summary = engine.run()

    write_json(config.output_dir / RUN_SUMMARY_FILE, summary.to_dict(), RUN_SUMMARY_SCHEMA)
    tree = engine.tree_dump()
    if tree is not None:
        write_json(config.output_dir / TREE_FILE, tree, TREE_DUMP_SCHEMA)

    print(format_summary(summary, str(config.output_dir)))
    return EXIT_OK


# -- report -------------------------------------------------------------

def load_run_summary(run_dir) -> RunSummary:
    run_dir = Path(run_dir)
    path = run_dir / RUN_SUMMARY_FILE
    if not run_dir.is_dir():
        raise ArtifactError(f"run directory not found: {run_dir}")
    if not path.exists():
        raise ArtifactError(f"{run_dir}: no {RUN_SUMMARY_FILE}; was the run completed?")
    try:
        with open(path, "r") as f:
            document = json.load(f)
        jsonschema.validate(document, RUN_SUMMARY_SCHEMA)
    except (json.JSONDecodeError, jsonschema.ValidationError) as e:
        raise ArtifactError(f"{path}: malformed run summary: {getattr(e, 'message', e)}")
    return RunSummary.from_dict(document)


def load_iteration_records(run_dir) -> List[dict]:
    path = Path(run_dir) / ITERATION_LOG_FILE
    if not path.exists():
        raise ArtifactError(f"{run_dir}: no {ITERATION_LOG_FILE}")
    records = []
    with open(path, "r") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                jsonschema.validate(record, ITERATION_RECORD_SCHEMA)
            except (json.JSONDecodeError, jsonschema.ValidationError) as e:
                raise ArtifactError(f"{path}:{number}: malformed iteration record: {getattr(e, 'message', e)}")
            records.append(record)
    return records


def format_summary(summary: RunSummary, name: str) -> str:
    lines = [
        f"Run: {name}",
        "=" * 50,
        f"  Mode:            {summary.mode} ({summary.search})",
        f"  Seed:            {summary.seed}",
        f"  Iterations:      {summary.iterations_run}",
        f"  Valid programs:  {summary.valid_count} generated ({summary.candidate_count} incl. seed)",
        f"  Average KPI:     {summary.average_score:.4f}",
        f"  Best KPI:        {summary.best_score:.4f} (candidate {summary.best_candidate_id})",
        f"  Migrations:      {summary.migrations}",
    ]
    return "\n".join(lines)


def format_comparison(rows: List[dict]) -> str:
    """One line per run, in the order the runs were given."""
    width = max(len("Run"), *(len(row["run"]) for row in rows))
    lines = [
        f"{'Run':<{width}}  {'Mode':<14}  {'Seed':>4}  {'Valid':>5}  {'Avg KPI':>8}  {'Best KPI':>8}",
        "-" * (width + 52),
    ]
    for row in rows:
        lines.append(
            f"{row['run']:<{width}}  {row['mode']:<14}  {row['seed']:>4}  {row['valid_count']:>5}  "
            f"{row['average_score']:>8.4f}  {row['best_score']:>8.4f}"
        )
    return "\n".join(lines)


def format_tail(records: List[dict], count: int) -> str:
    lines = []
    for record in records[-count:] if count > 0 else []:
        score = "-" if record["score"] is None else f"{record['score']:.4f}"
        parent = "-" if record["parent_id"] is None else record["parent_id"]
        line = f"{record['iteration']:>4}  {record['outcome']:<14} parent={parent:<4} score={score:<7} {record['summary']}"
        if record.get("diagnostics"):
            line += f"\n      {record['diagnostics'].splitlines()[0]}"
        lines.append(line.rstrip())
    return "\n".join(lines)


def cmd_report(args) -> int:
    """Summarize one or more finished runs; optionally write a CSV for ablation tables."""
    setup_logging(debug=args.debug)
    rows = []
    for run_dir in args.runs:
        summary = load_run_summary(run_dir)
        rows.append(dict({"run": str(run_dir)}, **{k: getattr(summary, k) for k in CSV_COLUMNS if k != "run"}))
        print(format_summary(summary, str(run_dir)))
        if args.tail:
            print(f"\nLast {args.tail} iterations:")
            print(format_tail(load_iteration_records(run_dir), args.tail))
        print()

    if len(rows) > 1:
        print(format_comparison(rows))

    if args.csv:
        with open(args.csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        print(f"\nCSV written to {args.csv}")
    return EXIT_OK


# -- entry point --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evolve_cli.py", description="Profile-guided evolutionary code optimization")
    parser.add_argument("--debug", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="rank optimization targets from the call graph and profile")
    analyze.add_argument("--config", required=True)
    analyze.add_argument("--out", help="output directory (overrides output_dir)")
    analyze.add_argument("--env-file", dest="env_file")
    analyze.set_defaults(handler=cmd_analyze)

    optimize = sub.add_parser("optimize", help="run the evolutionary or MCTS optimizer")
    optimize.add_argument("--config", required=True)
    optimize.add_argument("--seed", type=int)
    optimize.add_argument("--mode", choices=[m.value for m in EngineMode])
    optimize.add_argument("--iterations", type=int)
    optimize.add_argument("--out", help="output directory (overrides output_dir)")
    optimize.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    optimize.add_argument("--target", help="source file holding the EVOLVE-BLOCK")
    optimize.add_argument("--component", help="call-graph component the block implements")
    optimize.add_argument("--env-file", dest="env_file")
    optimize.set_defaults(handler=cmd_optimize)

    report = sub.add_parser("report", help="summarize finished runs")
    report.add_argument("runs", nargs="+", help="run output directories")
    report.add_argument("--csv", help="also write the comparison as CSV")
    report.add_argument("--tail", type=int, default=0, help="show the last N iteration records")
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigurationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BaselineInvalidError as e:
        print(f"Baseline invalid: {e}", file=sys.stderr)
        return EXIT_BASELINE_INVALID
    except EvolveBlockError as e:
        print(f"Input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (GraphError, ProfileFormatError) as e:
        print(f"Input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ArtifactError, CheckpointError) as e:
        print(f"Artifact error: {e}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACTS
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
