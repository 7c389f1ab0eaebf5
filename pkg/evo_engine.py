#!/usr/bin/env python3
"""
Evolutionary optimization loop.

Each iteration samples a parent, builds a prompt (with feedback and archive
inspirations when context enrichment is on), asks the provider for a change,
applies it to the EVOLVE-BLOCK, evaluates the child through the cascade and
inserts it when it passes the filters. Migration and checkpoints fire on
iteration multiples of their intervals. The four ablation modes switch the
filter, the enriched context, island sampling and refinement on one by one.
"""

import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from config import ConfigurationError
from eval_cascade import CascadeConfig, EvaluationReport, StageSpec, evaluate, is_eligible
from mcts_engine import MctsConfig, MctsSearch, RolloutResult, SearchTreeNode, run_mcts, tree_dump
from mutators import (
    OPTIMIZE_TEMPLATE_PATH,
    DEFAULT_FEEDBACK_LIMIT,
    FeedbackLog,
    MutationError,
    MutationProvider,
    OptimizationContext,
    PromptTemplate,
    ProviderError,
    ResponseParseError,
    apply_mutation,
    build_prompt,
    parse_evolve_block,
    propose,
    strip_context,
    summarize_change,
)
from program_db import (
    DEFAULT_ARCHIVE_CAPACITY,
    Candidate,
    CheckpointError,
    IslandConfig,
    ProgramDatabase,
    assign_island,
    load_checkpoint,
)
from refiner import RefinerConfig, repair_candidate

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.json"
ITERATION_LOG_FILE = "iterations.jsonl"
BEST_PROGRAM_STEM = "best_program"
SEED_SUMMARY = "seed program"


class BaselineInvalidError(Exception):
    """Raised when the seed program does not pass the evaluation cascade."""
    pass


class EngineMode(str, Enum):
    ORIGINAL = "ORIGINAL"
    ORIGINAL_VALID = "ORIGINAL_VALID"
    IMPROVED = "IMPROVED"
    FINAL = "FINAL"


@dataclass(frozen=True)
class ModeFlags:
    validity_filter: bool
    enriched_context: bool
    island_sampling: bool
    refinement: bool


MODE_FLAGS = {
    EngineMode.ORIGINAL: ModeFlags(False, False, False, False),
    EngineMode.ORIGINAL_VALID: ModeFlags(True, False, False, False),
    EngineMode.IMPROVED: ModeFlags(True, True, True, False),
    EngineMode.FINAL: ModeFlags(True, True, True, True),
}


def resolve_mode(mode: Optional[str] = None, flags: Optional[Dict[str, bool]] = None) -> EngineMode:
    """
    Map a mode name and/or flag set to one ablation mode.

    Missing flags count as off. With neither given the full engine (FINAL)
    runs.

    Raises:
        ConfigurationError: Flags matching no mode, or a mode that disagrees
            with the flags
    """
    from_name = None
    if mode is not None:
        try:
            from_name = EngineMode(mode)
        except ValueError:
            raise ConfigurationError(f"unknown mode {mode}; expected one of {[m.value for m in EngineMode]}")

    if flags is None:
        return from_name or EngineMode.FINAL

    unknown = set(flags) - set(ModeFlags.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown mode flags: {', '.join(sorted(unknown))}")
    wanted = ModeFlags(**{name: bool(flags.get(name, False)) for name in ModeFlags.__dataclass_fields__})
    from_flags = next((m for m, f in MODE_FLAGS.items() if f == wanted), None)
    if from_flags is None:
        raise ConfigurationError(f"conflicting flags {asdict(wanted)} select no ablation mode")
    if from_name is not None and from_name != from_flags:
        raise ConfigurationError(f"mode {from_name.value} conflicts with flags selecting {from_flags.value}")
    return from_flags


class IterationOutcome(str, Enum):
    VALID = "VALID"
    FILTERED = "FILTERED"
    REPAIRED = "REPAIRED"
    INVALID_KEPT = "INVALID_KEPT"
    APPLY_ERROR = "APPLY_ERROR"
    PROVIDER_ERROR = "PROVIDER_ERROR"


@dataclass(frozen=True)
class EvolutionConfig:
    max_iterations: int = 20
    diff_mode: bool = True
    checkpoint_interval: int = 10
    seed: int = 0
    island: IslandConfig = field(default_factory=IslandConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    parallel_evaluations: int = 1
    throughput_mode: bool = False
    feedback_limit: int = DEFAULT_FEEDBACK_LIMIT
    inspiration_count: int = 3
    archive_capacity: int = DEFAULT_ARCHIVE_CAPACITY

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.parallel_evaluations < 1:
            raise ValueError("parallel_evaluations must be >= 1")

    @classmethod
    def from_sections(cls, evolution: dict, islands: dict, cascade: CascadeConfig) -> "EvolutionConfig":
        return cls(island=IslandConfig(**islands), cascade=cascade, **evolution)


@dataclass
class RunSummary:
    """
    Run metrics over the generated (non-seed, non-migrant) candidates.

    valid_count never exceeds iterations_run. best_score may still be the
    seed's when no child beats it; candidate_count includes the seed.
    """
    iterations_run: int
    valid_count: int
    best_candidate_id: Optional[int]
    best_score: float
    average_score: float
    per_iteration_log: List[Tuple[int, str]]
    mode: str
    seed: int
    search: str = "evolution"
    migrations: int = 0
    candidate_count: int = 0

    def to_dict(self) -> dict:
        data = asdict(self)
        data["per_iteration_log"] = [[i, outcome] for i, outcome in self.per_iteration_log]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunSummary":
        data = dict(data)
        data["per_iteration_log"] = [(i, outcome) for i, outcome in data["per_iteration_log"]]
        return cls(**data)


def summary_from_database(database: ProgramDatabase, iteration_log: Sequence[dict], mode: str, seed: int,
                          search: str = "evolution", migrations: int = 0) -> RunSummary:
    originals = database.originals()
    generated = [c for c in originals if c.parent_id is not None]
    valid = [c for c in originals if c.valid]
    best = min(valid, key=lambda c: c.sort_key()) if valid else None
    scores = [c.fitness for c in generated]
    return RunSummary(
        iterations_run=len(iteration_log),
        valid_count=sum(1 for c in generated if c.valid),
        best_candidate_id=best.id if best else None,
        best_score=best.fitness if best else 0.0,
        average_score=sum(scores) / len(scores) if scores else 0.0,
        per_iteration_log=[(record["iteration"], record["outcome"]) for record in iteration_log],
        mode=mode,
        seed=seed,
        search=search,
        migrations=migrations,
        candidate_count=len(originals),
    )


@dataclass
class Proposal:
    """A child proposed in one iteration, before evaluation."""
    iteration: int
    parent: Candidate
    pool: str
    source: Optional[str] = None
    summary: str = ""
    outcome: Optional[IterationOutcome] = None
    diagnostics: str = ""


class EvolutionEngine:
    """
    Owns the database, feedback log and iteration log of one run.

    Args:
        seed_program: Full source of the target file (one EVOLVE-BLOCK)
        context: Optimization context for the target; its writable code is
            replaced by each parent's block body
        config: EvolutionConfig
        provider: Mutation provider
        stages: Ordered cascade stages
        mode: Ablation mode
        output_dir: Where checkpoints, the iteration log and the best program go
        source_name: File name of the target, used for the best-program suffix
    """

    def __init__(self, seed_program: str, context: OptimizationContext, config: EvolutionConfig,
                 provider: MutationProvider, stages: Sequence[StageSpec], mode: EngineMode = EngineMode.FINAL,
                 output_dir=None, template: Optional[PromptTemplate] = None,
                 repair_template: Optional[PromptTemplate] = None, refiner_config: Optional[RefinerConfig] = None,
                 search: str = "evolution", mcts_config: Optional[MctsConfig] = None,
                 source_name: str = "candidate.txt", database: Optional[ProgramDatabase] = None):
        parse_evolve_block(seed_program)
        if search not in ("evolution", "mcts"):
            raise ConfigurationError(f"unknown search {search}; expected evolution or mcts")
        self.seed_program = seed_program
        self.context = context
        self.config = config
        self.provider = provider
        self.stages = list(stages)
        self.mode = EngineMode(mode)
        self.flags = MODE_FLAGS[self.mode]
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.template = template or PromptTemplate.from_file(OPTIMIZE_TEMPLATE_PATH)
        self.repair_template = repair_template
        self.refiner_config = refiner_config or RefinerConfig()
        self.search = search
        self.mcts_config = mcts_config or MctsConfig()
        self.source_name = source_name

        self.database = database or ProgramDatabase(config.island, seed=config.seed,
                                                    archive_capacity=config.archive_capacity)
        self.rng = random.Random(config.seed ^ 0x5EED)
        self.feedback = FeedbackLog(config.feedback_limit)
        self.iteration = 0
        self.iteration_log: List[dict] = []
        self.migrations = 0
        self.mcts_state: Optional[dict] = None
        self.search_tree = None

    @classmethod
    def from_checkpoint(cls, path, seed_program: str, context: OptimizationContext, config: EvolutionConfig,
                        provider: MutationProvider, stages: Sequence[StageSpec],
                        mode: EngineMode = EngineMode.FINAL, **kwargs) -> "EvolutionEngine":
        """Resume a run; the checkpoint must come from the same mode and search."""
        database, state = load_checkpoint(path)
        if state is None:
            raise CheckpointError(f"{path} holds no engine state to resume from")
        engine = cls(seed_program, context, config, provider, stages, mode=mode, database=database, **kwargs)
        engine.load_state(state)
        logger.info(f"Resuming {engine.mode.value} run at iteration {engine.iteration} from {path}")
        return engine

    # -- state -----------------------------------------------------------

    def state_dict(self) -> dict:
        version, internal, gauss = self.rng.getstate()
        return {
            "iteration": self.iteration,
            "mode": self.mode.value,
            "search": self.search,
            "seed": self.config.seed,
            "migrations": self.migrations,
            "provider": self.provider.state_dict(),
            "feedback": self.feedback.state_dict(),
            "iteration_log": list(self.iteration_log),
            "rng_state": [version, list(internal), gauss],
            "mcts": self.mcts_state,
        }

    def load_state(self, state: dict):
        if state["mode"] != self.mode.value or state["search"] != self.search:
            raise CheckpointError(
                f"checkpoint is from a {state['mode']}/{state['search']} run, not {self.mode.value}/{self.search}"
            )
        self.iteration = state["iteration"]
        self.migrations = state["migrations"]
        self.provider.load_state(state["provider"])
        self.feedback.load_state(state["feedback"])
        self.iteration_log = list(state["iteration_log"])
        version, internal, gauss = state["rng_state"]
        self.rng.setstate((version, tuple(internal), gauss))
        self.mcts_state = state.get("mcts")

    def checkpoint(self):
        if self.output_dir is None:
            return
        self.database.checkpoint(self.output_dir / CHECKPOINT_FILE, self.state_dict())
        self._rewrite_iteration_log()

    # -- baseline --------------------------------------------------------

    def evaluate_baseline(self) -> Candidate:
        """Evaluate and insert the seed program; it must pass every gate."""
        report = evaluate(self.seed_program, self.stages, self.config.cascade)
        if not is_eligible(report):
            raise BaselineInvalidError(
                f"seed program rejected at {report.rejected_at}:\n{report.diagnostics}"
            )
        seed = self.database.insert(Candidate(
            source=self.seed_program, report=report, valid=True, change_summary=SEED_SUMMARY,
        ))
        self.feedback.record_variant(0, seed.id, seed.fitness, SEED_SUMMARY)
        logger.info(f"Baseline combined score {report.combined_score:.4f}")
        return seed

    # -- evolution -------------------------------------------------------

    def _context_for(self, parent: Candidate, inspirations: Sequence[Candidate]) -> OptimizationContext:
        body = parse_evolve_block(parent.source).body
        context = replace(self.context, writable_code=body)
        if not self.flags.enriched_context:
            return strip_context(context)
        return replace(context, feedback=self.feedback.render(inspirations))

    def _sample_parent(self, iteration: int) -> Tuple[Candidate, str]:
        if self.flags.island_sampling:
            current_island = assign_island(iteration - 1, self.config.island)
            return self.database.sample_parent_with_pool(current_island)
        return self.database.sample_uniform(), "uniform"

    def propose_child(self, iteration: int) -> Proposal:
        parent, pool = self._sample_parent(iteration)
        proposal = Proposal(iteration, parent, pool)
        inspirations = self.database.archive()[:self.config.inspiration_count] if self.flags.enriched_context else []
        prompt = build_prompt(self._context_for(parent, inspirations), self.template)

        try:
            response = propose(self.provider, prompt, self.rng)
        except ProviderError as e:
            proposal.outcome, proposal.diagnostics = IterationOutcome.PROVIDER_ERROR, str(e)
            return proposal
        except ResponseParseError as e:
            proposal.outcome, proposal.diagnostics = IterationOutcome.APPLY_ERROR, f"unparseable response: {e}"
            return proposal

        block = parse_evolve_block(parent.source)
        try:
            proposal.source = apply_mutation(block, response)
        except MutationError as e:
            proposal.outcome, proposal.diagnostics = IterationOutcome.APPLY_ERROR, str(e)
            return proposal
        proposal.summary = response.rationale or summarize_change(block.body, parse_evolve_block(proposal.source).body)
        return proposal

    def _repair(self, proposal: Proposal, report: EvaluationReport) -> Optional[Candidate]:
        outcome = repair_candidate(
            proposal.source, report.diagnostics, self.provider, self.stages, self.config.cascade,
            self.refiner_config, self.rng, self.repair_template, self.context.constraints,
        )
        if not (outcome.success and is_eligible(outcome.report)):
            proposal.diagnostics = outcome.diagnostics or report.diagnostics
            return None
        return Candidate(
            source=outcome.source,
            parent_id=proposal.parent.id,
            generation=proposal.parent.generation + 1,
            report=outcome.report,
            valid=True,
            change_summary=f"{proposal.summary} (repaired)",
            repaired_from=outcome.repaired_from,
            repair_strategy=outcome.strategy.value,
        )

    def settle(self, proposal: Proposal, report: Optional[EvaluationReport]) -> dict:
        """Filter, refine or insert one evaluated proposal and log the iteration."""
        stored = None
        if proposal.outcome is None:
            child = Candidate(
                source=proposal.source,
                parent_id=proposal.parent.id,
                generation=proposal.parent.generation + 1,
                report=report,
                valid=is_eligible(report),
                change_summary=proposal.summary,
            )
            if child.valid:
                stored = self.database.insert(child)
                proposal.outcome = IterationOutcome.VALID
            else:
                proposal.diagnostics = report.diagnostics
                self.feedback.record_failure(proposal.iteration, report.diagnostics)
                repaired = self._repair(proposal, report) if self.flags.refinement else None
                if repaired is not None:
                    stored = self.database.insert(repaired)
                    proposal.outcome = IterationOutcome.REPAIRED
                elif not self.flags.validity_filter:
                    stored = self.database.insert(child, allow_invalid=True)
                    proposal.outcome = IterationOutcome.INVALID_KEPT
                else:
                    proposal.outcome = IterationOutcome.FILTERED
        else:
            self.feedback.record_failure(proposal.iteration, proposal.diagnostics)

        if stored is not None and stored.valid:
            self.feedback.record_variant(proposal.iteration, stored.id, stored.fitness, stored.change_summary)

        record = {
            "iteration": proposal.iteration,
            "outcome": proposal.outcome.value,
            "parent_id": proposal.parent.id,
            "pool": proposal.pool,
            "candidate_id": stored.id if stored else None,
            "island": stored.island if stored else None,
            "score": stored.fitness if stored else (report.combined_score if report else None),
            "summary": proposal.summary,
            "diagnostics": proposal.diagnostics[:300] if proposal.outcome != IterationOutcome.VALID else "",
        }
        level = logging.INFO if proposal.outcome in (IterationOutcome.VALID, IterationOutcome.REPAIRED) \
            else logging.WARNING
        logger.log(level, f"Iteration {proposal.iteration}: {proposal.outcome.value}"
                          f" (parent {proposal.parent.id}, pool {proposal.pool})", extra={"event": record})
        return record

    def _finish_iteration(self, record: dict):
        self.iteration_log.append(record)
        self.iteration = max(self.iteration, record["iteration"])
        self._append_iteration_log(record)
        if record["iteration"] % self.config.island.migration_interval == 0:
            migration = self.database.migrate(record["iteration"])
            if migration:
                self.migrations += 1

    def step(self) -> dict:
        """One sequential iteration."""
        iteration = self.iteration + 1
        proposal = self.propose_child(iteration)
        report = evaluate(proposal.source, self.stages, self.config.cascade) if proposal.source else None
        record = self.settle(proposal, report)
        self._finish_iteration(record)
        if iteration % self.config.checkpoint_interval == 0:
            self.checkpoint()
        return record

    def step_batch(self, executor: ThreadPoolExecutor) -> List[dict]:
        """
        Propose up to parallel_evaluations children, evaluate them concurrently
        and settle them in iteration order (completion order in throughput mode).
        """
        first = self.iteration + 1
        last = min(self.iteration + self.config.parallel_evaluations, self.config.max_iterations)
        proposals = [self.propose_child(i) for i in range(first, last + 1)]
        futures = {
            executor.submit(evaluate, p.source, self.stages, self.config.cascade): p
            for p in proposals if p.source is not None
        }
        reports: Dict[int, EvaluationReport] = {}
        records = []
        if self.config.throughput_mode:
            for p in proposals:
                if p.source is None:
                    records.append(self.settle(p, None))
            for future in as_completed(futures):
                records.append(self.settle(futures[future], future.result()))
        else:
            for future, p in futures.items():
                reports[p.iteration] = future.result()
            records = [self.settle(p, reports.get(p.iteration)) for p in proposals]

        for record in records:
            self._finish_iteration(record)
        if any(i % self.config.checkpoint_interval == 0 for i in range(first, last + 1)):
            self.checkpoint()
        return records

    def run(self) -> RunSummary:
        """Run (or continue) until max_iterations and write the outputs."""
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            self._rewrite_iteration_log()
        if len(self.database) == 0:
            self.evaluate_baseline()

        if self.search == "mcts":
            self._run_mcts()
        elif self.config.parallel_evaluations > 1:
            with ThreadPoolExecutor(max_workers=self.config.parallel_evaluations) as executor:
                while self.iteration < self.config.max_iterations:
                    self.step_batch(executor)
        else:
            while self.iteration < self.config.max_iterations:
                self.step()

        self.checkpoint()
        summary = self.summary()
        self.write_best_program()
        logger.info(
            f"Run finished: {summary.iterations_run} iterations, {summary.valid_count} valid, "
            f"best {summary.best_score:.4f}, average {summary.average_score:.4f}"
        )
        return summary

    # -- MCTS search ----------------------------------------------------

    def _run_mcts(self):
        """
        Tree search over whole programs rooted at the seed; eligible rollouts
        go to the database. Runs max_iterations search iterations, one
        iteration log record each.
        """
        seed = self.database.originals()[0]
        rollouts_seen = [len(self.mcts_state["rollout_log"]) if self.mcts_state else 1]

        def prompt_fn(node: SearchTreeNode) -> str:
            inspirations = self.database.archive()[:self.config.inspiration_count] \
                if self.flags.enriched_context else []
            return build_prompt(self._context_for(Candidate(source=node.program), inspirations), self.template)

        def after_step(search: MctsSearch):
            node = None
            if len(search.rollout_log) > rollouts_seen[0]:
                node = search.tree.nodes[search.rollout_log[-1][0]]
            rollouts_seen[0] = len(search.rollout_log)

            if node is None:
                outcome = IterationOutcome.APPLY_ERROR
                diagnostics = search.expansion_failures[-1] if search.expansion_failures else ""
                self.feedback.record_failure(search.iterations, diagnostics)
            elif node.eligible:
                outcome, diagnostics = IterationOutcome.VALID, ""
                self.feedback.record_variant(search.iterations, node.candidate_id, node.reward, node.change_summary)
            else:
                outcome = IterationOutcome.FILTERED
                diagnostics = node.report.diagnostics if node.report is not None else ""
                self.feedback.record_failure(search.iterations, diagnostics)

            parent = search.tree.nodes[node.parent] if node is not None and node.parent is not None else None
            record = {
                "iteration": search.iterations,
                "outcome": outcome.value,
                "parent_id": parent.candidate_id if parent is not None else None,
                "pool": "tree",
                "candidate_id": node.candidate_id if node is not None else None,
                "island": self.database.get(node.candidate_id).island
                if node is not None and node.candidate_id is not None else None,
                "score": node.reward if node is not None else None,
                "summary": node.change_summary if node is not None else "",
                "diagnostics": diagnostics[:300],
            }
            logger.log(logging.INFO if outcome == IterationOutcome.VALID else logging.WARNING,
                       f"MCTS iteration {search.iterations}: {outcome.value}", extra={"event": record})
            self.iteration_log.append(record)
            self.iteration = search.iterations
            self._append_iteration_log(record)
            self.search_tree = search.tree
            self.mcts_state = search.state_dict()
            if search.iterations % self.config.checkpoint_interval == 0:
                self.checkpoint()

        search = run_mcts(
            self.seed_program, self.provider, prompt_fn, self.stages, self.config.cascade,
            replace(self.mcts_config, max_iterations=self.config.max_iterations), self.rng,
            database=self.database,
            baseline=RolloutResult(seed.fitness, seed.report, True),
            after_step=after_step,
            state=self.mcts_state,
            root_candidate_id=seed.id,
        )
        self.search_tree = search.tree
        self.mcts_state = search.state_dict()

    # -- outputs ---------------------------------------------------------

    def summary(self) -> RunSummary:
        return summary_from_database(self.database, self.iteration_log, self.mode.value, self.config.seed,
                                     self.search, self.migrations)

    def best_candidate(self) -> Optional[Candidate]:
        valid = [c for c in self.database.originals() if c.valid]
        return min(valid, key=lambda c: c.sort_key()) if valid else None

    def write_best_program(self) -> Optional[Path]:
        best = self.best_candidate()
        if self.output_dir is None or best is None:
            return None
        path = self.output_dir / f"{BEST_PROGRAM_STEM}{Path(self.source_name).suffix or '.txt'}"
        path.write_text(best.source)
        return path

    def tree_dump(self) -> Optional[dict]:
        return tree_dump(self.search_tree) if self.search_tree is not None else None

    def _append_iteration_log(self, record: dict):
        if self.output_dir is None:
            return
        with open(self.output_dir / ITERATION_LOG_FILE, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def _rewrite_iteration_log(self):
        if self.output_dir is None:
            return
        with open(self.output_dir / ITERATION_LOG_FILE, "w") as f:
            for record in self.iteration_log:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def run_evolution(seed_program: str, context: OptimizationContext, config: EvolutionConfig,
                  provider: MutationProvider, stages: Sequence[StageSpec],
                  mode: EngineMode = EngineMode.FINAL, **kwargs) -> RunSummary:
    """
    Optimize one EVOLVE-BLOCK target.

    Raises:
        BaselineInvalidError: The seed program fails the cascade
    """
    return EvolutionEngine(seed_program, context, config, provider, stages, mode=mode, **kwargs).run()
