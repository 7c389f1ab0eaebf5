#!/usr/bin/env python3
"""
Code refinement agent: repairs invalid candidates from their diagnostics.

Two strategies are available. Reflection asks the provider for a fix, re-runs
the correctness stages and loops while attempts remain. MCTS repair runs the
tree search rooted at the broken candidate with the unit-test pass rate as
reward. `repair_candidate` tries them in that order.
"""

import hashlib
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

from eval_cascade import CascadeConfig, EvaluationReport, StageKind, StageSpec, correctness_stages, evaluate
from mcts_engine import MctsConfig, MctsSearch, RolloutResult, SearchTreeNode
from mutators import (
    REPAIR_SLOTS,
    REPAIR_TEMPLATE_PATH,
    EvolveBlockError,
    MutationError,
    MutationProvider,
    PromptTemplate,
    ProviderError,
    ResponseParseError,
    apply_mutation,
    build_repair_prompt,
    parse_evolve_block,
    propose,
)

logger = logging.getLogger(__name__)

DEFAULT_REFLECTION_ATTEMPTS = 3


class RepairError(Exception):
    """Raised when a repair cannot be attempted with the configured stages."""
    pass


class RepairStrategy(str, Enum):
    REFLECTION = "REFLECTION"
    MCTS_REPAIR = "MCTS_REPAIR"


@dataclass
class RepairTask:
    candidate_source: str
    diagnostics: str
    attempts_remaining: int = DEFAULT_REFLECTION_ATTEMPTS
    strategy: RepairStrategy = RepairStrategy.REFLECTION

    def __post_init__(self):
        if self.attempts_remaining < 0:
            raise ValueError("attempts_remaining must be non-negative")


@dataclass
class RepairOutcome:
    success: bool
    source: str
    report: Optional[EvaluationReport]
    strategy: RepairStrategy
    repaired_from: str
    attempts_used: int = 0
    provider_calls: int = 0
    diagnostics: str = ""
    pass_rate: float = 0.0
    reward_trajectory: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class RefinerConfig:
    reflection_attempts: int = DEFAULT_REFLECTION_ATTEMPTS
    mcts_max_iterations: int = 4
    mcts_expansion_k: int = 2
    exploration_c: float = 1.0
    exploitation_probability: float = 0.5

    def __post_init__(self):
        if self.reflection_attempts < 0 or self.mcts_max_iterations < 0:
            raise ValueError("repair budgets must be non-negative")
        if self.mcts_expansion_k < 1:
            raise ValueError("mcts_expansion_k must be >= 1")

    @property
    def mcts(self) -> MctsConfig:
        return MctsConfig(
            exploration_c=self.exploration_c,
            exploitation_probability=self.exploitation_probability,
            expansion_k=self.mcts_expansion_k,
            max_iterations=self.mcts_max_iterations,
        )


def source_digest(source: str) -> str:
    return hashlib.sha256(source.encode("utf-8")).hexdigest()[:16]


def default_repair_template() -> PromptTemplate:
    return PromptTemplate.from_file(REPAIR_TEMPLATE_PATH, REPAIR_SLOTS)


def unit_test_stage(stages: Sequence[StageSpec]) -> StageSpec:
    for stage in stages:
        if stage.kind == StageKind.UNIT_TEST:
            return stage
    raise RepairError("repair requires a unit-test stage")


def unit_test_pass_rate(report: Optional[EvaluationReport], stage_name: str) -> float:
    """tests_passed / tests_total of the unit-test stage; its score when no counts were reported; 0 if it never ran."""
    result = report.result(stage_name) if report is not None else None
    if result is None:
        return 0.0
    if result.tests_total:
        return max(0.0, min(1.0, (result.tests_passed or 0) / result.tests_total))
    return result.score


def _correctness_or_fail(stages: Sequence[StageSpec]) -> List[StageSpec]:
    checks = correctness_stages(stages)
    if not checks:
        raise RepairError("repair requires a build or unit-test stage")
    return checks


def _final_report(source: str, stages: Sequence[StageSpec], cascade_config: CascadeConfig,
                  correctness_report: EvaluationReport) -> EvaluationReport:
    """Full cascade for a repaired program, so it carries a fitness like any other candidate."""
    if len(stages) == len(correctness_stages(stages)):
        return correctness_report
    return evaluate(source, stages, cascade_config)


def reflect_repair(task: RepairTask, provider: MutationProvider, stages: Sequence[StageSpec],
                   cascade_config: CascadeConfig, template: Optional[PromptTemplate] = None,
                   rng: Optional[random.Random] = None, constraints: str = "") -> RepairOutcome:
    """
    Reflection loop: prompt with source and diagnostics, apply, re-validate.

    Each attempt costs one provider call; provider and parse failures consume
    the attempt. Later attempts work on the latest applied variant.

    Returns:
        RepairOutcome; on success the source passes every correctness stage
    """
    if task.strategy != RepairStrategy.REFLECTION:
        raise RepairError(f"reflect_repair got a {task.strategy.value} task")
    checks = _correctness_or_fail(stages)
    template = template or default_repair_template()

    source, diagnostics = task.candidate_source, task.diagnostics
    outcome = RepairOutcome(False, source, None, RepairStrategy.REFLECTION, source_digest(task.candidate_source),
                            diagnostics=diagnostics)

    while task.attempts_remaining > 0:
        task.attempts_remaining -= 1
        outcome.attempts_used += 1
        try:
            block = parse_evolve_block(source)
            prompt = build_repair_prompt(block.body, diagnostics, template, constraints)
            outcome.provider_calls += 1
            repaired = apply_mutation(block, propose(provider, prompt, rng))
        except (ProviderError, ResponseParseError, MutationError, EvolveBlockError) as e:
            logger.info(f"Reflection attempt {outcome.attempts_used} failed before validation: {e}")
            outcome.diagnostics = f"{diagnostics}\nrepair attempt failed: {e}".strip()
            continue

        report = evaluate(repaired, checks, cascade_config)
        if report.passed_all_gates:
            outcome.success = True
            outcome.source = repaired
            outcome.report = _final_report(repaired, stages, cascade_config, report)
            outcome.diagnostics = ""
            logger.info(f"Reflection repaired candidate {outcome.repaired_from} in {outcome.attempts_used} attempt(s)")
            return outcome

        source, diagnostics = repaired, report.diagnostics
        outcome.source, outcome.report, outcome.diagnostics = repaired, report, diagnostics

    logger.info(f"Reflection gave up on {outcome.repaired_from} after {outcome.attempts_used} attempt(s)")
    return outcome


def mcts_repair(task: RepairTask, provider: MutationProvider, stages: Sequence[StageSpec],
                cascade_config: CascadeConfig, config: MctsConfig, rng: random.Random,
                template: Optional[PromptTemplate] = None, constraints: str = "") -> RepairOutcome:
    """
    Tree search over repairs, rewarded by unit-test pass rate.

    The broken candidate is rolled out first (one rollout). The search stops at
    the first node reaching pass rate 1.0 that passes every correctness gate;
    otherwise the best node found is returned as a failure.

    Raises:
        RepairError: "repair requires a unit-test stage"
    """
    if task.strategy != RepairStrategy.MCTS_REPAIR:
        raise RepairError(f"mcts_repair got a {task.strategy.value} task")
    unit_stage = unit_test_stage(stages)
    checks = _correctness_or_fail(stages)
    template = template or default_repair_template()

    def reward_fn(program: str) -> RolloutResult:
        report = evaluate(program, checks, cascade_config)
        return RolloutResult(unit_test_pass_rate(report, unit_stage.name), report, report.passed_all_gates)

    def prompt_fn(node: SearchTreeNode) -> str:
        diagnostics = node.report.diagnostics if node.report is not None else task.diagnostics
        return build_repair_prompt(parse_evolve_block(node.program).body, diagnostics or task.diagnostics,
                                   template, constraints)

    search = MctsSearch(task.candidate_source, provider, prompt_fn, reward_fn, config, rng,
                        stop_fn=lambda reward: reward >= 1.0)
    root = search.tree.root
    search.backpropagate(root, search.rollout(root))
    if root.reward < 1.0 or not root.eligible:
        search.run()

    trajectory = [reward for _, reward in search.rollout_log]
    repaired = next((search.tree.nodes[node_id] for node_id, reward in search.rollout_log
                     if reward >= 1.0 and search.tree.nodes[node_id].eligible), None)
    outcome = RepairOutcome(
        success=repaired is not None,
        source=task.candidate_source,
        report=root.report,
        strategy=RepairStrategy.MCTS_REPAIR,
        repaired_from=source_digest(task.candidate_source),
        attempts_used=search.iterations,
        provider_calls=search.provider_calls,
        pass_rate=root.reward,
        reward_trajectory=trajectory,
    )

    if repaired is not None:
        outcome.source = repaired.program
        outcome.report = _final_report(repaired.program, stages, cascade_config, repaired.report)
        outcome.pass_rate = 1.0
        logger.info(f"MCTS repair fixed {outcome.repaired_from} after {search.iterations} iteration(s)")
        return outcome

    best = search.tree.best_node()
    if best is not None:
        outcome.source, outcome.report, outcome.pass_rate = best.program, best.report, best.reward
    outcome.diagnostics = outcome.report.diagnostics if outcome.report is not None else task.diagnostics
    logger.info(f"MCTS repair of {outcome.repaired_from} ended at pass rate {outcome.pass_rate:.2f}")
    return outcome


def repair_candidate(source: str, diagnostics: str, provider: MutationProvider, stages: Sequence[StageSpec],
                     cascade_config: CascadeConfig, config: RefinerConfig, rng: random.Random,
                     template: Optional[PromptTemplate] = None, constraints: str = "") -> RepairOutcome:
    """Reflection first, then MCTS repair when a unit-test stage exists; the last outcome is returned."""
    outcome = None
    if config.reflection_attempts > 0:
        task = RepairTask(source, diagnostics, config.reflection_attempts, RepairStrategy.REFLECTION)
        outcome = reflect_repair(task, provider, stages, cascade_config, template, rng, constraints)
        if outcome.success:
            return outcome

    if any(stage.kind == StageKind.UNIT_TEST for stage in stages):
        task = RepairTask(source, diagnostics, config.mcts_max_iterations, RepairStrategy.MCTS_REPAIR)
        mcts_outcome = mcts_repair(task, provider, stages, cascade_config, config.mcts, rng, template, constraints)
        if outcome is not None:
            mcts_outcome.provider_calls += outcome.provider_calls
        return mcts_outcome

    if outcome is None:
        outcome = RepairOutcome(False, source, None, RepairStrategy.REFLECTION, source_digest(source),
                                diagnostics=diagnostics)
    return outcome
