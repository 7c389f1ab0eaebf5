#!/usr/bin/env python3
"""
Monte Carlo Tree Search over candidate programs.

Each node holds a full program. Unvisited nodes are rolled out (evaluated);
visited nodes are expanded with k provider proposals and one random child is
rolled out. Rewards are backpropagated along the path to the root.

`MctsSearch` is generic over how prompts are built and how programs are
rewarded, so the same machinery drives both optimization and test-pass-rate
repair.
"""

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

from eval_cascade import CascadeConfig, EvaluationReport, StageSpec, evaluate
from program_db import Candidate, ProgramDatabase
from mutators import (
    EvolveBlockError,
    MutationError,
    MutationProvider,
    ProviderError,
    ResponseParseError,
    apply_mutation,
    parse_evolve_block,
    propose,
    summarize_change,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MctsConfig:
    exploration_c: float = 1.0
    exploitation_probability: float = 0.5
    expansion_k: int = 3
    max_iterations: int = 20

    def __post_init__(self):
        if self.exploration_c < 0:
            raise ValueError("exploration_c must be >= 0")
        if not 0.0 <= self.exploitation_probability <= 1.0:
            raise ValueError("exploitation_probability must lie in [0, 1]")
        if self.expansion_k < 1:
            raise ValueError("expansion_k must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass
class SearchTreeNode:
    id: int
    program: str
    parent: Optional[int] = None
    children: List[int] = field(default_factory=list)
    cumulative_reward: float = 0.0
    visit_count: int = 0
    reward: Optional[float] = None
    eligible: bool = False
    expansion_failed: bool = False
    change_summary: str = ""
    candidate_id: Optional[int] = None
    report: Optional[EvaluationReport] = None

    @property
    def mean_reward(self) -> float:
        return self.cumulative_reward / self.visit_count if self.visit_count else 0.0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "program": self.program,
            "parent": self.parent,
            "children": list(self.children),
            "cumulative_reward": self.cumulative_reward,
            "visit_count": self.visit_count,
            "reward": self.reward,
            "eligible": self.eligible,
            "expansion_failed": self.expansion_failed,
            "change_summary": self.change_summary,
            "candidate_id": self.candidate_id,
            "report": self.report.to_dict(include_timing=False) if self.report is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SearchTreeNode":
        data = dict(data)
        if data.get("report") is not None:
            data["report"] = EvaluationReport.from_dict(data["report"])
        return cls(**data)


class SearchTree:
    """Nodes indexed by id; id 0 is the root."""

    def __init__(self, root_program: Optional[str] = None):
        self.nodes: Dict[int, SearchTreeNode] = {}
        if root_program is not None:
            self.nodes[0] = SearchTreeNode(id=0, program=root_program)

    @property
    def root(self) -> SearchTreeNode:
        return self.nodes[0]

    def __len__(self) -> int:
        return len(self.nodes)

    def add_child(self, parent_id: int, program: str, change_summary: str = "") -> SearchTreeNode:
        child = SearchTreeNode(id=len(self.nodes), program=program, parent=parent_id, change_summary=change_summary)
        self.nodes[child.id] = child
        self.nodes[parent_id].children.append(child.id)
        return child

    def path_to_root(self, node_id: int) -> List[SearchTreeNode]:
        path = []
        current: Optional[int] = node_id
        while current is not None:
            node = self.nodes[current]
            path.append(node)
            current = node.parent
        return path

    def depth(self, node_id: int) -> int:
        return len(self.path_to_root(node_id)) - 1

    def is_dead(self, node: SearchTreeNode) -> bool:
        """Expansion failed and nothing below it is selectable."""
        return node.expansion_failed and not any(not self.is_dead(self.nodes[c]) for c in node.children)

    def best_node(self, eligible_only: bool = False) -> Optional[SearchTreeNode]:
        """Highest single-rollout reward; ties go to the lowest id."""
        rolled = [n for n in self.nodes.values() if n.reward is not None and (n.eligible or not eligible_only)]
        if not rolled:
            return None
        return min(rolled, key=lambda n: (-n.reward, n.id))

    def to_dict(self) -> dict:
        return {"nodes": [self.nodes[i].to_dict() for i in sorted(self.nodes)]}

    @classmethod
    def from_dict(cls, data: dict) -> "SearchTree":
        tree = cls()
        for raw in data["nodes"]:
            node = SearchTreeNode.from_dict(raw)
            tree.nodes[node.id] = node
        return tree


def ucb_value(cumulative_reward: float, visit_count: int, parent_visits: int, c: float) -> float:
    """UCB(n) = V/N + c * sqrt(ln N(parent) / N); unvisited nodes score +inf."""
    if cumulative_reward < 0 or visit_count < 0 or parent_visits < 0 or c < 0:
        raise ValueError(
            f"UCB inputs must be non-negative (V={cumulative_reward}, N={visit_count}, "
            f"N(parent)={parent_visits}, c={c})"
        )
    if visit_count == 0:
        return math.inf
    if parent_visits < 1:
        raise ValueError("parent visit count must be >= 1 for a visited node")
    return cumulative_reward / visit_count + c * math.sqrt(math.log(parent_visits) / visit_count)


def ucb_score(node: SearchTreeNode, parent_visits: int, c: float) -> float:
    return ucb_value(node.cumulative_reward, node.visit_count, parent_visits, c)


def select_node(tree: SearchTree, rng: random.Random, config: MctsConfig) -> Optional[SearchTreeNode]:
    """
    Pick the node to work on next.

    With probability exploitation_probability the visited node with the best
    mean reward is returned (ties: lowest id); otherwise the tree is descended
    from the root by max UCB until a leaf or an unvisited node. Returns None
    when nothing is selectable.
    """
    if rng.random() < config.exploitation_probability:
        visited = [n for n in tree.nodes.values() if n.visit_count > 0 and not tree.is_dead(n)]
        if visited:
            return min(visited, key=lambda n: (-n.mean_reward, n.id))

    node = tree.root
    while node.visit_count > 0:
        live = [tree.nodes[c] for c in node.children if not tree.is_dead(tree.nodes[c])]
        if not live:
            break
        node = max(live, key=lambda n: (ucb_score(n, node.visit_count, config.exploration_c), -n.id))
    return None if tree.is_dead(node) else node


def backpropagate(tree: SearchTree, node: SearchTreeNode, reward: float):
    for ancestor in tree.path_to_root(node.id):
        ancestor.cumulative_reward += reward
        ancestor.visit_count += 1


@dataclass
class RolloutResult:
    reward: float
    report: Optional[EvaluationReport] = None
    eligible: bool = False


def cascade_reward(stages: Sequence[StageSpec], cascade_config: CascadeConfig) -> Callable[[str], RolloutResult]:
    """Reward = combined score when every gate passes, else 0."""
    def reward_fn(program: str) -> RolloutResult:
        report = evaluate(program, stages, cascade_config)
        reward = report.combined_score if report.passed_all_gates else 0.0
        return RolloutResult(reward, report, report.passed_all_gates)
    return reward_fn


def rollout(node: SearchTreeNode, stages: Sequence[StageSpec], cascade_config: CascadeConfig) -> float:
    result = cascade_reward(stages, cascade_config)(node.program)
    node.reward, node.report, node.eligible = result.reward, result.report, result.eligible
    return result.reward


class MctsSearch:
    """
    One search tree plus the callbacks that give it meaning.

    Args:
        root_program: Full source of the root (must contain one EVOLVE-BLOCK)
        provider: Mutation provider used for expansion
        prompt_fn: node -> prompt text
        reward_fn: program -> RolloutResult
        config: MctsConfig
        rng: Seeded random source owned by this search
        stop_fn: reward -> True to stop after that rollout
        on_rollout: Called with each rolled-out node (forwarding to a database)
    """

    def __init__(self, root_program: str, provider: MutationProvider,
                 prompt_fn: Callable[[SearchTreeNode], str],
                 reward_fn: Callable[[str], RolloutResult],
                 config: MctsConfig, rng: random.Random,
                 stop_fn: Optional[Callable[[float], bool]] = None,
                 on_rollout: Optional[Callable[[SearchTreeNode], None]] = None):
        self.tree = SearchTree(root_program)
        self.provider = provider
        self.prompt_fn = prompt_fn
        self.reward_fn = reward_fn
        self.config = config
        self.rng = rng
        self.stop_fn = stop_fn
        self.on_rollout = on_rollout
        self.iterations = 0
        self.provider_calls = 0
        self.rollout_log: List[tuple] = []
        self.expansion_failures: List[str] = []
        self.stopped = False

    def rollout(self, node: SearchTreeNode) -> float:
        if not node.program:
            raise ValueError(f"node {node.id} has no program")
        result = self.reward_fn(node.program)
        reward = max(0.0, min(1.0, result.reward))
        node.reward, node.report, node.eligible = reward, result.report, result.eligible
        self.rollout_log.append((node.id, reward))
        if self.on_rollout is not None:
            self.on_rollout(node)
        return reward

    def backpropagate(self, node: SearchTreeNode, reward: float):
        backpropagate(self.tree, node, reward)

    def expand(self, node: SearchTreeNode) -> List[SearchTreeNode]:
        """Request k proposals; children are created only for those that apply cleanly."""
        if node.visit_count < 1:
            raise ValueError(f"node {node.id} is unvisited; roll it out before expanding")
        try:
            block = parse_evolve_block(node.program)
        except EvolveBlockError as e:
            node.expansion_failed = True
            self.expansion_failures.append(f"node {node.id}: {e}")
            return []

        children = []
        for _ in range(self.config.expansion_k):
            self.provider_calls += 1
            try:
                response = propose(self.provider, self.prompt_fn(node), self.rng)
                program = apply_mutation(block, response)
            except (ProviderError, ResponseParseError, MutationError) as e:
                logger.info(f"Expansion of node {node.id} dropped a proposal: {e}")
                self.expansion_failures.append(f"node {node.id}: {e}")
                continue
            summary = response.rationale or summarize_change(block.body, parse_evolve_block(program).body)
            children.append(self.tree.add_child(node.id, program, summary))

        if not children:
            node.expansion_failed = True
            logger.warning(f"Expansion of node {node.id} produced no children")
        return children

    def step(self) -> bool:
        """One select / expand / rollout / backpropagate iteration; False when nothing is selectable."""
        node = select_node(self.tree, self.rng, self.config)
        if node is None:
            return False
        self.iterations += 1

        if node.visit_count == 0:
            target = node
        else:
            children = self.expand(node)
            if not children:
                return True
            target = self.rng.choice(children)

        reward = self.rollout(target)
        self.backpropagate(target, reward)
        if self.stop_fn is not None and self.stop_fn(reward):
            self.stopped = True
        return True

    def run(self, max_iterations: Optional[int] = None,
            after_step: Optional[Callable[["MctsSearch"], None]] = None) -> "MctsSearch":
        budget = self.config.max_iterations if max_iterations is None else max_iterations
        while self.iterations < budget and not self.stopped:
            if not self.step():
                logger.info(f"MCTS stopped early after {self.iterations} iterations: no selectable node")
                break
            if after_step is not None:
                after_step(self)
        return self

    def state_dict(self) -> dict:
        version, internal, gauss = self.rng.getstate()
        return {
            "tree": self.tree.to_dict(),
            "iterations": self.iterations,
            "provider_calls": self.provider_calls,
            "rollout_log": [list(entry) for entry in self.rollout_log],
            "expansion_failures": list(self.expansion_failures),
            "stopped": self.stopped,
            "rng_state": [version, list(internal), gauss],
        }

    def load_state(self, state: dict):
        self.tree = SearchTree.from_dict(state["tree"])
        self.iterations = state["iterations"]
        self.provider_calls = state["provider_calls"]
        self.rollout_log = [tuple(entry) for entry in state["rollout_log"]]
        self.expansion_failures = list(state["expansion_failures"])
        self.stopped = state["stopped"]
        version, internal, gauss = state["rng_state"]
        self.rng.setstate((version, tuple(internal), gauss))


def seed_root(search: MctsSearch, result: RolloutResult):
    """Record an already computed root evaluation as the first rollout."""
    root = search.tree.root
    root.reward, root.report, root.eligible = result.reward, result.report, result.eligible
    search.rollout_log.append((root.id, result.reward))
    if search.on_rollout is not None:
        search.on_rollout(root)
    search.backpropagate(root, result.reward)


def run_mcts(seed_program: str, provider: MutationProvider, prompt_fn: Callable[[SearchTreeNode], str],
             stages: Sequence[StageSpec], cascade_config: CascadeConfig, config: MctsConfig,
             rng: random.Random, database: Optional[ProgramDatabase] = None,
             baseline: Optional[RolloutResult] = None,
             after_step: Optional[Callable[[MctsSearch], None]] = None,
             state: Optional[dict] = None, root_candidate_id: Optional[int] = None) -> MctsSearch:
    """
    MCTS optimization of one EVOLVE-BLOCK program.

    Every eligible rollout is inserted into `database`, with the nearest
    inserted ancestor as its parent.

    Args:
        baseline: Root evaluation computed by the caller; counted as a rollout
        root_candidate_id: Database id of the root when the caller already stored it
        state: Search state from a checkpoint, to resume instead of starting over
    """
    search = MctsSearch(seed_program, provider, prompt_fn, cascade_reward(stages, cascade_config), config, rng)

    if database is not None:
        def forward(node: SearchTreeNode):
            if not node.eligible or node.candidate_id is not None:
                return
            parent_candidate = None
            for ancestor in search.tree.path_to_root(node.id)[1:]:
                if ancestor.candidate_id is not None:
                    parent_candidate = ancestor.candidate_id
                    break
            stored = database.insert(Candidate(
                source=node.program,
                parent_id=parent_candidate,
                generation=search.tree.depth(node.id),
                report=node.report,
                valid=True,
                change_summary=node.change_summary,
            ))
            node.candidate_id = stored.id

        search.on_rollout = forward

    search.tree.root.candidate_id = root_candidate_id
    if state is not None:
        search.load_state(state)
    elif baseline is not None:
        seed_root(search, baseline)
    return search.run(after_step=after_step)


def tree_dump(tree: SearchTree) -> dict:
    """Tree summary for the report command (no program bodies)."""
    return {
        "nodes": [
            {
                "id": node.id,
                "parent": node.parent,
                "children": list(node.children),
                "V": node.cumulative_reward,
                "N": node.visit_count,
                "reward": node.reward,
                "eligible": node.eligible,
                "expansion_failed": node.expansion_failed,
                "change_summary": node.change_summary,
            }
            for node in (tree.nodes[i] for i in sorted(tree.nodes))
        ]
    }
