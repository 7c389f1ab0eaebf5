#!/usr/bin/env python3
"""
Profile-guided target selection.

Builds the static component graph from a pre-extracted call graph, enriches
it with runtime profile weights (cumulative time and call count), selects
hotspot targets and prunes each target's context down to its 1-hop
neighbourhood.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import jsonschema

logger = logging.getLogger(__name__)


class GraphError(Exception):
    """Raised when a component graph or query references unknown components."""
    pass


class ProfileFormatError(Exception):
    """Raised when a call-graph or profile file cannot be parsed."""
    pass


CALL_GRAPH_SCHEMA = {
    "type": "object",
    "required": ["components", "edges"],
    "properties": {
        "components": {"type": "array", "items": {"type": "string", "minLength": 1}},
        "edges": {
            "type": "array",
            "items": {
                "type": "array",
                "items": {"type": "string", "minLength": 1},
                "minItems": 2,
                "maxItems": 2,
            },
        },
    },
}

PROFILE_RECORD_SCHEMA = {
    "type": "object",
    "required": ["component", "exec_time_ms", "call_count"],
    "properties": {
        "component": {"type": "string", "minLength": 1},
        "exec_time_ms": {"type": "number", "minimum": 0},
        "call_count": {"type": "integer", "minimum": 0},
        "annotations": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}

TARGET_REPORT_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["target", "exec_time_ms", "call_count", "frozen"],
        "properties": {
            "target": {"type": "string"},
            "exec_time_ms": {"type": "number", "minimum": 0},
            "call_count": {"type": "integer", "minimum": 0},
            "frozen": {"type": "array", "items": {"type": "string"}},
        },
    },
}


@dataclass(frozen=True)
class WeightVector:
    """Cumulative execution time (ms) and call count of one component."""
    exec_time: float = 0.0
    call_count: int = 0

    def __post_init__(self):
        if self.exec_time < 0 or self.call_count < 0:
            raise ValueError(f"weights must be non-negative, got {self.exec_time}, {self.call_count}")


ZERO_WEIGHT = WeightVector()

DEFAULT_TAU_TIME_MS = 1.0
DEFAULT_TAU_FREQ = 1


@dataclass(frozen=True)
class SelectionThresholds:
    tau_time: float = DEFAULT_TAU_TIME_MS
    tau_freq: int = DEFAULT_TAU_FREQ

    def __post_init__(self):
        if self.tau_time < 0 or self.tau_freq < 0:
            raise ValueError("selection thresholds must be non-negative")


@dataclass(frozen=True)
class ProfileEntry:
    component: str
    exec_time: float
    call_count: int
    annotations: Tuple[Tuple[str, str], ...] = ()


@dataclass(frozen=True)
class WeightedComponentGraph:
    """
    Directed component graph with one weight vector per node.

    Instances are never mutated after construction; enrichment returns a new
    graph.
    """
    nodes: FrozenSet[str]
    edges: FrozenSet[Tuple[str, str]]
    weights: Dict[str, WeightVector]
    annotations: Dict[str, Dict[str, str]] = field(default_factory=dict)
    profile_warnings: Tuple[str, ...] = ()

    def weight(self, node: str) -> WeightVector:
        return self.weights.get(node, ZERO_WEIGHT)

    def successors(self, node: str) -> FrozenSet[str]:
        return frozenset(v for (u, v) in self.edges if u == node)

    def predecessors(self, node: str) -> FrozenSet[str]:
        return frozenset(u for (u, v) in self.edges if v == node)

    def neighbors(self, node: str) -> FrozenSet[str]:
        return (self.successors(node) | self.predecessors(node)) - {node}


@dataclass(frozen=True)
class ContextSubgraph:
    target: str
    frozen: FrozenSet[str]
    edges: FrozenSet[Tuple[str, str]]
    weights: Dict[str, WeightVector]

    @property
    def nodes(self) -> FrozenSet[str]:
        return self.frozen | {self.target}


def build_ccg(components: Sequence[str], call_edges: Iterable[Tuple[str, str]]) -> WeightedComponentGraph:
    """
    Build the unweighted component graph.

    Args:
        components: Qualified component names (e.g. "pkg.Class.method")
        call_edges: (caller, callee) pairs

    Returns:
        Graph with every weight initialized to the zero vector

    Raises:
        GraphError: On empty or duplicate names, or an edge naming an
            unlisted component
    """
    nodes = set()
    for name in components:
        if not name:
            raise GraphError("component name must be non-empty")
        if name in nodes:
            raise GraphError(f"duplicate component {name}")
        nodes.add(name)

    edges = set()
    for caller, callee in call_edges:
        for endpoint in (caller, callee):
            if endpoint not in nodes:
                raise GraphError(f"unknown component {endpoint}")
        edges.add((caller, callee))

    return WeightedComponentGraph(
        nodes=frozenset(nodes),
        edges=frozenset(edges),
        weights={name: ZERO_WEIGHT for name in nodes},
    )


def enrich_with_profile(graph: WeightedComponentGraph,
                        profile: Iterable[ProfileEntry]) -> WeightedComponentGraph:
    """
    Sum profile entries into node weights.

    Times are summed with math.fsum so entry order never changes the result.
    Entries for components outside the graph (library frames, typically) are
    skipped with a warning kept on the returned graph.
    """
    times = {node: [w.exec_time] for node, w in graph.weights.items()}
    counts = {node: w.call_count for node, w in graph.weights.items()}
    annotations = {node: dict(values) for node, values in graph.annotations.items()}
    warnings = list(graph.profile_warnings)

    for entry in profile:
        if entry.component not in graph.nodes:
            message = f"profile entry for unknown component {entry.component} skipped"
            logger.warning(message)
            warnings.append(message)
            continue
        times.setdefault(entry.component, []).append(entry.exec_time)
        counts[entry.component] = counts.get(entry.component, 0) + entry.call_count
        if entry.annotations:
            annotations.setdefault(entry.component, {}).update(dict(entry.annotations))

    weights = {node: WeightVector(math.fsum(times[node]), counts[node]) for node in times}
    return WeightedComponentGraph(
        nodes=graph.nodes,
        edges=graph.edges,
        weights=weights,
        annotations=annotations,
        profile_warnings=tuple(warnings),
    )


def select_targets(graph: WeightedComponentGraph, thresholds: SelectionThresholds) -> List[str]:
    """
    Hotspots: nodes with T(v) >= tau_time or C(v) >= tau_freq.

    Ordered by exec_time desc, then call_count desc, then name asc.
    """
    selected = [
        node for node in graph.nodes
        if graph.weight(node).exec_time >= thresholds.tau_time
        or graph.weight(node).call_count >= thresholds.tau_freq
    ]
    return sorted(selected, key=lambda n: (-graph.weight(n).exec_time, -graph.weight(n).call_count, n))


def prune_context(graph: WeightedComponentGraph, target: str) -> ContextSubgraph:
    """Restrict the graph to the target (active) and its in/out neighbours (frozen)."""
    if target not in graph.nodes:
        raise GraphError(f"unknown target {target}")

    frozen = graph.neighbors(target)
    keep = frozen | {target}
    edges = frozenset((u, v) for (u, v) in graph.edges if u in keep and v in keep)
    return ContextSubgraph(
        target=target,
        frozen=frozen,
        edges=edges,
        weights={node: graph.weight(node) for node in keep},
    )


def build_target_report(graph: WeightedComponentGraph, thresholds: SelectionThresholds) -> List[dict]:
    """One report row per selected target, in selection order."""
    rows = []
    for target in select_targets(graph, thresholds):
        subgraph = prune_context(graph, target)
        weight = graph.weight(target)
        rows.append({
            "target": target,
            "exec_time_ms": weight.exec_time,
            "call_count": weight.call_count,
            "frozen": sorted(subgraph.frozen),
        })
    jsonschema.validate(rows, TARGET_REPORT_SCHEMA)
    return rows


def render_target_table(rows: List[dict]) -> str:
    """Human-readable ranked table for the analyze command."""
    if not rows:
        return "No targets above the selection thresholds."
    width = max(len("Target"), *(len(row["target"]) for row in rows))
    lines = [
        f"{'#':>3}  {'Target':<{width}}  {'Time (ms)':>12}  {'Calls':>10}  Frozen context",
        "-" * (width + 45),
    ]
    for rank, row in enumerate(rows, start=1):
        frozen = ", ".join(row["frozen"]) or "-"
        lines.append(
            f"{rank:>3}  {row['target']:<{width}}  {row['exec_time_ms']:>12.2f}  {row['call_count']:>10}  {frozen}"
        )
    return "\n".join(lines)


def _read_json(path: Path):
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ProfileFormatError(f"{path}: file not found")
    except json.JSONDecodeError as e:
        raise ProfileFormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")


def load_call_graph(path) -> WeightedComponentGraph:
    """Load `{"components": [...], "edges": [[caller, callee], ...]}`."""
    path = Path(path)
    data = _read_json(path)
    try:
        jsonschema.validate(data, CALL_GRAPH_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ProfileFormatError(f"{path}: record {where}: {e.message}")
    try:
        return build_ccg(data["components"], [tuple(edge) for edge in data["edges"]])
    except GraphError as e:
        raise ProfileFormatError(f"{path}: {e}")


def load_profile(path) -> List[ProfileEntry]:
    """
    Load profile records from a JSON array or from JSON-lines.

    Raises:
        ProfileFormatError: Naming the file and the first offending record
    """
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ProfileFormatError(f"{path}: file not found")

    stripped = text.strip()
    if not stripped:
        return []
    if stripped.startswith("["):
        try:
            records = json.loads(stripped)
        except json.JSONDecodeError as e:
            raise ProfileFormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    else:
        records = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ProfileFormatError(f"{path}: record at line {lineno}: {e.msg}")

    entries = []
    for index, record in enumerate(records):
        try:
            jsonschema.validate(record, PROFILE_RECORD_SCHEMA)
        except jsonschema.ValidationError as e:
            raise ProfileFormatError(f"{path}: record {index}: {e.message}")
        entries.append(ProfileEntry(
            component=record["component"],
            exec_time=float(record["exec_time_ms"]),
            call_count=int(record["call_count"]),
            annotations=tuple(sorted(record.get("annotations", {}).items())),
        ))
    return entries


def load_weighted_graph(call_graph_path, profile_path: Optional[str] = None) -> WeightedComponentGraph:
    graph = load_call_graph(call_graph_path)
    if profile_path:
        graph = enrich_with_profile(graph, load_profile(profile_path))
    return graph
