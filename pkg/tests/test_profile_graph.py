#!/usr/bin/env python3
"""Tests for component graph construction, profile enrichment and target selection."""

import json
import math
import os
import random
import shutil
import sys
import tempfile
import unittest

from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from profile_graph import (
    GraphError,
    ProfileEntry,
    ProfileFormatError,
    SelectionThresholds,
    WeightVector,
    build_ccg,
    build_target_report,
    enrich_with_profile,
    load_call_graph,
    load_profile,
    prune_context,
    render_target_table,
    select_targets,
)


def random_graph(rng, max_nodes=200):
    """Random weighted graph plus its raw parts for oracle checks."""
    count = rng.randint(0, max_nodes)
    names = [f"pkg.C{i}.m" for i in range(count)]
    edges = []
    if count:
        for _ in range(rng.randint(0, count * 2)):
            edges.append((rng.choice(names), rng.choice(names)))
    graph = build_ccg(names, edges)
    profile = [ProfileEntry(name, rng.uniform(0, 100), rng.randint(0, 50)) for name in names if rng.random() < 0.8]
    return enrich_with_profile(graph, profile), names, edges


class TestBuildGraph(unittest.TestCase):
    """Test building the unweighted component graph."""

    def test_single_component(self):
        graph = build_ccg(["a"], [])
        self.assertEqual(graph.nodes, frozenset({"a"}))
        self.assertEqual(graph.edges, frozenset())
        self.assertEqual(graph.weight("a"), WeightVector(0.0, 0))

    def test_minimal_call_pair(self):
        graph = build_ccg(["a", "b"], [("a", "b")])
        self.assertEqual(len(graph.nodes), 2)
        self.assertEqual(graph.edges, frozenset({("a", "b")}))
        self.assertEqual(graph.successors("a"), frozenset({"b"}))
        self.assertEqual(graph.predecessors("b"), frozenset({"a"}))

    def test_dangling_edge_names_component(self):
        with self.assertRaises(GraphError) as ctx:
            build_ccg(["a"], [("a", "c")])
        self.assertIn("unknown component c", str(ctx.exception))

    def test_duplicate_component_rejected(self):
        with self.assertRaises(GraphError):
            build_ccg(["a", "a"], [])

    def test_repeated_edge_is_set_semantics(self):
        graph = build_ccg(["a", "b"], [("a", "b"), ("a", "b")])
        self.assertEqual(len(graph.edges), 1)

    def test_negative_weight_rejected(self):
        with self.assertRaises(ValueError):
            WeightVector(-1.0, 0)


class TestEnrichment(unittest.TestCase):
    """Test profile enrichment."""

    def setUp(self):
        self.graph = build_ccg(["a", "b"], [("a", "b")])

    def test_empty_profile_is_identity(self):
        enriched = enrich_with_profile(self.graph, [])
        self.assertEqual(enriched.weights, self.graph.weights)
        self.assertEqual(enriched.profile_warnings, ())

    def test_entries_sum(self):
        enriched = enrich_with_profile(self.graph, [ProfileEntry("a", 10.0, 3), ProfileEntry("a", 5.0, 2)])
        self.assertEqual(enriched.weight("a"), WeightVector(15.0, 5))
        self.assertEqual(enriched.weight("b"), WeightVector(0.0, 0))

    def test_unknown_component_skipped_with_warning(self):
        with self.assertLogs("profile_graph", level="WARNING"):
            enriched = enrich_with_profile(self.graph, [ProfileEntry("z", 4.0, 1)])
        self.assertEqual(enriched.weights, self.graph.weights)
        self.assertEqual(len(enriched.profile_warnings), 1)
        self.assertIn("z", enriched.profile_warnings[0])

    def test_annotations_are_carried(self):
        enriched = enrich_with_profile(self.graph, [ProfileEntry("a", 1.0, 1, (("alloc", "12 MB"),))])
        self.assertEqual(enriched.annotations["a"], {"alloc": "12 MB"})

    def test_original_graph_not_mutated(self):
        enrich_with_profile(self.graph, [ProfileEntry("a", 10.0, 3)])
        self.assertEqual(self.graph.weight("a"), WeightVector(0.0, 0))

    def test_sum_matches_brute_force_accumulator(self):
        rng = random.Random(3)
        names = ["a", "b", "c"]
        graph = build_ccg(names, [])
        entries = [ProfileEntry(rng.choice(names), rng.uniform(0, 9), rng.randint(0, 9)) for _ in range(40)]
        enriched = enrich_with_profile(graph, entries)
        for name in names:
            expected_time = math.fsum(e.exec_time for e in entries if e.component == name)
            expected_calls = sum(e.call_count for e in entries if e.component == name)
            self.assertEqual(enriched.weight(name), WeightVector(expected_time, expected_calls))

    def test_fractional_times_sum_independent_of_order(self):
        graph = build_ccg(["a"], [])
        entries = [ProfileEntry("a", t, 1) for t in (0.1, 0.2, 0.3)]
        forward = enrich_with_profile(graph, entries).weight("a")
        reversed_ = enrich_with_profile(graph, list(reversed(entries))).weight("a")
        self.assertEqual(forward, reversed_)
        self.assertEqual(forward, WeightVector(0.6, 3))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["a", "b", "c"]),
                              st.floats(min_value=0, max_value=1000, allow_nan=False, allow_infinity=False),
                              st.integers(min_value=0, max_value=1000)), max_size=20),
           st.randoms(use_true_random=False))
    def test_order_independent(self, raw_entries, shuffler):
        graph = build_ccg(["a", "b", "c"], [])
        entries = [ProfileEntry(name, t, c) for name, t, c in raw_entries]
        shuffled = list(entries)
        shuffler.shuffle(shuffled)
        self.assertEqual(enrich_with_profile(graph, entries).weights,
                         enrich_with_profile(graph, shuffled).weights)


class TestSelection(unittest.TestCase):
    """Test hotspot selection."""

    def test_threshold_is_inclusive(self):
        graph = enrich_with_profile(build_ccg(["a", "b"], []), [ProfileEntry("a", 10.0, 0), ProfileEntry("b", 9.0, 0)])
        self.assertEqual(select_targets(graph, SelectionThresholds(10.0, 100)), ["a"])

    def test_empty_graph(self):
        self.assertEqual(select_targets(build_ccg([], []), SelectionThresholds(1.0, 1)), [])

    def test_ordering_ties(self):
        graph = enrich_with_profile(build_ccg(["b", "a", "c"], []), [
            ProfileEntry("a", 5.0, 1), ProfileEntry("b", 5.0, 1), ProfileEntry("c", 5.0, 9),
        ])
        self.assertEqual(select_targets(graph, SelectionThresholds(0.0, 0)), ["c", "a", "b"])

    def test_randomized_graphs_match_oracle(self):
        rng = random.Random(11)
        for _ in range(100):
            graph, names, _ = random_graph(rng)
            thresholds = SelectionThresholds(rng.uniform(0, 100), rng.randint(0, 50))
            expected = [
                n for n in names
                if graph.weight(n).exec_time >= thresholds.tau_time or graph.weight(n).call_count >= thresholds.tau_freq
            ]
            expected.sort(key=lambda n: (-graph.weight(n).exec_time, -graph.weight(n).call_count, n))
            self.assertEqual(select_targets(graph, thresholds), expected)

    def test_raising_threshold_never_grows_selection(self):
        rng = random.Random(5)
        for _ in range(30):
            graph, _, _ = random_graph(rng, max_nodes=40)
            low = SelectionThresholds(rng.uniform(0, 50), rng.randint(0, 25))
            high_time = SelectionThresholds(low.tau_time + rng.uniform(0, 50), low.tau_freq)
            high_freq = SelectionThresholds(low.tau_time, low.tau_freq + rng.randint(0, 25))
            base = set(select_targets(graph, low))
            self.assertTrue(set(select_targets(graph, high_time)) <= base)
            self.assertTrue(set(select_targets(graph, high_freq)) <= base)


class TestPruning(unittest.TestCase):
    """Test active/frozen context pruning."""

    def test_star_graph(self):
        leaves = ["l1", "l2", "l3", "l4"]
        graph = build_ccg(["hub"] + leaves, [("hub", leaf) for leaf in leaves])
        subgraph = prune_context(graph, "hub")
        self.assertEqual(subgraph.frozen, frozenset(leaves))
        self.assertEqual(subgraph.target, "hub")

    def test_chain_keeps_only_induced_edges(self):
        graph = build_ccg(["a", "b", "c"], [("a", "b"), ("b", "c")])
        subgraph = prune_context(graph, "b")
        self.assertEqual(subgraph.frozen, frozenset({"a", "c"}))
        self.assertEqual(subgraph.edges, frozenset({("a", "b"), ("b", "c")}))
        self.assertNotIn(("a", "c"), subgraph.edges)

    def test_isolated_target(self):
        subgraph = prune_context(build_ccg(["a", "b"], []), "a")
        self.assertEqual(subgraph.frozen, frozenset())
        self.assertEqual(subgraph.edges, frozenset())

    def test_unknown_target(self):
        with self.assertRaises(GraphError):
            prune_context(build_ccg(["a"], []), "missing")

    def test_randomized_graphs_match_oracle(self):
        rng = random.Random(17)
        for _ in range(100):
            graph, names, edges = random_graph(rng)
            if not names:
                continue
            target = rng.choice(names)
            subgraph = prune_context(graph, target)
            expected = {v for (u, v) in edges if u == target} | {u for (u, v) in edges if v == target}
            expected.discard(target)
            self.assertEqual(set(subgraph.frozen), expected)
            self.assertNotIn(target, subgraph.frozen)
            keep = expected | {target}
            self.assertEqual(set(subgraph.edges), {(u, v) for (u, v) in edges if u in keep and v in keep})
            self.assertEqual(set(subgraph.weights), keep)


class TestLoaders(unittest.TestCase):
    """Test call-graph and profile file loading."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def _write(self, name, text):
        path = os.path.join(self.temp_dir, name)
        with open(path, "w") as f:
            f.write(text)
        return path

    def test_load_call_graph(self):
        path = self._write("cg.json", json.dumps({"components": ["a", "b"], "edges": [["a", "b"]]}))
        graph = load_call_graph(path)
        self.assertEqual(graph.edges, frozenset({("a", "b")}))

    def test_call_graph_missing_file(self):
        with self.assertRaises(ProfileFormatError) as ctx:
            load_call_graph(os.path.join(self.temp_dir, "nope.json"))
        self.assertIn("nope.json", str(ctx.exception))

    def test_call_graph_bad_edge_names_record(self):
        path = self._write("cg.json", json.dumps({"components": ["a"], "edges": [["a"]]}))
        with self.assertRaises(ProfileFormatError) as ctx:
            load_call_graph(path)
        self.assertIn("edges/0", str(ctx.exception))

    def test_profile_json_array(self):
        path = self._write("p.json", json.dumps([
            {"component": "a", "exec_time_ms": 2.5, "call_count": 3, "annotations": {"cpu": "high"}},
        ]))
        entries = load_profile(path)
        self.assertEqual(entries[0].exec_time, 2.5)
        self.assertEqual(entries[0].annotations, (("cpu", "high"),))

    def test_profile_json_lines(self):
        path = self._write("p.jsonl", '{"component": "a", "exec_time_ms": 1, "call_count": 1}\n\n'
                                      '{"component": "b", "exec_time_ms": 2, "call_count": 2}\n')
        self.assertEqual([e.component for e in load_profile(path)], ["a", "b"])

    def test_profile_bad_record_index(self):
        path = self._write("p.json", json.dumps([
            {"component": "a", "exec_time_ms": 1, "call_count": 1},
            {"component": "b", "exec_time_ms": -1, "call_count": 1},
        ]))
        with self.assertRaises(ProfileFormatError) as ctx:
            load_profile(path)
        self.assertIn("record 1", str(ctx.exception))

    def test_empty_profile_file(self):
        self.assertEqual(load_profile(self._write("p.json", "")), [])


class TestReport(unittest.TestCase):
    """Test the target report rows and table."""

    def test_report_rows(self):
        graph = enrich_with_profile(build_ccg(["a", "b", "c"], [("a", "b"), ("b", "c")]), [
            ProfileEntry("b", 40.0, 8), ProfileEntry("a", 2.0, 1),
        ])
        rows = build_target_report(graph, SelectionThresholds(10.0, 5))
        self.assertEqual(rows, [{"target": "b", "exec_time_ms": 40.0, "call_count": 8, "frozen": ["a", "c"]}])
        table = render_target_table(rows)
        self.assertIn("b", table)
        self.assertIn("a, c", table)

    def test_empty_report_table(self):
        self.assertIn("No targets", render_target_table([]))


if __name__ == '__main__':
    unittest.main()
