#!/usr/bin/env python3
"""Tests for the island-model program database."""

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

from eval_cascade import EvaluationReport, StageResult
from program_db import (
    CHECKPOINT_VERSION,
    Candidate,
    CheckpointError,
    DatabaseError,
    IslandConfig,
    ProgramDatabase,
    assign_island,
    load_checkpoint,
)


def passing_report(score):
    return EvaluationReport([StageResult("build", score, True)], score, True, None)


def valid_candidate(score, generation=0, island=None, summary=""):
    return Candidate(source=f"body {score} {generation}", generation=generation, island=island,
                     report=passing_report(score), valid=True, change_summary=summary)


class TestCandidate(unittest.TestCase):
    """Test candidate invariants."""

    def test_valid_requires_passing_report(self):
        with self.assertRaises(DatabaseError):
            Candidate(source="x", valid=True)
        failed = EvaluationReport([StageResult("build", 0.0, False)], 0.0, False, "build")
        with self.assertRaises(DatabaseError):
            Candidate(source="x", report=failed, valid=True)

    def test_invalid_island_config(self):
        with self.assertRaises(DatabaseError):
            IslandConfig(p_elite=0.9, p_island=0.2)
        with self.assertRaises(DatabaseError):
            IslandConfig(island_count=0)
        with self.assertRaises(DatabaseError):
            IslandConfig(migration_fraction=0.0)


class TestInsert(unittest.TestCase):
    """Test insertion and the elite archive."""

    def test_first_insert_fills_archive(self):
        db = ProgramDatabase()
        stored = db.insert(valid_candidate(0.5))
        self.assertEqual(stored.id, 0)
        self.assertEqual([c.id for c in db.archive()], [0])

    def test_invalid_rejected(self):
        db = ProgramDatabase()
        with self.assertRaises(DatabaseError):
            db.insert(Candidate(source="broken"))
        self.assertEqual(len(db), 0)

    def test_invalid_allowed_when_requested(self):
        db = ProgramDatabase()
        stored = db.insert(Candidate(source="broken"), allow_invalid=True)
        self.assertFalse(db.get(stored.id).valid)

    def test_archive_is_top_k(self):
        db = ProgramDatabase(archive_capacity=3)
        scores = [0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.8, 0.4, 0.6, 0.95]
        for generation, score in enumerate(scores):
            db.insert(valid_candidate(score, generation))
        expected = sorted(scores, reverse=True)[:3]
        self.assertEqual([c.fitness for c in db.archive()], expected)

    def test_archive_ties_prefer_earlier_generation(self):
        db = ProgramDatabase(archive_capacity=2)
        db.insert(valid_candidate(0.5, generation=3))
        db.insert(valid_candidate(0.5, generation=1))
        db.insert(valid_candidate(0.5, generation=2))
        self.assertEqual([c.generation for c in db.archive()], [1, 2])

    def test_round_robin_islands(self):
        db = ProgramDatabase(IslandConfig(island_count=3))
        islands = [db.insert(valid_candidate(0.1 * i)).island for i in range(6)]
        self.assertEqual(islands, [0, 1, 2, 0, 1, 2])

    def test_explicit_island_out_of_range(self):
        db = ProgramDatabase(IslandConfig(island_count=2))
        with self.assertRaises(DatabaseError):
            db.insert(valid_candidate(0.5, island=2))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(min_value=0.0, max_value=1.0, allow_nan=False), max_size=40),
           st.integers(min_value=1, max_value=6))
    def test_archive_prefix_property(self, scores, capacity):
        db = ProgramDatabase(archive_capacity=capacity)
        for generation, score in enumerate(scores):
            db.insert(valid_candidate(score, generation))
        db.migrate()
        oracle = sorted(db.originals(), key=lambda c: (-c.fitness, c.generation, c.id))[:capacity]
        self.assertEqual([c.id for c in db.archive()], [c.id for c in oracle])
        self.assertTrue(all(c.valid for c in db.candidates()))


class TestIslands(unittest.TestCase):
    """Test island assignment."""

    def test_assign_island(self):
        config = IslandConfig(island_count=5)
        self.assertEqual(assign_island(0, config), 0)
        self.assertEqual(assign_island(7, config), 2)

    def test_assign_island_counts(self):
        config = IslandConfig(island_count=5)
        counts = [0] * 5
        for seq in range(100):
            counts[assign_island(seq, config)] += 1
        self.assertEqual(counts, [20] * 5)

    def test_negative_sequence(self):
        with self.assertRaises(DatabaseError):
            assign_island(-1, IslandConfig())


class TestSampling(unittest.TestCase):
    """Test parent sampling."""

    def test_empty_database(self):
        with self.assertRaises(DatabaseError):
            ProgramDatabase().sample_parent()

    def test_seed_only(self):
        db = ProgramDatabase()
        seed = db.insert(valid_candidate(0.5))
        rng = random.Random(1)
        for island in range(5):
            self.assertEqual(db.sample_parent(rng, current_island=island).id, seed.id)
            self.assertEqual(db.sample_uniform(rng).id, seed.id)

    def test_empty_archive_falls_back(self):
        db = ProgramDatabase(IslandConfig(island_count=2))
        stored = db.insert(Candidate(source="x"), allow_invalid=True)
        db._archive.clear()
        rng = random.Random(2)
        pools = {db.sample_parent_with_pool(0, rng)[1] for _ in range(200)}
        self.assertNotIn("archive", pools)
        self.assertEqual(db.sample_parent(rng, current_island=0).id, stored.id)

    def test_pool_frequencies(self):
        db = ProgramDatabase(IslandConfig(island_count=2), archive_capacity=2)
        for i in range(10):
            db.insert(valid_candidate(0.05 * i, generation=i))
        rng = random.Random(1234)
        counts = {"archive": 0, "island": 0, "all": 0}
        draws = 30000
        for _ in range(draws):
            counts[db.sample_parent_with_pool(1, rng)[1]] += 1
        self.assertAlmostEqual(counts["archive"] / draws, 0.7, delta=0.02)
        self.assertAlmostEqual(counts["island"] / draws, 0.2, delta=0.02)
        self.assertAlmostEqual(counts["all"] / draws, 0.1, delta=0.02)

    def test_island_pool_draws_only_from_island(self):
        db = ProgramDatabase(IslandConfig(island_count=3, p_elite=0.0, p_island=1.0))
        for i in range(9):
            db.insert(valid_candidate(0.1 * i))
        rng = random.Random(3)
        for _ in range(50):
            self.assertEqual(db.sample_parent(rng, current_island=2).island, 2)


class TestMigration(unittest.TestCase):
    """Test ring migration."""

    def _populated(self, k, per_island):
        db = ProgramDatabase(IslandConfig(island_count=k))
        for i in range(k * per_island):
            db.insert(valid_candidate(round(random.Random(i).random(), 6), generation=i))
        return db

    def test_ring_copies_top_ten_percent(self):
        db = self._populated(5, 10)
        before = len(db)
        tops = {}
        for island in range(5):
            tops[island] = min(db.island_members(island), key=lambda c: c.sort_key()).id
        record = db.migrate(generation=50)
        self.assertEqual(len(record.moves), 10)
        self.assertEqual(len(db), before + 10)
        for island in range(5):
            dests = sorted(d for (s, d, src, _) in record.moves if s == island)
            self.assertEqual(dests, sorted([(island - 1) % 5, (island + 1) % 5]))
            self.assertTrue(all(src == tops[island] for (s, _, src, _) in record.moves if s == island))

    def test_copies_keep_lineage_and_get_new_ids(self):
        db = self._populated(5, 10)
        record = db.migrate(generation=50)
        for (_, dest, source_id, copy_id) in record.moves:
            copy = db.get(copy_id)
            source = db.get(source_id)
            self.assertNotEqual(copy_id, source_id)
            self.assertEqual(copy.migrated_from, source_id)
            self.assertEqual(copy.parent_id, source.parent_id)
            self.assertEqual(copy.source, source.source)
            self.assertEqual(copy.island, dest)

    def test_single_island_is_noop(self):
        db = self._populated(1, 5)
        before = len(db)
        self.assertFalse(db.migrate())
        self.assertEqual(len(db), before)

    def test_empty_islands(self):
        record = ProgramDatabase().migrate()
        self.assertEqual(record.moves, [])

    def test_repeated_migration_does_not_duplicate(self):
        db = self._populated(2, 1)
        self.assertEqual(len(db.migrate(generation=50).moves), 2)
        size = len(db)
        self.assertFalse(db.migrate(generation=100))
        self.assertEqual(len(db), size)

    def test_ceil_fraction(self):
        db = ProgramDatabase(IslandConfig(island_count=3, migration_fraction=0.25))
        for i in range(15):
            db.insert(valid_candidate(0.01 * i))
        record = db.migrate()
        self.assertEqual(len(record.moves), 3 * 2 * math.ceil(0.25 * 5))


class TestCheckpoint(unittest.TestCase):
    """Test checkpoint and restore."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.path = os.path.join(self.temp_dir, "checkpoint.json")

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def _run(self, db, start, stop):
        for step in range(start, stop):
            parent = db.sample_parent(current_island=step % db.config.island_count)
            score = round(db.rng.random(), 6)
            db.insert(valid_candidate(score, generation=parent.generation + 1))
            if step % 3 == 2:
                db.migrate(generation=step)

    def test_resume_matches_uninterrupted(self):
        straight = ProgramDatabase(IslandConfig(island_count=3), seed=9)
        straight.insert(valid_candidate(0.5))
        self._run(straight, 0, 10)

        interrupted = ProgramDatabase(IslandConfig(island_count=3), seed=9)
        interrupted.insert(valid_candidate(0.5))
        self._run(interrupted, 0, 5)
        interrupted.checkpoint(self.path)
        resumed = ProgramDatabase.restore(self.path)
        self._run(resumed, 5, 10)

        self.assertEqual(resumed.to_dict(), straight.to_dict())

    def test_engine_block_round_trip(self):
        db = ProgramDatabase()
        db.checkpoint(self.path, engine_state={"iteration": 4})
        restored, engine = load_checkpoint(self.path)
        self.assertEqual(engine, {"iteration": 4})
        self.assertEqual(len(restored), 0)

    def test_checkpoint_is_byte_stable(self):
        db = ProgramDatabase(seed=4)
        db.insert(valid_candidate(0.25))
        other = os.path.join(self.temp_dir, "other.json")
        db.checkpoint(self.path)
        ProgramDatabase.restore(self.path).checkpoint(other)
        with open(self.path, "rb") as a, open(other, "rb") as b:
            self.assertEqual(a.read(), b.read())

    def test_truncated_checkpoint(self):
        db = ProgramDatabase()
        db.insert(valid_candidate(0.5))
        db.checkpoint(self.path)
        with open(self.path, "r") as f:
            text = f.read()
        with open(self.path, "w") as f:
            f.write(text[: len(text) // 2])
        with self.assertRaises(CheckpointError) as ctx:
            ProgramDatabase.restore(self.path)
        self.assertIn("checkpoint corrupt", str(ctx.exception))

    def test_version_mismatch(self):
        with open(self.path, "w") as f:
            f.write('{"format": "hotpath-evolve-checkpoint", "version": 99, "database": {}}')
        with self.assertRaises(CheckpointError) as ctx:
            ProgramDatabase.restore(self.path)
        self.assertIn(f"expected format version {CHECKPOINT_VERSION}", str(ctx.exception))


if __name__ == '__main__':
    unittest.main()
