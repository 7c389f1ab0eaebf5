#!/usr/bin/env python3
"""
Ablation over the four engine modes on the synthetic task.

Each mode runs 20 iterations for seeds 0..7; means over the seeds must rank
ORIGINAL < ORIGINAL_VALID < IMPROVED < FINAL for both valid programs and
average score.
"""

import os
import statistics
import sys
import unittest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from evo_engine import EngineMode
from test_evo_engine import make_engine

SEEDS = range(8)
ORDER = [EngineMode.ORIGINAL, EngineMode.ORIGINAL_VALID, EngineMode.IMPROVED, EngineMode.FINAL]


class TestAblation(unittest.TestCase):
    """Compare the modes on identical seeds."""

    @classmethod
    def setUpClass(cls):
        cls.summaries = {mode: [make_engine(seed=seed, mode=mode).run() for seed in SEEDS] for mode in ORDER}

    def mean(self, mode, attribute):
        return statistics.mean(getattr(s, attribute) for s in self.summaries[mode])

    def test_valid_programs_rank(self):
        means = [self.mean(mode, "valid_count") for mode in ORDER]
        self.assertEqual(means, sorted(set(means)), f"valid_count means out of order: {means}")

    def test_average_score_rank(self):
        means = [self.mean(mode, "average_score") for mode in ORDER]
        self.assertEqual(means, sorted(set(means)), f"average_score means out of order: {means}")

    def test_final_mode_keeps_every_child(self):
        for summary in self.summaries[EngineMode.FINAL]:
            self.assertEqual(summary.valid_count, summary.iterations_run)

    def test_every_run_completes(self):
        for mode in ORDER:
            for summary in self.summaries[mode]:
                self.assertEqual(summary.iterations_run, 20)
                self.assertEqual(summary.mode, mode.value)


if __name__ == '__main__':
    unittest.main()
