#!/usr/bin/env python3
"""Tests for engine configuration loading and logging setup."""

import json
import logging
import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import yaml

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import (
    MASK,
    ConfigurationError,
    JsonLinesFormatter,
    apply_overrides,
    load_engine_config,
)

FIXTURE = Path(__file__).resolve().parent.parent / "fixtures" / "synthetic_task"


def base_document():
    return {
        "inputs": {
            "call_graph": str(FIXTURE / "callgraph.json"),
            "profile": str(FIXTURE / "profile.json"),
            "target_source": str(FIXTURE / "OrderIndex.java"),
        },
        "cascade": {
            "stages": [
                {"name": "build", "kind": "BUILD", "callable": "synthetic_stage.py:build"},
                {"name": "unit_test", "kind": "UNIT_TEST", "command": "python synthetic_stage.py unit_test {candidate}"},
            ],
        },
        "provider": {"kind": "scripted", "fixture": str(FIXTURE / "scripted_edits.yaml")},
    }


class TestLoadEngineConfig(unittest.TestCase):
    """Test loading, validation and overrides."""

    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def write(self, document, name="engine.yaml"):
        path = self.test_dir / name
        path.write_text(yaml.safe_dump(document))
        return path

    def test_bundled_config(self):
        config = load_engine_config(FIXTURE / "engine.yaml")
        self.assertEqual(config.inputs["call_graph"], str((FIXTURE / "callgraph.json").resolve()))
        self.assertEqual(config.inputs["target_component"], "OrderIndex.lookup")
        self.assertEqual(config.provider["fixture"], str((FIXTURE / "scripted_edits.yaml").resolve()))
        self.assertEqual(config.mode, "FINAL")
        self.assertEqual(config.seed, 0)
        for stage in config.cascade["stages"]:
            self.assertEqual(stage["workdir"], str(FIXTURE.resolve()))

    def test_overrides(self):
        out = self.test_dir / "out"
        config = load_engine_config(FIXTURE / "engine.yaml",
                                    {"seed": 7, "iterations": 5, "mode": "IMPROVED", "out": str(out)})
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.evolution["max_iterations"], 5)
        self.assertEqual(config.mcts["max_iterations"], 5)
        self.assertEqual(config.mode, "IMPROVED")
        self.assertEqual(config.output_dir, out.resolve())

    def test_mode_override_drops_flags(self):
        document = dict(base_document(), flags={"validity_filter": True})
        updated = apply_overrides(document, {"mode": "FINAL"})
        self.assertNotIn("flags", updated)
        self.assertIn("flags", document, "the input document is left alone")

    def test_callable_reference_resolved(self):
        config = load_engine_config(self.write(base_document()))
        build = config.cascade["stages"][0]
        self.assertEqual(build["callable"], f"{(self.test_dir / 'synthetic_stage.py').resolve()}:build")
        self.assertEqual(build["workdir"], str(self.test_dir.resolve()))

    def test_schema_error_names_key(self):
        document = base_document()
        document["evolution"] = {"max_iterations": 0}
        with self.assertRaisesRegex(ConfigurationError, "evolution/max_iterations"):
            load_engine_config(self.write(document))

        document = base_document()
        document["evolution"] = {"generations": 3}
        with self.assertRaisesRegex(ConfigurationError, "evolution"):
            load_engine_config(self.write(document))

    def test_missing_referenced_file(self):
        document = base_document()
        document["inputs"]["profile"] = "missing-profile.json"
        with self.assertRaisesRegex(ConfigurationError, "inputs.profile"):
            load_engine_config(self.write(document))

    def test_missing_config_file(self):
        with self.assertRaisesRegex(ConfigurationError, "not found"):
            load_engine_config(self.test_dir / "absent.yaml")

    def test_stage_needs_exactly_one_runner(self):
        document = base_document()
        document["cascade"]["stages"][0]["command"] = "true"
        with self.assertRaisesRegex(ConfigurationError, "exactly one of command or callable"):
            load_engine_config(self.write(document))

    def test_chat_provider_needs_endpoints(self):
        document = base_document()
        document["provider"] = {"kind": "chat"}
        with self.assertRaisesRegex(ConfigurationError, "endpoints"):
            load_engine_config(self.write(document))

    def test_secret_is_masked(self):
        document = base_document()
        document["provider"] = {
            "kind": "chat",
            "endpoints": [{"base_url": "http://localhost:8000/v1", "model": "local"}],
        }
        with patch.dict(os.environ, {"EVOLVE_LLM_API_KEY": "s3cret-token"}):
            config = load_engine_config(self.write(document))
            data = config.to_dict()
        self.assertEqual(data["provider"]["api_key"], MASK)
        self.assertNotIn("s3cret-token", json.dumps(data))

    def test_dotenv_loaded_without_overriding_environment(self):
        document = base_document()
        document["provider"]["api_key_env"] = "HOTPATH_TEST_KEY"
        path = self.write(document)
        (self.test_dir / ".env").write_text("HOTPATH_TEST_KEY=from-dotenv\nHOTPATH_TEST_OTHER=dotenv\n")

        with patch.dict(os.environ, {"HOTPATH_TEST_OTHER": "from-env"}):
            config = load_engine_config(path)
            self.assertEqual(config.get_api_key(), "from-dotenv")
            self.assertEqual(os.environ["HOTPATH_TEST_OTHER"], "from-env")
        os.environ.pop("HOTPATH_TEST_KEY", None)


class TestJsonLinesFormatter(unittest.TestCase):
    """Test the machine-readable log format."""

    def test_event_payload_carried(self):
        record = logging.LogRecord("evo_engine", logging.INFO, __file__, 1, "Iteration %d: VALID", (3,), None)
        record.event = {"iteration": 3, "outcome": "VALID"}
        entry = json.loads(JsonLinesFormatter().format(record))
        self.assertEqual(entry["message"], "Iteration 3: VALID")
        self.assertEqual(entry["level"], "INFO")
        self.assertEqual(entry["logger"], "evo_engine")
        self.assertEqual(entry["event"], {"iteration": 3, "outcome": "VALID"})

    def test_plain_record(self):
        record = logging.LogRecord("config", logging.WARNING, __file__, 1, "plain", (), None)
        self.assertNotIn("event", json.loads(JsonLinesFormatter().format(record)))


if __name__ == '__main__':
    unittest.main()
