#!/usr/bin/env python3
"""
Engine configuration and logging setup for hotpath-evolve.

A run is described by one YAML (or JSON) document. Secrets never live in that
document: the LLM token is read from the environment variable named by
`provider.api_key_env`, optionally loaded from a .env file first.
"""

import copy
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import jsonschema
import yaml
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "EVOLVE_LLM_API_KEY"
MASK = "***MASKED***"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

_PROBABILITY = {"type": "number", "minimum": 0, "maximum": 1}
_NON_NEGATIVE_INT = {"type": "integer", "minimum": 0}
_POSITIVE_INT = {"type": "integer", "minimum": 1}

ENGINE_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["inputs", "cascade", "provider"],
    "properties": {
        "inputs": {
            "type": "object",
            "additionalProperties": False,
            "required": ["call_graph"],
            "properties": {
                "call_graph": {"type": "string"},
                "profile": {"type": "string"},
                "target_source": {"type": "string"},
                "target_component": {"type": "string"},
            },
        },
        "selection": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau_time_ms": {"type": "number", "minimum": 0},
                "tau_freq": _NON_NEGATIVE_INT,
            },
        },
        "evolution": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_iterations": _POSITIVE_INT,
                "diff_mode": {"type": "boolean"},
                "checkpoint_interval": _POSITIVE_INT,
                "seed": {"type": "integer"},
                "parallel_evaluations": _POSITIVE_INT,
                "throughput_mode": {"type": "boolean"},
                "feedback_limit": _NON_NEGATIVE_INT,
                "inspiration_count": _NON_NEGATIVE_INT,
                "archive_capacity": _POSITIVE_INT,
            },
        },
        "islands": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "island_count": _POSITIVE_INT,
                "migration_interval": _POSITIVE_INT,
                "migration_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "p_elite": _PROBABILITY,
                "p_island": _PROBABILITY,
            },
        },
        "mcts": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "exploration_c": {"type": "number", "minimum": 0},
                "exploitation_probability": _PROBABILITY,
                "expansion_k": _POSITIVE_INT,
                "max_iterations": _NON_NEGATIVE_INT,
            },
        },
        "cascade": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau1": _PROBABILITY,
                "tau2": _PROBABILITY,
                "tau3": _PROBABILITY,
                "alpha_judge": _PROBABILITY,
                "component_weights": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
                "candidate_filename": {"type": "string", "minLength": 1},
                "preset": {"enum": ["java", "apex"]},
                "commands": {"type": "object"},
                "stages": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["name", "kind"],
                        "properties": {
                            "name": {"type": "string", "minLength": 1},
                            "kind": {"enum": ["BUILD", "UNIT_TEST", "PERFORMANCE", "STATIC_ANALYSIS", "LLM_JUDGE"]},
                            "command": {"anyOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}}]},
                            "callable": {"type": "string"},
                            "timeout": {"type": "number", "exclusiveMinimum": 0},
                            "gate_threshold": _PROBABILITY,
                            "workdir": {"type": "string"},
                        },
                    },
                },
            },
        },
        "provider": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["scripted", "chat"]},
                "fixture": {"type": "string"},
                "seed": {"type": "integer"},
                "retries": _POSITIVE_INT,
                "timeout": {"type": "number", "exclusiveMinimum": 0},
                "backoff": {"type": "number", "minimum": 0},
                "api_key_env": {"type": "string", "minLength": 1},
                "endpoints": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["base_url", "model"],
                        "properties": {
                            "base_url": {"type": "string"},
                            "model": {"type": "string"},
                            "weight": _POSITIVE_INT,
                            "api_key_env": {"type": "string"},
                            "temperature": {"type": "number", "minimum": 0},
                            "max_tokens": _POSITIVE_INT,
                        },
                    },
                },
            },
        },
        "refiner": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "reflection_attempts": _NON_NEGATIVE_INT,
                "mcts_max_iterations": _NON_NEGATIVE_INT,
                "mcts_expansion_k": _POSITIVE_INT,
            },
        },
        "mode": {"enum": ["ORIGINAL", "ORIGINAL_VALID", "IMPROVED", "FINAL"]},
        "flags": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "validity_filter": {"type": "boolean"},
                "enriched_context": {"type": "boolean"},
                "island_sampling": {"type": "boolean"},
                "refinement": {"type": "boolean"},
            },
        },
        "search": {"enum": ["evolution", "mcts"]},
        "prompts": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "optimize": {"type": "string"},
                "repair": {"type": "string"},
                "goal": {"type": "string"},
                "constraints": {"type": "string"},
            },
        },
        "logging": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "debug": {"type": "boolean"},
                "json_lines": {"type": "boolean"},
                "file": {"type": "string"},
            },
        },
        "output_dir": {"type": "string"},
    },
}


class ConfigurationError(Exception):
    """Raised when configuration is invalid or missing."""
    pass


class JsonLinesFormatter(logging.Formatter):
    """One JSON object per record; `extra={"event": {...}}` is carried along."""

    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "ts": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        event = getattr(record, "event", None)
        if event:
            entry["event"] = event
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry, default=str)


def setup_logging(log_file: Optional[str] = None, debug: bool = False, json_lines: bool = False):
    """
    Configure root logging once per process.

    Args:
        log_file: Also write records to this file
        debug: Log at DEBUG instead of INFO
        json_lines: Render records as JSON lines instead of the human format
    """
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    formatter = JsonLinesFormatter() if json_lines else logging.Formatter(LOG_FORMAT)
    for handler in handlers:
        handler.setFormatter(formatter)

    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO, handlers=handlers, force=True)


@dataclass
class EngineConfig:
    """Validated engine configuration; every path is absolute."""
    base_dir: Path
    inputs: Dict[str, str]
    cascade: Dict[str, Any]
    provider: Dict[str, Any]
    selection: Dict[str, Any] = field(default_factory=dict)
    evolution: Dict[str, Any] = field(default_factory=dict)
    islands: Dict[str, Any] = field(default_factory=dict)
    mcts: Dict[str, Any] = field(default_factory=dict)
    refiner: Dict[str, Any] = field(default_factory=dict)
    mode: Optional[str] = None
    flags: Optional[Dict[str, bool]] = None
    search: str = "evolution"
    prompts: Dict[str, str] = field(default_factory=dict)
    log_settings: Dict[str, Any] = field(default_factory=dict)
    output_dir: Path = Path("runs/latest")
    source_path: Optional[Path] = None

    @property
    def seed(self) -> int:
        return self.evolution.get("seed", 0)

    @property
    def api_key_env(self) -> str:
        return self.provider.get("api_key_env", DEFAULT_API_KEY_ENV)

    def get_api_key(self) -> str:
        return os.environ.get(self.api_key_env, "")

    def to_dict(self) -> Dict[str, Any]:
        """Return configuration as dictionary (with sensitive data masked)."""
        data = {
            "inputs": copy.deepcopy(self.inputs),
            "selection": copy.deepcopy(self.selection),
            "evolution": copy.deepcopy(self.evolution),
            "islands": copy.deepcopy(self.islands),
            "mcts": copy.deepcopy(self.mcts),
            "cascade": copy.deepcopy(self.cascade),
            "provider": copy.deepcopy(self.provider),
            "refiner": copy.deepcopy(self.refiner),
            "mode": self.mode,
            "flags": copy.deepcopy(self.flags),
            "search": self.search,
            "prompts": copy.deepcopy(self.prompts),
            "output_dir": str(self.output_dir),
        }
        data["provider"]["api_key"] = MASK if self.get_api_key() else ""
        return data


def _resolve(base_dir: Path, value: str) -> str:
    path = Path(value).expanduser()
    return str(path if path.is_absolute() else (base_dir / path).resolve())


def _validate(document: dict, source: str):
    try:
        jsonschema.validate(document, ENGINE_CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigurationError(f"{source}: {where}: {e.message}")


def apply_overrides(document: dict, overrides: Optional[Dict[str, Any]]) -> dict:
    """Command-line overrides for seed, iterations, mode and output directory."""
    document = copy.deepcopy(document)
    if not overrides:
        return document
    if overrides.get("seed") is not None:
        document.setdefault("evolution", {})["seed"] = overrides["seed"]
    if overrides.get("iterations") is not None:
        document.setdefault("evolution", {})["max_iterations"] = overrides["iterations"]
        document.setdefault("mcts", {})["max_iterations"] = overrides["iterations"]
    if overrides.get("mode") is not None:
        document["mode"] = overrides["mode"]
        document.pop("flags", None)
    if overrides.get("out") is not None:
        document["output_dir"] = str(Path(overrides["out"]).resolve())
    return document


def load_engine_config(path, overrides: Optional[Dict[str, Any]] = None,
                       env_file: Optional[str] = None) -> EngineConfig:
    """
    Load, override and validate an engine config file.

    Args:
        path: YAML or JSON document
        overrides: Optional seed / iterations / mode / out values
        env_file: Optional .env file; defaults to one next to the config

    Returns:
        EngineConfig with every referenced path resolved and checked

    Raises:
        ConfigurationError: Naming the offending key or missing file
    """
    path = Path(path)
    try:
        with open(path, "r") as f:
            document = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: cannot parse config: {e}")
    if not isinstance(document, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")

    base_dir = path.resolve().parent
    dotenv_path = Path(env_file) if env_file else base_dir / ".env"
    if dotenv_path.exists():
        load_dotenv(dotenv_path, override=False)
        logger.info(f"Loaded environment from {dotenv_path}")

    _validate(document, str(path))
    document = apply_overrides(document, overrides)
    _validate(document, f"{path} (after overrides)")
    return config_from_document(document, base_dir, source_path=path)


def config_from_document(document: dict, base_dir: Path, source_path: Optional[Path] = None) -> EngineConfig:
    """Resolve paths and check referenced files exist."""
    base_dir = Path(base_dir)
    inputs = dict(document["inputs"])
    for key in ("call_graph", "profile", "target_source"):
        if key in inputs:
            inputs[key] = _resolve(base_dir, inputs[key])
            if not Path(inputs[key]).exists():
                raise ConfigurationError(f"inputs.{key}: file not found: {inputs[key]}")

    provider = copy.deepcopy(document["provider"])
    if provider["kind"] == "scripted":
        if "fixture" not in provider:
            raise ConfigurationError("provider.fixture is required for the scripted provider")
        provider["fixture"] = _resolve(base_dir, provider["fixture"])
        if not Path(provider["fixture"]).exists():
            raise ConfigurationError(f"provider.fixture: file not found: {provider['fixture']}")
    elif not provider.get("endpoints"):
        raise ConfigurationError("provider.endpoints is required for the chat provider")

    prompts = dict(document.get("prompts", {}))
    for key in ("optimize", "repair"):
        if key in prompts:
            prompts[key] = _resolve(base_dir, prompts[key])
            if not Path(prompts[key]).exists():
                raise ConfigurationError(f"prompts.{key}: file not found: {prompts[key]}")

    cascade = copy.deepcopy(document["cascade"])
    if not cascade.get("stages") and not cascade.get("preset"):
        raise ConfigurationError("cascade: either stages or preset is required")
    for stage in cascade.get("stages", []):
        if ("command" in stage) == ("callable" in stage):
            raise ConfigurationError(f"cascade.stages.{stage['name']}: exactly one of command or callable is required")
        stage["workdir"] = _resolve(base_dir, stage.get("workdir", "."))
        ref = stage.get("callable")
        if ref and ref.rpartition(":")[0].endswith(".py"):
            target, _, func = ref.rpartition(":")
            stage["callable"] = f"{_resolve(base_dir, target)}:{func}"

    log_section = dict(document.get("logging", {}))
    if "file" in log_section:
        log_section["file"] = _resolve(base_dir, log_section["file"])

    return EngineConfig(
        base_dir=base_dir,
        inputs=inputs,
        cascade=cascade,
        provider=provider,
        selection=dict(document.get("selection", {})),
        evolution=dict(document.get("evolution", {})),
        islands=dict(document.get("islands", {})),
        mcts=dict(document.get("mcts", {})),
        refiner=dict(document.get("refiner", {})),
        mode=document.get("mode"),
        flags=document.get("flags"),
        search=document.get("search", "evolution"),
        prompts=prompts,
        log_settings=log_section,
        output_dir=Path(_resolve(base_dir, document.get("output_dir", "runs/latest"))),
        source_path=source_path,
    )


if __name__ == "__main__":
    """Validate a config file and print it with secrets masked."""
    if len(sys.argv) != 2:
        print("usage: config.py <engine.yaml>")
        sys.exit(2)
    try:
        config = load_engine_config(sys.argv[1])
        print("Configuration loaded successfully!")
        print(json.dumps(config.to_dict(), indent=2))
    except ConfigurationError as e:
        print(f"Configuration error: {e}")
        sys.exit(2)
