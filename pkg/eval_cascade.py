#!/usr/bin/env python3
"""
Cascaded candidate evaluation (the code filters).

Stages run in order, correctness first. After stages 1, 2 and 3 the running
combined score is checked against tau1, tau2 and tau3; a stage can also carry
its own gate threshold. The first failing gate stops the cascade and every
stage that did not run counts as 0 in the combined score.

Stage-runner protocol: a stage writes `{"score": x, "passed": b,
"diagnostics": "..."}` to stdout (unit-test stages may add `tests_passed` and
`tests_total`). A nonzero exit code maps to score 0.
"""

import functools
import importlib
import importlib.util
import json
import logging
import shlex
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

DEFAULT_STAGE_TIMEOUT = 120.0


class EvaluationError(Exception):
    """Raised for invalid cascade configuration or fallback input."""
    pass


class StageKind(str, Enum):
    BUILD = "BUILD"
    UNIT_TEST = "UNIT_TEST"
    PERFORMANCE = "PERFORMANCE"
    STATIC_ANALYSIS = "STATIC_ANALYSIS"
    LLM_JUDGE = "LLM_JUDGE"


CORRECTNESS_KINDS = (StageKind.BUILD, StageKind.UNIT_TEST)


@dataclass(frozen=True)
class StageSpec:
    name: str
    kind: StageKind
    command: Optional[object] = None
    function: Optional[object] = None
    timeout: float = DEFAULT_STAGE_TIMEOUT
    gate_threshold: Optional[float] = None
    workdir: Optional[str] = None

    def __post_init__(self):
        if not self.name:
            raise EvaluationError("stage name must be non-empty")
        if self.gate_threshold is not None and not 0.0 <= self.gate_threshold <= 1.0:
            raise EvaluationError(f"stage {self.name}: gate threshold {self.gate_threshold} outside [0, 1]")
        if (self.command is None) == (self.function is None):
            raise EvaluationError(f"stage {self.name}: exactly one of command or function is required")
        if self.timeout <= 0:
            raise EvaluationError(f"stage {self.name}: timeout must be positive")


@dataclass
class StageResult:
    name: str
    score: float
    passed: bool
    diagnostics: str = ""
    wall_time: float = 0.0
    tests_passed: Optional[int] = None
    tests_total: Optional[int] = None
    metrics: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        data = {
            "name": self.name,
            "score": self.score,
            "passed": self.passed,
            "diagnostics": self.diagnostics,
            "tests_passed": self.tests_passed,
            "tests_total": self.tests_total,
            "metrics": dict(self.metrics),
        }
        if include_timing:
            data["wall_time"] = self.wall_time
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "StageResult":
        return cls(
            name=data["name"],
            score=data["score"],
            passed=data["passed"],
            diagnostics=data.get("diagnostics", ""),
            wall_time=data.get("wall_time", 0.0),
            tests_passed=data.get("tests_passed"),
            tests_total=data.get("tests_total"),
            metrics=dict(data.get("metrics", {})),
        )


@dataclass
class EvaluationReport:
    stage_results: List[StageResult]
    combined_score: float
    passed_all_gates: bool
    rejected_at: Optional[str] = None

    @property
    def diagnostics(self) -> str:
        """Diagnostics of failed stages, or of all stages when nothing failed."""
        failed = [r for r in self.stage_results if not r.passed]
        chosen = failed or self.stage_results
        return "\n".join(f"[{r.name}] {r.diagnostics}".rstrip() for r in chosen if r.diagnostics)

    def result(self, name: str) -> Optional[StageResult]:
        for result in self.stage_results:
            if result.name == name:
                return result
        return None

    def to_dict(self, include_timing: bool = True) -> dict:
        return {
            "stage_results": [r.to_dict(include_timing) for r in self.stage_results],
            "combined_score": self.combined_score,
            "passed_all_gates": self.passed_all_gates,
            "rejected_at": self.rejected_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationReport":
        return cls(
            stage_results=[StageResult.from_dict(r) for r in data["stage_results"]],
            combined_score=data["combined_score"],
            passed_all_gates=data["passed_all_gates"],
            rejected_at=data.get("rejected_at"),
        )


@dataclass(frozen=True)
class CascadeConfig:
    tau1: float = 0.5
    tau2: float = 0.75
    tau3: float = 0.9
    alpha_judge: float = 0.1
    component_weights: Dict[str, float] = field(default_factory=dict)
    candidate_filename: str = "candidate.txt"

    def __post_init__(self):
        if not 0.0 <= self.tau1 <= self.tau2 <= self.tau3 <= 1.0:
            raise EvaluationError(
                f"thresholds must satisfy 0 <= tau1 <= tau2 <= tau3 <= 1, got {self.tau1}, {self.tau2}, {self.tau3}"
            )
        if not 0.0 <= self.alpha_judge <= 1.0:
            raise EvaluationError(f"alpha_judge {self.alpha_judge} outside [0, 1]")
        for name, weight in self.component_weights.items():
            if weight < 0:
                raise EvaluationError(f"component weight for {name} must be non-negative")

    @property
    def thresholds(self) -> List[float]:
        return [self.tau1, self.tau2, self.tau3]


# Stage skeletons; commands are supplied by the engine config.
STAGE_PRESETS = {
    "java": [
        ("build", StageKind.BUILD),
        ("unit_test", StageKind.UNIT_TEST),
        ("static_analysis", StageKind.STATIC_ANALYSIS),
        ("performance", StageKind.PERFORMANCE),
        ("llm_judge", StageKind.LLM_JUDGE),
    ],
    "apex": [
        ("syntax", StageKind.BUILD),
        ("sandbox_tests", StageKind.UNIT_TEST),
        ("governor_limits", StageKind.STATIC_ANALYSIS),
        ("performance", StageKind.PERFORMANCE),
        ("apex_review", StageKind.LLM_JUDGE),
    ],
}


def preset_stages(preset: str, commands: Dict[str, object], timeout: float = DEFAULT_STAGE_TIMEOUT,
                  gates: Optional[Dict[str, float]] = None) -> List[StageSpec]:
    """Instantiate a preset stage list; every stage needs a command entry."""
    if preset not in STAGE_PRESETS:
        raise EvaluationError(f"unknown stage preset {preset}; expected one of {sorted(STAGE_PRESETS)}")
    gates = gates or {}
    stages = []
    for name, kind in STAGE_PRESETS[preset]:
        if name not in commands:
            raise EvaluationError(f"preset {preset}: no command given for stage {name}")
        stages.append(StageSpec(name=name, kind=kind, command=commands[name],
                                timeout=timeout, gate_threshold=gates.get(name)))
    return stages


def cascade_from_config(section: dict) -> Tuple[CascadeConfig, List[StageSpec]]:
    """Build the cascade config and the ordered stage list from the `cascade` config section."""
    config = CascadeConfig(
        tau1=section.get("tau1", 0.5),
        tau2=section.get("tau2", 0.75),
        tau3=section.get("tau3", 0.9),
        alpha_judge=section.get("alpha_judge", 0.1),
        component_weights=dict(section.get("component_weights", {})),
        candidate_filename=section.get("candidate_filename", "candidate.txt"),
    )
    if section.get("stages"):
        stages = [
            StageSpec(
                name=raw["name"],
                kind=StageKind(raw["kind"]),
                command=raw.get("command"),
                function=raw.get("callable"),
                timeout=raw.get("timeout", DEFAULT_STAGE_TIMEOUT),
                gate_threshold=raw.get("gate_threshold"),
                workdir=raw.get("workdir"),
            )
            for raw in section["stages"]
        ]
    else:
        stages = preset_stages(section["preset"], section.get("commands", {}))
    validate_stage_order(stages)
    return config, stages


def validate_stage_order(stages: Sequence[StageSpec]) -> None:
    """Correctness stages (BUILD, UNIT_TEST) must precede every other kind."""
    if not stages:
        raise EvaluationError("stage list must be non-empty")
    seen_quality = None
    names = set()
    for stage in stages:
        if stage.name in names:
            raise EvaluationError(f"duplicate stage name {stage.name}")
        names.add(stage.name)
        if stage.kind in CORRECTNESS_KINDS:
            if seen_quality is not None:
                raise EvaluationError(
                    f"correctness stage {stage.name} must run before {seen_quality}"
                )
        elif seen_quality is None:
            seen_quality = stage.name


def correctness_stages(stages: Sequence[StageSpec]) -> List[StageSpec]:
    return [stage for stage in stages if stage.kind in CORRECTNESS_KINDS]


def stage_weight(stage: StageSpec, config: CascadeConfig) -> float:
    base = config.component_weights.get(stage.name, 1.0)
    if stage.kind == StageKind.LLM_JUDGE:
        return config.alpha_judge * base
    return base


def weighted_score(scores: Dict[str, float], weights: Dict[str, float]) -> float:
    """Sum of weight*score over the given scores, divided by the sum of all weights."""
    total = sum(weights.values())
    if total <= 0:
        return 0.0
    return _clip(sum(weights[name] * score for name, score in scores.items()) / total)


def combined_score_fallback(component_scores: Dict[str, float]) -> float:
    """Unweighted arithmetic mean of normalized component scores."""
    if not component_scores:
        raise EvaluationError("combined score fallback needs at least one component score")
    for name, score in component_scores.items():
        if not 0.0 <= score <= 1.0:
            raise EvaluationError(f"component score {name}={score} outside [0, 1]")
    return sum(component_scores.values()) / len(component_scores)


def normalize_speedup(baseline_ms: float, candidate_ms: float) -> float:
    """Map a speedup to [0, 1]; halving the runtime saturates at 1."""
    if candidate_ms <= 0:
        return 1.0
    return _clip(min(1.0, (baseline_ms / candidate_ms) / 2.0))


def is_eligible(report: Optional[EvaluationReport]) -> bool:
    """Eligible for the database iff every configured gate passed."""
    return report is not None and report.passed_all_gates


def _clip(value: float) -> float:
    return max(0.0, min(1.0, value))


@functools.lru_cache(maxsize=64)
def _load_callable(ref: str) -> Callable:
    target, _, func_name = ref.rpartition(":")
    if not target or not func_name:
        raise EvaluationError(f"callable reference {ref!r} must look like 'module:function' or 'file.py:function'")
    if target.endswith(".py"):
        path = Path(target)
        spec = importlib.util.spec_from_file_location(f"_stage_{path.stem}", path)
        if spec is None or spec.loader is None:
            raise EvaluationError(f"cannot load stage module {target}")
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
    else:
        module = importlib.import_module(target)
    func = getattr(module, func_name, None)
    if func is None:
        raise EvaluationError(f"{target} has no function {func_name}")
    return func


def _resolve_function(function) -> Callable:
    """A stage function is either a Python callable or a 'module:function' reference."""
    if callable(function):
        return function
    return _load_callable(str(function))


def _expand_command(command, candidate_path: Path) -> List[str]:
    values = {
        "candidate": str(candidate_path),
        "workdir": str(candidate_path.parent),
        "python": sys.executable,
    }
    if isinstance(command, str):
        parts = shlex.split(command)
    else:
        parts = [str(part) for part in command]
    return [part.format(**values) for part in parts]


def _result_from_payload(stage: StageSpec, payload: dict, wall_time: float, extra_diagnostics: str = "") -> StageResult:
    try:
        raw_score = float(payload["score"])
    except (KeyError, TypeError, ValueError):
        return StageResult(stage.name, 0.0, False, f"bad-output: missing numeric score {extra_diagnostics}".strip(),
                           wall_time)

    diagnostics = str(payload.get("diagnostics", "") or "")
    if not 0.0 <= raw_score <= 1.0:
        diagnostics = f"{diagnostics} (score {raw_score} clipped to [0, 1])".strip()
    score = _clip(raw_score)
    passed = payload.get("passed", True)
    if not isinstance(passed, bool):
        return StageResult(stage.name, 0.0, False,
                           f"bad-output: passed must be a JSON boolean, got {passed!r} {extra_diagnostics}".strip(),
                           wall_time)
    if stage.gate_threshold is not None and score < stage.gate_threshold:
        passed = False
    if extra_diagnostics:
        diagnostics = f"{diagnostics}\n{extra_diagnostics}".strip()

    metrics = {k: float(v) for k, v in (payload.get("metrics") or {}).items() if isinstance(v, (int, float))}
    return StageResult(
        name=stage.name,
        score=score,
        passed=passed,
        diagnostics=diagnostics,
        wall_time=wall_time,
        tests_passed=payload.get("tests_passed"),
        tests_total=payload.get("tests_total"),
        metrics=metrics,
    )


def run_stage(stage: StageSpec, candidate_path: Path) -> StageResult:
    """Run one stage; candidate-caused failures come back as score-0 results."""
    started = time.monotonic()

    if stage.function is not None:
        try:
            payload = _resolve_function(stage.function)(str(candidate_path), stage)
        except EvaluationError:
            raise
        except Exception as e:
            logger.warning(f"Stage {stage.name} crashed: {e}")
            return StageResult(stage.name, 0.0, False, f"crash: {type(e).__name__}: {e}",
                               time.monotonic() - started)
        if not isinstance(payload, dict):
            return StageResult(stage.name, 0.0, False, "bad-output: stage function did not return a dict",
                               time.monotonic() - started)
        return _result_from_payload(stage, payload, time.monotonic() - started)

    argv = _expand_command(stage.command, candidate_path)
    try:
        proc = subprocess.run(
            argv,
            capture_output=True,
            text=True,
            timeout=stage.timeout,
            cwd=stage.workdir or None,
        )
    except subprocess.TimeoutExpired:
        logger.warning(f"Stage {stage.name} timed out after {stage.timeout}s")
        return StageResult(stage.name, 0.0, False, f"timeout: exceeded {stage.timeout}s",
                           time.monotonic() - started)
    except OSError as e:
        logger.warning(f"Stage {stage.name} could not start: {e}")
        return StageResult(stage.name, 0.0, False, f"crash: {e}", time.monotonic() - started)

    wall_time = time.monotonic() - started
    stderr = proc.stderr.strip()
    try:
        payload = json.loads(proc.stdout.strip().splitlines()[-1]) if proc.stdout.strip() else None
    except json.JSONDecodeError:
        payload = None

    if proc.returncode != 0:
        detail = payload.get("diagnostics", "") if isinstance(payload, dict) else ""
        diagnostics = f"crash: exit code {proc.returncode}\n{detail}\n{stderr}".strip()
        return StageResult(stage.name, 0.0, False, diagnostics, wall_time)
    if not isinstance(payload, dict):
        return StageResult(stage.name, 0.0, False, f"bad-output: no JSON result on stdout\n{stderr}".strip(),
                           wall_time)
    return _result_from_payload(stage, payload, wall_time, stderr)


def evaluate(candidate_source: str, stages: Sequence[StageSpec], config: CascadeConfig) -> EvaluationReport:
    """
    Run the cascade over one candidate.

    Args:
        candidate_source: Full program text
        stages: Ordered stage specs (correctness first)
        config: Thresholds, judge weight and component weights

    Returns:
        EvaluationReport; never raises for candidate-caused failures
    """
    validate_stage_order(stages)
    weights = {stage.name: stage_weight(stage, config) for stage in stages}
    thresholds = config.thresholds

    results: List[StageResult] = []
    scores: Dict[str, float] = {}
    rejected_at = None

    with tempfile.TemporaryDirectory(prefix="evolve-eval-") as workdir:
        candidate_path = Path(workdir) / config.candidate_filename
        candidate_path.write_text(candidate_source)

        for index, stage in enumerate(stages):
            result = run_stage(stage, candidate_path)
            results.append(result)
            scores[stage.name] = result.score

            if not result.passed:
                rejected_at = stage.name
                break
            if index < len(thresholds):
                completed_weight = sum(weights[name] for name in scores)
                running = (sum(weights[name] * s for name, s in scores.items()) / completed_weight
                           if completed_weight > 0 else 0.0)
                if running < thresholds[index]:
                    result.passed = False
                    result.diagnostics = (
                        f"{result.diagnostics}\ngate: running score {running:.4f} below tau{index + 1}="
                        f"{thresholds[index]}"
                    ).strip()
                    rejected_at = stage.name
                    break

    if rejected_at is not None:
        skipped = [stage.name for stage in stages[len(results):]]
        if skipped:
            logger.debug(f"Cascade rejected at {rejected_at}; skipped {', '.join(skipped)}")

    return EvaluationReport(
        stage_results=results,
        combined_score=weighted_score(scores, weights),
        passed_all_gates=rejected_at is None,
        rejected_at=rejected_at,
    )
