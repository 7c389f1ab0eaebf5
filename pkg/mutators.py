#!/usr/bin/env python3
"""
Mutation operators: EVOLVE-BLOCK handling, prompt assembly, providers and
response parsing.

A provider turns a prompt into raw text. `parse_response` classifies that text
as a SEARCH/REPLACE diff or a full rewrite of the writable region, and
`apply_mutation` splices the result back into the source without touching
anything outside the block.
"""

import difflib
import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import jinja2
import jinja2.meta
import jsonschema
import requests
import yaml

from config import ConfigurationError
from profile_graph import GraphError, WeightVector, WeightedComponentGraph, prune_context

logger = logging.getLogger(__name__)

START_MARKER = "EVOLVE-BLOCK-START"
END_MARKER = "EVOLVE-BLOCK-END"

PROMPTS_DIR = Path(__file__).resolve().parent / "prompts"
OPTIMIZE_TEMPLATE_PATH = PROMPTS_DIR / "optimize_prompt.txt"
REPAIR_TEMPLATE_PATH = PROMPTS_DIR / "repair_prompt.txt"

OPTIMIZE_SLOTS = ("goal", "runtime_profile", "writable_code", "readonly_context", "evaluation_feedback", "constraints")
REPAIR_SLOTS = ("source", "diagnostics")

DEFAULT_FEEDBACK_LIMIT = 5
DEFAULT_GOAL = "Reduce the cumulative execution time of the target while preserving its observable behavior."

DIFF_FORMAT_RULE = (
    "Return only a minimal patch for the writable region, as one or more blocks of the form\n"
    "<<<<<<< SEARCH\n<exact lines from the writable code>\n=======\n<replacement lines>\n>>>>>>> REPLACE\n"
    "Each SEARCH text must match the writable code exactly once."
)
REWRITE_FORMAT_RULE = "Return the complete new writable region in a single fenced code block."

HUNK_PATTERN = re.compile(r"<<<<<<< SEARCH\n(.*?)=======\n(.*?)>>>>>>> REPLACE", re.DOTALL)
FENCE_PATTERN = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)

SCRIPT_SCHEMA = {
    "type": "object",
    "required": ["edits"],
    "properties": {
        "selection": {"enum": ["sequence", "hashed"]},
        "edits": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["response"],
                "properties": {
                    "name": {"type": "string"},
                    "trigger": {"anyOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}}]},
                    "response": {"type": "string"},
                    "fail": {"type": "boolean"},
                },
            },
        },
    },
}


class EvolveBlockError(Exception):
    """Raised when a source file has no, several, or malformed EVOLVE-BLOCK markers."""
    pass


class MutationError(Exception):
    """Raised when a response cannot be applied to the writable region."""
    pass


class ProviderError(Exception):
    """Raised when a mutation provider fails after its retries."""
    pass


class ResponseParseError(Exception):
    """Raised for responses with neither diff hunks nor a fenced code block."""

    def __init__(self, message: str, raw_response: str = ""):
        super().__init__(message)
        self.raw_response = raw_response


class ResponseKind(str, Enum):
    DIFF = "DIFF"
    FULL_REWRITE = "FULL_REWRITE"


@dataclass(frozen=True)
class EvolveBlock:
    prefix: str
    start_marker: str
    body: str
    end_marker: str
    suffix: str

    def reassemble(self, body: Optional[str] = None) -> str:
        return self.prefix + self.start_marker + (self.body if body is None else body) + self.end_marker + self.suffix


@dataclass(frozen=True)
class MutationResponse:
    kind: ResponseKind
    payload: str
    rationale: str = ""

    def __post_init__(self):
        if self.kind == ResponseKind.DIFF and not extract_hunks(self.payload):
            raise ResponseParseError("diff response contains no SEARCH/REPLACE hunks", self.payload)

    def hunks(self) -> List[Tuple[str, str]]:
        return extract_hunks(self.payload) if self.kind == ResponseKind.DIFF else []


@dataclass(frozen=True)
class OptimizationContext:
    target_name: str
    writable_code: str
    frozen_context: str = ""
    profile: Optional[WeightVector] = None
    annotations: Dict[str, str] = field(default_factory=dict)
    feedback: str = ""
    constraints: str = ""
    goal: str = DEFAULT_GOAL

    def __post_init__(self):
        if not self.writable_code.strip():
            raise ValueError("writable code must be non-empty")


def parse_evolve_block(source: str) -> EvolveBlock:
    """
    Split a source file around its single EVOLVE-BLOCK.

    The marker lines are kept verbatim (comment syntax included) so that
    `reassemble()` reproduces the input exactly.

    Raises:
        EvolveBlockError: "no evolve block", "multiple evolve blocks" or
            "malformed markers"
    """
    lines = source.splitlines(keepends=True)
    starts = [i for i, line in enumerate(lines) if START_MARKER in line]
    ends = [i for i, line in enumerate(lines) if END_MARKER in line]

    if not starts and not ends:
        raise EvolveBlockError("no evolve block")
    if len(starts) > 1 or len(ends) > 1:
        raise EvolveBlockError("multiple evolve blocks")
    if len(starts) != 1 or len(ends) != 1 or ends[0] <= starts[0]:
        raise EvolveBlockError("malformed markers")

    start, end = starts[0], ends[0]
    return EvolveBlock(
        prefix="".join(lines[:start]),
        start_marker=lines[start],
        body="".join(lines[start + 1:end]),
        end_marker=lines[end],
        suffix="".join(lines[end + 1:]),
    )


def extract_hunks(text: str) -> List[Tuple[str, str]]:
    return [(search, replacement) for search, replacement in HUNK_PATTERN.findall(text)]


def parse_response(text: str) -> MutationResponse:
    """Classify raw provider output as DIFF or FULL_REWRITE."""
    hunks = list(HUNK_PATTERN.finditer(text))
    if hunks:
        payload = "\n".join(match.group(0) for match in hunks)
        return MutationResponse(ResponseKind.DIFF, payload, _rationale(text[:hunks[0].start()]))
    if "<<<<<<< SEARCH" in text:
        raise ResponseParseError("incomplete SEARCH/REPLACE block", text)

    fence = FENCE_PATTERN.search(text)
    if fence:
        return MutationResponse(ResponseKind.FULL_REWRITE, fence.group(1), _rationale(text[:fence.start()]))
    raise ResponseParseError("response has neither SEARCH/REPLACE hunks nor a fenced code block", text)


def _rationale(prose: str) -> str:
    prose = " ".join(line.strip() for line in prose.strip().splitlines() if line.strip() and not line.startswith("```"))
    return prose[:200]


def apply_mutation(block: EvolveBlock, response: MutationResponse) -> str:
    """
    Apply a response to the block body and return the full new source.

    Prefix, suffix and marker lines are never modified.

    Raises:
        MutationError: A SEARCH text does not occur exactly once in the
            current body, or the new body carries EVOLVE-BLOCK markers
    """
    if response.kind == ResponseKind.FULL_REWRITE:
        body = response.payload
        if body and not body.endswith("\n"):
            body += "\n"
        return _reassemble_checked(block, body)

    body = block.body
    for index, (search, replacement) in enumerate(response.hunks(), start=1):
        occurrences = body.count(search) if search else 0
        if occurrences != 1:
            raise MutationError(
                f"ambiguous or missing hunk {index}: search text found {occurrences} times\n{search.rstrip()}"
            )
        body = body.replace(search, replacement, 1)
    return _reassemble_checked(block, body)


def _reassemble_checked(block: EvolveBlock, body: str) -> str:
    if START_MARKER in body or END_MARKER in body:
        raise MutationError("mutation introduces evolve-block markers")
    return block.reassemble(body)


def summarize_change(old_body: str, new_body: str) -> str:
    """Engine-side change description, used when a response carries no rationale."""
    added, removed = [], []
    for line in difflib.unified_diff(old_body.splitlines(), new_body.splitlines(), lineterm="", n=0):
        if line.startswith("+") and not line.startswith("+++"):
            added.append(line[1:].strip())
        elif line.startswith("-") and not line.startswith("---"):
            removed.append(line[1:].strip())
    if not added and not removed:
        return "no change"
    summary = f"+{len(added)}/-{len(removed)} lines"
    sample = next((line for line in added if line), None)
    return f"{summary}: {sample[:80]}" if sample else summary


class PromptTemplate:
    """Jinja2 template whose required slots are checked at load time."""

    def __init__(self, text: str, required: Sequence[str] = OPTIMIZE_SLOTS, name: str = "<template>"):
        self.name = name
        self.text = text
        self._env = jinja2.Environment(
            undefined=jinja2.StrictUndefined,
            keep_trailing_newline=True,
            autoescape=False,
        )
        try:
            parsed = self._env.parse(text)
        except jinja2.TemplateSyntaxError as e:
            raise ConfigurationError(f"prompt template {name}: syntax error at line {e.lineno}: {e.message}")
        self.fields = jinja2.meta.find_undeclared_variables(parsed)
        missing = sorted(set(required) - self.fields)
        if missing:
            raise ConfigurationError(f"prompt template {name} is missing slots: {', '.join(missing)}")
        self._template = self._env.from_string(text)

    @classmethod
    def from_file(cls, path, required: Sequence[str] = OPTIMIZE_SLOTS) -> "PromptTemplate":
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise ConfigurationError(f"prompt template not found: {path}")
        return cls(text, required, name=str(path))

    def render(self, **slots) -> str:
        try:
            return self._template.render(**slots)
        except jinja2.UndefinedError as e:
            raise ConfigurationError(f"prompt template {self.name}: {e.message}")


def render_profile(context: OptimizationContext) -> str:
    if context.profile is None:
        return "none"
    notes = "; ".join(f"{key}={value}" for key, value in sorted(context.annotations.items())) or "none"
    return (
        f"- Target: {context.target_name}\n"
        f"- Cumulative time: {context.profile.exec_time:.1f} ms\n"
        f"- Call count: {context.profile.call_count}\n"
        f"- Allocation/CPU notes: {notes}"
    )


def build_prompt(context: OptimizationContext, template: PromptTemplate) -> str:
    return template.render(
        goal=context.goal,
        target=context.target_name,
        runtime_profile=render_profile(context),
        writable_code=context.writable_code,
        readonly_context=context.frozen_context or "none",
        evaluation_feedback=context.feedback or "none",
        constraints=context.constraints or "none",
    )


def build_repair_prompt(body: str, diagnostics: str, template: PromptTemplate, constraints: str = "") -> str:
    return template.render(
        source=body,
        diagnostics=diagnostics.strip() or "none",
        constraints=constraints or "none",
    )


def build_context(source: str, target_name: str, graph: Optional[WeightedComponentGraph] = None,
                  goal: str = DEFAULT_GOAL, constraints: str = "", diff_mode: bool = True,
                  feedback: str = "") -> OptimizationContext:
    """
    Context builder for one target.

    Writable code is the EVOLVE-BLOCK body; read-only context is the rest of
    the file plus the frozen 1-hop neighbours with their profile weights.
    """
    block = parse_evolve_block(source)
    outside = block.prefix + block.start_marker + "    ... writable region ...\n" + block.end_marker + block.suffix
    readonly = [outside.rstrip("\n")]

    profile, annotations = None, {}
    if graph is not None:
        try:
            subgraph = prune_context(graph, target_name)
        except GraphError:
            logger.warning(f"Target {target_name} is not in the component graph; prompting without profile data")
        else:
            profile = graph.weight(target_name)
            annotations = dict(graph.annotations.get(target_name, {}))
            if subgraph.frozen:
                readonly.append("Frozen neighbours (read-only):")
                for name in sorted(subgraph.frozen):
                    weight = graph.weight(name)
                    readonly.append(f"- {name} ({weight.exec_time:.1f} ms, {weight.call_count} calls)")

    rule = DIFF_FORMAT_RULE if diff_mode else REWRITE_FORMAT_RULE
    return OptimizationContext(
        target_name=target_name,
        writable_code=block.body,
        frozen_context="\n".join(readonly),
        profile=profile,
        annotations=annotations,
        feedback=feedback,
        constraints="\n".join(part for part in (constraints.strip(), rule) if part),
        goal=goal,
    )


def strip_context(context: OptimizationContext) -> OptimizationContext:
    """Unenriched context: no profile, no read-only context, no feedback."""
    return replace(context, profile=None, annotations={}, frozen_context="", feedback="")


@dataclass
class VariantNote:
    iteration: int
    candidate_id: Optional[int]
    score: float
    summary: str


class FeedbackLog:
    """Evolution history rendered into the evaluation-feedback slot."""

    def __init__(self, limit: int = DEFAULT_FEEDBACK_LIMIT):
        if limit < 0:
            raise ValueError("feedback limit must be non-negative")
        self.limit = limit
        self.variants: List[VariantNote] = []
        self.last_failure: Optional[Tuple[int, str]] = None

    def record_variant(self, iteration: int, candidate_id: Optional[int], score: float, summary: str):
        self.variants.append(VariantNote(iteration, candidate_id, score, summary))

    def record_failure(self, iteration: int, diagnostics: str):
        self.last_failure = (iteration, diagnostics)

    def render(self, inspirations: Sequence = ()) -> str:
        """
        Up to `limit` most recent variants, listed best first, then the latest
        failure and the archive inspirations (objects with id, fitness and
        change_summary).
        """
        sections = []
        recent = self.variants[-self.limit:] if self.limit else []
        if recent:
            ordered = sorted(enumerate(recent), key=lambda pair: (-pair[1].score, -pair[0]))
            lines = ["Previous variants (best first):"]
            for _, note in ordered:
                label = f"#{note.candidate_id}" if note.candidate_id is not None else f"iteration {note.iteration}"
                lines.append(f"- {label} score {note.score:.4f}: {note.summary}")
            sections.append("\n".join(lines))
        if self.last_failure is not None:
            iteration, diagnostics = self.last_failure
            sections.append(f"Latest failure (iteration {iteration}):\n{diagnostics.strip()[:1500]}")
        if inspirations:
            lines = ["Top variants:"]
            for candidate in inspirations:
                lines.append(f"- #{candidate.id} score {candidate.fitness:.4f}: {candidate.change_summary or 'seed program'}")
            sections.append("\n".join(lines))
        return "\n\n".join(sections)

    def state_dict(self) -> dict:
        return {
            "limit": self.limit,
            "variants": [vars(note).copy() for note in self.variants],
            "last_failure": list(self.last_failure) if self.last_failure else None,
        }

    def load_state(self, state: dict):
        self.limit = state["limit"]
        self.variants = [VariantNote(**note) for note in state["variants"]]
        self.last_failure = tuple(state["last_failure"]) if state["last_failure"] else None


class MutationProvider:
    """Base provider: turns a prompt into raw response text."""

    def complete(self, prompt: str, rng=None) -> str:
        raise NotImplementedError

    def state_dict(self) -> dict:
        return {}

    def load_state(self, state: dict):
        pass


@dataclass(frozen=True)
class ScriptedEdit:
    response: str
    trigger: Tuple[str, ...] = ()
    name: str = ""
    fail: bool = False


class ScriptedProvider(MutationProvider):
    """
    Deterministic offline provider.

    Only edits whose trigger substrings all occur in the prompt are eligible.
    In `sequence` mode the call index walks the eligible list; in `hashed`
    mode the choice is a hash of (seed, call index, prompt digest).
    """

    def __init__(self, edits: Sequence[ScriptedEdit], seed: int = 0, selection: str = "sequence"):
        if not edits:
            raise ConfigurationError("scripted provider needs at least one edit")
        if selection not in ("sequence", "hashed"):
            raise ConfigurationError(f"unknown scripted selection {selection}")
        self.edits = list(edits)
        self.seed = seed
        self.selection = selection
        self.calls = 0
        self.history: List[str] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path, seed: int = 0) -> "ScriptedProvider":
        path = Path(path)
        try:
            with open(path, "r") as f:
                data = yaml.safe_load(f)
        except FileNotFoundError:
            raise ConfigurationError(f"scripted fixture not found: {path}")
        except yaml.YAMLError as e:
            raise ConfigurationError(f"scripted fixture {path}: {e}")
        try:
            jsonschema.validate(data, SCRIPT_SCHEMA)
        except jsonschema.ValidationError as e:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigurationError(f"scripted fixture {path}: {where}: {e.message}")

        edits = []
        for index, raw in enumerate(data["edits"]):
            trigger = raw.get("trigger", ())
            if isinstance(trigger, str):
                trigger = (trigger,)
            edits.append(ScriptedEdit(
                response=raw["response"],
                trigger=tuple(trigger),
                name=raw.get("name", f"edit-{index}"),
                fail=raw.get("fail", False),
            ))
        return cls(edits, seed=seed, selection=data.get("selection", "sequence"))

    def complete(self, prompt: str, rng=None) -> str:
        eligible = [edit for edit in self.edits if all(t in prompt for t in edit.trigger)]
        prompt_digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        with self._lock:
            call_index = self.calls
            self.calls += 1
            if not eligible:
                raise ProviderError(f"no scripted edit matches prompt (call {call_index})")

            if self.selection == "sequence":
                edit = eligible[call_index % len(eligible)]
            else:
                key = hashlib.sha256(f"{self.seed}:{call_index}:{prompt_digest}".encode("utf-8")).hexdigest()
                edit = eligible[int(key, 16) % len(eligible)]
            self.history.append(edit.name)

        if edit.fail:
            raise ProviderError(f"scripted failure {edit.name} (call {call_index})")
        return edit.response

    def state_dict(self) -> dict:
        return {"calls": self.calls, "history": list(self.history)}

    def load_state(self, state: dict):
        self.calls = state.get("calls", 0)
        self.history = list(state.get("history", []))


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    weight: int = 1
    api_key_env: str = "EVOLVE_LLM_API_KEY"
    temperature: float = 0.7
    max_tokens: int = 4096

    def __post_init__(self):
        if self.weight < 1:
            raise ConfigurationError(f"endpoint {self.model}: weight must be >= 1")


class ChatCompletionProvider(MutationProvider):
    """
    LLM ensemble over chat-completion endpoints.

    Endpoints are chosen by smooth weighted round-robin. Each call retries with
    a linear backoff before giving up with ProviderError.
    """

    def __init__(self, endpoints: Sequence[EndpointConfig], retries: int = 3, timeout: float = 60.0,
                 backoff: float = 2.0, system_prompt: str = "You are an expert performance engineer.",
                 sleep: Callable[[float], None] = time.sleep):
        if not endpoints:
            raise ConfigurationError("chat provider needs at least one endpoint")
        if retries < 1:
            raise ConfigurationError("provider retries must be >= 1")
        self.endpoints = list(endpoints)
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff
        self.system_prompt = system_prompt
        self._sleep = sleep
        self._current = [0] * len(self.endpoints)
        self._lock = threading.Lock()

        for endpoint in self.endpoints:
            if not os.environ.get(endpoint.api_key_env):
                logger.warning(f"{endpoint.api_key_env} not set - requests to {endpoint.base_url} are unauthenticated")

    def next_endpoint(self) -> EndpointConfig:
        with self._lock:
            total = sum(e.weight for e in self.endpoints)
            for i, endpoint in enumerate(self.endpoints):
                self._current[i] += endpoint.weight
            chosen = max(range(len(self.endpoints)), key=lambda i: (self._current[i], -i))
            self._current[chosen] -= total
            return self.endpoints[chosen]

    def complete(self, prompt: str, rng=None) -> str:
        endpoint = self.next_endpoint()
        url = f"{endpoint.base_url.rstrip('/')}/chat/completions"
        payload = {
            "model": endpoint.model,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": prompt},
            ],
            "temperature": endpoint.temperature,
            "max_tokens": endpoint.max_tokens,
        }
        if rng is not None:
            payload["seed"] = rng.randrange(2 ** 31)

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(endpoint.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"

        last_error = None
        for attempt in range(1, self.retries + 1):
            try:
                response = requests.post(url, json=payload, headers=headers, timeout=self.timeout)
                if response.status_code >= 400:
                    raise ProviderError(f"HTTP {response.status_code}: {response.text[:200]}")
                return response.json()["choices"][0]["message"]["content"]
            except requests.exceptions.RequestException as e:
                last_error = f"{type(e).__name__}: {e}"
            except (ProviderError, ValueError, KeyError, IndexError, TypeError) as e:
                last_error = str(e)
            logger.warning(f"Provider {endpoint.model} attempt {attempt}/{self.retries} failed: {last_error}")
            if attempt < self.retries:
                self._sleep(self.backoff * attempt)
        raise ProviderError(f"{endpoint.model} at {url} failed after {self.retries} attempts: {last_error}")

    def state_dict(self) -> dict:
        return {"current": list(self._current)}

    def load_state(self, state: dict):
        current = state.get("current")
        if current and len(current) == len(self.endpoints):
            self._current = list(current)


def propose(provider: MutationProvider, prompt: str, rng=None) -> MutationResponse:
    """
    Ask the provider for a modification and parse it.

    Raises:
        ProviderError: The provider failed after its retries
        ResponseParseError: The response could not be classified; carries the
            raw text for the refiner
    """
    return parse_response(provider.complete(prompt, rng))


def build_provider(section: dict, base_dir: Path, seed: int = 0) -> MutationProvider:
    """Provider from the `provider` config section."""
    kind = section.get("kind", "scripted")
    if kind == "scripted":
        fixture = Path(section["fixture"])
        if not fixture.is_absolute():
            fixture = base_dir / fixture
        return ScriptedProvider.from_file(fixture, seed=section.get("seed", seed))
    if kind == "chat":
        endpoints = [
            EndpointConfig(api_key_env=raw.get("api_key_env", section.get("api_key_env", "EVOLVE_LLM_API_KEY")),
                           **{k: v for k, v in raw.items() if k != "api_key_env"})
            for raw in section["endpoints"]
        ]
        return ChatCompletionProvider(
            endpoints,
            retries=section.get("retries", 3),
            timeout=section.get("timeout", 60.0),
            backoff=section.get("backoff", 2.0),
        )
    raise ConfigurationError(f"unknown provider kind {kind}")
