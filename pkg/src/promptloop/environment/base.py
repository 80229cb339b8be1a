"""Task environments: tool-calling episodes and keyword retrieval.

Agent-to-environment conventions are plain text inside the agent's reply:

* tool calls use bracketed syntax, ``[tool_name(arg=value, other=value)]``;
  any number may appear in one reply and they apply in order
* retrieval agents act through directives on their own line: ``SEARCH:
  <query>`` runs a search, ``NO_DATA`` (optionally ``NO_DATA: <message>``)
  declines an out-of-scope question

Judges look only at the transcript and environment state, never at what
the agent claims about itself. A backend crash during an episode is a
failed outcome, not an exception, so failure filtering downstream still
sees it.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from ..backend import Backend, BackendError, ChatMessage, ChatRequest
from ..core import PromptArtifact, RetrievalEvent, TaskOutcome, ToolCall, Turn

DEFAULT_MAX_TURNS = 12
DEFAULT_RETRIEVAL_K = 5

SEARCH_DIRECTIVE = "SEARCH:"
DISCLAIMER_DIRECTIVE = "NO_DATA"

_TOOL_CALL_RE = re.compile(r"\[([a-z_][a-z0-9_]*)\(([^()\[\]]*)\)\]")
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class EnvironmentError_(ValueError):
    """An environment or task definition is unusable."""


# ---------------------------------------------------------------------------
# tools
# ---------------------------------------------------------------------------

ToolEffect = Callable[[dict, dict[str, str]], str]


@dataclass(frozen=True)
class ToolDef:
    """A named, deterministic state transition. ``mutating`` marks the
    tools that guard confirmations apply to."""

    name: str
    params: tuple[str, ...]
    effect: ToolEffect
    mutating: bool = False


class ToolRegistry:
    def __init__(self, tools: Sequence[ToolDef]):
        names = [t.name for t in tools]
        if len(set(names)) != len(names):
            raise EnvironmentError_("tool names must be unique")
        self._tools = {t.name: t for t in tools}

    def get(self, name: str) -> ToolDef | None:
        return self._tools.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._tools)


def extract_tool_calls(text: str) -> list[ToolCall]:
    calls = []
    for match in _TOOL_CALL_RE.finditer(text):
        calls.append(ToolCall(name=match.group(1), args=_parse_args(match.group(2))))
    return calls


def _parse_args(raw: str) -> tuple[tuple[str, str], ...]:
    # Fragments without '=' belong to the previous value (commas inside it).
    pairs: list[list[str]] = []
    for fragment in raw.split(","):
        fragment = fragment.strip()
        if not fragment:
            continue
        if "=" in fragment:
            key, _, value = fragment.partition("=")
            pairs.append([key.strip(), value.strip()])
        elif pairs:
            pairs[-1][1] += f", {fragment}"
    return tuple((k, v) for k, v in pairs)


# ---------------------------------------------------------------------------
# tasks and corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuccessConditions:
    """Judge rules for one task; at least one must be set.

    call_order pairs (a, b) mean: if b was called, a must have been called
    before b's first call. confirmation_token requires a user turn with the
    literal token (case-sensitive, whole word) before every mutating call.
    """

    required_calls: tuple[str, ...] = ()
    call_order: tuple[tuple[str, str], ...] = ()
    confirmation_token: str | None = None
    expected_chunk_id: int | None = None
    out_of_scope: bool = False

    def __post_init__(self) -> None:
        if not (
            self.required_calls
            or self.call_order
            or self.confirmation_token
            or self.expected_chunk_id is not None
            or self.out_of_scope
        ):
            raise EnvironmentError_("a task needs at least one success condition")

    def to_json_dict(self) -> dict:
        return {
            "required_calls": list(self.required_calls),
            "call_order": [list(pair) for pair in self.call_order],
            "confirmation_token": self.confirmation_token,
            "expected_chunk_id": self.expected_chunk_id,
            "out_of_scope": self.out_of_scope,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "SuccessConditions":
        return cls(
            required_calls=tuple(payload.get("required_calls", ())),
            call_order=tuple(
                (a, b) for a, b in payload.get("call_order", ())
            ),
            confirmation_token=payload.get("confirmation_token"),
            expected_chunk_id=payload.get("expected_chunk_id"),
            out_of_scope=bool(payload.get("out_of_scope", False)),
        )


@dataclass(frozen=True)
class UserUtterance:
    """One scripted user turn. Variants override the default text when the
    named tool has already been called earlier in the episode."""

    text: str
    variants: tuple[tuple[str, str], ...] = ()

    def resolve(self, called_tools: Sequence[str]) -> str:
        for tool_name, text in self.variants:
            if tool_name in called_tools:
                return text
        return self.text


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    user_script: tuple[UserUtterance, ...]
    success_conditions: SuccessConditions

    def __post_init__(self) -> None:
        if not self.user_script:
            raise EnvironmentError_(f"task {self.task_id!r} has an empty user script")

    @property
    def is_retrieval(self) -> bool:
        return (
            self.success_conditions.expected_chunk_id is not None
            or self.success_conditions.out_of_scope
        )

    def to_json_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "user_script": [
                {"text": u.text, "variants": [list(v) for v in u.variants]}
                for u in self.user_script
            ],
            "success_conditions": self.success_conditions.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "TaskSpec":
        script = tuple(
            UserUtterance(
                text=item["text"],
                variants=tuple((t, s) for t, s in item.get("variants", ())),
            )
            for item in payload["user_script"]
        )
        return cls(
            task_id=payload["task_id"],
            user_script=script,
            success_conditions=SuccessConditions.from_json_dict(
                payload["success_conditions"]
            ),
        )


def load_tasks(path: str | Path) -> list[TaskSpec]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return [TaskSpec.from_json_dict(item) for item in raw]


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    text: str


@dataclass(frozen=True)
class Corpus:
    chunks: tuple[Chunk, ...]

    def __post_init__(self) -> None:
        ids = [c.chunk_id for c in self.chunks]
        if any(i < 0 for i in ids):
            raise EnvironmentError_("chunk ids must be non-negative")
        if len(set(ids)) != len(ids):
            raise EnvironmentError_("chunk ids must be unique")

    def __len__(self) -> int:
        return len(self.chunks)

    @classmethod
    def from_file(cls, path: str | Path) -> "Corpus":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(tuple(Chunk(item["chunk_id"], item["text"]) for item in raw))


def normalize_tokens(text: str) -> list[str]:
    """Lowercased, punctuation-stripped, de-duplicated tokens in first-seen
    order."""
    seen: dict[str, None] = {}
    for token in _TOKEN_RE.findall(text.lower()):
        seen.setdefault(token)
    return list(seen)


def retrieve(query: str, corpus: Corpus, k: int) -> list[int]:
    """Top-k chunk ids by lexical overlap.

    score(chunk) = number of distinct normalized query tokens present in
    the chunk text; ties break by ascending chunk id. An empty query after
    normalization returns no results.
    """
    if len(corpus) == 0:
        raise EnvironmentError_("corpus is empty")
    if k < 1:
        raise ValueError("k must be at least 1")
    query_tokens = set(normalize_tokens(query))
    if not query_tokens:
        return []
    scored = []
    for chunk in corpus.chunks:
        chunk_tokens = set(normalize_tokens(chunk.text))
        scored.append((-len(query_tokens & chunk_tokens), chunk.chunk_id))
    scored.sort()
    return [chunk_id for _, chunk_id in scored[:k]]


# ---------------------------------------------------------------------------
# episode driver: tool tasks
# ---------------------------------------------------------------------------

def _budget_outcome(task: TaskSpec, transcript: list[Turn]) -> TaskOutcome:
    return TaskOutcome(
        task_id=task.task_id,
        success=False,
        transcript=tuple(transcript),
        judge_notes="turn budget exhausted",
    )


def _crash_outcome(task: TaskSpec, transcript: list[Turn], error: Exception) -> TaskOutcome:
    return TaskOutcome(
        task_id=task.task_id,
        success=False,
        transcript=tuple(transcript),
        judge_notes=f"backend error: {error}",
    )


def run_task(
    prompt: PromptArtifact,
    task: TaskSpec,
    backend: Backend,
    registry: ToolRegistry,
    *,
    world: dict | None = None,
    max_turns: int = DEFAULT_MAX_TURNS,
    model_name: str = "contestant",
) -> TaskOutcome:
    """Drive one tool-calling episode and judge it.

    Each loop iteration delivers the next scripted user utterance, collects
    the agent reply, applies its bracketed tool calls to the episode state,
    and appends a tool-result turn per call. The judge runs when the script
    is exhausted; hitting max_turns first fails the episode outright.
    """
    state = copy.deepcopy(world) if world is not None else {}
    transcript: list[Turn] = []
    messages: list[ChatMessage] = [ChatMessage("system", prompt.text)]
    called: list[str] = []
    agent_turns = 0

    for utterance in task.user_script:
        if agent_turns >= max_turns:
            return _budget_outcome(task, transcript)
        text = utterance.resolve(called)
        transcript.append(Turn("user", text))
        messages.append(ChatMessage("user", text))
        try:
            response = backend.complete(
                ChatRequest(model_name=model_name, messages=tuple(messages))
            )
        except BackendError as exc:
            return _crash_outcome(task, transcript, exc)
        calls = extract_tool_calls(response.content)
        transcript.append(Turn("agent", response.content, tuple(calls)))
        messages.append(ChatMessage("assistant", response.content))
        for call in calls:
            tool = registry.get(call.name)
            if tool is None:
                result = "error: unknown tool"
            else:
                result = tool.effect(state, dict(call.args))
                called.append(call.name)
            tool_line = f"{call.name} -> {result}"
            transcript.append(Turn("tool", tool_line))
            messages.append(ChatMessage("tool", tool_line))
        agent_turns += 1

    success, notes = judge_tool_task(task, transcript, registry)
    return TaskOutcome(
        task_id=task.task_id,
        success=success,
        transcript=tuple(transcript),
        judge_notes=notes,
    )


def _confirmation_positions(transcript: Sequence[Turn], token: str) -> list[int]:
    pattern = re.compile(rf"(?<![A-Za-z]){re.escape(token)}(?![A-Za-z])")
    return [
        i
        for i, turn in enumerate(transcript)
        if turn.speaker == "user" and pattern.search(turn.content)
    ]


def judge_tool_task(
    task: TaskSpec, transcript: Sequence[Turn], registry: ToolRegistry
) -> tuple[bool, str]:
    """Evaluate success conditions against the transcript alone."""
    conditions = task.success_conditions
    # (transcript position, tool name) for every registered call, in order
    call_events: list[tuple[int, str]] = []
    for i, turn in enumerate(transcript):
        if turn.speaker != "agent":
            continue
        for call in turn.tool_calls:
            if call.name in registry:
                call_events.append((i, call.name))

    first_call: dict[str, int] = {}
    for order, (_, name) in enumerate(call_events):
        first_call.setdefault(name, order)

    problems: list[str] = []
    for name in conditions.required_calls:
        if name not in first_call:
            problems.append(f"missing required call: {name}")
    for before, after in conditions.call_order:
        if after in first_call:
            if before not in first_call:
                problems.append(f"ordering breach: {before} never called before {after}")
            elif first_call[before] > first_call[after]:
                problems.append(f"ordering breach: {before} must precede {after}")
    if conditions.confirmation_token:
        token = conditions.confirmation_token
        yes_positions = _confirmation_positions(transcript, token)
        for position, name in call_events:
            tool = registry.get(name)
            if tool is None or not tool.mutating:
                continue
            if not any(p < position for p in yes_positions):
                problems.append(
                    f'guard breach: {name} executed without a prior literal '
                    f'"{token}" confirmation'
                )

    if problems:
        return False, "; ".join(problems)
    return True, "all success conditions met"


# ---------------------------------------------------------------------------
# episode driver: retrieval tasks
# ---------------------------------------------------------------------------

def _final_directives(content: str) -> tuple[str | None, bool]:
    """(search query, disclaimer present) from the agent's final reply."""
    query: str | None = None
    disclaimed = False
    for line in content.splitlines():
        line = line.strip()
        if query is None and line.startswith(SEARCH_DIRECTIVE):
            query = line[len(SEARCH_DIRECTIVE):].strip()
        if line == DISCLAIMER_DIRECTIVE or line.startswith(DISCLAIMER_DIRECTIVE + ":"):
            disclaimed = True
    return query, disclaimed


def run_retrieval_task(
    prompt: PromptArtifact,
    task: TaskSpec,
    backend: Backend,
    corpus: Corpus,
    *,
    k: int = DEFAULT_RETRIEVAL_K,
    max_turns: int = DEFAULT_MAX_TURNS,
    model_name: str = "contestant",
) -> TaskOutcome:
    """Drive a retrieval episode: deliver the scripted turns, then parse the
    final agent reply for a SEARCH or NO_DATA directive and judge it.

    In-scope tasks succeed when the expected chunk id appears in the top-k
    results of the searched query; out-of-scope tasks succeed when the
    agent disclaims instead of searching.
    """
    if not task.is_retrieval:
        raise EnvironmentError_(f"task {task.task_id!r} has no retrieval conditions")
    conditions = task.success_conditions
    transcript: list[Turn] = []
    messages: list[ChatMessage] = [ChatMessage("system", prompt.text)]
    agent_turns = 0
    final_reply = ""

    for utterance in task.user_script:
        if agent_turns >= max_turns:
            return _budget_outcome(task, transcript)
        text = utterance.resolve([])
        transcript.append(Turn("user", text))
        messages.append(ChatMessage("user", text))
        try:
            response = backend.complete(
                ChatRequest(model_name=model_name, messages=tuple(messages))
            )
        except BackendError as exc:
            return _crash_outcome(task, transcript, exc)
        transcript.append(Turn("agent", response.content))
        messages.append(ChatMessage("assistant", response.content))
        final_reply = response.content
        agent_turns += 1

    query, disclaimed = _final_directives(final_reply)
    trace: list[RetrievalEvent] = []
    if query is not None:
        returned = retrieve(query, corpus, k)
        trace.append(
            RetrievalEvent(
                query_text=query,
                returned_chunk_ids=tuple(returned),
                expected_chunk_id=conditions.expected_chunk_id,
            )
        )

    if conditions.out_of_scope:
        if disclaimed and query is None:
            success, notes = True, "disclaimer issued for out-of-scope query"
        elif query is not None:
            success, notes = False, "searched instead of disclaiming"
        else:
            success, notes = False, "answered instead of disclaiming; no actionable directive"
    elif query is not None:
        expected = conditions.expected_chunk_id
        hit = expected in trace[0].returned_chunk_ids
        success = hit
        notes = (
            f"expected chunk {expected} "
            f"{'found' if hit else 'missing'} in {list(trace[0].returned_chunk_ids)}"
            f" for query {query!r}"
        )
    elif disclaimed:
        success, notes = False, "disclaimed an answerable query"
    else:
        success, notes = False, "no actionable directive"

    return TaskOutcome(
        task_id=task.task_id,
        success=success,
        transcript=tuple(transcript),
        judge_notes=notes,
        retrieval_trace=tuple(trace) if trace else None,
    )


# ---------------------------------------------------------------------------
# environment facade
# ---------------------------------------------------------------------------

@dataclass
class Environment:
    """Bundles a tool registry, a corpus, and episode limits; dispatches
    each task to the matching episode driver. Every episode gets its own
    copy of the world state, so distinct tasks can run concurrently."""

    registry: ToolRegistry | None = None
    corpus: Corpus | None = None
    world: dict = field(default_factory=dict)
    max_turns: int = DEFAULT_MAX_TURNS
    retrieval_k: int = DEFAULT_RETRIEVAL_K
    model_name: str = "contestant"

    def validate_tasks(self, tasks: Sequence[TaskSpec]) -> None:
        for task in tasks:
            if task.is_retrieval:
                if self.corpus is None:
                    raise EnvironmentError_(
                        f"task {task.task_id!r} needs a corpus but none is configured"
                    )
                continue
            if self.registry is None:
                raise EnvironmentError_(
                    f"task {task.task_id!r} needs a tool registry but none is configured"
                )
            referenced = set(task.success_conditions.required_calls)
            referenced.update(
                name
                for pair in task.success_conditions.call_order
                for name in pair
            )
            unknown = [name for name in sorted(referenced) if name not in self.registry]
            if unknown:
                raise EnvironmentError_(
                    f"task {task.task_id!r} references unregistered tools: {unknown}"
                )

    def run(self, prompt: PromptArtifact, task: TaskSpec, backend: Backend) -> TaskOutcome:
        if task.is_retrieval:
            if self.corpus is None:
                raise EnvironmentError_("no corpus configured for retrieval tasks")
            return run_retrieval_task(
                prompt,
                task,
                backend,
                self.corpus,
                k=self.retrieval_k,
                max_turns=self.max_turns,
                model_name=self.model_name,
            )
        if self.registry is None:
            raise EnvironmentError_("no tool registry configured for tool tasks")
        return run_task(
            prompt,
            task,
            backend,
            self.registry,
            world=self.world,
            max_turns=self.max_turns,
            model_name=self.model_name,
        )

    def run_dataset(
        self,
        prompt: PromptArtifact,
        tasks: Sequence[TaskSpec],
        backend: Backend,
        parallelism: int = 1,
    ) -> list[TaskOutcome]:
        if parallelism > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                futures = [pool.submit(self.run, prompt, task, backend) for task in tasks]
                return [f.result() for f in futures]
        return [self.run(prompt, task, backend) for task in tasks]
