"""Shared domain types plus the failure-filtering and metric primitives.

Rates are kept as exact fractions internally and converted to floats only at
serialization and display boundaries, so acceptance comparisons never hinge
on floating-point accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence


class NoTasksError(ValueError):
    """A rate was requested over zero tasks."""


class UnlabeledEventError(ValueError):
    """A retrieval event is missing its expected chunk id."""


@dataclass(frozen=True)
class ToolCall:
    name: str
    args: tuple[tuple[str, str], ...] = ()

    def render(self) -> str:
        inner = ", ".join(f"{k}={v}" for k, v in self.args)
        return f"{self.name}({inner})"


@dataclass(frozen=True)
class Turn:
    """One transcript entry. speaker is 'user', 'agent' or 'tool'."""

    speaker: str
    content: str
    tool_calls: tuple[ToolCall, ...] = ()

    def __post_init__(self) -> None:
        if self.speaker not in ("user", "agent", "tool"):
            raise ValueError(f"unknown speaker {self.speaker!r}")


@dataclass(frozen=True)
class PromptArtifact:
    """A versioned system prompt with provenance.

    Version 0 is the seed prompt; every later version records the version it
    was evolved from and the id of the protocol spliced into it.
    """

    text: str
    version: int = 0
    parent_version: int | None = None
    embedded_protocol_id: str | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("prompt text must be non-empty")
        if self.version < 0:
            raise ValueError("prompt version must be non-negative")
        if self.version == 0 and self.parent_version is not None:
            raise ValueError("version 0 cannot have a parent")
        if self.version > 0 and (
            self.parent_version is None
            or not 0 <= self.parent_version < self.version
        ):
            raise ValueError("versions > 0 need exactly one parent with a smaller version")


@dataclass(frozen=True)
class RetrievalEvent:
    query_text: str
    returned_chunk_ids: tuple[int, ...]
    expected_chunk_id: int | None = None

    def __post_init__(self) -> None:
        if len(set(self.returned_chunk_ids)) != len(self.returned_chunk_ids):
            raise ValueError("returned_chunk_ids must not contain duplicates")

    @property
    def hit(self) -> bool:
        return (
            self.expected_chunk_id is not None
            and self.expected_chunk_id in self.returned_chunk_ids
        )


@dataclass(frozen=True)
class TaskOutcome:
    """The environment judge's verdict on one executed task.

    success comes from the judge alone; nothing the agent says about its own
    performance is consulted.
    """

    task_id: str
    success: bool
    transcript: tuple[Turn, ...]
    judge_notes: str = ""
    retrieval_trace: tuple[RetrievalEvent, ...] | None = None

    def __post_init__(self) -> None:
        if not self.transcript:
            raise ValueError("an executed task must have a non-empty transcript")


@dataclass(frozen=True)
class FailureCase:
    task_id: str
    outcome: TaskOutcome
    raw_log: str

    def __post_init__(self) -> None:
        if self.outcome.success:
            raise ValueError("a FailureCase must wrap a failed outcome")


def render_raw_log(outcome: TaskOutcome) -> str:
    """Deterministic plain-text log of a task: numbered turns, tool-call
    lines, and the judge verdict at the end."""
    lines: list[str] = []
    for i, turn in enumerate(outcome.transcript, 1):
        lines.append(f"turn {i} [{turn.speaker}]: {turn.content}")
        for call in turn.tool_calls:
            lines.append(f"  tool: {call.render()}")
    lines.append(f"verdict: {'success' if outcome.success else 'failure'}")
    if outcome.judge_notes:
        lines.append(f"judge: {outcome.judge_notes}")
    return "\n".join(lines) + "\n"


def filter_failures(outcomes: Sequence[TaskOutcome]) -> list[FailureCase]:
    """Keep only failed outcomes, in input order, wrapped as FailureCase.

    Successful outcomes are discarded entirely; an all-success batch yields
    an empty list.
    """
    return [
        FailureCase(task_id=o.task_id, outcome=o, raw_log=render_raw_log(o))
        for o in outcomes
        if not o.success
    ]


def compute_success_rate(outcomes: Sequence[TaskOutcome]) -> Fraction:
    """Exact successes/total over a completed batch."""
    if not outcomes:
        raise NoTasksError("no tasks evaluated")
    successes = sum(1 for o in outcomes if o.success)
    return Fraction(successes, len(outcomes))


def compute_search_hit_rate(events: Sequence[RetrievalEvent]) -> Fraction:
    """Exact fraction of retrieval events whose returned list contains the
    expected chunk id. Every event must carry an expected id."""
    if not events:
        raise NoTasksError("no retrieval events evaluated")
    for e in events:
        if e.expected_chunk_id is None:
            raise UnlabeledEventError(f"unlabeled retrieval event: {e.query_text!r}")
    hits = sum(1 for e in events if e.expected_chunk_id in e.returned_chunk_ids)
    return Fraction(hits, len(events))


def _fraction_to_pair(value: Fraction | None) -> list[int] | None:
    if value is None:
        return None
    return [value.numerator, value.denominator]


def _pair_to_fraction(pair: Sequence[int] | None) -> Fraction | None:
    if pair is None:
        return None
    return Fraction(pair[0], pair[1])


@dataclass(frozen=True)
class EvalSummary:
    """Aggregate metrics for one dataset pass."""

    success_rate: Fraction
    search_hit_rate: Fraction | None
    n_tasks: int
    per_task: tuple[tuple[str, bool], ...]

    def __post_init__(self) -> None:
        if self.n_tasks <= 0:
            raise NoTasksError("no tasks evaluated")
        if len(self.per_task) != self.n_tasks:
            raise ValueError("per_task length must equal n_tasks")
        successes = sum(1 for _, ok in self.per_task if ok)
        if self.success_rate != Fraction(successes, self.n_tasks):
            raise ValueError("success_rate must equal successes/n_tasks exactly")

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[TaskOutcome]) -> "EvalSummary":
        if not outcomes:
            raise NoTasksError("no tasks evaluated")
        labeled = [
            e
            for o in outcomes
            for e in (o.retrieval_trace or ())
            if e.expected_chunk_id is not None
        ]
        return cls(
            success_rate=compute_success_rate(outcomes),
            search_hit_rate=compute_search_hit_rate(labeled) if labeled else None,
            n_tasks=len(outcomes),
            per_task=tuple((o.task_id, o.success) for o in outcomes),
        )

    def to_json_dict(self) -> dict:
        return {
            "success_rate": float(self.success_rate),
            "success_rate_exact": _fraction_to_pair(self.success_rate),
            "search_hit_rate": (
                None if self.search_hit_rate is None else float(self.search_hit_rate)
            ),
            "search_hit_rate_exact": _fraction_to_pair(self.search_hit_rate),
            "n_tasks": self.n_tasks,
            "per_task": [[task_id, ok] for task_id, ok in self.per_task],
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "EvalSummary":
        return cls(
            success_rate=_pair_to_fraction(payload["success_rate_exact"]),
            search_hit_rate=_pair_to_fraction(payload.get("search_hit_rate_exact")),
            n_tasks=payload["n_tasks"],
            per_task=tuple((t, bool(ok)) for t, ok in payload["per_task"]),
        )

    def describe(self) -> str:
        hit = "-" if self.search_hit_rate is None else f"{float(self.search_hit_rate):.3f}"
        return (
            f"success_rate={float(self.success_rate):.3f} "
            f"search_hit_rate={hit} n_tasks={self.n_tasks}"
        )
