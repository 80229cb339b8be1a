"""The three meta-agent roles: analyzer, optimizer, and coach.

Each role is a prompt template plus a structured-output contract over a
backend. Malformed output gets exactly one repair attempt (re-ask with the
bad reply in context); after that the caller-specific degradation applies:
skip the failure, abort the iteration, or fall back to the append policy.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .backend import (
    Backend,
    ChatMessage,
    ChatRequest,
    MalformedOutputError,
    SchemaViolationError,
    parse_structured,
)
from .core import FailureCase, PromptArtifact
from .protocol import (
    DecisionTreeProtocol,
    FailurePattern,
    PATTERN_CATEGORIES,
    ProtocolError,
    render_protocol,
    validate_protocol,
)

logger = logging.getLogger(__name__)

ROLES = ("analyzer", "optimizer", "coach")

REQUIRED_PLACEHOLDERS = {
    "analyzer": ("failure_log",),
    "optimizer": ("reports",),
    "coach": ("current_prompt", "protocol_text"),
}

EVOLVE_POLICIES = ("append", "rewrite")

PROTOCOL_SEPARATOR = "---"

REPAIR_INSTRUCTION = (
    "Your previous reply did not contain the required JSON payload. "
    "Reply again with only the JSON, no prose."
)

DEFAULT_MAX_LOG_CHARS = 8000


class MetaAgentError(RuntimeError):
    """A meta-agent role could not produce usable output."""


class AnalysisFailedError(MetaAgentError):
    def __init__(self, task_id: str, message: str):
        self.task_id = task_id
        super().__init__(f"analysis of {task_id!r} failed: {message}")


class OptimizerFailedError(MetaAgentError):
    pass


@dataclass(frozen=True)
class AnalysisReport:
    """Diagnosis and prescription for one failure."""

    task_id: str
    diagnosis: str
    prescription: str
    category_hint: str | None = None

    def __post_init__(self) -> None:
        if not self.diagnosis or not self.prescription:
            raise ValueError("diagnosis and prescription must both be non-empty")
        if self.category_hint is not None and self.category_hint not in PATTERN_CATEGORIES:
            raise ValueError(f"unknown category hint {self.category_hint!r}")

    def to_json_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "diagnosis": self.diagnosis,
            "prescription": self.prescription,
            "category_hint": self.category_hint,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "AnalysisReport":
        return cls(
            task_id=payload["task_id"],
            diagnosis=payload["diagnosis"],
            prescription=payload["prescription"],
            category_hint=payload.get("category_hint"),
        )


@dataclass(frozen=True)
class RolePrompt:
    role: str
    template: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        for placeholder in REQUIRED_PLACEHOLDERS[self.role]:
            if f"{{{placeholder}}}" not in self.template:
                raise ValueError(
                    f"{self.role} template is missing the {{{placeholder}}} placeholder"
                )

    def render(self, **values: str) -> str:
        # Only the declared placeholders are substituted, so literal braces
        # elsewhere in the template (JSON examples) survive untouched.
        def replace(match: re.Match) -> str:
            return values[match.group(1)]

        names = "|".join(re.escape(n) for n in values)
        return re.sub(rf"\{{({names})\}}", replace, self.template)

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.template.encode("utf-8")).hexdigest()[:12]


def load_default_template(role: str) -> RolePrompt:
    text = resources.files("promptloop").joinpath(f"templates/{role}.txt").read_text("utf-8")
    return RolePrompt(role=role, template=text)


def load_template_file(role: str, path: str | Path) -> RolePrompt:
    return RolePrompt(role=role, template=Path(path).read_text(encoding="utf-8"))


def truncate_log(text: str, max_chars: int = DEFAULT_MAX_LOG_CHARS) -> tuple[str, int]:
    """Cap a log at max_chars, keeping the head and tail halves.

    Returns the (possibly shortened) text and the number of omitted
    characters, which callers record in the run log."""
    if len(text) <= max_chars:
        return text, 0
    half = max_chars // 2
    omitted = len(text) - 2 * half
    marker = f"\n... [log truncated: {omitted} chars omitted] ...\n"
    return text[:half] + marker + text[-half:], omitted


def _ask_structured(
    backend: Backend,
    request: ChatRequest,
    schema: str,
    validate=None,
):
    """One call plus one repair attempt; raises MalformedOutputError when
    both replies are unusable."""
    response = backend.complete(request)
    try:
        payload = parse_structured(response, schema)
        if validate is not None:
            validate(payload)
        return payload
    except MalformedOutputError as first_error:
        logger.info("malformed %s output, re-asking once: %s", schema, first_error)
        repair = ChatRequest(
            model_name=request.model_name,
            messages=request.messages
            + (
                ChatMessage("assistant", response.content or "<empty>"),
                ChatMessage("user", REPAIR_INSTRUCTION),
            ),
            temperature=request.temperature,
            max_tokens=request.max_tokens,
            response_schema=request.response_schema,
        )
        second = backend.complete(repair)
        payload = parse_structured(second, schema)
        if validate is not None:
            validate(payload)
        return payload


def analyze_failure(
    failure: FailureCase,
    backend: Backend,
    role_prompt: RolePrompt,
    *,
    model_name: str = "meta",
    temperature: float = 0.0,
    max_tokens: int = 1024,
    max_log_chars: int = DEFAULT_MAX_LOG_CHARS,
    notes: list[str] | None = None,
) -> AnalysisReport:
    """Deep-dive diagnosis of one failure.

    The returned report always carries the failure's own task_id. Raises
    AnalysisFailedError after the single repair attempt; the loop records
    such failures as unanalyzed and moves on.
    """
    if not failure.raw_log:
        raise ValueError("failure has an empty raw_log")
    log_text, omitted = truncate_log(failure.raw_log, max_log_chars)
    if omitted and notes is not None:
        notes.append(f"truncated log of {failure.task_id}: {omitted} chars omitted")
    request = ChatRequest(
        model_name=model_name,
        messages=(ChatMessage("user", role_prompt.render(failure_log=log_text)),),
        temperature=temperature,
        max_tokens=max_tokens,
        response_schema="analysis_report",
    )
    try:
        payload = _ask_structured(backend, request, "analysis_report")
    except MalformedOutputError as exc:
        raise AnalysisFailedError(failure.task_id, str(exc)) from exc
    return AnalysisReport(
        task_id=failure.task_id,
        diagnosis=payload["diagnosis"],
        prescription=payload["prescription"],
        category_hint=payload.get("category_hint"),
    )


def aggregate_patterns(
    reports: list[AnalysisReport],
    backend: Backend,
    role_prompt: RolePrompt,
    *,
    model_name: str = "meta",
    temperature: float = 0.0,
    max_tokens: int = 2048,
) -> list[FailurePattern]:
    """Aggregate per-failure reports into recurring failure patterns.

    Every pattern must cite evidence task ids drawn from the input reports;
    anything else is a schema violation. Raises OptimizerFailedError after
    the single repair attempt, which the loop counts as a non-improving
    iteration.
    """
    if not reports:
        raise ValueError("aggregate_patterns needs at least one report")
    known_ids = {r.task_id for r in reports}
    reports_text = "\n".join(
        json.dumps(r.to_json_dict(), sort_keys=True, ensure_ascii=False)
        for r in reports
    )

    def check_evidence(payload) -> None:
        for item in payload:
            unknown = set(item.get("evidence_task_ids", ())) - known_ids
            if unknown:
                raise SchemaViolationError(
                    f"pattern {item.get('pattern_id')!r} cites unknown task ids: "
                    f"{sorted(unknown)}",
                    raw_content=json.dumps(payload),
                )

    request = ChatRequest(
        model_name=model_name,
        messages=(ChatMessage("user", role_prompt.render(reports=reports_text)),),
        temperature=temperature,
        max_tokens=max_tokens,
        response_schema="pattern_list",
    )
    try:
        payload = _ask_structured(backend, request, "pattern_list", validate=check_evidence)
    except MalformedOutputError as exc:
        raise OptimizerFailedError(f"optimizer failed: {exc}") from exc
    try:
        return [FailurePattern.from_json_dict(item) for item in payload]
    except ValueError as exc:
        raise OptimizerFailedError(f"optimizer failed: {exc}") from exc


def evolve_prompt(
    current: PromptArtifact,
    tree: DecisionTreeProtocol,
    policy: str = "append",
    *,
    coach_backend: Backend | None = None,
    coach_prompt: RolePrompt | None = None,
    model_name: str = "meta",
    temperature: float = 0.0,
    max_tokens: int = 4096,
    notes: list[str] | None = None,
) -> PromptArtifact:
    """Splice a protocol into the prompt, bumping the version.

    ``append`` is pure concatenation with a separator line; no backend is
    involved. ``rewrite`` asks the coach for an integrated rewrite and
    requires the rendered protocol verbatim in the result; if the coach
    drops or edits the protocol (or emits garbage twice), the evolution
    falls back to append and the fallback is recorded via notes.
    """
    if policy not in EVOLVE_POLICIES:
        raise ValueError(f"unknown evolve policy {policy!r}")
    violations = validate_protocol(tree)
    if violations:
        raise ProtocolError(
            "cannot evolve with an invalid protocol: "
            + "; ".join(str(v) for v in violations)
        )
    protocol_text = render_protocol(tree)

    new_text: str | None = None
    if policy == "rewrite":
        if coach_backend is None or coach_prompt is None:
            raise ValueError("rewrite policy needs a coach backend and template")
        request = ChatRequest(
            model_name=model_name,
            messages=(
                ChatMessage(
                    "user",
                    coach_prompt.render(
                        current_prompt=current.text, protocol_text=protocol_text
                    ),
                ),
            ),
            temperature=temperature,
            max_tokens=max_tokens,
            response_schema="evolved_prompt",
        )
        try:
            payload = _ask_structured(coach_backend, request, "evolved_prompt")
            candidate_text = payload["text"]
            if protocol_text.rstrip("\n") not in candidate_text:
                raise MalformedOutputError(
                    "coach dropped protocol: rewrite does not contain the "
                    "rendered protocol verbatim",
                    raw_content=candidate_text,
                )
            new_text = candidate_text
        except MalformedOutputError as exc:
            message = f"rewrite failed ({exc}); falling back to append"
            logger.warning(message)
            if notes is not None:
                notes.append(message)

    if new_text is None:
        new_text = (
            current.text.rstrip("\n")
            + f"\n\n{PROTOCOL_SEPARATOR}\n\n"
            + protocol_text
        )

    return PromptArtifact(
        text=new_text,
        version=current.version + 1,
        parent_version=current.version,
        embedded_protocol_id=tree.protocol_id,
    )
