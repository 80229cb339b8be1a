"""The optimization loop: execute, filter, analyze, synthesize, evolve,
accept only strict improvements, stop on patience or budget.

Each iteration is persisted before the next begins, in a fixed file order
inside ``runs/<run_id>/iter_<t>/``: eval_in.json, failures.jsonl,
reports.jsonl, patterns.json, protocol.txt, candidate_prompt.txt,
eval_candidate.json, decision.json. The directory is append-only and, with
scripted backends, byte-identical across reruns; the only timestamp lives
in config.json under ``created_at``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

from .agents import (
    AnalysisReport,
    AnalysisFailedError,
    OptimizerFailedError,
    RolePrompt,
    aggregate_patterns,
    analyze_failure,
    evolve_prompt,
    load_default_template,
)
from .backend import Backend, BackendError
from .core import (
    EvalSummary,
    FailureCase,
    PromptArtifact,
    TaskOutcome,
    filter_failures,
)
from .environment.base import Environment, TaskSpec
from .protocol import FailurePattern, build_decision_tree, render_protocol

logger = logging.getLogger(__name__)

STOP_REASONS = ("no_failures", "patience_exhausted", "budget_exhausted")

EVOLVE_POLICIES = ("append", "rewrite")


class LoopError(RuntimeError):
    pass


class RunNotFoundError(LoopError):
    pass


class CorruptRunError(LoopError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    t_max: int
    k_patience: int
    evolve_policy: str = "append"
    parallelism: int = 1
    max_failures_analyzed: int = 16

    def __post_init__(self) -> None:
        if self.t_max < 1:
            raise ValueError("t_max must be positive")
        if self.k_patience < 1:
            raise ValueError("k_patience must be positive")
        if self.k_patience > self.t_max:
            raise ValueError("k_patience must not exceed t_max")
        if self.evolve_policy not in EVOLVE_POLICIES:
            raise ValueError(f"unknown evolve policy {self.evolve_policy!r}")
        if self.parallelism < 1:
            raise ValueError("parallelism must be positive")
        if self.max_failures_analyzed < 1:
            raise ValueError("max_failures_analyzed must be positive")

    def to_json_dict(self) -> dict:
        return {
            "t_max": self.t_max,
            "k_patience": self.k_patience,
            "evolve_policy": self.evolve_policy,
            "parallelism": self.parallelism,
            "max_failures_analyzed": self.max_failures_analyzed,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "LoopConfig":
        return cls(
            t_max=payload["t_max"],
            k_patience=payload["k_patience"],
            evolve_policy=payload.get("evolve_policy", "append"),
            parallelism=payload.get("parallelism", 1),
            max_failures_analyzed=payload.get("max_failures_analyzed", 16),
        )


@dataclass(frozen=True)
class IterationRecord:
    """Everything one iteration did and decided.

    A terminal no-failures iteration carries no candidate and leaves the
    patience counter unchanged; every other non-accepted iteration (reject
    or optimizer abort) increments it.
    """

    t: int
    prompt_version_in: int
    eval_in: EvalSummary
    n_failures: int
    reports: tuple[AnalysisReport, ...] = ()
    patterns: tuple[FailurePattern, ...] = ()
    protocol_id: str | None = None
    candidate_version: int | None = None
    eval_candidate: EvalSummary | None = None
    accepted: bool = False
    patience_after: int = 0
    eval_reused: bool = False
    abort_reason: str | None = None
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.accepted:
            if self.eval_candidate is None:
                raise ValueError("an accepted iteration must carry a candidate eval")
            if not self.eval_candidate.success_rate > self.eval_in.success_rate:
                raise ValueError("accepted requires strictly improved success_rate")
            if self.patience_after != 0:
                raise ValueError("acceptance resets patience to zero")


@dataclass(frozen=True)
class OptimizationRun:
    run_id: str
    config: LoopConfig
    iterations: tuple[IterationRecord, ...]
    final_prompt_version: int
    stop_reason: str

    def __post_init__(self) -> None:
        if self.stop_reason not in STOP_REASONS:
            raise ValueError(f"unknown stop reason {self.stop_reason!r}")
        if len(self.iterations) > self.config.t_max:
            raise ValueError("iteration count exceeds t_max")
        if self.stop_reason == "patience_exhausted":
            tail = self.iterations[-self.config.k_patience:]
            if len(tail) < self.config.k_patience or any(r.accepted for r in tail):
                raise ValueError(
                    "patience_exhausted requires the last k_patience "
                    "iterations to be rejections"
                )


def accept_candidate(eval_candidate: EvalSummary, eval_current: EvalSummary) -> bool:
    """Strict-improvement acceptance; ties and regressions reject."""
    if eval_candidate.n_tasks != eval_current.n_tasks:
        raise ValueError(
            "incomparable evaluations: candidate saw "
            f"{eval_candidate.n_tasks} tasks, current saw {eval_current.n_tasks}"
        )
    return eval_candidate.success_rate > eval_current.success_rate


def select_failures(failures: list[FailureCase], cap: int) -> list[FailureCase]:
    """All failures when under the cap, else a uniform stride across the
    ordered list for coverage."""
    if len(failures) <= cap:
        return failures
    return [failures[(i * len(failures)) // cap] for i in range(cap)]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _dump_json(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _outcome_to_dict(outcome: TaskOutcome) -> dict:
    return {
        "task_id": outcome.task_id,
        "success": outcome.success,
        "judge_notes": outcome.judge_notes,
        "transcript": [
            {
                "speaker": turn.speaker,
                "content": turn.content,
                "tool_calls": [
                    {"name": c.name, "args": [list(a) for a in c.args]}
                    for c in turn.tool_calls
                ],
            }
            for turn in outcome.transcript
        ],
        "retrieval_trace": None
        if outcome.retrieval_trace is None
        else [
            {
                "query_text": e.query_text,
                "returned_chunk_ids": list(e.returned_chunk_ids),
                "expected_chunk_id": e.expected_chunk_id,
            }
            for e in outcome.retrieval_trace
        ],
    }


class RunStore:
    """Append-only run directory under ``<root>/<run_id>/``."""

    def __init__(self, root: str | Path, run_id: str):
        self.run_id = run_id
        self.run_dir = Path(root) / run_id
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def iter_dir(self, t: int) -> Path:
        path = self.run_dir / f"iter_{t}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _write(self, path: Path, text: str) -> None:
        path.write_text(text, encoding="utf-8")

    def write_config(self, config: LoopConfig, extra: dict | None = None) -> None:
        payload = {
            "run_id": self.run_id,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "loop": config.to_json_dict(),
        }
        if extra:
            payload.update(extra)
        self._write(self.run_dir / "config.json", _dump_json(payload))

    def write_initial_prompt(self, prompt: PromptArtifact) -> None:
        self._write(self.run_dir / "initial_prompt.txt", prompt.text)

    def write_eval_in(self, t: int, summary: EvalSummary) -> None:
        self._write(self.iter_dir(t) / "eval_in.json", _dump_json(summary.to_json_dict()))

    def write_failures(self, t: int, failures: Sequence[FailureCase]) -> None:
        lines = [
            json.dumps(
                {
                    "task_id": f.task_id,
                    "raw_log": f.raw_log,
                    "outcome": _outcome_to_dict(f.outcome),
                },
                sort_keys=True,
                ensure_ascii=False,
            )
            for f in failures
        ]
        self._write(self.iter_dir(t) / "failures.jsonl", "".join(line + "\n" for line in lines))

    def write_reports(self, t: int, reports: Sequence[AnalysisReport]) -> None:
        lines = [
            json.dumps(r.to_json_dict(), sort_keys=True, ensure_ascii=False)
            for r in reports
        ]
        self._write(self.iter_dir(t) / "reports.jsonl", "".join(line + "\n" for line in lines))

    def write_patterns(self, t: int, patterns: Sequence[FailurePattern]) -> None:
        self._write(
            self.iter_dir(t) / "patterns.json",
            _dump_json([p.to_json_dict() for p in patterns]),
        )

    def write_protocol(self, t: int, protocol_text: str) -> None:
        self._write(self.iter_dir(t) / "protocol.txt", protocol_text)

    def write_candidate_prompt(self, t: int, prompt: PromptArtifact) -> None:
        self._write(self.iter_dir(t) / "candidate_prompt.txt", prompt.text)

    def write_eval_candidate(self, t: int, summary: EvalSummary) -> None:
        self._write(
            self.iter_dir(t) / "eval_candidate.json", _dump_json(summary.to_json_dict())
        )

    def write_decision(self, t: int, record: IterationRecord) -> None:
        payload = {
            "t": record.t,
            "prompt_version_in": record.prompt_version_in,
            "n_failures": record.n_failures,
            "n_reports": len(record.reports),
            "n_patterns": len(record.patterns),
            "protocol_id": record.protocol_id,
            "candidate_version": record.candidate_version,
            "accepted": record.accepted,
            "patience_after": record.patience_after,
            "eval_reused": record.eval_reused,
            "abort_reason": record.abort_reason,
            "notes": list(record.notes),
        }
        self._write(self.iter_dir(t) / "decision.json", _dump_json(payload))

    def write_result(self, run: OptimizationRun) -> None:
        payload = {
            "run_id": run.run_id,
            "stop_reason": run.stop_reason,
            "final_prompt_version": run.final_prompt_version,
            "n_iterations": len(run.iterations),
        }
        self._write(self.run_dir / "run.json", _dump_json(payload))

    # -- reading -----------------------------------------------------------

    def exists(self) -> bool:
        return (self.run_dir / "config.json").is_file()

    def read_config(self) -> dict:
        return json.loads((self.run_dir / "config.json").read_text(encoding="utf-8"))

    def read_result(self) -> dict | None:
        path = self.run_dir / "run.json"
        if not path.is_file():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def read_initial_prompt(self) -> PromptArtifact:
        text = (self.run_dir / "initial_prompt.txt").read_text(encoding="utf-8")
        return PromptArtifact(text=text, version=0)

    def completed_iterations(self) -> list[int]:
        ts = []
        for path in self.run_dir.glob("iter_*"):
            if (path / "decision.json").is_file():
                try:
                    ts.append(int(path.name.split("_", 1)[1]))
                except ValueError:
                    continue
        return sorted(ts)

    def read_iteration(self, t: int) -> IterationRecord:
        iter_dir = self.run_dir / f"iter_{t}"
        try:
            decision = json.loads((iter_dir / "decision.json").read_text(encoding="utf-8"))
            eval_in = EvalSummary.from_json_dict(
                json.loads((iter_dir / "eval_in.json").read_text(encoding="utf-8"))
            )
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise CorruptRunError(f"iteration record {t} is corrupt: {exc}") from exc
        reports: tuple[AnalysisReport, ...] = ()
        reports_path = iter_dir / "reports.jsonl"
        if reports_path.is_file():
            reports = tuple(
                AnalysisReport.from_json_dict(json.loads(line))
                for line in reports_path.read_text(encoding="utf-8").splitlines()
                if line.strip()
            )
        patterns: tuple[FailurePattern, ...] = ()
        patterns_path = iter_dir / "patterns.json"
        if patterns_path.is_file():
            patterns = tuple(
                FailurePattern.from_json_dict(item)
                for item in json.loads(patterns_path.read_text(encoding="utf-8"))
            )
        eval_candidate = None
        candidate_path = iter_dir / "eval_candidate.json"
        if candidate_path.is_file():
            eval_candidate = EvalSummary.from_json_dict(
                json.loads(candidate_path.read_text(encoding="utf-8"))
            )
        try:
            return IterationRecord(
                t=decision["t"],
                prompt_version_in=decision["prompt_version_in"],
                eval_in=eval_in,
                n_failures=decision["n_failures"],
                reports=reports,
                patterns=patterns,
                protocol_id=decision.get("protocol_id"),
                candidate_version=decision.get("candidate_version"),
                eval_candidate=eval_candidate,
                accepted=decision["accepted"],
                patience_after=decision["patience_after"],
                eval_reused=decision.get("eval_reused", False),
                abort_reason=decision.get("abort_reason"),
                notes=tuple(decision.get("notes", ())),
            )
        except (KeyError, ValueError) as exc:
            raise CorruptRunError(f"iteration record {t} is corrupt: {exc}") from exc

    def read_candidate_prompt(self, t: int, record: IterationRecord) -> PromptArtifact:
        path = self.run_dir / f"iter_{t}" / "candidate_prompt.txt"
        prompt_version_in = record.prompt_version_in
        return PromptArtifact(
            text=path.read_text(encoding="utf-8"),
            version=record.candidate_version,
            parent_version=prompt_version_in,
            embedded_protocol_id=record.protocol_id,
        )

    def discard_incomplete_iterations(self) -> None:
        """Drop iteration directories that never reached decision.json, so a
        resumed run re-executes them from scratch."""
        for path in self.run_dir.glob("iter_*"):
            if not (path / "decision.json").is_file():
                for child in sorted(path.glob("**/*"), reverse=True):
                    child.unlink()
                path.rmdir()


# ---------------------------------------------------------------------------
# role wiring
# ---------------------------------------------------------------------------

@dataclass
class RoleRuntime:
    backend: Backend
    model_name: str = "meta"
    template: RolePrompt | None = None


@dataclass
class LoopRuntime:
    """Mutable loop state threaded through fresh runs and resumes."""

    prompt: PromptArtifact
    t: int = 0
    patience: int = 0
    iterations: list[IterationRecord] = field(default_factory=list)
    cached_outcomes: list[TaskOutcome] | None = None
    cached_version: int = -1


def _role(backends: Mapping[str, Backend | RoleRuntime], name: str) -> RoleRuntime:
    runtime = backends.get(name)
    if runtime is None:
        raise LoopError(f"no backend configured for role {name!r}")
    if isinstance(runtime, RoleRuntime):
        if runtime.template is None and name in ("analyzer", "optimizer", "coach"):
            runtime.template = load_default_template(name)
        return runtime
    runtime = RoleRuntime(backend=runtime)
    if name in ("analyzer", "optimizer", "coach"):
        runtime.template = load_default_template(name)
    return runtime


def _analyze_failures(
    failures: list[FailureCase],
    analyzer: RoleRuntime,
    parallelism: int,
    notes: list[str],
) -> list[AnalysisReport]:
    """Analyzer fan-out; unanalyzable failures are skipped and noted."""

    def analyze_one(failure: FailureCase) -> AnalysisReport | None:
        try:
            return analyze_failure(
                failure,
                analyzer.backend,
                analyzer.template,
                model_name=analyzer.model_name,
                notes=notes,
            )
        except (AnalysisFailedError, BackendError) as exc:
            notes.append(f"unanalyzed failure {failure.task_id}: {exc}")
            logger.warning("skipping unanalyzed failure %s: %s", failure.task_id, exc)
            return None

    if parallelism > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            maybe_reports = list(pool.map(analyze_one, failures))
    else:
        maybe_reports = [analyze_one(f) for f in failures]
    return [r for r in maybe_reports if r is not None]


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def run_optimization(
    initial_prompt: PromptArtifact,
    dataset: Sequence[TaskSpec],
    env: Environment,
    backends: Mapping[str, Backend | RoleRuntime],
    config: LoopConfig,
    *,
    store: RunStore | None = None,
    run_id: str = "run",
    extra_config: dict | None = None,
) -> OptimizationRun:
    """Run the full optimization loop from a fresh start.

    ``backends`` maps the roles contestant, analyzer, optimizer, and coach
    (coach is only needed under the rewrite policy) to Backend instances or
    RoleRuntime wrappers. When ``store`` is given, every iteration is
    persisted before the next begins.
    """
    if not dataset:
        raise LoopError("dataset must be non-empty")
    env.validate_tasks(dataset)
    if store is not None:
        run_id = store.run_id
        extras = _config_extras(backends, dataset)
        if extra_config:
            extras.update(extra_config)
        store.write_config(config, extra=extras)
        store.write_initial_prompt(initial_prompt)

    state = LoopRuntime(prompt=initial_prompt)
    return _drive_loop(state, dataset, env, backends, config, store, run_id)


def _config_extras(backends, dataset) -> dict:
    extras: dict = {"n_tasks": len(dataset)}
    template_hashes = {}
    for name in ("analyzer", "optimizer", "coach"):
        runtime = backends.get(name)
        if isinstance(runtime, RoleRuntime) and runtime.template is not None:
            template_hashes[name] = runtime.template.content_hash
        else:
            template_hashes[name] = load_default_template(name).content_hash
    extras["template_hashes"] = template_hashes
    return extras


def _drive_loop(
    state: LoopRuntime,
    dataset: Sequence[TaskSpec],
    env: Environment,
    backends: Mapping[str, Backend | RoleRuntime],
    config: LoopConfig,
    store: RunStore | None,
    run_id: str,
) -> OptimizationRun:
    contestant = _role(backends, "contestant")
    analyzer = _role(backends, "analyzer")
    optimizer = _role(backends, "optimizer")
    coach = (
        _role(backends, "coach") if config.evolve_policy == "rewrite" else None
    )

    stop_reason = "budget_exhausted"
    while state.t < config.t_max:
        state.t += 1
        t = state.t
        notes: list[str] = []

        # execution phase; reuse outcomes when this exact prompt version was
        # already evaluated (initial run or accepted/rejected candidate)
        eval_reused = (
            state.cached_outcomes is not None
            and state.cached_version == state.prompt.version
        )
        if eval_reused:
            outcomes = state.cached_outcomes
        else:
            outcomes = env.run_dataset(
                state.prompt, dataset, contestant.backend, config.parallelism
            )
            state.cached_outcomes = outcomes
            state.cached_version = state.prompt.version
        eval_in = EvalSummary.from_outcomes(outcomes)
        if store is not None:
            store.write_eval_in(t, eval_in)

        failures = filter_failures(outcomes)
        if store is not None:
            store.write_failures(t, failures)

        if not failures:
            record = IterationRecord(
                t=t,
                prompt_version_in=state.prompt.version,
                eval_in=eval_in,
                n_failures=0,
                accepted=False,
                patience_after=state.patience,
                eval_reused=eval_reused,
                notes=("no failures; loop stops",),
            )
            state.iterations.append(record)
            if store is not None:
                store.write_decision(t, record)
            stop_reason = "no_failures"
            break

        selected = select_failures(failures, config.max_failures_analyzed)
        if len(selected) < len(failures):
            notes.append(
                f"analyzed {len(selected)} of {len(failures)} failures (uniform stride)"
            )
        reports = _analyze_failures(selected, analyzer, config.parallelism, notes)
        if store is not None:
            store.write_reports(t, reports)

        abort_reason: str | None = None
        patterns: list[FailurePattern] = []
        protocol_id: str | None = None
        candidate = None
        eval_candidate: EvalSummary | None = None
        accepted = False

        if not reports:
            abort_reason = "no failures could be analyzed"
        else:
            try:
                patterns = aggregate_patterns(
                    reports,
                    optimizer.backend,
                    optimizer.template,
                    model_name=optimizer.model_name,
                )
            except (OptimizerFailedError, BackendError) as exc:
                abort_reason = f"optimizer failed: {exc}"

        if abort_reason is None:
            if store is not None:
                store.write_patterns(t, patterns)
            tree = build_decision_tree(patterns)
            protocol_id = tree.protocol_id
            if store is not None:
                store.write_protocol(t, render_protocol(tree))
            candidate = evolve_prompt(
                state.prompt,
                tree,
                config.evolve_policy,
                coach_backend=coach.backend if coach else None,
                coach_prompt=coach.template if coach else None,
                model_name=coach.model_name if coach else "meta",
                notes=notes,
            )
            if store is not None:
                store.write_candidate_prompt(t, candidate)
            candidate_outcomes = env.run_dataset(
                candidate, dataset, contestant.backend, config.parallelism
            )
            eval_candidate = EvalSummary.from_outcomes(candidate_outcomes)
            if store is not None:
                store.write_eval_candidate(t, eval_candidate)
            accepted = accept_candidate(eval_candidate, eval_in)
            if accepted:
                state.prompt = candidate
                state.cached_outcomes = candidate_outcomes
                state.cached_version = candidate.version
                state.patience = 0
            else:
                state.patience += 1
        else:
            logger.warning("iteration %d aborted: %s", t, abort_reason)
            notes.append(abort_reason)
            state.patience += 1

        record = IterationRecord(
            t=t,
            prompt_version_in=(
                candidate.parent_version if candidate is not None else state.prompt.version
            ),
            eval_in=eval_in,
            n_failures=len(failures),
            reports=tuple(reports),
            patterns=tuple(patterns),
            protocol_id=protocol_id,
            candidate_version=candidate.version if candidate is not None else None,
            eval_candidate=eval_candidate,
            accepted=accepted,
            patience_after=state.patience,
            eval_reused=eval_reused,
            abort_reason=abort_reason,
            notes=tuple(notes),
        )
        state.iterations.append(record)
        if store is not None:
            store.write_decision(t, record)

        if state.patience >= config.k_patience:
            stop_reason = "patience_exhausted"
            break

    run = OptimizationRun(
        run_id=run_id,
        config=config,
        iterations=tuple(state.iterations),
        final_prompt_version=state.prompt.version,
        stop_reason=stop_reason,
    )
    if store is not None:
        store.write_result(run)
    return run


def resume_run(
    run_id: str,
    dataset: Sequence[TaskSpec],
    env: Environment,
    backends: Mapping[str, Backend | RoleRuntime],
    *,
    store_root: str | Path,
) -> OptimizationRun:
    """Continue a persisted run from its last complete iteration.

    Completed iterations are never re-executed; an interrupted partial
    iteration directory is discarded and redone. Resuming a terminal run
    returns it unchanged (idempotent).
    """
    store = RunStore(store_root, run_id)
    if not store.exists():
        raise RunNotFoundError(f"no persisted run {run_id!r} under {store_root}")
    config_payload = store.read_config()
    config = LoopConfig.from_json_dict(config_payload["loop"])

    records = [store.read_iteration(t) for t in store.completed_iterations()]
    result = store.read_result()

    prompt = store.read_initial_prompt()
    for record in records:
        if record.accepted:
            prompt = store.read_candidate_prompt(record.t, record)

    if result is not None and result.get("stop_reason"):
        return OptimizationRun(
            run_id=run_id,
            config=config,
            iterations=tuple(records),
            final_prompt_version=result["final_prompt_version"],
            stop_reason=result["stop_reason"],
        )

    terminal = records and (
        records[-1].n_failures == 0
        or records[-1].patience_after >= config.k_patience
        or len(records) >= config.t_max
    )
    if terminal:
        last = records[-1]
        if last.n_failures == 0:
            stop_reason = "no_failures"
        elif last.patience_after >= config.k_patience:
            stop_reason = "patience_exhausted"
        else:
            stop_reason = "budget_exhausted"
        run = OptimizationRun(
            run_id=run_id,
            config=config,
            iterations=tuple(records),
            final_prompt_version=prompt.version,
            stop_reason=stop_reason,
        )
        store.write_result(run)
        return run

    store.discard_incomplete_iterations()
    if not dataset:
        raise LoopError("dataset must be non-empty")
    env.validate_tasks(dataset)
    state = LoopRuntime(
        prompt=prompt,
        t=records[-1].t if records else 0,
        patience=records[-1].patience_after if records else 0,
        iterations=list(records),
    )
    return _drive_loop(state, dataset, env, backends, config, store, run_id)
