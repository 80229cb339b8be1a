"""Environments: retrieval scoring, tool episodes, judges, desk toys.

retrieve() is checked against a full-sort oracle; episode runs are checked
for determinism by double execution.
"""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptloop.backend import BackendError, ChatRequest, ChatResponse
from promptloop.core import PromptArtifact
from promptloop.environment import (
    Chunk,
    Corpus,
    DeskContestantBackend,
    Environment,
    EnvironmentError_,
    SuccessConditions,
    TaskSpec,
    ToolDef,
    ToolRegistry,
    UserUtterance,
    build_desk_environment,
    desk_registry,
    desk_world,
    extract_tool_calls,
    load_desk_baseline_prompt_text,
    load_desk_corpus,
    load_desk_tasks,
    normalize_tokens,
    retrieve,
    run_retrieval_task,
    run_task,
)


def small_corpus() -> Corpus:
    return Corpus(tuple(
        Chunk(i, text) for i, text in enumerate([
            "alpha beta gamma",
            "beta gamma delta",
            "gamma delta epsilon",
            "delta epsilon zeta",
            "epsilon zeta alpha",
        ])
    ))


def oracle_retrieve(query: str, corpus: Corpus, k: int) -> list[int]:
    query_tokens = set(normalize_tokens(query))
    if not query_tokens:
        return []
    scored = sorted(
        corpus.chunks,
        key=lambda c: (-len(query_tokens & set(normalize_tokens(c.text))), c.chunk_id),
    )
    return [c.chunk_id for c in scored[:k]]


class ScriptedAgent:
    """Replies in fixed order regardless of input."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.i = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        reply = self.replies[min(self.i, len(self.replies) - 1)]
        self.i += 1
        return ChatResponse(content=reply, finish_reason="stop")


class CrashingBackend:
    def complete(self, request):
        raise BackendError("connection reset")


class TestToolCallExtraction:
    def test_bracketed_call_with_args(self):
        calls = extract_tool_calls(
            "Sure! [modify_address(order_id=W100, address=12 Vine St)] done"
        )
        assert calls[0].name == "modify_address"
        assert dict(calls[0].args) == {"order_id": "W100", "address": "12 Vine St"}

    def test_multiple_calls_in_order(self):
        calls = extract_tool_calls("[a_tool()] text [b_tool(x=1)]")
        assert [c.name for c in calls] == ["a_tool", "b_tool"]

    def test_comma_inside_value_is_kept(self):
        calls = extract_tool_calls("[modify_address(order_id=W1, address=4 Elm, Apt 2)]")
        assert dict(calls[0].args)["address"] == "4 Elm, Apt 2"

    def test_no_calls(self):
        assert extract_tool_calls("just words, no brackets()") == []


class TestRetrieve:
    def test_top_k_ordering(self):
        corpus = small_corpus()
        assert retrieve("beta gamma", corpus, 3) == [0, 1, 2]

    def test_tie_breaks_by_chunk_id(self):
        corpus = Corpus((Chunk(5, "x y"), Chunk(2, "x y"), Chunk(9, "x y")))
        assert retrieve("x", corpus, 2) == [2, 5]

    def test_k_equals_corpus_size_is_permutation(self):
        corpus = small_corpus()
        result = retrieve("alpha", corpus, len(corpus))
        assert sorted(result) == [0, 1, 2, 3, 4]

    def test_empty_query_after_normalization(self):
        assert retrieve("?!, ... ---", small_corpus(), 3) == []

    def test_scoring_counts_distinct_tokens_only(self):
        corpus = Corpus((Chunk(0, "alpha alpha alpha"), Chunk(1, "alpha beta")))
        assert retrieve("alpha beta", corpus, 1) == [1]

    def test_empty_corpus_errors(self):
        with pytest.raises(EnvironmentError_):
            retrieve("q", Corpus(()), 1)

    def test_bad_k_errors(self):
        with pytest.raises(ValueError):
            retrieve("q", small_corpus(), 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_full_sort_oracle_random(self, seed):
        rng = random.Random(seed)
        vocabulary = [f"w{i}" for i in range(12)]
        corpus = Corpus(tuple(
            Chunk(i, " ".join(rng.choices(vocabulary, k=rng.randint(1, 8))))
            for i in range(rng.randint(1, 30))
        ))
        query = " ".join(rng.choices(vocabulary, k=rng.randint(1, 5)))
        k = rng.randint(1, len(corpus))
        assert retrieve(query, corpus, k) == oracle_retrieve(query, corpus, k)


def echo_registry() -> ToolRegistry:
    def effect(state, args):
        state.setdefault("count", 0)
        state["count"] += 1
        return "ok"

    return ToolRegistry([
        ToolDef("lookup", ("key",), effect),
        ToolDef("mutate", ("key",), effect, mutating=True),
    ])


def tool_task(task_id="t", script=None, **conditions) -> TaskSpec:
    utterances = tuple(UserUtterance(text=s) for s in (script or ["do the thing"]))
    return TaskSpec(
        task_id=task_id,
        user_script=utterances,
        success_conditions=SuccessConditions(**conditions),
    )


class TestRunTask:
    def test_required_call_satisfied(self):
        task = tool_task(required_calls=("lookup",))
        agent = ScriptedAgent(["[lookup(key=a)] found it"])
        outcome = run_task(PromptArtifact(text="P"), task, agent, echo_registry())
        assert outcome.success
        assert outcome.judge_notes == "all success conditions met"

    def test_ordering_breach_detected(self):
        task = tool_task(
            required_calls=("lookup", "mutate"),
            call_order=(("lookup", "mutate"),),
        )
        agent = ScriptedAgent(["[mutate(key=a)] [lookup(key=a)]"])
        outcome = run_task(PromptArtifact(text="P"), task, agent, echo_registry())
        assert not outcome.success
        assert "ordering breach" in outcome.judge_notes

    def test_guard_requires_literal_token_before_mutation(self):
        task = tool_task(
            script=["please change it", "Okay"],
            required_calls=("mutate",),
            confirmation_token="YES",
        )
        agent = ScriptedAgent(["want me to proceed?", "[mutate(key=a)]"])
        outcome = run_task(PromptArtifact(text="P"), task, agent, echo_registry())
        assert not outcome.success
        assert 'guard breach' in outcome.judge_notes

    def test_guard_passes_after_literal_yes(self):
        task = tool_task(
            script=["please change it", "YES"],
            required_calls=("mutate",),
            confirmation_token="YES",
        )
        agent = ScriptedAgent(["want me to proceed?", "[mutate(key=a)]"])
        outcome = run_task(PromptArtifact(text="P"), task, agent, echo_registry())
        assert outcome.success

    def test_lowercase_yes_does_not_satisfy_guard(self):
        task = tool_task(
            script=["change it", "yes"],
            required_calls=("mutate",),
            confirmation_token="YES",
        )
        agent = ScriptedAgent(["confirm?", "[mutate(key=a)]"])
        outcome = run_task(PromptArtifact(text="P"), task, agent, echo_registry())
        assert not outcome.success

    def test_turn_budget_exhausted(self):
        task = tool_task(
            script=[f"nudge {i}" for i in range(6)], required_calls=("mutate",)
        )
        agent = ScriptedAgent(["thinking..."] * 6)
        outcome = run_task(
            PromptArtifact(text="P"), task, agent, echo_registry(), max_turns=3
        )
        assert not outcome.success
        assert outcome.judge_notes == "turn budget exhausted"

    def test_backend_crash_is_a_failure_not_an_exception(self):
        task = tool_task(required_calls=("mutate",))
        outcome = run_task(PromptArtifact(text="P"), task, CrashingBackend(), echo_registry())
        assert not outcome.success
        assert "backend error" in outcome.judge_notes
        assert outcome.transcript

    def test_variant_resolution_keyed_on_prior_tool(self):
        task = TaskSpec(
            task_id="v",
            user_script=(
                UserUtterance(text="start"),
                UserUtterance(
                    text="default follow-up",
                    variants=(("lookup", "lookup happened"),),
                ),
            ),
            success_conditions=SuccessConditions(required_calls=("lookup",)),
        )
        agent = ScriptedAgent(["[lookup(key=a)]", "done"])
        outcome = run_task(PromptArtifact(text="P"), task, agent, echo_registry())
        assert outcome.transcript[3].content == "lookup happened"

    def test_unknown_tool_calls_are_recorded_not_applied(self):
        task = tool_task(required_calls=("lookup",))
        agent = ScriptedAgent(["[phantom_tool(x=1)] [lookup(key=a)]"])
        outcome = run_task(PromptArtifact(text="P"), task, agent, echo_registry())
        assert outcome.success
        tool_turns = [t.content for t in outcome.transcript if t.speaker == "tool"]
        assert "phantom_tool -> error: unknown tool" in tool_turns

    def test_deterministic_given_scripted_agent(self):
        task = tool_task(
            script=["change it", "YES"],
            required_calls=("mutate",), confirmation_token="YES",
        )
        runs = []
        for _ in range(2):
            agent = ScriptedAgent(["confirm?", "[mutate(key=a)] done"])
            runs.append(run_task(PromptArtifact(text="P"), task, agent, echo_registry()))
        assert runs[0] == runs[1]


def retrieval_task(task_id="r", script=None, expected=4, out_of_scope=False) -> TaskSpec:
    utterances = tuple(UserUtterance(text=s) for s in (script or ["ask something"]))
    conditions = (
        SuccessConditions(out_of_scope=True)
        if out_of_scope
        else SuccessConditions(expected_chunk_id=expected)
    )
    return TaskSpec(task_id=task_id, user_script=utterances, success_conditions=conditions)


class TestRunRetrievalTask:
    def corpus(self) -> Corpus:
        return load_desk_corpus()

    def test_miss_on_generic_query(self):
        task = retrieval_task(script=["disability", "private hospital?"], expected=4)
        agent = ScriptedAgent(["noted", "SEARCH: private"])
        outcome = run_retrieval_task(PromptArtifact(text="P"), task, agent, self.corpus())
        assert not outcome.success
        event = outcome.retrieval_trace[0]
        assert event.returned_chunk_ids == (0, 2, 7, 21, 38)
        assert not event.hit

    def test_hit_on_merged_query(self):
        task = retrieval_task(script=["disability", "private hospital?"], expected=4)
        agent = ScriptedAgent(
            ["noted", "SEARCH: disability case outpatient cost private hospital"]
        )
        outcome = run_retrieval_task(PromptArtifact(text="P"), task, agent, self.corpus())
        assert outcome.success
        assert outcome.retrieval_trace[0].returned_chunk_ids[0] == 4

    def test_out_of_scope_disclaimer_succeeds(self):
        task = retrieval_task(out_of_scope=True)
        agent = ScriptedAgent(["NO_DATA: not in the system database."])
        outcome = run_retrieval_task(PromptArtifact(text="P"), task, agent, self.corpus())
        assert outcome.success

    def test_out_of_scope_search_fails(self):
        task = retrieval_task(out_of_scope=True)
        agent = ScriptedAgent(["SEARCH: fund solvency"])
        outcome = run_retrieval_task(PromptArtifact(text="P"), task, agent, self.corpus())
        assert not outcome.success
        assert "instead of disclaiming" in outcome.judge_notes

    def test_no_directive_fails(self):
        task = retrieval_task()
        agent = ScriptedAgent(["well, it depends on many factors."])
        outcome = run_retrieval_task(PromptArtifact(text="P"), task, agent, self.corpus())
        assert not outcome.success
        assert "no actionable directive" in outcome.judge_notes

    def test_disclaimer_on_answerable_task_fails(self):
        task = retrieval_task()
        agent = ScriptedAgent(["NO_DATA"])
        outcome = run_retrieval_task(PromptArtifact(text="P"), task, agent, self.corpus())
        assert not outcome.success


class TestEnvironmentFacade:
    def test_dispatch_and_validation(self):
        env = build_desk_environment()
        tasks = load_desk_tasks()
        env.validate_tasks(tasks)
        assert len(tasks) == 18

    def test_unregistered_tool_reference_rejected(self):
        env = Environment(registry=echo_registry())
        task = tool_task(required_calls=("no_such_tool",))
        with pytest.raises(EnvironmentError_, match="unregistered tools"):
            env.validate_tasks([task])

    def test_retrieval_task_needs_corpus(self):
        env = Environment(registry=echo_registry(), corpus=None)
        with pytest.raises(EnvironmentError_, match="corpus"):
            env.validate_tasks([retrieval_task()])

    def test_parallel_run_matches_serial(self):
        env = build_desk_environment()
        tasks = load_desk_tasks()
        backend = DeskContestantBackend()
        prompt = PromptArtifact(text=load_desk_baseline_prompt_text())
        serial = env.run_dataset(prompt, tasks, backend, parallelism=1)
        parallel = env.run_dataset(prompt, tasks, backend, parallelism=4)
        assert serial == parallel


class TestDeskWorldTools:
    def test_email_lookup_and_cancel(self):
        registry = desk_registry()
        state = desk_world()
        result = registry.get("find_user_id_by_email").effect(
            state, {"email": "dana@example.com"}
        )
        assert result == "user_id=U2"
        assert registry.get("cancel_pending_order").effect(
            state, {"order_id": "W200"}
        ) == "cancelled"
        assert registry.get("cancel_pending_order").effect(
            state, {"order_id": "W200"}
        ) == "error: order not pending"

    def test_unknown_email_not_found(self):
        state = desk_world()
        result = desk_registry().get("find_user_id_by_email").effect(
            state, {"email": "ghost@example.com"}
        )
        assert result == "not_found"

    def test_duplicate_tool_names_rejected(self):
        tool = ToolDef("dup", (), lambda s, a: "x")
        with pytest.raises(EnvironmentError_):
            ToolRegistry([tool, tool])


class TestDeskCorpusConstruction:
    """Guardrails on the engineered lexical structure of the bundled corpus;
    editing chunk texts carelessly would silently break the case studies."""

    QUERY_TOKENS = ("disability", "case", "outpatient", "cost", "private", "hospital")

    def chunk_tokens(self):
        return {
            c.chunk_id: set(normalize_tokens(c.text)) for c in load_desk_corpus().chunks
        }

    def test_private_appears_in_exactly_the_five_chunks(self):
        holders = {i for i, toks in self.chunk_tokens().items() if "private" in toks}
        assert holders == {0, 2, 7, 21, 38}

    def test_expected_chunk_scores_highest_on_merged_query(self):
        tokens = self.chunk_tokens()
        scores = {
            i: len(set(self.QUERY_TOKENS) & toks) for i, toks in tokens.items()
        }
        assert scores[4] == 4
        assert {i for i, s in scores.items() if s == 3} == {2, 14, 30, 38}
        others = {i: s for i, s in scores.items() if i not in (4, 2, 14, 30, 38)}
        assert all(s <= 2 for s in others.values())

    def test_payment_rate_pair_confined_to_decoys_and_target(self):
        tokens = self.chunk_tokens()
        both = {i for i, toks in tokens.items() if {"payment", "rate"} <= toks}
        assert both == {3, 6, 9, 12, 15, 17}


class TestDeskContestant:
    def run_all(self, prompt_text: str):
        env = build_desk_environment()
        tasks = load_desk_tasks()
        return env.run_dataset(
            PromptArtifact(text=prompt_text), tasks, DeskContestantBackend()
        )

    def test_baseline_failure_modes(self):
        outcomes = {o.task_id: o for o in self.run_all(load_desk_baseline_prompt_text())}
        assert outcomes["retail-status-email"].success
        assert not outcomes["retail-auth-name-zip"].success
        assert not outcomes["retail-both-changes-soft-confirm"].success
        assert "guard breach" in outcomes["retail-items-soft-confirm"].judge_notes
        assert "ordering breach" in outcomes["retail-both-changes-hard-confirm"].judge_notes
        assert not outcomes["retrieval-fund-bankruptcy"].success
        passed = sum(1 for o in outcomes.values() if o.success)
        assert passed == 9

    def test_episodes_replay_identically(self):
        first = self.run_all(load_desk_baseline_prompt_text())
        second = self.run_all(load_desk_baseline_prompt_text())
        assert first == second
