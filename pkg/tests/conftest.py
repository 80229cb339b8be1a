"""Shared fixtures: deterministic test doubles and a toy token environment
for fast loop experiments."""

from __future__ import annotations

import json
import re
from pathlib import Path

import pytest

from promptloop.backend import ChatRequest, ChatResponse
from promptloop.core import PromptArtifact, TaskOutcome, Turn
from promptloop.environment import SuccessConditions, TaskSpec, UserUtterance

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def retail_protocol_text() -> str:
    return (DATA_DIR / "retail_protocol.txt").read_text(encoding="utf-8")


@pytest.fixture
def retrieval_protocol_text() -> str:
    return (DATA_DIR / "retrieval_protocol.txt").read_text(encoding="utf-8")


class StaticBackend:
    """Returns the same reply for every request; counts calls."""

    def __init__(self, reply: str):
        self.reply = reply
        self.calls = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        return ChatResponse(content=self.reply, finish_reason="stop")


class SequenceBackend:
    """Returns replies in order; raises IndexError when exhausted."""

    def __init__(self, replies: list[str]):
        self.replies = list(replies)
        self.calls = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        reply = self.replies[self.calls]
        self.calls += 1
        return ChatResponse(content=reply, finish_reason="stop")


class TokenEnvironment:
    """Toy environment: a task succeeds iff its capability token appears in
    the prompt text. Implements the same surface as Environment."""

    def __init__(self, tokens: dict[str, str]):
        self.tokens = tokens
        self.dataset_runs = 0

    def validate_tasks(self, tasks) -> None:
        for task in tasks:
            if task.task_id not in self.tokens:
                raise ValueError(f"unknown token task {task.task_id!r}")

    def run(self, prompt: PromptArtifact, task: TaskSpec, backend) -> TaskOutcome:
        token = self.tokens[task.task_id]
        ok = token in prompt.text
        return TaskOutcome(
            task_id=task.task_id,
            success=ok,
            transcript=(
                Turn("user", task.user_script[0].text),
                Turn("agent", "handled" if ok else "declined"),
            ),
            judge_notes="capability present" if ok else f"missing capability {token}",
        )

    def run_dataset(self, prompt, tasks, backend, parallelism=1):
        self.dataset_runs += 1
        return [self.run(prompt, task, backend) for task in tasks]


def token_task(task_id: str) -> TaskSpec:
    return TaskSpec(
        task_id=task_id,
        user_script=(UserUtterance(text=f"please handle {task_id}"),),
        success_conditions=SuccessConditions(required_calls=("handle",)),
    )


def make_token_setup(n_tasks: int, have: int):
    """A token environment with n_tasks capability tokens, of which the
    initial prompt already has the first ``have``."""
    tokens = {f"task-{i:02d}": f"<capability-{i:02d}>" for i in range(n_tasks)}
    tasks = [token_task(task_id) for task_id in tokens]
    env = TokenEnvironment({t.task_id: tok for t, tok in zip(tasks, tokens.values())})
    held = " ".join(list(tokens.values())[:have])
    prompt = PromptArtifact(text=f"Support agent. Capabilities: {held or 'none'}.")
    return env, tasks, prompt, tokens


ANALYZER_REPLY = json.dumps(
    {
        "diagnosis": "The agent lacks the capability the task exercises.",
        "prescription": "Grant the missing capability in the operating rules.",
        "category_hint": "scope",
    }
)


class SyntheticOptimizerBackend:
    """Deterministic optimizer double for token environments.

    Reads the report task ids embedded in the request, then prescribes
    capability tokens: with probability ``helpful_prob`` (driven by a seeded
    RNG) the token of a failing task, otherwise a useless token. Stateful
    only through the RNG sequence, so runs replay identically per seed.
    """

    def __init__(self, tokens: dict[str, str], rng, helpful_prob: float = 1.0):
        self.tokens = tokens
        self.rng = rng
        self.helpful_prob = helpful_prob

    def complete(self, request: ChatRequest) -> ChatResponse:
        text = request.messages[-1].content
        task_ids = re.findall(r'"task_id":\s*"([^"]+)"', text)
        if not task_ids:
            raise AssertionError("optimizer request carries no reports")
        if self.rng.random() < self.helpful_prob:
            target = task_ids[self.rng.randrange(len(task_ids))]
            token = self.tokens[target]
        else:
            token = f"<useless-{self.rng.randrange(10_000):05d}>"
        patterns = [
            {
                "pattern_id": "grant-capability",
                "category": "scope",
                "description": f"Grant the capability {token} when asked.",
                "prescribed_actions": [],
                "evidence_task_ids": sorted(set(task_ids)),
            }
        ]
        return ChatResponse(content=json.dumps(patterns), finish_reason="stop")


@pytest.fixture
def static_analyzer() -> StaticBackend:
    return StaticBackend(ANALYZER_REPLY)
