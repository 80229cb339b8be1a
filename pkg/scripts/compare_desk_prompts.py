#!/usr/bin/env python3
"""Evaluate the baseline desk prompt against its protocol-bearing evolution
and print both metric sets side by side, without running the full loop."""

import json
import sys

from promptloop.agents import evolve_prompt
from promptloop.core import EvalSummary, PromptArtifact
from promptloop.environment import (
    DeskContestantBackend,
    build_desk_environment,
    load_desk_baseline_prompt_text,
    load_desk_tasks,
)
from promptloop.environment.desk import desk_data_dir
from promptloop.protocol import FailurePattern, build_decision_tree


def evaluate(prompt: PromptArtifact) -> EvalSummary:
    env = build_desk_environment()
    outcomes = env.run_dataset(prompt, load_desk_tasks(), DeskContestantBackend())
    return EvalSummary.from_outcomes(outcomes)


def main() -> int:
    baseline = PromptArtifact(text=load_desk_baseline_prompt_text())
    raw = json.loads((desk_data_dir() / "optimizer_script.json").read_text())
    patterns = [FailurePattern.from_json_dict(p) for p in json.loads(raw[0]["reply"])]
    optimized = evolve_prompt(baseline, build_decision_tree(patterns), "append")

    for label, prompt in (("baseline", baseline), ("optimized", optimized)):
        summary = evaluate(prompt)
        print(f"{label:>9}: {summary.describe()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
