"""Task environments: the environment contract plus the bundled desk toys."""

from .base import (
    Chunk,
    Corpus,
    DISCLAIMER_DIRECTIVE,
    Environment,
    EnvironmentError_,
    SEARCH_DIRECTIVE,
    SuccessConditions,
    TaskSpec,
    ToolDef,
    ToolRegistry,
    UserUtterance,
    extract_tool_calls,
    judge_tool_task,
    load_tasks,
    normalize_tokens,
    retrieve,
    run_retrieval_task,
    run_task,
)
from .desk import (
    DeskContestantBackend,
    build_desk_environment,
    desk_registry,
    desk_world,
    load_desk_baseline_prompt_text,
    load_desk_corpus,
    load_desk_tasks,
)

__all__ = [
    "Chunk",
    "Corpus",
    "DISCLAIMER_DIRECTIVE",
    "DeskContestantBackend",
    "Environment",
    "EnvironmentError_",
    "SEARCH_DIRECTIVE",
    "SuccessConditions",
    "TaskSpec",
    "ToolDef",
    "ToolRegistry",
    "UserUtterance",
    "build_desk_environment",
    "desk_registry",
    "desk_world",
    "extract_tool_calls",
    "judge_tool_task",
    "load_desk_baseline_prompt_text",
    "load_desk_corpus",
    "load_desk_tasks",
    "load_tasks",
    "normalize_tokens",
    "retrieve",
    "run_retrieval_task",
    "run_task",
]
