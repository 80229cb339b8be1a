"""promptloop: failure-driven prompt optimization.

Runs a prompt-parameterized agent on a task set, keeps only the failures,
turns them into diagnosis/prescription reports, aggregates the reports
into a decision-tree protocol, splices the protocol into the prompt, and
keeps the new prompt only when measured success strictly improves —
stopping after a patience budget of consecutive non-improvements.
"""

from .agents import (
    AnalysisReport,
    RolePrompt,
    aggregate_patterns,
    analyze_failure,
    evolve_prompt,
)
from .backend import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    HttpBackend,
    ScriptEntry,
    ScriptedBackend,
    parse_structured,
)
from .core import (
    EvalSummary,
    FailureCase,
    PromptArtifact,
    RetrievalEvent,
    TaskOutcome,
    ToolCall,
    Turn,
    compute_search_hit_rate,
    compute_success_rate,
    filter_failures,
)
from .environment import Corpus, Environment, SuccessConditions, TaskSpec, retrieve
from .loop import (
    IterationRecord,
    LoopConfig,
    OptimizationRun,
    RoleRuntime,
    RunStore,
    accept_candidate,
    resume_run,
    run_optimization,
)
from .protocol import (
    DecisionTreeProtocol,
    FailurePattern,
    ProtocolNode,
    build_decision_tree,
    parse_protocol,
    render_protocol,
    validate_protocol,
)

__version__ = "0.1.0"

__all__ = [
    "AnalysisReport",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "Corpus",
    "DecisionTreeProtocol",
    "Environment",
    "EvalSummary",
    "FailureCase",
    "FailurePattern",
    "HttpBackend",
    "IterationRecord",
    "LoopConfig",
    "OptimizationRun",
    "PromptArtifact",
    "ProtocolNode",
    "RetrievalEvent",
    "RolePrompt",
    "RoleRuntime",
    "RunStore",
    "ScriptEntry",
    "ScriptedBackend",
    "SuccessConditions",
    "TaskOutcome",
    "TaskSpec",
    "ToolCall",
    "Turn",
    "accept_candidate",
    "aggregate_patterns",
    "analyze_failure",
    "build_decision_tree",
    "compute_search_hit_rate",
    "compute_success_rate",
    "evolve_prompt",
    "filter_failures",
    "parse_protocol",
    "parse_structured",
    "render_protocol",
    "resume_run",
    "retrieve",
    "run_optimization",
    "validate_protocol",
]
