"""Decision-tree protocol model: parse, validate, render, and assemble.

The text format is a numbered outline. Each node line starts with optional
indentation and a dotted id whose segments are digits with an optional
uppercase suffix ("1", "0.2", "5B", "5B.5"), followed by body text. Depth is
the number of dotted segments; a child's id extends its parent's id by
exactly one segment, and single-segment ids are roots. Lines that do not
start with an id continue the text of the most recent node. At most one
non-empty line may precede the first node; it becomes the protocol title.

Node kinds are inferred from the text:

* guard            -- contains "literal" followed by a quoted token
* sequencing_rule  -- contains the phrase "sequencing rule", or both the
                      ordinal markers FIRST and SECOND (case-insensitive)
* recovery         -- body text begins with "Recovery"
* step / branch    -- everything else: step for leaves, branch for
                      internal nodes

Canonical rendering indents two spaces per depth level, puts a trailing dot
after root ids only, and prefixes the title with "# ". Rendering a valid
tree and parsing it back yields a structurally equal tree; the validator's
job is to admit exactly the trees for which that round trip holds.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

NODE_KINDS = ("step", "branch", "sequencing_rule", "guard", "recovery")

PATTERN_CATEGORIES = ("ambiguity", "sequencing", "guardrail", "recovery", "scope")

# Root headings used when assembling a tree from failure patterns, in the
# fixed category order above. Heading words must stay clear of the kind
# inference markers (so no "Sequencing Rule" or leading "Recovery").
CATEGORY_HEADINGS = {
    "ambiguity": "Ambiguity Resolution",
    "sequencing": "Operation Ordering",
    "guardrail": "Safety Guardrails",
    "recovery": "Fallback Paths",
    "scope": "Scope Management",
}

ORDINAL_MARKERS = (
    "FIRST", "SECOND", "THIRD", "FOURTH", "FIFTH",
    "SIXTH", "SEVENTH", "EIGHTH", "NINTH", "TENTH",
)

_SEGMENT_RE = re.compile(r"^\d+[A-Z]*$")
_ID_LINE_RE = re.compile(
    r"^(?P<id>\d+[A-Z]*(?:\.\d+[A-Z]*)*)\.?(?:\s+(?P<body>.*))?$"
)
_GUARD_RE = re.compile(r"literal\s*[\"']([^\"']+)[\"']", re.IGNORECASE)


class ProtocolError(ValueError):
    """A protocol could not be parsed, validated, or assembled."""


class ProtocolParseError(ProtocolError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        suffix = f" (line {line})" if line is not None else ""
        super().__init__(message + suffix)


@dataclass(frozen=True)
class ProtocolNode:
    node_id: str
    kind: str
    text: str
    children: tuple["ProtocolNode", ...] = ()
    ordered_actions: tuple[str, ...] = ()
    required_token: str = ""

    def walk(self) -> Iterable["ProtocolNode"]:
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass(frozen=True)
class DecisionTreeProtocol:
    protocol_id: str
    title: str
    roots: tuple[ProtocolNode, ...]

    def walk(self) -> Iterable[ProtocolNode]:
        for root in self.roots:
            yield from root.walk()


@dataclass(frozen=True)
class FailurePattern:
    """One recurring failure mode distilled from analysis reports."""

    pattern_id: str
    category: str
    description: str
    prescribed_actions: tuple[str, ...] = ()
    evidence_task_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.category not in PATTERN_CATEGORIES:
            raise ValueError(f"unknown pattern category {self.category!r}")
        if not self.description:
            raise ValueError("pattern description must be non-empty")
        if not self.evidence_task_ids:
            raise ValueError(
                f"pattern {self.pattern_id!r} has no evidence_task_ids"
            )
        if self.category == "sequencing" and len(self.prescribed_actions) < 2:
            raise ValueError(
                f"sequencing pattern {self.pattern_id!r} needs at least two actions"
            )

    def to_json_dict(self) -> dict:
        return {
            "pattern_id": self.pattern_id,
            "category": self.category,
            "description": self.description,
            "prescribed_actions": list(self.prescribed_actions),
            "evidence_task_ids": list(self.evidence_task_ids),
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "FailurePattern":
        return cls(
            pattern_id=payload["pattern_id"],
            category=payload["category"],
            description=payload["description"],
            prescribed_actions=tuple(payload.get("prescribed_actions", ())),
            evidence_task_ids=tuple(payload.get("evidence_task_ids", ())),
        )


@dataclass(frozen=True)
class Violation:
    node_id: str
    rule: str
    detail: str

    def __str__(self) -> str:
        return f"{self.rule}({self.node_id!r}): {self.detail}"


# ---------------------------------------------------------------------------
# kind inference helpers
# ---------------------------------------------------------------------------

def _word_present(word: str, text: str) -> bool:
    return re.search(rf"\b{word}\b", text, re.IGNORECASE) is not None


def _is_sequencing_text(text: str) -> bool:
    if "sequencing rule" in text.lower():
        return True
    return _word_present("FIRST", text) and _word_present("SECOND", text)


def _guard_token(text: str) -> str | None:
    m = _GUARD_RE.search(text)
    if m is None:
        return None
    # The quoted span may drag punctuation along ("YES." / "YES,").
    return re.sub(r"^\W+|\W+$", "", m.group(1))


def _is_recovery_text(text: str) -> bool:
    return text.lstrip().lower().startswith("recovery")


def _extract_ordered_actions(text: str) -> tuple[str, ...]:
    """Actions named immediately before each ordinal marker, in marker
    order; extraction stops at the first missing marker."""
    actions: list[str] = []
    for marker in ORDINAL_MARKERS:
        m = re.search(rf"(\S+)\s+{marker}\b", text, re.IGNORECASE)
        if m is None:
            break
        actions.append(re.sub(r"^\W+|\W+$", "", m.group(1)))
    return tuple(actions)


def _infer_kind(text: str, has_children: bool) -> str:
    if _guard_token(text) is not None:
        return "guard"
    if _is_sequencing_text(text):
        return "sequencing_rule"
    if _is_recovery_text(text):
        return "recovery"
    return "branch" if has_children else "step"


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

class _Draft:
    __slots__ = ("node_id", "lines", "children")

    def __init__(self, node_id: str, first_line: str):
        self.node_id = node_id
        self.lines = [first_line] if first_line else []
        self.children: list[_Draft] = []


def _finalize(draft: _Draft) -> ProtocolNode:
    children = tuple(_finalize(c) for c in draft.children)
    text = "\n".join(draft.lines)
    kind = _infer_kind(text, bool(children))
    ordered_actions: tuple[str, ...] = ()
    required_token = ""
    if kind == "sequencing_rule":
        ordered_actions = _extract_ordered_actions(text)
    elif kind == "guard":
        required_token = _guard_token(text) or ""
    return ProtocolNode(
        node_id=draft.node_id,
        kind=kind,
        text=text,
        children=children,
        ordered_actions=ordered_actions,
        required_token=required_token,
    )


def parse_protocol(text: str) -> DecisionTreeProtocol:
    """Parse outline text into a protocol tree.

    Raises ProtocolParseError (with a line number) on duplicate ids, orphan
    nodes, extra preamble lines, or an empty document.
    """
    drafts: dict[str, _Draft] = {}
    roots: list[_Draft] = []
    title: str | None = None
    current: _Draft | None = None

    for lineno, raw in enumerate(text.splitlines(), 1):
        stripped = raw.strip()
        if not stripped:
            continue
        m = _ID_LINE_RE.match(stripped)
        if m is None:
            if current is None:
                if title is not None:
                    raise ProtocolParseError(
                        "only one preamble line is allowed before the first node",
                        lineno,
                    )
                title = stripped.lstrip("#").strip()
                continue
            current.lines.append(stripped)
            continue

        node_id = m.group("id")
        body = (m.group("body") or "").strip()
        if node_id in drafts:
            raise ProtocolParseError(f"duplicate node id {node_id!r}", lineno)
        draft = _Draft(node_id, body)
        segments = node_id.split(".")
        if len(segments) == 1:
            roots.append(draft)
        else:
            parent_id = ".".join(segments[:-1])
            parent = drafts.get(parent_id)
            if parent is None:
                raise ProtocolParseError(
                    f"orphan node {node_id!r}: parent {parent_id!r} not seen",
                    lineno,
                )
            parent.children.append(draft)
        drafts[node_id] = draft
        current = draft

    if not roots:
        raise ProtocolParseError("document contains no protocol nodes")

    root_nodes = tuple(_finalize(d) for d in roots)
    canonical = _render_text(title or "", root_nodes)
    return DecisionTreeProtocol(
        protocol_id=_content_id(canonical),
        title=title or "",
        roots=root_nodes,
    )


def _content_id(canonical_text: str) -> str:
    return hashlib.sha256(canonical_text.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _render_node(node: ProtocolNode, out: list[str]) -> None:
    depth = len(node.node_id.split("."))
    indent = "  " * (depth - 1)
    id_part = f"{node.node_id}." if depth == 1 else node.node_id
    text_lines = node.text.split("\n") if node.text else [""]
    first = f"{indent}{id_part} {text_lines[0]}".rstrip()
    out.append(first)
    for extra in text_lines[1:]:
        out.append(f"{indent}   {extra}")
    for child in node.children:
        _render_node(child, out)


def _render_text(title: str, roots: Sequence[ProtocolNode]) -> str:
    lines: list[str] = []
    if title:
        lines.append(f"# {title}")
    for root in roots:
        _render_node(root, lines)
    return "\n".join(lines) + "\n"


def render_protocol(tree: DecisionTreeProtocol) -> str:
    """Canonical outline text for a valid tree.

    Raises ProtocolError listing the violations if the tree does not pass
    validate_protocol; on valid trees, parse(render(tree)) is structurally
    identical to tree and render is a fixpoint on its own output.
    """
    violations = validate_protocol(tree)
    if violations:
        listing = "; ".join(str(v) for v in violations)
        raise ProtocolError(f"cannot render invalid protocol: {listing}")
    return _render_text(tree.title, tree.roots)


def structurally_equal(a: DecisionTreeProtocol, b: DecisionTreeProtocol) -> bool:
    """Equality over title and node structure, ignoring protocol_id."""
    return a.title == b.title and a.roots == b.roots


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _valid_id(node_id: str) -> bool:
    segments = node_id.split(".")
    return bool(segments) and all(_SEGMENT_RE.match(s) for s in segments)


def _check_kind_encoding(node: ProtocolNode, add) -> None:
    """A node's text must re-infer to its declared kind, otherwise the tree
    would change shape on a render/parse round trip."""
    guard_token = _guard_token(node.text)
    sequencing = _is_sequencing_text(node.text)
    recovery = _is_recovery_text(node.text)

    if node.kind == "guard":
        if not node.required_token:
            add(node, "guard_token", "guard nodes need a non-empty required_token")
        elif guard_token != node.required_token:
            add(
                node,
                "kind_encoding",
                f"text does not encode literal token {node.required_token!r}",
            )
    elif guard_token is not None:
        add(node, "kind_encoding", "text reads as a guard but kind is "
            f"{node.kind!r}")
        return

    if node.kind == "sequencing_rule":
        if len(node.ordered_actions) < 2:
            add(node, "sequencing_arity", "sequencing rules need at least two actions")
        elif len(set(node.ordered_actions)) != len(node.ordered_actions):
            add(node, "sequencing_duplicates", "ordered_actions must be distinct")
        elif not sequencing or _extract_ordered_actions(node.text) != node.ordered_actions:
            add(
                node,
                "kind_encoding",
                "text does not encode the ordered actions with ordinal markers",
            )
    elif node.kind != "guard" and sequencing:
        add(node, "kind_encoding", f"text reads as a sequencing rule but kind is {node.kind!r}")
        return

    if node.kind == "recovery":
        if not recovery:
            add(node, "kind_encoding", "recovery node text must begin with 'Recovery'")
    elif node.kind in ("step", "branch") and recovery:
        add(node, "kind_encoding", f"text reads as recovery but kind is {node.kind!r}")

    if node.kind == "step" and node.children:
        add(node, "step_children", "step nodes must be leaves")
    if node.kind == "branch" and not node.children:
        add(node, "branch_leaf", "branch nodes must have children")

    if node.kind != "sequencing_rule" and node.ordered_actions:
        add(node, "field_misuse", "ordered_actions is only valid on sequencing rules")
    if node.kind != "guard" and node.required_token:
        add(node, "field_misuse", "required_token is only valid on guard nodes")


def validate_protocol(tree: DecisionTreeProtocol) -> list[Violation]:
    """Collect every invariant breach; an empty list means the tree is valid.

    Violations are data, not errors: a synthesized or hand-built tree can be
    inspected and repaired from the returned records.
    """
    violations: list[Violation] = []

    def add(node: ProtocolNode | None, rule: str, detail: str) -> None:
        violations.append(Violation(node.node_id if node else "", rule, detail))

    if not tree.roots:
        add(None, "no_roots", "a protocol needs at least one root")
        return violations

    seen: set[str] = set()
    for root in tree.roots:
        if len(root.node_id.split(".")) != 1:
            add(root, "root_depth", "root ids must have exactly one segment")
        for node in root.walk():
            if not _valid_id(node.node_id):
                add(node, "id_format", "ids are dotted digits with optional "
                    "uppercase suffixes")
            if node.node_id in seen:
                add(node, "duplicate_id", "node ids must be unique in a protocol")
            seen.add(node.node_id)
            if node.kind not in NODE_KINDS:
                add(node, "kind_value", f"unknown kind {node.kind!r}")
                continue
            for child in node.children:
                expected_prefix = node.node_id + "."
                trailing = child.node_id[len(expected_prefix):]
                if (
                    not child.node_id.startswith(expected_prefix)
                    or not _SEGMENT_RE.match(trailing)
                ):
                    add(
                        child,
                        "child_extension",
                        f"child id must extend {node.node_id!r} by one segment",
                    )
            for extra_line in node.text.split("\n")[1:]:
                if _ID_LINE_RE.match(extra_line.strip()):
                    add(
                        node,
                        "ambiguous_text",
                        f"continuation line {extra_line!r} would re-parse as a node",
                    )
            _check_kind_encoding(node, add)

    return violations


# ---------------------------------------------------------------------------
# deterministic assembly from failure patterns
# ---------------------------------------------------------------------------

def _token_from_pattern(pattern: FailurePattern) -> str:
    """Guard token prescribed by the pattern, defaulting to YES."""
    for source in (pattern.description, *pattern.prescribed_actions):
        token = _guard_token(source)
        if token:
            return token
    return "YES"


def _sequencing_text(description: str, actions: Sequence[str]) -> str:
    if len(actions) > len(ORDINAL_MARKERS):
        raise ProtocolError(
            f"sequencing rules support at most {len(ORDINAL_MARKERS)} actions"
        )
    steps = " ".join(
        f"Execute {action} {marker}."
        for action, marker in zip(actions, ORDINAL_MARKERS)
    )
    return f"Sequencing Rule: {description} {steps}"


def _pattern_node(node_id: str, pattern: FailurePattern) -> ProtocolNode:
    if pattern.category == "sequencing":
        actions = tuple(pattern.prescribed_actions)
        return ProtocolNode(
            node_id=node_id,
            kind="sequencing_rule",
            text=_sequencing_text(pattern.description, actions),
            ordered_actions=actions,
        )
    if pattern.category == "guardrail":
        token = _token_from_pattern(pattern)
        text = (
            f"Safety Check: {pattern.description} Ask for a literal \"{token}\". "
            "If the user says anything else, DO NOT execute; ask again."
        )
        return ProtocolNode(
            node_id=node_id, kind="guard", text=text, required_token=token
        )
    if pattern.category == "recovery":
        return ProtocolNode(
            node_id=node_id, kind="recovery", text=f"Recovery: {pattern.description}"
        )
    if pattern.category == "ambiguity" and pattern.prescribed_actions:
        children = tuple(
            ProtocolNode(node_id=f"{node_id}.{j}", kind="step", text=action)
            for j, action in enumerate(pattern.prescribed_actions, 1)
        )
        return ProtocolNode(
            node_id=node_id, kind="branch", text=pattern.description, children=children
        )
    # ambiguity without sub-steps, and scope rules, become plain steps
    return ProtocolNode(node_id=node_id, kind="step", text=pattern.description)


def build_decision_tree(patterns: Sequence[FailurePattern]) -> DecisionTreeProtocol:
    """Deterministically assemble a protocol from failure patterns.

    Patterns are grouped by category in the fixed order ambiguity,
    sequencing, guardrail, recovery, scope; each non-empty group becomes a
    root branch numbered from 1 and each pattern one child node. Identical
    input lists produce byte-identical rendered protocols.
    """
    if not patterns:
        raise ProtocolError("nothing to synthesize: no failure patterns")

    roots: list[ProtocolNode] = []
    root_num = 0
    for category in PATTERN_CATEGORIES:
        group = [p for p in patterns if p.category == category]
        if not group:
            continue
        root_num += 1
        root_id = str(root_num)
        children = tuple(
            _pattern_node(f"{root_id}.{i}", pattern)
            for i, pattern in enumerate(group, 1)
        )
        roots.append(
            ProtocolNode(
                node_id=root_id,
                kind="branch",
                text=CATEGORY_HEADINGS[category],
                children=children,
            )
        )

    title = "Decision Tree Protocol"
    tree = DecisionTreeProtocol(
        protocol_id=_content_id(_render_text(title, tuple(roots))),
        title=title,
        roots=tuple(roots),
    )
    violations = validate_protocol(tree)
    if violations:
        listing = "; ".join(str(v) for v in violations)
        raise ProtocolError(
            f"assembled protocol failed validation (pattern text likely "
            f"collides with kind markers): {listing}"
        )
    return tree
