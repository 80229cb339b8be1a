"""The bundled desk-scale world: a retail order-service toy plus a member
handbook retrieval toy, with a deterministic rule-driven contestant.

The contestant stands in for an LLM agent. Its competence is keyed off
phrases in its system prompt, so splicing a synthesized protocol into the
prompt changes its behavior the way a real instruction change would:

* ``modify_address first``   -> address changes run before item changes
* ``literal "yes"``          -> state changes wait for a literal YES
* ``last name``              -> asks for the missing last name, then uses
                                the name + zip lookup
* ``transfer_to_human_agents`` -> transfers after failed identity lookups
* ``merge context``          -> search queries merge every user turn
* ``no_data``                -> speculative questions get the disclaimer

Everything is a pure function of the request, so episodes replay
identically and may run concurrently.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

from ..backend import ChatRequest, ChatResponse
from .base import (
    Corpus,
    DISCLAIMER_DIRECTIVE,
    Environment,
    SEARCH_DIRECTIVE,
    TaskSpec,
    ToolDef,
    ToolRegistry,
    extract_tool_calls,
    load_tasks,
    normalize_tokens,
)

_EMAIL_RE = re.compile(r"[\w.+-]+@[\w-]+(?:\.[\w-]+)+")
_ORDER_RE = re.compile(r"\bW\d+\b")
_ZIP_RE = re.compile(r"\b\d{5}\b")
_HARD_YES_RE = re.compile(r"(?<![A-Za-z])YES(?![A-Za-z])")

_SOFT_AFFIRMATIONS = {
    "okay", "ok", "sure", "yes", "yep", "fine", "go ahead", "yes please",
    "sounds good", "confirm",
}

_SPECULATIVE_MARKERS = ("will the", "in the future", "should i", "predict")

_STOPWORDS = {
    "i", "a", "an", "the", "and", "or", "to", "of", "for", "in", "on", "at",
    "is", "are", "was", "be", "am", "do", "does", "did", "how", "what",
    "which", "who", "when", "where", "why", "will", "would", "should",
    "can", "could", "my", "me", "we", "you", "your", "it", "its", "this",
    "that", "much", "many", "about", "with", "into", "instead", "have",
    "has", "had", "please", "know", "need", "want", "like",
}

MUTATING_TOOLS = ("cancel_pending_order", "modify_address", "modify_items")

DISCLAIMER_REPLY = (
    f"{DISCLAIMER_DIRECTIVE}: Apologies, this information is not currently "
    "available in the system database."
)


# ---------------------------------------------------------------------------
# world and tools
# ---------------------------------------------------------------------------

def desk_world() -> dict:
    """Initial per-episode state for the retail toy."""
    return {
        "users_by_email": {
            "dana@example.com": "U2",
            "ava@example.com": "U1",
            "omar@example.com": "U4",
            "lena@example.com": "U5",
            "noah@example.com": "U6",
        },
        "users_by_zip": {"30301": "U3"},
        "orders": {
            order_id: {"status": "pending", "address_updated": False, "items_updated": False}
            for order_id in ("W100", "W200", "W310", "W410", "W520", "W600")
        },
        "transferred": False,
    }


def _find_user_by_email(state: dict, args: dict[str, str]) -> str:
    email = args.get("email", "").strip().lower()
    user_id = state["users_by_email"].get(email)
    if user_id is None:
        return "not_found"
    state["authenticated_user"] = user_id
    return f"user_id={user_id}"


def _find_user_by_name_zip(state: dict, args: dict[str, str]) -> str:
    zip_code = args.get("zip", "").strip()
    user_id = state["users_by_zip"].get(zip_code)
    if user_id is None:
        return "not_found"
    state["authenticated_user"] = user_id
    return f"user_id={user_id}"


def _get_order(state: dict, args: dict[str, str]) -> dict | None:
    return state["orders"].get(args.get("order_id", "").strip())


def _get_order_details(state: dict, args: dict[str, str]) -> str:
    order = _get_order(state, args)
    if order is None:
        return "not_found"
    return f"status={order['status']}"


def _cancel_pending_order(state: dict, args: dict[str, str]) -> str:
    order = _get_order(state, args)
    if order is None:
        return "error: order not found"
    if order["status"] != "pending":
        return "error: order not pending"
    order["status"] = "cancelled"
    return "cancelled"


def _modify_address(state: dict, args: dict[str, str]) -> str:
    order = _get_order(state, args)
    if order is None:
        return "error: order not found"
    if order["status"] != "pending":
        return "error: order not pending"
    order["address_updated"] = True
    return "address_updated"


def _modify_items(state: dict, args: dict[str, str]) -> str:
    order = _get_order(state, args)
    if order is None:
        return "error: order not found"
    if order["status"] != "pending":
        return "error: order not pending"
    order["items_updated"] = True
    return "items_updated"


def _transfer(state: dict, args: dict[str, str]) -> str:
    state["transferred"] = True
    return "transfer_initiated"


def desk_registry() -> ToolRegistry:
    return ToolRegistry(
        [
            ToolDef("find_user_id_by_email", ("email",), _find_user_by_email),
            ToolDef("find_user_id_by_name_zip", ("name", "zip"), _find_user_by_name_zip),
            ToolDef("get_order_details", ("order_id",), _get_order_details),
            ToolDef(
                "cancel_pending_order", ("order_id", "reason"),
                _cancel_pending_order, mutating=True,
            ),
            ToolDef(
                "modify_address", ("order_id", "address"),
                _modify_address, mutating=True,
            ),
            ToolDef(
                "modify_items", ("order_id", "items"),
                _modify_items, mutating=True,
            ),
            ToolDef("transfer_to_human_agents", (), _transfer),
        ]
    )


# ---------------------------------------------------------------------------
# rule-driven contestant
# ---------------------------------------------------------------------------

class DeskContestantBackend:
    """Deterministic contestant whose skill level tracks its system prompt.

    Implements the same complete() interface as the scripted and HTTP
    backends; stateless, so safe for concurrent episodes.
    """

    def complete(self, request: ChatRequest) -> ChatResponse:
        system = next(
            (m.content for m in request.messages if m.role == "system"), ""
        )
        user_texts = [m.content for m in request.messages if m.role == "user"]
        assistant_texts = [m.content for m in request.messages if m.role == "assistant"]
        tool_texts = [m.content for m in request.messages if m.role == "tool"]
        all_user = " ".join(user_texts)

        if _EMAIL_RE.search(all_user) or _ORDER_RE.search(all_user) or _ZIP_RE.search(all_user):
            reply = self._retail_reply(system, user_texts, assistant_texts, tool_texts)
        else:
            reply = self._retrieval_reply(system, user_texts)
        return ChatResponse(content=reply, finish_reason="stop", usage=(0, 0))

    # -- retail ------------------------------------------------------------

    @staticmethod
    def _intent(all_user: str) -> str:
        text = all_user.lower()
        wants_address = "address" in text
        wants_items = "item" in text or "swap" in text
        if wants_address and wants_items:
            return "both"
        if "cancel" in text:
            return "cancel"
        if wants_items:
            return "items"
        if wants_address:
            return "address"
        return "status"

    def _retail_reply(
        self,
        system: str,
        user_texts: list[str],
        assistant_texts: list[str],
        tool_texts: list[str],
    ) -> str:
        flags = system.lower()
        sequencing_aware = "modify_address first" in flags
        guard_aware = 'literal "yes"' in flags
        lastname_aware = "last name" in flags
        recovery_aware = "transfer_to_human_agents" in flags

        all_user = " ".join(user_texts)
        latest = user_texts[-1] if user_texts else ""
        called = [
            call.name
            for content in assistant_texts
            for call in extract_tool_calls(content)
        ]
        intent = self._intent(all_user)
        order_match = _ORDER_RE.search(all_user)
        order_id = order_match.group(0) if order_match else "W000"
        email_match = _EMAIL_RE.search(all_user)
        zip_match = _ZIP_RE.search(all_user)

        auth_attempted = any(name.startswith("find_user_id") for name in called)
        auth_ok = any(
            text.startswith("find_user_id") and "user_id=" in text
            for text in tool_texts
        )
        auth_failed = auth_attempted and not auth_ok
        executed = any(name in MUTATING_TOOLS for name in called)
        transferred = "transfer_to_human_agents" in called
        proposed = any("please confirm" in text.lower() for text in assistant_texts)

        if executed or transferred:
            return "You're all set. Is there anything else I can help with?"

        if auth_failed:
            if recovery_aware:
                return (
                    "[transfer_to_human_agents()] I could not verify the account, "
                    "so I am transferring you to a human agent. Please hold on."
                )
            return "I'm sorry, I couldn't find an account with those details."

        calls: list[str] = []
        parts: list[str] = []
        if not auth_attempted:
            if email_match:
                calls.append(f"[find_user_id_by_email(email={email_match.group(0)})]")
            elif zip_match:
                if lastname_aware:
                    if "last name" not in all_user.lower():
                        return "Happy to help. Could I have your last name to verify the account?"
                    calls.append(
                        f"[find_user_id_by_name_zip(name={self._full_name(all_user)}, "
                        f"zip={zip_match.group(0)})]"
                    )
                # without the protocol the agent fumbles the name+zip path
                # and proceeds unverified
            else:
                return "Could you share the email, or the name and zip code, on the account?"

        if intent == "status":
            if "get_order_details" not in called:
                calls.append(f"[get_order_details(order_id={order_id})]")
                parts.append(f"Let me pull up order {order_id}.")
            else:
                parts.append("That order is shown above. Anything else?")
            return " ".join(calls + parts)

        # mutating intents need a proposal / confirmation exchange
        affirmation = self._affirmation(latest)
        if proposed and affirmation and not calls:
            if guard_aware and not _HARD_YES_RE.search(latest):
                return (
                    'I can only proceed on a literal "YES". '
                    f"Please confirm the change to order {order_id} with YES."
                )
            return " ".join(self._execution_calls(intent, order_id, sequencing_aware)) + " Done."

        plan = self._plan_text(intent, order_id)
        if guard_aware:
            parts.append(f"{plan} Please confirm with a literal \"YES\".")
        else:
            parts.append(f"{plan} Please confirm.")
        return " ".join(calls + parts)

    @staticmethod
    def _full_name(all_user: str) -> str:
        first = re.search(r"(?:I'm|I am|this is)\s+([A-Z][a-z]+)", all_user)
        last = re.search(r"last name is\s+([A-Z][a-z]+)", all_user)
        pieces = [m.group(1) for m in (first, last) if m]
        return " ".join(pieces) if pieces else "unknown"

    @staticmethod
    def _affirmation(latest: str) -> bool:
        if _HARD_YES_RE.search(latest):
            return True
        return latest.strip().rstrip(".!").lower() in _SOFT_AFFIRMATIONS

    @staticmethod
    def _plan_text(intent: str, order_id: str) -> str:
        plans = {
            "cancel": f"I can cancel order {order_id} (reason: no longer needed).",
            "address": f"I can update the shipping address on order {order_id}.",
            "items": f"I can swap the requested items on order {order_id}.",
            "both": (
                f"I can update the shipping address and swap the items on order {order_id}."
            ),
        }
        return plans[intent]

    @staticmethod
    def _execution_calls(intent: str, order_id: str, sequencing_aware: bool) -> list[str]:
        address_call = f"[modify_address(order_id={order_id}, address=as requested)]"
        items_call = f"[modify_items(order_id={order_id}, items=as requested)]"
        if intent == "cancel":
            return [f"[cancel_pending_order(order_id={order_id}, reason=no longer needed)]"]
        if intent == "address":
            return [address_call]
        if intent == "items":
            return [items_call]
        if sequencing_aware:
            return [address_call, items_call]
        return [items_call, address_call]

    # -- retrieval ----------------------------------------------------------

    def _retrieval_reply(self, system: str, user_texts: list[str]) -> str:
        flags = system.lower()
        merge_aware = "merge context" in flags
        scope_aware = "no_data" in flags
        all_user = " ".join(user_texts).lower()

        if any(marker in all_user for marker in _SPECULATIVE_MARKERS):
            if scope_aware:
                return DISCLAIMER_REPLY
            return (
                "Generally, the fund is financed by member contributions and "
                "investment returns, and benefit levels are reviewed every year."
            )

        source = " ".join(user_texts) if merge_aware else user_texts[-1]
        tokens = [t for t in normalize_tokens(source) if t not in _STOPWORDS]
        if not tokens:
            return "Could you tell me a bit more about what you are looking for?"
        return f"{SEARCH_DIRECTIVE} {' '.join(tokens)}"


# ---------------------------------------------------------------------------
# bundled dataset
# ---------------------------------------------------------------------------

def desk_data_dir() -> Path:
    return Path(str(resources.files("promptloop").joinpath("data/desk")))


def load_desk_tasks() -> list[TaskSpec]:
    base = desk_data_dir()
    tasks = load_tasks(base / "retail_tasks.json")
    tasks.extend(load_tasks(base / "retrieval_tasks.json"))
    return tasks


def load_desk_corpus() -> Corpus:
    return Corpus.from_file(desk_data_dir() / "corpus.json")


def load_desk_baseline_prompt_text() -> str:
    return (desk_data_dir() / "baseline_prompt.txt").read_text(encoding="utf-8")


def build_desk_environment(max_turns: int = 12, retrieval_k: int = 5) -> Environment:
    return Environment(
        registry=desk_registry(),
        corpus=load_desk_corpus(),
        world=desk_world(),
        max_turns=max_turns,
        retrieval_k=retrieval_k,
    )
