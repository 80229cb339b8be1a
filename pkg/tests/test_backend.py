"""Backends: scripted replay, HTTP retry behavior, structured extraction."""

from __future__ import annotations

import json
import threading

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from promptloop.backend import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    ConcurrentScriptUseError,
    HttpBackend,
    MalformedOutputError,
    SchemaViolationError,
    ScriptAmbiguityError,
    ScriptEntry,
    ScriptExhaustedError,
    ScriptedBackend,
    TransportError,
    hash_messages,
    parse_structured,
)


def request(*contents: str) -> ChatRequest:
    return ChatRequest(
        model_name="m",
        messages=tuple(ChatMessage("user", c) for c in contents),
    )


class TestRequestResponseTypes:
    def test_request_needs_messages(self):
        with pytest.raises(ValueError):
            ChatRequest(model_name="m", messages=())

    def test_first_message_role(self):
        with pytest.raises(ValueError):
            ChatRequest(model_name="m", messages=(ChatMessage("assistant", "x"),))

    def test_stop_requires_content(self):
        with pytest.raises(ValueError):
            ChatResponse(content="", finish_reason="stop")
        ChatResponse(content="", finish_reason="error")

    def test_script_entry_needs_exactly_one_matcher(self):
        with pytest.raises(ValueError):
            ScriptEntry(reply="r")
        with pytest.raises(ValueError):
            ScriptEntry(reply="r", turn_index=0, message_hash="h")


class TestScriptedBackend:
    def test_turn_index_lookup(self):
        backend = ScriptedBackend([ScriptEntry(reply="first", turn_index=0),
                                   ScriptEntry(reply="second", turn_index=1)])
        assert backend.complete(request("a")).content == "first"
        assert backend.complete(request("b")).content == "second"

    def test_hash_matching(self):
        req = request("hello there")
        entry = ScriptEntry(reply="matched", message_hash=hash_messages(req.messages))
        backend = ScriptedBackend([entry])
        assert backend.complete(req).content == "matched"

    def test_exhausted_script_fails_loudly(self):
        backend = ScriptedBackend([ScriptEntry(reply="only", turn_index=0)])
        backend.complete(request("a"))
        with pytest.raises(ScriptExhaustedError, match="exhausted"):
            backend.complete(request("b"))

    def test_ambiguous_match_rejected(self):
        req = request("x")
        backend = ScriptedBackend([
            ScriptEntry(reply="a", turn_index=0),
            ScriptEntry(reply="b", message_hash=hash_messages(req.messages)),
        ])
        with pytest.raises(ScriptAmbiguityError):
            backend.complete(req)

    def test_duplicate_matchers_rejected_at_construction(self):
        with pytest.raises(ValueError):
            ScriptedBackend([ScriptEntry(reply="a", turn_index=0),
                             ScriptEntry(reply="b", turn_index=0)])

    def test_replay_is_byte_identical(self):
        entries = [ScriptEntry(reply=f"reply-{i}", turn_index=i) for i in range(5)]
        requests = [request(f"turn {i}") for i in range(5)]
        runs = []
        for _ in range(2):
            backend = ScriptedBackend(entries)
            runs.append([backend.complete(r).content for r in requests])
        assert runs[0] == runs[1]

    def test_turn_indexed_script_rejects_concurrent_use(self):
        backend = ScriptedBackend([ScriptEntry(reply="r", turn_index=0)])
        backend._lock.acquire()
        try:
            with pytest.raises(ConcurrentScriptUseError):
                backend.complete(request("a"))
        finally:
            backend._lock.release()

    def test_hash_only_script_serializes_concurrent_calls(self):
        req = request("same")
        backend = ScriptedBackend(
            [ScriptEntry(reply="ok", message_hash=hash_messages(req.messages))]
        )
        results = []
        threads = [
            threading.Thread(target=lambda: results.append(backend.complete(req).content))
            for _ in range(8)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == ["ok"] * 8

    def test_from_file(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps([{"turn_index": 0, "reply": "hi"}]))
        backend = ScriptedBackend.from_file(path)
        assert backend.complete(request("x")).content == "hi"


class TestHttpBackend:
    @staticmethod
    def _backend(handler) -> HttpBackend:
        return HttpBackend(
            base_url="http://llm.test/v1",
            transport=httpx.MockTransport(handler),
            sleep=lambda _s: None,
        )

    def test_happy_path_posts_wire_format(self, monkeypatch):
        monkeypatch.setenv("PROMPTLOOP_API_KEY", "sekret")
        seen = {}

        def handler(req: httpx.Request) -> httpx.Response:
            seen["body"] = json.loads(req.content)
            seen["auth"] = req.headers.get("authorization")
            return httpx.Response(200, json={
                "choices": [{"message": {"content": "hello"}, "finish_reason": "stop"}],
                "usage": {"prompt_tokens": 7, "completion_tokens": 2},
            })

        response = self._backend(handler).complete(request("ping"))
        assert response.content == "hello"
        assert response.usage == (7, 2)
        assert seen["auth"] == "Bearer sekret"
        assert set(seen["body"]) == {"model", "messages", "temperature", "max_tokens"}
        assert seen["body"]["messages"] == [{"role": "user", "content": "ping"}]

    def test_retries_429_then_succeeds(self):
        attempts = {"n": 0}

        def handler(req: httpx.Request) -> httpx.Response:
            attempts["n"] += 1
            if attempts["n"] == 1:
                return httpx.Response(429, json={"error": "slow down"})
            return httpx.Response(200, json={
                "choices": [{"message": {"content": "after retry"},
                             "finish_reason": "stop"}],
            })

        response = self._backend(handler).complete(request("x"))
        assert response.content == "after retry"
        assert attempts["n"] == 2

    def test_exhausted_retries_raise_transport_error(self):
        def handler(req: httpx.Request) -> httpx.Response:
            return httpx.Response(503)

        with pytest.raises(TransportError, match="after 3 attempts"):
            self._backend(handler).complete(request("x"))

    def test_non_retryable_status_fails_immediately(self):
        attempts = {"n": 0}

        def handler(req: httpx.Request) -> httpx.Response:
            attempts["n"] += 1
            return httpx.Response(401)

        with pytest.raises(TransportError):
            self._backend(handler).complete(request("x"))
        assert attempts["n"] == 1

    def test_length_finish_reason_mapped(self):
        def handler(req: httpx.Request) -> httpx.Response:
            return httpx.Response(200, json={
                "choices": [{"message": {"content": "trunc"}, "finish_reason": "length"}],
            })

        assert self._backend(handler).complete(request("x")).finish_reason == "length"


class TestParseStructured:
    def response(self, content: str) -> ChatResponse:
        return ChatResponse(content=content, finish_reason="stop")

    def test_fenced_json_report(self):
        content = (
            "Here is the analysis you asked for:\n"
            "```json\n"
            '{"diagnosis": "lost the thread of the earlier request",'
            ' "prescription": "carry prior turns into the query"}\n'
            "```\nHope that helps!"
        )
        payload = parse_structured(self.response(content), "analysis_report")
        assert payload["prescription"] == "carry prior turns into the query"

    def test_bare_json_with_surrounding_prose(self):
        content = 'Sure thing. {"diagnosis": "d", "prescription": "p"} Anything else?'
        payload = parse_structured(self.response(content), "analysis_report")
        assert payload == {"diagnosis": "d", "prescription": "p"}

    def test_pure_prose_is_malformed(self):
        with pytest.raises(MalformedOutputError) as err:
            parse_structured(self.response("I could not find anything wrong."),
                             "analysis_report")
        assert err.value.raw_content == "I could not find anything wrong."

    def test_missing_required_field_names_it(self):
        with pytest.raises(SchemaViolationError, match="prescription"):
            parse_structured(self.response('{"diagnosis": "d"}'), "analysis_report")

    def test_pattern_list_schema(self):
        patterns = [{
            "pattern_id": "p",
            "category": "sequencing",
            "description": "order the calls",
            "prescribed_actions": ["a", "b"],
            "evidence_task_ids": ["t1"],
        }]
        payload = parse_structured(self.response(json.dumps(patterns)), "pattern_list")
        assert payload == patterns

    def test_sequencing_pattern_needs_two_actions(self):
        patterns = [{
            "pattern_id": "p",
            "category": "sequencing",
            "description": "order the calls",
            "prescribed_actions": ["only-one"],
            "evidence_task_ids": ["t1"],
        }]
        with pytest.raises(SchemaViolationError):
            parse_structured(self.response(json.dumps(patterns)), "pattern_list")

    def test_unknown_schema_rejected(self):
        with pytest.raises(ValueError, match="unknown response schema"):
            parse_structured(self.response("{}"), "mystery")

    @given(
        st.fixed_dictionaries({
            "diagnosis": st.text(min_size=1, max_size=40),
            "prescription": st.text(min_size=1, max_size=40),
        })
    )
    def test_embed_extract_round_trip(self, payload):
        content = f"Preamble.\n```json\n{json.dumps(payload)}\n```\nTrailer."
        assert parse_structured(self.response(content), "analysis_report") == payload
