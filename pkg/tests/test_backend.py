import threading
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest

from bell.backend import (
    AuthError,
    Backend,
    BackendProfile,
    BackendUnavailableError,
    ChatMessage,
    ChatRequest,
    DegenerateEmbeddingError,
    EmbeddingVector,
    HttpChatEngine,
    LocalHashEmbedEngine,
    ProtocolError,
    ScriptedChatEngine,
    ScriptRule,
    cache_key,
)


def _request(content="2+2?", temperature=0.0):
    return ChatRequest(
        messages=(ChatMessage("system", "sys"), ChatMessage("user", content)),
        temperature=temperature,
    )


HTTP_PROFILE = BackendProfile(
    name="m", model_id="test-model", kind="http", base_url="https://api.test/v1",
    max_retries=3,
)


class TestCacheKey:
    def test_insensitive_to_construction_order(self):
        a = ChatRequest(messages=(ChatMessage("user", "hi"),), temperature=0.0, want_logprobs=False)
        b = ChatRequest(want_logprobs=False, temperature=0.0, messages=(ChatMessage("user", "hi"),))
        assert cache_key("m", a) == cache_key("m", b)

    def test_temperature_changes_key(self):
        assert cache_key("m", _request(temperature=0.0)) != cache_key("m", _request(temperature=0.7))

    def test_model_id_changes_key(self):
        request = _request()
        assert cache_key("m1", request) != cache_key("m2", request)

    def test_chat_and_embedding_keys_distinct(self):
        assert cache_key("m", "some text") != cache_key(
            "m", ChatRequest(messages=(ChatMessage("user", "some text"),))
        )

    def test_is_256_bit_hex(self):
        assert len(cache_key("m", "text")) == 64


class TestChatRequestValidation:
    def test_empty_messages_rejected(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=())

    def test_first_role_must_open_conversation(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=(ChatMessage("assistant", "hello"),))

    def test_positive_logprob_rejected(self):
        from bell.backend import ChatResponse

        with pytest.raises(ValueError):
            ChatResponse(content="x", token_logprobs=(0.5,))


class TestScriptedEngine:
    def test_rule_lookup(self):
        engine = ScriptedChatEngine([ScriptRule("2+2", "4")])
        response = engine.complete(HTTP_PROFILE, _request("what is 2+2?"), "a" * 64)
        assert response.content == "4"

    def test_default_reply_derives_from_key(self):
        engine = ScriptedChatEngine()
        response = engine.complete(HTTP_PROFILE, _request("anything"), "deadbeef" + "0" * 56)
        assert response.content == "ok:deadbeef"

    def test_pure_function_of_request(self):
        engine = ScriptedChatEngine([ScriptRule("x", "y")])
        request = _request("x marks the spot")
        key = cache_key("m", request)
        first = engine.complete(HTTP_PROFILE, request, key)
        second = engine.complete(HTTP_PROFILE, request, key)
        assert first == second


class TestHttpChat:
    def _engine(self, handler, sleeps=None):
        return HttpChatEngine(
            transport=httpx.MockTransport(handler),
            sleep=(sleeps.append if sleeps is not None else lambda s: None),
        )

    def test_retries_on_429_then_succeeds(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] <= 2:
                return httpx.Response(429, json={"error": "rate limited"})
            return httpx.Response(
                200,
                json={
                    "choices": [{"message": {"content": "fine"}}],
                    "usage": {"prompt_tokens": 3, "completion_tokens": 1},
                },
            )

        sleeps = []
        response = self._engine(handler, sleeps).complete(HTTP_PROFILE, _request(), "k" * 64)
        assert response.content == "fine"
        assert response.usage == (3, 1)
        assert calls["n"] == 3
        assert len(sleeps) == 2
        # exponential backoff with jitter in [0.5, 1.5): base 1s then 2s
        assert 0.5 <= sleeps[0] < 1.5
        assert 1.0 <= sleeps[1] < 3.0

    def test_exhausted_retries_carry_last_status(self):
        def handler(request):
            return httpx.Response(503, json={"error": "down"})

        with pytest.raises(BackendUnavailableError) as exc_info:
            self._engine(handler).complete(HTTP_PROFILE, _request(), "k" * 64)
        assert exc_info.value.last_status == 503

    def test_auth_error_is_immediate(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            return httpx.Response(401, json={"error": "no"})

        with pytest.raises(AuthError):
            self._engine(handler).complete(HTTP_PROFILE, _request(), "k" * 64)
        assert calls["n"] == 1

    def test_malformed_body_is_protocol_error(self):
        def handler(request):
            return httpx.Response(200, json={"unexpected": True})

        with pytest.raises(ProtocolError):
            self._engine(handler).complete(HTTP_PROFILE, _request(), "k" * 64)

    def test_logprobs_parsed(self):
        def handler(request):
            return httpx.Response(
                200,
                json={
                    "choices": [
                        {
                            "message": {"content": "x"},
                            "logprobs": {"content": [{"logprob": -0.5}, {"logprob": -1.0}]},
                        }
                    ],
                    "usage": {},
                },
            )

        request = ChatRequest(messages=(ChatMessage("user", "q"),), want_logprobs=True)
        response = self._engine(handler).complete(HTTP_PROFILE, request, "k" * 64)
        assert response.token_logprobs == (-0.5, -1.0)

    def test_embed_parses_vector(self):
        def handler(request):
            return httpx.Response(200, json={"data": [{"embedding": [0.1, 0.2, 0.3]}]})

        values = self._engine(handler).embed(HTTP_PROFILE, "hello", "k" * 64)
        assert values == (0.1, 0.2, 0.3)


class TestLocalHashEmbedder:
    def test_term_frequency_weights(self):
        engine = LocalHashEmbedEngine()
        profile = BackendProfile(name="e", model_id="tf", kind="local-hash", embedding_dim=64)
        values = engine.embed(profile, "a b a", "k" * 64)
        assert sorted(v for v in values if v) == [1.0, 2.0]

    def test_dimension_from_profile(self):
        engine = LocalHashEmbedEngine()
        profile = BackendProfile(name="e", model_id="tf", kind="local-hash", embedding_dim=128)
        assert len(engine.embed(profile, "hello world", "k" * 64)) == 128


class TestBackendFacade:
    def test_embed_identical_text_identical_vectors(self, tmp_path, embedder_profile):
        backend = Backend(cache_dir=tmp_path / "cache")
        first = backend.embed(embedder_profile, "4")
        second = backend.embed(embedder_profile, "4")
        assert first == second
        assert backend.engine_calls == 1  # second call served from cache

    def test_embed_empty_text_rejected(self, embedder_profile):
        backend = Backend()
        with pytest.raises(ValueError):
            backend.embed(embedder_profile, "")

    def test_degenerate_embedding_raises(self, embedder_profile):
        backend = Backend()
        with pytest.raises(DegenerateEmbeddingError):
            backend.embed(embedder_profile, "!!! ???")

    def test_warm_cache_issues_no_engine_calls(self, tmp_path, model_profile):
        scripts = {"model": (ScriptRule("2+2", "4"),)}
        first = Backend(cache_dir=tmp_path / "cache", scripts=scripts)
        request = _request("2+2?")
        response = first.chat(model_profile, request)
        assert first.engine_calls == 1

        second = Backend(cache_dir=tmp_path / "cache", scripts=scripts)
        replay = second.chat(model_profile, request)
        assert replay == response
        assert second.engine_calls == 0

    def test_cache_layout(self, tmp_path, model_profile):
        backend = Backend(cache_dir=tmp_path / "cache")
        request = _request("layout?")
        backend.chat(model_profile, request)
        key = cache_key(model_profile.model_id, request)
        assert (tmp_path / "cache" / key[:2] / f"{key}.json").exists()

    def test_concurrency_never_exceeds_profile_limit(self):
        profile = BackendProfile(
            name="slow", model_id="slow-model", kind="scripted", max_concurrency=2
        )
        engine = ScriptedChatEngine(delay_s=0.02)
        backend = Backend()
        backend.register(profile, chat_engine=engine)
        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(lambda i: backend.chat(profile, _request(f"q {i}")), range(12)))
        assert engine.calls == 12
        assert engine.max_in_flight <= 2

    def test_embedding_vector_validation(self):
        with pytest.raises(ValueError):
            EmbeddingVector(values=(1.0,))
        assert EmbeddingVector(values=(0.0, 0.0)).is_zero()
