"""
Testes unitários para o gateway de chat-completion.
"""

import asyncio
import json

import httpx
import pytest

from app.core.exceptions import AuthError, BackendUnavailable, MalformedResponse
from app.models.llm import BackendSpec, ChatMessage, CompletionRequest, CompletionResponse, ImagePart, MockScript, TextPart
from app.services.llm_gateway import (
    ChatGateway,
    HttpChatTransport,
    SlidingWindowRateLimiter,
    cache_key,
    request_payload,
)
from app.services.mock_backend import MockChatTransport
from tests.conftest import FAST_BACKEND, FakeClock

SPEC = BackendSpec(
    endpoint_url="http://backend.test/v1/chat/completions",
    model_id="test-model",
    max_retries=3,
    backoff_base_ms=100,
)


def request(text="hello", **kwargs) -> CompletionRequest:
    return CompletionRequest(model_id="test-model", messages=[ChatMessage.text("user", text)], **kwargs)


def image_request(data: bytes) -> CompletionRequest:
    message = ChatMessage(
        role="user",
        parts=[TextPart(content="look"), ImagePart(label="Modality CXR: chest X-ray.", data=data)],
    )
    return CompletionRequest(model_id="test-model", messages=[message])


def ok_body(text="PROBABILITY: 0.7"):
    return {"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]}


def http_gateway(handler, clock: FakeClock, spec: BackendSpec = SPEC) -> ChatGateway:
    client = httpx.AsyncClient(transport=httpx.MockTransport(handler))
    return ChatGateway(spec, HttpChatTransport(spec, client=client), clock=clock, sleep=clock.sleep)


class TestHttpRetry:
    """Testes para retentativas do transporte HTTP."""

    async def test_retries_after_429(self, fake_clock):
        """Testa sucesso após duas respostas 429."""
        calls = []

        def handler(req: httpx.Request) -> httpx.Response:
            calls.append(req)
            if len(calls) <= 2:
                return httpx.Response(429, text="slow down")
            return httpx.Response(200, json=ok_body())

        gateway = http_gateway(handler, fake_clock)
        response = await gateway.complete(request())

        assert response.text == "PROBABILITY: 0.7"
        assert response.retry_count == 2
        assert len(calls) == 3
        assert len(fake_clock.sleeps) == 2
        assert 0.08 <= fake_clock.sleeps[0] <= 0.12
        assert 0.16 <= fake_clock.sleeps[1] <= 0.24
        assert gateway.stats.retries == 2

    async def test_exhausted_retries_raise(self, fake_clock):
        """Testa BackendUnavailable após esgotar as tentativas."""
        gateway = http_gateway(lambda req: httpx.Response(503), fake_clock)
        with pytest.raises(BackendUnavailable) as exc:
            await gateway.complete(request())
        assert exc.value.attempts == 4
        assert gateway.stats.network_calls == 4

    async def test_auth_error_not_retried(self, fake_clock):
        """Testa que 401 não é repetido."""
        calls = []

        def handler(req):
            calls.append(req)
            return httpx.Response(401)

        gateway = http_gateway(handler, fake_clock)
        with pytest.raises(AuthError):
            await gateway.complete(request())
        assert len(calls) == 1

    async def test_malformed_body(self, fake_clock):
        """Testa corpo não decodificável."""
        gateway = http_gateway(lambda req: httpx.Response(200, text="not json"), fake_clock)
        with pytest.raises(MalformedResponse):
            await gateway.complete(request())

    async def test_bearer_token_from_env(self, fake_clock, monkeypatch):
        """Testa token lido da variável de ambiente do BackendSpec."""
        monkeypatch.setenv("LLM_API_KEY", "secret")
        seen = {}

        def handler(req):
            seen["auth"] = req.headers.get("Authorization")
            seen["body"] = json.loads(req.content)
            return httpx.Response(200, json=ok_body())

        gateway = http_gateway(handler, fake_clock)
        await gateway.complete(request(seed=7))
        assert seen["auth"] == "Bearer secret"
        assert seen["body"]["model"] == "test-model"
        assert seen["body"]["seed"] == 7

    async def test_jitter_is_seeded(self):
        """Testa que o jitter é reprodutível pela semente."""
        a = ChatGateway(SPEC, MockChatTransport(MockScript(default="x")), jitter_seed=5)
        b = ChatGateway(SPEC, MockChatTransport(MockScript(default="x")), jitter_seed=5)
        assert [a.backoff_delay(i) for i in range(4)] == [b.backoff_delay(i) for i in range(4)]


class TestWireFormat:
    """Testes para o formato de fio."""

    def test_image_payload_keeps_label(self):
        """Testa que a imagem vem precedida do rótulo."""
        payload = request_payload(image_request(b"abc"))
        content = payload["messages"][0]["content"]
        assert content[0] == {"type": "text", "text": "look"}
        assert content[1] == {"type": "text", "text": "Modality CXR: chest X-ray."}
        assert content[2]["type"] == "image_url"
        assert content[2]["image_url"]["url"].startswith("data:image/jpeg;base64,")

    def test_text_only_payload_is_string(self):
        """Testa mensagem só de texto como string."""
        assert request_payload(request("hi"))["messages"][0]["content"] == "hi"

    def test_cache_key_depends_on_content(self):
        """Testa chave de cache por conteúdo."""
        assert cache_key(image_request(b"abc")) == cache_key(image_request(b"abc"))
        assert cache_key(image_request(b"abc")) != cache_key(image_request(b"abd"))
        assert cache_key(request()) != cache_key(request(template_hash="other"))
        assert cache_key(request()) != cache_key(request(seed=1))

    async def test_vision_less_backend_strips_images(self):
        """Testa remoção de imagens para backbone sem visão."""
        transport = MockChatTransport(MockScript(default="PROBABILITY: 0.1"))
        spec = FAST_BACKEND.model_copy(update={"supports_vision": False})
        await ChatGateway(spec, transport).complete(image_request(b"abc"))

        parts = transport.requests[0].messages[0].parts
        assert all(isinstance(p, TextPart) for p in parts)
        assert parts[1].content == "Modality CXR: chest X-ray."


class TestCache:
    """Testes para o cache em disco."""

    async def test_hit_after_miss(self, tmp_path):
        """Testa acerto de cache na segunda chamada."""
        transport = MockChatTransport(MockScript(default="PROBABILITY: 0.3"))
        gateway = ChatGateway(FAST_BACKEND, transport, cache_dir=tmp_path)

        first = await gateway.cached_complete(request())
        second = await gateway.cached_complete(request())

        assert transport.calls == 1
        assert gateway.stats.cache_hits == 1
        assert not first.from_cache
        assert second.from_cache
        assert second.text == first.text

    async def test_corrupt_entry_is_miss(self, tmp_path):
        """Testa que entrada corrompida vira miss e é regravada."""
        transport = MockChatTransport(MockScript(default="PROBABILITY: 0.3"))
        gateway = ChatGateway(FAST_BACKEND, transport, cache_dir=tmp_path)
        await gateway.cached_complete(request())

        key = cache_key(request())
        entry = tmp_path / key[:2] / f"{key}.json"
        data = json.loads(entry.read_text())
        data["response"]["text"] = "PROBABILITY: 0.99"
        entry.write_text(json.dumps(data))

        response = await gateway.cached_complete(request())
        assert response.text == "PROBABILITY: 0.3"
        assert gateway.stats.corrupt_entries == 1
        assert transport.calls == 2
        assert gateway.read_cache(key).text == "PROBABILITY: 0.3"

    async def test_uncacheable_goes_to_network(self, tmp_path):
        """Testa que amostragem sem seed não usa cache."""
        transport = MockChatTransport(MockScript(default="PROBABILITY: 0.3"))
        gateway = ChatGateway(FAST_BACKEND, transport, cache_dir=tmp_path)
        req = request(temperature=0.7)

        await gateway.cached_complete(req)
        await gateway.cached_complete(req)
        assert transport.calls == 2
        assert gateway.stats.uncacheable_calls == 2
        assert gateway.stats.cache_hits == 0

    async def test_retry_count_survives_cache(self, tmp_path):
        """Testa que retry_count é preservado no cache."""
        gateway = ChatGateway(FAST_BACKEND, MockChatTransport(MockScript(default="x")), cache_dir=tmp_path)
        gateway.write_cache("ab" + "0" * 62, CompletionResponse(text="y", retry_count=2))
        cached = gateway.read_cache("ab" + "0" * 62)
        assert cached.retry_count == 2
        assert cached.from_cache


class SlowTransport:
    """Transporte instrumentado que mede requisições simultâneas."""

    def __init__(self):
        self.in_flight = 0
        self.peak = 0

    async def send(self, request: CompletionRequest) -> CompletionResponse:
        self.in_flight += 1
        self.peak = max(self.peak, self.in_flight)
        await asyncio.sleep(0.01)
        self.in_flight -= 1
        return CompletionResponse(text="PROBABILITY: 0.5")


class TestLimits:
    """Testes para limites de concorrência e taxa."""

    async def test_concurrency_cap(self):
        """Testa que no máximo max_concurrent requisições ficam em voo."""
        transport = SlowTransport()
        spec = FAST_BACKEND.model_copy(update={"max_concurrent": 2})
        gateway = ChatGateway(spec, transport)

        await asyncio.gather(*[gateway.complete(request(f"r{i}")) for i in range(10)])
        assert transport.peak == 2

    async def test_rate_limiter_sliding_window(self, fake_clock):
        """Testa que a 4ª requisição num limite de 3/min espera a janela."""
        limiter = SlidingWindowRateLimiter(3, clock=fake_clock, sleep=fake_clock.sleep)
        for _ in range(5):
            await limiter.acquire()
        assert fake_clock.sleeps == [60.0]
        assert fake_clock.now == 60.0
