"""
Gateway de chat-completion: transporte HTTP compatível com OpenAI, limites de
concorrência e taxa, retentativas com backoff e cache endereçado por conteúdo.
"""

import asyncio
import hashlib
import json
import os
import random
import tempfile
import time
from collections import deque
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Awaitable, Callable, Deque, Dict, List, Optional, Protocol, Union

import httpx
from loguru import logger
from pydantic import BaseModel

from app.core.exceptions import (
    AuthError,
    BackendError,
    BackendUnavailable,
    CacheCorrupt,
    MalformedResponse,
    TransientBackendError,
)
from app.models.llm import BackendSpec, ChatMessage, CompletionRequest, CompletionResponse, ImagePart, TextPart

Clock = Callable[[], float]
Sleep = Callable[[float], Awaitable[None]]


class ChatTransport(Protocol):
    """Envia uma requisição e devolve a resposta decodificada."""

    async def send(self, request: CompletionRequest) -> CompletionResponse:
        ...


# ============================================================================
# FORMATO DE FIO
# ============================================================================

def strip_images(request: CompletionRequest) -> CompletionRequest:
    """Troca imagens pelo rótulo textual (backends sem visão)."""
    messages = [
        m.model_copy(
            update={"parts": [TextPart(content=p.label) if isinstance(p, ImagePart) else p for p in m.parts]}
        )
        for m in request.messages
    ]
    return request.model_copy(update={"messages": messages})


def message_payload(message: ChatMessage) -> Dict[str, Any]:
    """Mensagem no formato de partes de conteúdo de chat-completion."""
    if all(isinstance(p, TextPart) for p in message.parts):
        return {"role": message.role, "content": message.plain_text()}
    content: List[Dict[str, Any]] = []
    for part in message.parts:
        if isinstance(part, TextPart):
            content.append({"type": "text", "text": part.content})
        else:
            content.append({"type": "text", "text": part.label})
            content.append({"type": "image_url", "image_url": {"url": part.data_url()}})
    return {"role": message.role, "content": content}


def request_payload(request: CompletionRequest) -> Dict[str, Any]:
    payload: Dict[str, Any] = {
        "model": request.model_id,
        "messages": [message_payload(m) for m in request.messages],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    if request.seed is not None:
        payload["seed"] = request.seed
    return payload


def cache_key(request: CompletionRequest) -> str:
    """
    Digest da requisição canônica.

    Imagens entram pelo sha256 dos bytes e pelo media type; a ordem das chaves
    é fixa, então requisições iguais produzem a mesma chave.
    """
    messages = []
    for m in request.messages:
        parts = []
        for p in m.parts:
            if isinstance(p, TextPart):
                parts.append({"text": p.content})
            else:
                parts.append(
                    {
                        "label": p.label,
                        "image_sha256": hashlib.sha256(p.data).hexdigest(),
                        "media_type": p.media_type,
                    }
                )
        messages.append({"role": m.role, "parts": parts})
    canonical = {
        "model_id": request.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "seed": request.seed,
        "template_hash": request.template_hash,
    }
    blob = json.dumps(canonical, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ============================================================================
# TRANSPORTE HTTP
# ============================================================================

class HttpChatTransport:
    """Cliente de um endpoint compatível com /v1/chat/completions."""

    def __init__(self, spec: BackendSpec, client: Optional[httpx.AsyncClient] = None):
        self.spec = spec
        self._client = client or httpx.AsyncClient(timeout=spec.timeout_s)

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.spec.auth_token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    async def send(self, request: CompletionRequest) -> CompletionResponse:
        try:
            resp = await self._client.post(
                self.spec.endpoint_url,
                headers=self._headers(),
                json=request_payload(request),
                timeout=self.spec.timeout_s,
            )
        except httpx.TimeoutException as exc:
            raise TransientBackendError(None, f"timeout: {exc}")
        except httpx.TransportError as exc:
            raise TransientBackendError(None, f"transporte: {exc}")

        status = resp.status_code
        if status in (401, 403):
            raise AuthError(f"Backend rejeitou a credencial (HTTP {status})")
        if status == 429 or status >= 500:
            raise TransientBackendError(status, resp.text[:200])
        if status >= 400:
            raise BackendError(f"HTTP {status}: {resp.text[:200]}")

        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"Resposta não decodificável: {exc}")
        if not isinstance(text, str):
            raise MalformedResponse("Resposta sem conteúdo textual")
        return CompletionResponse(text=text, finish_reason=choice.get("finish_reason") or "stop")

    async def aclose(self) -> None:
        await self._client.aclose()


# ============================================================================
# LIMITE DE TAXA
# ============================================================================

class SlidingWindowRateLimiter:
    """No máximo `requests_per_minute` envios em qualquer janela de 60 s."""

    def __init__(
        self,
        requests_per_minute: int,
        clock: Clock = time.monotonic,
        sleep: Sleep = asyncio.sleep,
        window_s: float = 60.0,
    ):
        self.limit = requests_per_minute
        self.window_s = window_s
        self._clock = clock
        self._sleep = sleep
        self._sent: Deque[float] = deque()
        self._lock = asyncio.Lock()

    async def acquire(self) -> None:
        async with self._lock:
            while True:
                now = self._clock()
                while self._sent and now - self._sent[0] >= self.window_s:
                    self._sent.popleft()
                if len(self._sent) < self.limit:
                    self._sent.append(now)
                    return
                await self._sleep(self.window_s - (now - self._sent[0]))


# ============================================================================
# GATEWAY
# ============================================================================

class GatewayStats(BaseModel):
    """Contadores de uso do gateway."""
    network_calls: int = 0
    cache_hits: int = 0
    uncacheable_calls: int = 0
    retries: int = 0
    corrupt_entries: int = 0


class ChatGateway:
    """
    Ponto único de acesso ao backend.

    Combina semáforo de concorrência, limitador de taxa, retentativas com
    backoff exponencial e jitter (semeado) e o cache em disco.
    """

    def __init__(
        self,
        spec: BackendSpec,
        transport: ChatTransport,
        cache_dir: Optional[Union[str, Path]] = None,
        clock: Clock = time.monotonic,
        sleep: Sleep = asyncio.sleep,
        jitter_seed: int = 0,
    ):
        self.spec = spec
        self.transport = transport
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.stats = GatewayStats()
        self._sleep = sleep
        self._semaphore = asyncio.Semaphore(spec.max_concurrent)
        self._limiter = SlidingWindowRateLimiter(spec.requests_per_minute, clock=clock, sleep=sleep)
        self._jitter = random.Random(jitter_seed)

    def backoff_delay(self, attempt: int) -> float:
        """Atraso em segundos antes da tentativa `attempt + 1`."""
        return self.spec.backoff_base_ms * (2 ** attempt) * self._jitter.uniform(0.8, 1.2) / 1000.0

    async def complete(self, request: CompletionRequest) -> CompletionResponse:
        """
        Executa a requisição respeitando os limites do backend.

        Raises:
            BackendUnavailable: Tentativas esgotadas em falhas transitórias
            AuthError: Credencial rejeitada (sem retentativa)
            MalformedResponse: Corpo não decodificável (sem retentativa)
        """
        if not self.spec.supports_vision:
            request = strip_images(request)

        last_error: Optional[Exception] = None
        for attempt in range(self.spec.max_retries + 1):
            if attempt > 0:
                delay = self.backoff_delay(attempt - 1)
                logger.warning(f"Falha transitória ({last_error}); nova tentativa em {delay:.2f}s")
                self.stats.retries += 1
                await self._sleep(delay)

            async with self._semaphore:
                await self._limiter.acquire()
                started = time.perf_counter()
                try:
                    response = await self.transport.send(request)
                except TransientBackendError as exc:
                    last_error = exc
                    continue
                finally:
                    self.stats.network_calls += 1

            latency_ms = int((time.perf_counter() - started) * 1000)
            return response.model_copy(update={"latency_ms": latency_ms, "retry_count": attempt, "from_cache": False})

        raise BackendUnavailable(self.spec.max_retries + 1, last_error)

    async def cached_complete(self, request: CompletionRequest) -> CompletionResponse:
        """
        Como `complete`, consultando antes o cache endereçado por conteúdo.

        Requisições com temperatura > 0 e sem seed não são cacheáveis e vão
        sempre à rede.
        """
        if self.cache_dir is None:
            return await self.complete(request)
        if not request.cacheable:
            self.stats.uncacheable_calls += 1
            return await self.complete(request)

        key = cache_key(request)
        try:
            cached = self.read_cache(key)
        except CacheCorrupt as exc:
            logger.warning(f"{exc}; refazendo a requisição")
            self.stats.corrupt_entries += 1
            cached = None

        if cached is not None:
            self.stats.cache_hits += 1
            return cached

        response = await self.complete(request)
        self.write_cache(key, response)
        return response

    # ------------------------------------------------------------------------
    # Cache em disco
    # ------------------------------------------------------------------------

    def _entry_path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    @staticmethod
    def _checksum(body: Dict[str, Any]) -> str:
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def read_cache(self, key: str) -> Optional[CompletionResponse]:
        """
        Lê uma entrada do cache.

        Returns:
            A resposta marcada como `from_cache`, ou None se não houver entrada

        Raises:
            CacheCorrupt: Entrada ilegível ou com checksum divergente
        """
        path = self._entry_path(key)
        if not path.exists():
            return None
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
            body = entry["response"]
            if entry.get("key") != key:
                raise CacheCorrupt(key, "chave divergente")
            if entry.get("checksum") != self._checksum(body):
                raise CacheCorrupt(key, "checksum divergente")
            return CompletionResponse(
                text=body["text"],
                finish_reason=body.get("finish_reason", "stop"),
                retry_count=body.get("retry_count", 0),
                from_cache=True,
            )
        except CacheCorrupt:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise CacheCorrupt(key, str(exc))

    def write_cache(self, key: str, response: CompletionResponse) -> Path:
        """Grava a entrada de forma atômica (arquivo temporário + rename)."""
        path = self._entry_path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = {
            "text": response.text,
            "finish_reason": response.finish_reason,
            "retry_count": response.retry_count,
        }
        entry = {
            "key": key,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "response": body,
            "checksum": self._checksum(body),
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{key[:8]}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            json.dump(entry, handle, ensure_ascii=False, indent=2)
        os.replace(tmp, path)
        return path

    async def aclose(self) -> None:
        close = getattr(self.transport, "aclose", None)
        if close is not None:
            await close()
