"""
Schemas do protocolo de chat-completion e do contexto de prompt.
"""

import base64
from typing import Annotated, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, field_validator, model_validator


class TextPart(BaseModel):
    """Segmento de texto de uma mensagem."""
    model_config = ConfigDict(frozen=True)

    type: Literal["text"] = "text"
    content: str


class ImagePart(BaseModel):
    """Imagem opaca acompanhada do rótulo textual que a introduz."""
    model_config = ConfigDict(frozen=True)

    type: Literal["image"] = "image"
    label: str
    data: bytes
    media_type: str = "image/jpeg"

    def data_url(self) -> str:
        encoded = base64.b64encode(self.data).decode("ascii")
        return f"data:{self.media_type};base64,{encoded}"


MessagePart = Annotated[Union[TextPart, ImagePart], Field(discriminator="type")]


class ChatMessage(BaseModel):
    """Mensagem de chat com partes de texto e imagem."""
    model_config = ConfigDict(frozen=True)

    role: Literal["system", "user", "assistant"]
    parts: List[MessagePart]

    @classmethod
    def text(cls, role: str, content: str) -> "ChatMessage":
        return cls(role=role, parts=[TextPart(content=content)])

    def plain_text(self) -> str:
        """Texto da mensagem com imagens representadas pelo rótulo."""
        chunks = []
        for part in self.parts:
            chunks.append(part.content if isinstance(part, TextPart) else part.label)
        return "\n\n".join(chunks)


class CompletionRequest(BaseModel):
    """Uma requisição de chat-completion."""
    model_config = ConfigDict(frozen=True)

    model_id: str
    messages: List[ChatMessage] = Field(min_length=1)
    temperature: float = Field(default=0.0, ge=0)
    max_tokens: PositiveInt = 768
    seed: Optional[int] = None
    template_hash: Optional[str] = None

    @field_validator("messages")
    @classmethod
    def roles_alternate(cls, v: List[ChatMessage]) -> List[ChatMessage]:
        body = v
        if v[0].role == "system":
            body = v[1:]
        if any(m.role == "system" for m in body):
            raise ValueError("mensagem system só pode aparecer na primeira posição")
        if not body or body[0].role != "user":
            raise ValueError("a conversa deve começar com uma mensagem user")
        for prev, cur in zip(body, body[1:]):
            if prev.role == cur.role:
                raise ValueError("papéis user/assistant devem alternar")
        return v

    def transcript(self) -> str:
        """Texto concatenado de todas as mensagens (usado pelo backend mock)."""
        return "\n\n".join(f"[{m.role}]\n{m.plain_text()}" for m in self.messages)

    @property
    def cacheable(self) -> bool:
        """Amostragem sem seed não é determinística e não entra no cache."""
        return self.temperature == 0 or self.seed is not None


class CompletionResponse(BaseModel):
    """Resposta decodificada do backend."""
    text: Optional[str] = None
    finish_reason: str = "stop"
    latency_ms: int = Field(default=0, ge=0)
    from_cache: bool = False
    retry_count: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def text_present(self) -> "CompletionResponse":
        if self.finish_reason != "error" and self.text is None:
            raise ValueError("resposta sem texto")
        return self


class BackendSpec(BaseModel):
    """Endpoint de chat-completion e seus limites."""
    model_config = ConfigDict(frozen=True)

    endpoint_url: str
    auth_token_env: str = "LLM_API_KEY"
    model_id: str = "default"
    max_concurrent: PositiveInt = 4
    requests_per_minute: PositiveInt = 600
    max_retries: int = Field(default=5, ge=0)
    backoff_base_ms: PositiveInt = 500
    timeout_s: float = Field(default=120.0, gt=0)
    supports_vision: bool = True


class MockRule(BaseModel):
    """
    Regra do backend mock.

    Casa quando todos os trechos de `contains` aparecem no texto da requisição
    e `regex` (se houver) encontra correspondência. Com `lookup`, o primeiro
    grupo da última ocorrência do regex é a chave da resposta (o paciente em
    avaliação vem depois dos exemplos few-shot); sem ele, `responses` é
    consumida em sequência e a última resposta se repete.
    """
    contains: List[str] = []
    regex: Optional[str] = None
    lookup: Optional[Dict[str, str]] = None
    responses: List[str] = []

    @model_validator(mode="after")
    def has_output(self) -> "MockRule":
        if self.lookup is not None:
            if not self.regex:
                raise ValueError("lookup exige regex com um grupo de captura")
        elif not self.responses:
            raise ValueError("regra sem responses nem lookup")
        return self


class MockScript(BaseModel):
    """Roteiro do backend mock: regras ordenadas e resposta padrão."""
    rules: List[MockRule] = []
    default: str


class PromptContext(BaseModel):
    """Contexto montado para um agente: prompt da tarefa seguido das modalidades."""
    model_config = ConfigDict(frozen=True)

    encounter_id: str
    task_prompt_id: str
    parts: List[MessagePart] = Field(min_length=1)

    def text_only(self) -> "PromptContext":
        """Cópia com imagens reduzidas ao rótulo (para exemplos few-shot)."""
        parts = [
            p if isinstance(p, TextPart) else TextPart(content=p.label) for p in self.parts
        ]
        return self.model_copy(update={"parts": parts})

    def render_text(self) -> str:
        return "\n\n".join(
            p.content if isinstance(p, TextPart) else p.label for p in self.parts
        )
