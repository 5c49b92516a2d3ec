"""
Router do backend mock compatível com /v1/chat/completions.
"""

from typing import Any, Dict, List, Optional

from fastapi import APIRouter, HTTPException, Request
from pydantic import BaseModel, Field

from app.services.mock_backend import MockChatTransport, completion_body, transcript_from_payload

router = APIRouter(prefix="/v1", tags=["mock-llm"])


class ChatCompletionBody(BaseModel):
    """Corpo aceito pelo endpoint mock (subconjunto do formato OpenAI)."""
    model: str = "mock"
    messages: List[Dict[str, Any]] = Field(min_length=1)
    temperature: float = 0.0
    max_tokens: Optional[int] = None
    seed: Optional[int] = None


def get_transport(request: Request) -> MockChatTransport:
    transport = getattr(request.app.state, "mock_transport", None)
    if transport is None:
        raise HTTPException(status_code=404, detail="Backend mock não configurado")
    return transport


@router.post("/chat/completions")
async def chat_completions(body: ChatCompletionBody, request: Request) -> Dict[str, Any]:
    """
    Responde pela regra do roteiro mock que casar com o texto da conversa.

    Args:
        body: Requisição no formato de chat-completion

    Returns:
        Resposta no formato de chat-completion
    """
    transport = get_transport(request)
    text = transport.respond(transcript_from_payload(body.messages))
    return completion_body(text, body.model, transport.calls)
