"""
Backend mock determinístico dirigido por roteiro.

Usado nos testes, no servidor `serve-mock` e em execuções com oráculo sintético.
"""

import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Pattern, Union

from loguru import logger
from pydantic import ValidationError

from app.core.exceptions import ConfigError
from app.models.llm import CompletionRequest, CompletionResponse, MockRule, MockScript


class MockChatTransport:
    """
    Transporte que responde pela primeira regra do roteiro que casar.

    Regras com `responses` avançam um contador próprio a cada uso e repetem a
    última resposta quando esgotadas.
    """

    def __init__(self, script: MockScript):
        self.script = script
        self.calls = 0
        self.requests: List[CompletionRequest] = []
        self._counters: List[int] = [0] * len(script.rules)
        self._patterns: List[Optional[Pattern[str]]] = [
            re.compile(rule.regex) if rule.regex else None for rule in script.rules
        ]

    def _matches(self, idx: int, rule: MockRule, text: str) -> bool:
        if not all(fragment in text for fragment in rule.contains):
            return False
        pattern = self._patterns[idx]
        return pattern is None or pattern.search(text) is not None

    def respond(self, text: str) -> str:
        """Resposta do roteiro para o texto concatenado da requisição."""
        self.calls += 1
        for idx, rule in enumerate(self.script.rules):
            if not self._matches(idx, rule, text):
                continue
            if rule.lookup is not None:
                *_, last = self._patterns[idx].finditer(text)
                key = last.group(1) if last.groups() else last.group(0)
                if key in rule.lookup:
                    return rule.lookup[key]
                logger.debug(f"Mock: chave {key!r} fora do lookup, seguindo para a próxima regra")
                continue
            position = min(self._counters[idx], len(rule.responses) - 1)
            self._counters[idx] += 1
            return rule.responses[position]
        return self.script.default

    async def send(self, request: CompletionRequest) -> CompletionResponse:
        self.requests.append(request)
        return CompletionResponse(text=self.respond(request.transcript()))


def load_mock_script(path: Union[str, Path]) -> MockScript:
    """
    Carrega um roteiro mock de um arquivo JSON.

    Raises:
        ConfigError: Arquivo ausente ou fora do schema
    """
    path = Path(path)
    try:
        script = MockScript.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"Roteiro mock não encontrado: {path}")
    except ValidationError as exc:
        raise ConfigError(f"Roteiro mock inválido em {path}: {exc}")
    logger.info(f"Roteiro mock carregado de {path} ({len(script.rules)} regras)")
    return script


def save_mock_script(script: MockScript, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(script.model_dump_json(indent=2, exclude_defaults=True), encoding="utf-8")
    return path


def transcript_from_payload(messages: List[Dict[str, Any]]) -> str:
    """
    Reconstrói o texto concatenado a partir do corpo HTTP.

    Produz o mesmo texto que `CompletionRequest.transcript()` para a mesma
    conversa: imagens ficam representadas só pelo rótulo que as precede.
    """
    blocks = []
    for message in messages:
        content = message.get("content")
        if isinstance(content, str):
            chunks = [content]
        else:
            chunks = [item.get("text", "") for item in content or [] if item.get("type") == "text"]
        blocks.append(f"[{message.get('role', 'user')}]\n" + "\n\n".join(chunks))
    return "\n\n".join(blocks)


def completion_body(text: str, model: str, call_index: int) -> Dict[str, Any]:
    """Corpo de resposta no formato de chat-completion."""
    return {
        "id": f"mock-{call_index}",
        "object": "chat.completion",
        "model": model,
        "choices": [
            {
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": "stop",
            }
        ],
        "usage": {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
    }
