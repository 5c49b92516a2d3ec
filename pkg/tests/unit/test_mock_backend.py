"""
Testes unitários para o backend mock e os templates de prompt.
"""

import pytest

from app.core.exceptions import ConfigError
from app.models.llm import ChatMessage, CompletionRequest, MockRule, MockScript
from app.services.llm_gateway import request_payload
from app.services.mock_backend import (
    MockChatTransport,
    completion_body,
    load_mock_script,
    save_mock_script,
    transcript_from_payload,
)
from app.services.prompt_templates import TemplateSet


class TestMockChatTransport:
    """Testes para o roteiro mock."""

    def test_sequential_responses_repeat_last(self):
        """Testa respostas em sequência com repetição da última."""
        transport = MockChatTransport(
            MockScript(rules=[MockRule(contains=["ping"], responses=["a", "b"])], default="d")
        )
        assert [transport.respond("ping") for _ in range(3)] == ["a", "b", "b"]
        assert transport.respond("other") == "d"
        assert transport.calls == 4

    def test_all_fragments_must_match(self):
        """Testa que todos os trechos de contains são exigidos."""
        transport = MockChatTransport(
            MockScript(rules=[MockRule(contains=["x", "y"], responses=["both"])], default="d")
        )
        assert transport.respond("x only") == "d"
        assert transport.respond("x and y") == "both"

    def test_lookup_uses_last_occurrence(self):
        """Testa que o lookup usa a última ocorrência do regex."""
        rule = MockRule(regex=r"id=(\w+)", lookup={"a": "A", "b": "B"})
        transport = MockChatTransport(MockScript(rules=[rule], default="d"))
        assert transport.respond("id=a ... id=b") == "B"
        assert transport.respond("id=zzz") == "d"

    def test_first_matching_rule_wins(self):
        """Testa precedência das regras."""
        script = MockScript(
            rules=[MockRule(contains=["x"], responses=["first"]), MockRule(contains=["x"], responses=["second"])],
            default="d",
        )
        assert MockChatTransport(script).respond("x") == "first"

    async def test_send_records_request(self):
        """Testa que send registra a requisição."""
        transport = MockChatTransport(MockScript(default="PROBABILITY: 0.4"))
        req = CompletionRequest(model_id="m", messages=[ChatMessage.text("user", "hi")])
        response = await transport.send(req)
        assert response.text == "PROBABILITY: 0.4"
        assert transport.requests == [req]


class TestMockWireHelpers:
    """Testes para conversões do servidor mock."""

    def test_transcript_matches_request_transcript(self):
        """Testa que o transcript do corpo HTTP é igual ao da requisição."""
        req = CompletionRequest(
            model_id="m",
            messages=[ChatMessage.text("system", "sys"), ChatMessage.text("user", "hello")],
        )
        assert transcript_from_payload(request_payload(req)["messages"]) == req.transcript()

    def test_completion_body_shape(self):
        """Testa formato da resposta."""
        body = completion_body("PROBABILITY: 0.2", "m", 3)
        assert body["choices"][0]["message"]["content"] == "PROBABILITY: 0.2"
        assert body["id"] == "mock-3"

    def test_script_save_and_load(self, tmp_path):
        """Testa persistência do roteiro."""
        script = MockScript(rules=[MockRule(regex=r"(x)", lookup={"x": "y"})], default="d")
        path = save_mock_script(script, tmp_path / "script.json")
        assert load_mock_script(path) == script

    def test_load_missing_script_fails(self, tmp_path):
        """Testa roteiro ausente."""
        with pytest.raises(ConfigError):
            load_mock_script(tmp_path / "missing.json")


class TestTemplateSet:
    """Testes para o conjunto de templates."""

    def test_render_and_placeholders(self, templates):
        """Testa renderização e placeholders."""
        assert templates.placeholders("answer") == {"positive_meaning"}
        text = templates.render("answer", positive_meaning="in-hospital death")
        assert "in-hospital death" in text
        assert text.endswith("'PROBABILITY: <value>'.")

    def test_missing_placeholder_fails(self, templates):
        """Testa placeholder sem valor."""
        with pytest.raises(ConfigError):
            templates.render("answer")

    def test_unknown_template_fails(self, templates):
        """Testa template inexistente."""
        with pytest.raises(ConfigError):
            templates.render("nope")

    def test_digest_changes_with_content(self, tmp_path):
        """Testa que editar um template muda o digest."""
        (tmp_path / "a.txt").write_text("one {x}\n")
        before = TemplateSet(tmp_path).digest
        (tmp_path / "a.txt").write_text("two {x}\n")
        assert TemplateSet(tmp_path).digest != before

    def test_missing_directory_fails(self, tmp_path):
        """Testa diretório inexistente."""
        with pytest.raises(ConfigError):
            TemplateSet(tmp_path / "none")
