"""
Testes unitários para o agente único e suas estratégias.
"""

import pytest

from app.core.exceptions import ExemplarUnavailable, MissingBaseModality
from app.models.experiment import StrategyKind
from app.models.llm import MockRule, MockScript
from app.models.schemas import ModalityKind, ParseStatus
from app.services.agent_service import AgentService, parse_probability, rationale_of
from tests.conftest import make_encounter

ALL = [ModalityKind.PS, ModalityKind.EHR, ModalityKind.CXR, ModalityKind.RR]
COT_ANSWER = "Based on the reasoning above"
COT_REASON = "Do not give a probability yet"


class TestParseProbability:
    """Testes para extração da probabilidade."""

    def test_plain_value(self):
        """Testa valor simples."""
        assert parse_probability("Risk is high.\nPROBABILITY: 0.7") == (0.7, ParseStatus.OK)

    def test_case_and_format_variants(self):
        """Testa variantes de caixa e formato numérico."""
        assert parse_probability("probability: .25") == (0.25, ParseStatus.OK)
        assert parse_probability("PROBABILITY : 7e-1") == (0.7, ParseStatus.OK)

    def test_last_match_wins(self):
        """Testa que a última ocorrência vale."""
        assert parse_probability("PROBABILITY: 0.1\nrevised\nPROBABILITY: 0.9") == (0.9, ParseStatus.OK)

    def test_mid_sentence_probability_ignored(self):
        """Testa que só linhas iniciadas por PROBABILITY: contam."""
        text = "PROBABILITY: 0.3\nSome would still put the probability: 0.9 in similar cases."
        assert parse_probability(text) == (0.3, ParseStatus.OK)
        assert parse_probability("The estimated probability: 0.9 seems high.") == (0.5, ParseStatus.FALLBACK)
        assert parse_probability("Reasoning done.\n  PROBABILITY: 0.4") == (0.4, ParseStatus.OK)

    def test_out_of_range_is_error(self):
        """Testa valor fora de [0, 1]."""
        assert parse_probability("PROBABILITY: 1.5") == (0.5, ParseStatus.ERROR)

    def test_unparseable_is_fallback(self):
        """Testa resposta sem probabilidade."""
        assert parse_probability("I cannot tell.") == (0.5, ParseStatus.FALLBACK)
        assert parse_probability(None) == (0.5, ParseStatus.FALLBACK)

    def test_rationale_drops_probability_line(self):
        """Testa justificativa sem a linha de probabilidade."""
        assert rationale_of("Septic shock.\nPROBABILITY: 0.8") == "Septic shock."


class TestAggregatePaths:
    """Testes para a agregação de caminhos do CoT-SC."""

    def test_mean_of_three_paths(self):
        """Testa média exata de três caminhos."""
        results = [(0.2, ParseStatus.OK), (0.4, ParseStatus.OK), (0.9, ParseStatus.OK)]
        assert AgentService.aggregate_paths(results) == (0.5, ParseStatus.OK)

    def test_failed_path_excluded(self):
        """Testa exclusão de caminho sem probabilidade."""
        results = [(0.2, ParseStatus.OK), (0.5, ParseStatus.FALLBACK), (0.8, ParseStatus.OK)]
        assert AgentService.aggregate_paths(results) == (0.5, ParseStatus.FALLBACK)

    def test_all_failed(self):
        """Testa todos os caminhos com erro."""
        results = [(0.5, ParseStatus.ERROR), (0.5, ParseStatus.FALLBACK)]
        assert AgentService.aggregate_paths(results) == (0.5, ParseStatus.ERROR)


class TestStrategies:
    """Testes para as estratégias de agente único."""

    async def test_zero_shot(self, agent_factory, mortality):
        """Testa zero-shot com uma troca."""
        agents, transport = agent_factory(MockScript(default="Severe sepsis.\nPROBABILITY: 0.8"))
        context = agents.build_context(make_encounter(), mortality, ALL)
        record = await agents.run_single(StrategyKind.ZERO_SHOT, context, mortality)

        assert record.probability == 0.8
        assert record.predicted_label is True
        assert record.parse_status == ParseStatus.OK
        assert [ex.step for ex in record.trace] == ["answer"]
        assert transport.calls == 1
        transcript = transport.requests[0].transcript()
        assert "Modality PS:" in transcript
        assert "Modality RR:" in transcript
        assert "in-hospital death" in transcript

    async def test_persona_in_system_prompt(self, agent_factory, mortality):
        """Testa persona anexada ao system prompt."""
        agents, transport = agent_factory(MockScript(default="PROBABILITY: 0.1"))
        context = agents.build_context(make_encounter(), mortality, [ModalityKind.EHR], require_base=False)
        await agents.run_single(
            StrategyKind.ZERO_SHOT, context, mortality, persona=agents.persona([ModalityKind.EHR])
        )
        system = transport.requests[0].messages[0]
        assert system.role == "system"
        assert "You are the EHR agent" in system.plain_text()

    async def test_context_requires_ps(self, agent_factory, mortality):
        """Testa que o contexto de agente único exige PS."""
        agents, _ = agent_factory(MockScript(default="PROBABILITY: 0.1"))
        with pytest.raises(MissingBaseModality):
            agents.build_context(make_encounter(), mortality, [ModalityKind.EHR])

    async def test_few_shot_requires_both_labels(self, agent_factory, mortality):
        """Testa few-shot sem par positivo/negativo."""
        agents, _ = agent_factory(MockScript(default="PROBABILITY: 0.1"))
        context = agents.build_context(make_encounter(), mortality, [ModalityKind.PS])
        with pytest.raises(ExemplarUnavailable):
            await agents.run_single(StrategyKind.FEW_SHOT, context, mortality, exemplars=[])

    async def test_few_shot_with_exemplars(self, agent_factory, mortality):
        """Testa few-shot com exemplos do treino."""
        agents, transport = agent_factory(MockScript(default="PROBABILITY: 0.35"))
        train = [
            make_encounter("T-3", ps_text="Third patient.", labels={"mortality": True}),
            make_encounter("T-1", ps_text="First positive.", labels={"mortality": True}),
            make_encounter("T-2", ps_text="First negative.", labels={"mortality": False}),
        ]
        exemplars = agents.select_exemplars(train, mortality, [ModalityKind.PS, ModalityKind.CXR])
        assert [(e.encounter_id, e.label) for e in exemplars] == [("T-1", True), ("T-2", False)]
        assert exemplars[0].text.startswith("Modality PS: First positive.")

        context = agents.build_context(make_encounter(), mortality, [ModalityKind.PS])
        record = await agents.run_single(StrategyKind.FEW_SHOT, context, mortality, exemplars=exemplars)

        transcript = transport.requests[0].transcript()
        assert record.probability == 0.35
        assert "Solved examples from other patients" in transcript
        assert transcript.index("First positive.") < transcript.index("Case reference: ENC-001")

    def test_select_exemplars_needs_both_classes(self, agent_factory, mortality):
        """Testa treino sem negativos."""
        agents, _ = agent_factory(MockScript(default="x"))
        with pytest.raises(ExemplarUnavailable):
            agents.select_exemplars([make_encounter("T-1")], mortality, [ModalityKind.PS])

    async def test_cot_two_steps(self, agent_factory, mortality):
        """Testa CoT com raciocínio e resposta."""
        script = MockScript(
            rules=[
                MockRule(contains=[COT_ANSWER], responses=["PROBABILITY: 0.3"]),
                MockRule(contains=[COT_REASON], responses=["Stable vitals, mild disease."]),
            ],
            default="unexpected",
        )
        agents, transport = agent_factory(script)
        context = agents.build_context(make_encounter(), mortality, [ModalityKind.PS])
        record = await agents.run_single(StrategyKind.COT, context, mortality)

        assert [ex.step for ex in record.trace] == ["reason", "answer"]
        assert record.trace[0].probability is None
        assert record.probability == 0.3
        assert "Stable vitals" in transport.requests[1].transcript()

    async def test_cot_sc_mean_of_paths(self, agent_factory, mortality):
        """Testa CoT-SC com três caminhos: [0.2, 0.4, 0.9] → 0.5, negativo."""
        script = MockScript(
            rules=[MockRule(contains=[COT_ANSWER], responses=["PROBABILITY: 0.2", "PROBABILITY: 0.4", "PROBABILITY: 0.9"])],
            default="reasoning",
        )
        agents, transport = agent_factory(script)
        context = agents.build_context(make_encounter(), mortality, [ModalityKind.PS])
        record = await agents.run_single(StrategyKind.COT_SC, context, mortality)

        assert record.probability == 0.5
        assert record.predicted_label is False
        assert record.parse_status == ParseStatus.OK
        assert len(record.trace) == 6
        assert {ex.step for ex in record.trace} == {
            f"path-{i}:{s}" for i in (1, 2, 3) for s in ("reason", "answer")
        }
        assert {r.seed for r in transport.requests} == {42, 43, 44}
        assert {r.temperature for r in transport.requests} == {0.7}

    async def test_cot_sc_failed_path_is_fallback(self, agent_factory, mortality):
        """Testa CoT-SC com um caminho sem probabilidade."""
        script = MockScript(
            rules=[MockRule(contains=[COT_ANSWER], responses=["PROBABILITY: 0.2", "no idea", "PROBABILITY: 0.8"])],
            default="reasoning",
        )
        agents, _ = agent_factory(script)
        context = agents.build_context(make_encounter(), mortality, [ModalityKind.PS])
        record = await agents.run_single(StrategyKind.COT_SC, context, mortality)

        assert record.probability == 0.5
        assert record.parse_status == ParseStatus.FALLBACK

    async def test_self_refine_three_steps(self, agent_factory, mortality):
        """Testa self-refine: rascunho, crítica e resposta final."""
        script = MockScript(
            rules=[
                MockRule(contains=["Taking the critique into account"], responses=["PROBABILITY: 0.65"]),
                MockRule(contains=["Review your previous assessment"], responses=["Underestimated lactate."]),
            ],
            default="PROBABILITY: 0.4",
        )
        agents, _ = agent_factory(script)
        context = agents.build_context(make_encounter(), mortality, [ModalityKind.PS])
        record = await agents.run_single(StrategyKind.SELF_REFINE, context, mortality)

        assert [ex.step for ex in record.trace] == ["draft", "critique", "final"]
        assert record.trace[0].probability == 0.4
        assert record.probability == 0.65
        assert record.predicted_label is True

    async def test_error_status_recorded(self, agent_factory, mortality):
        """Testa probabilidade fora do intervalo."""
        agents, _ = agent_factory(MockScript(default="PROBABILITY: 2"))
        context = agents.build_context(make_encounter(), mortality, [ModalityKind.PS])
        record = await agents.run_single(StrategyKind.ZERO_SHOT, context, mortality)
        assert record.parse_status == ParseStatus.ERROR
        assert record.probability == 0.5
        assert record.predicted_label is False
