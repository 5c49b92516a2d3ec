"""
Configuração de fixtures para testes.
"""

from typing import List, Optional

import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.models.llm import BackendSpec, MockRule, MockScript
from app.models.schemas import (
    BUILTIN_TASKS,
    CxrRef,
    EhrEvent,
    PatientEncounter,
    RrDoc,
    SerializationMode,
    Split,
)
from app.services.agent_service import AgentOptions, AgentService
from app.services.collaboration_service import CollaborationOptions, CollaborationService
from app.services.llm_gateway import ChatGateway
from app.services.mock_backend import MockChatTransport
from app.services.prompt_templates import TemplateSet

FAST_BACKEND = BackendSpec(
    endpoint_url="mock://test",
    model_id="mock",
    max_concurrent=16,
    requests_per_minute=100_000,
    max_retries=0,
)


class FakeClock:
    """Relógio manual: `sleep` avança o tempo sem esperar."""

    def __init__(self, start: float = 0.0):
        self.now = start
        self.sleeps: List[float] = []

    def __call__(self) -> float:
        return self.now

    async def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self.now += seconds


def make_encounter(
    encounter_id: str = "ENC-001",
    ps_text: str = "Case reference: ENC-001. 70-year-old male admitted with sepsis.",
    ehr: bool = True,
    cxr: bool = True,
    rr: bool = True,
    labels: Optional[dict] = None,
    split: Optional[Split] = None,
) -> PatientEncounter:
    """Encounter pequeno com todas as modalidades por padrão."""
    events = []
    if ehr:
        events = [
            EhrEvent(t_offset_min=0, variable="heart_rate", value=110.0),
            EhrEvent(t_offset_min=0, variable="glasgow_coma_scale_total", value="14"),
            EhrEvent(t_offset_min=60, variable="heart_rate", value=96.5),
            EhrEvent(t_offset_min=60, variable="glasgow_coma_scale_total", value="15"),
        ]
    return PatientEncounter(
        encounter_id=encounter_id,
        ps_text=ps_text,
        ehr_events=events,
        cxr=CxrRef(image_locator="missing/scan.jpg", view="AP", t_offset_min=120) if cxr else None,
        rr_docs=[RrDoc(t_offset_min=90, modality_name="CXR", body="No acute process.")] if rr else [],
        labels=labels if labels is not None else {"mortality": True},
        split=split,
    )


@pytest.fixture
def client():
    """Fixture para cliente de teste da API."""
    return TestClient(app)


@pytest.fixture(scope="session")
def templates():
    """Templates embutidos."""
    return TemplateSet()


@pytest.fixture
def mortality():
    return BUILTIN_TASKS["mortality"]


@pytest.fixture
def encounter():
    """Encounter com PS, EHR, CXR (imagem ausente) e RR."""
    return make_encounter()


@pytest.fixture
def fake_clock():
    return FakeClock()


@pytest.fixture
def agent_factory(templates):
    """Cria AgentService sobre um backend mock com o roteiro dado."""

    def build(
        script: MockScript,
        cache_dir=None,
        mode: SerializationMode = SerializationMode.LOG,
        **options,
    ):
        transport = MockChatTransport(script)
        gateway = ChatGateway(FAST_BACKEND, transport, cache_dir=cache_dir)
        agents = AgentService(
            gateway,
            templates,
            AgentOptions(model_id="mock", **options),
            serialization_mode=mode,
            image_loader=lambda locator: None,
        )
        return agents, transport

    return build


@pytest.fixture
def collab_factory(agent_factory):
    """Cria CollaborationService sobre um backend mock com o roteiro dado."""

    def build(script: MockScript, **options):
        agents, transport = agent_factory(script)
        return CollaborationService(agents, CollaborationOptions(**options)), transport

    return build


def persona_rule(modality: str, *responses: str) -> MockRule:
    """Regra que responde ao agente de uma modalidade."""
    return MockRule(contains=[f"You are the {modality} agent"], responses=list(responses))
