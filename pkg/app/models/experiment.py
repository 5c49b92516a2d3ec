"""
Schemas de protocolos, métricas e experimentos.
"""

import hashlib
import json
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.llm import BackendSpec, MockScript
from app.models.schemas import (
    BASE_MODALITY,
    MODALITY_ORDER,
    ModalityKind,
    SerializationMode,
    TaskSpec,
)


class StrategyKind(str, Enum):
    """Estratégias de agente único."""
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    COT = "cot"
    COT_SC = "cot_sc"
    SELF_REFINE = "self_refine"


class ProtocolKind(str, Enum):
    """Protocolos de avaliação."""
    SINGLE_UNIMODAL = "single_unimodal"
    SINGLE_MULTIMODAL = "single_multimodal"
    MAJORITY_VOTE = "majority_vote"
    WEIGHTED_VOTE = "weighted_vote"
    DEBATE_UNIMODAL = "debate_unimodal"
    DEBATE_MULTIMODAL = "debate_multimodal"
    META_PROMPT = "meta_prompt"
    TRAJ_COA = "traj_coa"
    PLUGIN = "plugin"


# Protocolos com um agente por modalidade: exigem ao menos duas modalidades.
PER_MODALITY_PROTOCOLS = {
    ProtocolKind.MAJORITY_VOTE,
    ProtocolKind.WEIGHTED_VOTE,
    ProtocolKind.DEBATE_UNIMODAL,
}


class VoteAggregation(str, Enum):
    """Agregação da votação: média de probabilidades ou fração de rótulos positivos."""
    PROBABILITY = "probability"
    HARD_LABEL = "hard_label"


def canonical_modalities(values: List[ModalityKind]) -> List[ModalityKind]:
    """Remove duplicatas e ordena na ordem PS→EHR→CXR→RR."""
    present = set(values)
    return [m for m in MODALITY_ORDER if m in present]


def modality_label(values: List[ModalityKind]) -> str:
    return "+".join(m.value for m in canonical_modalities(values))


# ============================================================================
# AGENTES
# ============================================================================

class AgentSpec(BaseModel):
    """Um agente do roster."""
    model_config = ConfigDict(frozen=True)

    agent_id: str
    modalities: List[ModalityKind]
    persona: str = ""
    backend_ref: str = "default"

    @field_validator("modalities")
    @classmethod
    def ordered(cls, v: List[ModalityKind]) -> List[ModalityKind]:
        if not v:
            raise ValueError("agente sem modalidades")
        return canonical_modalities(v)


class AgentRoster(BaseModel):
    """Conjunto de agentes de um protocolo multiagente."""
    model_config = ConfigDict(frozen=True)

    agents: List[AgentSpec] = Field(min_length=1)
    weights: Optional[Dict[str, float]] = None

    @model_validator(mode="after")
    def weights_cover_agents(self) -> "AgentRoster":
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent_id repetido no roster")
        if self.weights is not None:
            missing = set(ids) - set(self.weights)
            if missing:
                raise ValueError(f"pesos ausentes para: {sorted(missing)}")
            if any(w < 0 for w in self.weights.values()):
                raise ValueError("pesos devem ser não negativos")
            if sum(self.weights.values()) <= 0:
                raise ValueError("soma dos pesos deve ser positiva")
        return self


# ============================================================================
# MÉTRICAS
# ============================================================================

class ScoredSample(BaseModel):
    """Par (probabilidade, rótulo) consumido pelas métricas."""
    model_config = ConfigDict(frozen=True)

    probability: float = Field(ge=0, le=1)
    label: bool


class MetricValue(BaseModel):
    """Estimativa pontual com intervalo de confiança."""
    point: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None

    @model_validator(mode="after")
    def interval_contains_point(self) -> "MetricValue":
        if None not in (self.point, self.ci_low, self.ci_high):
            if not self.ci_low <= self.point <= self.ci_high:
                raise ValueError("intervalo não contém a estimativa pontual")
        return self

    def formatted(self, decimals: int = 3) -> str:
        if self.point is None:
            return "n/a"
        return f"{self.point:.{decimals}f}"

    def formatted_ci(self, decimals: int = 3) -> str:
        if self.ci_low is None or self.ci_high is None:
            return "n/a"
        return f"{self.ci_low:.{decimals}f} - {self.ci_high:.{decimals}f}"


class MetricReport(BaseModel):
    """Métricas de uma execução (tarefa × protocolo × modalidades)."""
    task_id: str = ""
    backbone: str = ""
    protocol: str = ""
    strategy: str = ""
    modalities: str = ""
    serialization: str = ""
    auroc: MetricValue
    auprc: MetricValue
    ece: MetricValue
    n_samples: int = Field(ge=0)
    n_error_records: int = Field(default=0, ge=0)
    n_bins: int = 10
    ci_method: str = "percentile bootstrap"


class ConsensusStats(BaseModel):
    """Distribuição da rodada de consenso dos debates."""
    max_rounds: int
    total: int
    counts: Dict[str, int]
    percentages: Dict[str, float]
    auroc: Optional[float] = None


# ============================================================================
# EXPERIMENTOS
# ============================================================================

class ExperimentConfig(BaseModel):
    """Configuração completa de uma execução."""
    model_config = ConfigDict(frozen=True)

    task: TaskSpec
    protocol: ProtocolKind = ProtocolKind.SINGLE_MULTIMODAL
    plugin_name: Optional[str] = None
    strategy: StrategyKind = StrategyKind.ZERO_SHOT
    modalities: List[ModalityKind] = [ModalityKind.PS]
    serialization_mode: SerializationMode = SerializationMode.LOG
    backend: Optional[BackendSpec] = None
    mock_script: Optional[MockScript] = None
    backbone: Optional[str] = None
    seed: int = 42
    worker_count: int = Field(default=4, ge=1)
    cache_dir: Optional[str] = None
    output_dir: str = "runs"
    max_samples: Optional[int] = Field(default=None, ge=1)
    temperature: float = Field(default=0.0, ge=0)
    max_tokens: int = Field(default=768, gt=0)
    n_bins: int = Field(default=10, ge=1)
    bootstrap_n: int = Field(default=1000, ge=1)
    bootstrap_level: float = Field(default=0.95, gt=0, lt=1)
    vote_aggregation: VoteAggregation = VoteAggregation.PROBABILITY
    weights: Optional[Dict[str, float]] = None
    cot_sc_paths: int = Field(default=3, ge=1)
    cot_sc_temperature: float = Field(default=0.7, gt=0)
    debate_max_rounds: int = Field(default=3, ge=1)
    debate_agents: int = Field(default=4, ge=2)
    peer_char_limit: int = Field(default=600, ge=1)
    traj_chunk_steps: int = Field(default=100, ge=1)

    @field_validator("modalities")
    @classmethod
    def ordered_with_base(cls, v: List[ModalityKind]) -> List[ModalityKind]:
        v = canonical_modalities(v)
        if BASE_MODALITY not in v:
            raise ValueError("o conjunto de modalidades deve conter PS")
        return v

    @model_validator(mode="after")
    def protocol_preconditions(self) -> "ExperimentConfig":
        if self.backend is None and self.mock_script is None:
            raise ValueError("informe um backend HTTP ou um roteiro mock")
        if self.protocol == ProtocolKind.SINGLE_UNIMODAL and self.modalities != [BASE_MODALITY]:
            raise ValueError("single_unimodal usa apenas PS")
        if self.protocol in PER_MODALITY_PROTOCOLS and len(self.modalities) < 2:
            raise ValueError(
                f"{self.protocol.value} precisa de ao menos duas modalidades "
                f"(um agente por modalidade); recebido {modality_label(self.modalities)}"
            )
        if self.protocol == ProtocolKind.PLUGIN and not self.plugin_name:
            raise ValueError("protocolo plugin exige plugin_name")
        return self

    @property
    def backbone_label(self) -> str:
        if self.backbone:
            return self.backbone
        if self.backend is not None:
            return self.backend.model_id
        return "mock"

    @property
    def protocol_id(self) -> str:
        if self.protocol == ProtocolKind.PLUGIN:
            return f"plugin:{self.plugin_name}"
        return self.protocol.value

    def config_hash(self) -> str:
        """Hash estável (independente da ordem dos campos) da configuração."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class RunManifest(BaseModel):
    """Manifesto persistido de uma execução."""
    run_id: str
    config_hash: str
    template_hash: str
    cohort_provenance: str
    record_locators: Dict[str, str]
    wall_time_s: float
    gateway_calls: int
    cache_hits: int
    uncacheable_calls: int = 0
    resumed_records: int = 0
    failed_records: int = 0
    weights: Optional[Dict[str, float]] = None
    created_at: str
