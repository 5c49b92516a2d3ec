"""
Schemas Pydantic do domínio clínico: tarefas, modalidades, encounters e predições.
"""

from enum import Enum
from typing import Dict, List, Literal, Optional, Set, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PositiveInt,
    ValidationInfo,
    field_validator,
    model_validator,
)

from app.core.clinical import CANONICAL_KEYS, decide, is_categorical, variable_key


class ModalityKind(str, Enum):
    """Modalidades disponíveis por paciente. PS é a modalidade base obrigatória."""
    PS = "PS"
    EHR = "EHR"
    CXR = "CXR"
    RR = "RR"

    @classmethod
    def parse(cls, raw: str) -> "ModalityKind":
        """Aceita o nome em qualquer caixa ("ps", "Ps", "PS")."""
        return cls(raw.strip().upper())


# Ordem fixa de montagem do contexto.
MODALITY_ORDER: List[ModalityKind] = [
    ModalityKind.PS,
    ModalityKind.EHR,
    ModalityKind.CXR,
    ModalityKind.RR,
]

BASE_MODALITY = ModalityKind.PS


class Split(str, Enum):
    """Partições da coorte."""
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class SerializationMode(str, Enum):
    """Formatos de serialização da série temporal de EHR."""
    LOG = "log"
    SUMMARY = "summary"
    DELTA = "delta"


class ParseStatus(str, Enum):
    """Resultado da extração de probabilidade da resposta do modelo."""
    OK = "ok"
    FALLBACK = "fallback"
    ERROR = "error"


# ============================================================================
# TAREFAS
# ============================================================================

class TaskSpec(BaseModel):
    """Tarefa binária de predição de risco."""
    model_config = ConfigDict(frozen=True)

    task_id: str
    name: str
    observation_window_hours: int = Field(default=48, gt=0)
    decision_threshold: float = Field(default=0.5, gt=0, lt=1)
    positive_meaning: str

    @property
    def window_minutes(self) -> int:
        return self.observation_window_hours * 60

    @property
    def instruction(self) -> str:
        """Instrução da tarefa usada no prompt."""
        return (
            f"Estimate the probability that this ICU patient will have the outcome "
            f"'{self.positive_meaning}', using only data from the first "
            f"{self.observation_window_hours} hours of the ICU stay."
        )


BUILTIN_TASKS: Dict[str, TaskSpec] = {
    "mortality": TaskSpec(
        task_id="mortality",
        name="In-hospital mortality",
        positive_meaning="in-hospital death",
    ),
    "los": TaskSpec(
        task_id="los",
        name="Length of stay > 7 days",
        positive_meaning="stay > 7 days",
    ),
}


# ============================================================================
# MODALIDADES
# ============================================================================

class EhrEvent(BaseModel):
    """Uma observação da série temporal de EHR."""
    model_config = ConfigDict(frozen=True)

    t_offset_min: int = Field(ge=0, description="Minutos desde a admissão na UTI")
    variable: str
    value: Union[float, str]

    @field_validator("variable")
    @classmethod
    def normalize_variable(cls, v: str) -> str:
        key = variable_key(v)
        if key not in CANONICAL_KEYS:
            raise ValueError(f"variável fora da lista canônica: {v!r}")
        return key

    @field_validator("value")
    @classmethod
    def continuous_values_are_numeric(cls, v: Union[float, str], info: ValidationInfo) -> Union[float, str]:
        variable = info.data.get("variable")
        if variable and not is_categorical(variable) and isinstance(v, str):
            try:
                return float(v)
            except ValueError:
                raise ValueError(f"valor não numérico para variável contínua {variable}: {v!r}")
        return v


class CxrRef(BaseModel):
    """Referência a uma imagem de raio-X de tórax."""
    model_config = ConfigDict(frozen=True)

    image_locator: str
    view: str
    t_offset_min: int = Field(ge=0)
    width_px: PositiveInt = 224
    height_px: PositiveInt = 224


class RrDoc(BaseModel):
    """Laudo radiológico."""
    model_config = ConfigDict(frozen=True)

    t_offset_min: int = Field(ge=0)
    modality_name: str
    body: str


class PatientEncounter(BaseModel):
    """Uma internação na UTI com todas as modalidades e rótulos."""
    model_config = ConfigDict(frozen=True)

    encounter_id: str
    ps_text: str = Field(min_length=1)
    ehr_events: List[EhrEvent] = []
    cxr: Optional[CxrRef] = None
    cxr_candidates: List[CxrRef] = []
    rr_docs: List[RrDoc] = []
    labels: Dict[str, bool] = {}
    split: Optional[Split] = None

    @field_validator("ps_text")
    @classmethod
    def ps_not_blank(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("ps_text vazio")
        return v

    @field_validator("ehr_events")
    @classmethod
    def sort_events(cls, v: List[EhrEvent]) -> List[EhrEvent]:
        return sorted(v, key=lambda e: (e.t_offset_min, e.variable))

    def modalities_present(self) -> Set[ModalityKind]:
        """Modalidades efetivamente presentes neste encounter."""
        present = {ModalityKind.PS}
        if self.ehr_events:
            present.add(ModalityKind.EHR)
        if self.cxr is not None:
            present.add(ModalityKind.CXR)
        if self.rr_docs:
            present.add(ModalityKind.RR)
        return present


class Cohort(BaseModel):
    """Coorte carregada de arquivo ou gerada sinteticamente."""
    model_config = ConfigDict(frozen=True)

    encounters: List[PatientEncounter]
    provenance: str

    @model_validator(mode="after")
    def unique_ids(self) -> "Cohort":
        seen: Set[str] = set()
        for enc in self.encounters:
            if enc.encounter_id in seen:
                raise ValueError(f"encounter_id duplicado: {enc.encounter_id}")
            seen.add(enc.encounter_id)
        return self

    def __len__(self) -> int:
        return len(self.encounters)

    def by_split(self, split: Split) -> List[PatientEncounter]:
        return [e for e in self.encounters if e.split == split]

    def get(self, encounter_id: str) -> Optional[PatientEncounter]:
        for enc in self.encounters:
            if enc.encounter_id == encounter_id:
                return enc
        return None


class SyntheticOracle(BaseModel):
    """Risco verdadeiro oculto por encounter e tarefa."""
    true_risk: Dict[str, Dict[str, float]]

    @field_validator("true_risk")
    @classmethod
    def risks_in_range(cls, v: Dict[str, Dict[str, float]]) -> Dict[str, Dict[str, float]]:
        for enc_id, per_task in v.items():
            for task_id, risk in per_task.items():
                if not 0.0 <= risk <= 1.0:
                    raise ValueError(f"risco fora de [0,1] para {enc_id}/{task_id}")
        return v

    def covers(self, cohort: Cohort) -> bool:
        return all(e.encounter_id in self.true_risk for e in cohort.encounters)

    def risk(self, encounter_id: str, task_id: str) -> float:
        return self.true_risk[encounter_id][task_id]


# ============================================================================
# PREDIÇÕES
# ============================================================================

class ExchangeRecord(BaseModel):
    """Uma troca com o modelo registrada no trace."""
    agent_id: str = "agent"
    step: str
    prompt_digest: str = ""
    response_text: str = ""
    probability: Optional[float] = None
    parse_status: Optional[ParseStatus] = None
    retry_count: int = 0
    note: Optional[str] = None


class DebateTurn(BaseModel):
    """Resposta de um agente numa rodada de debate."""
    probability: float = Field(ge=0, le=1)
    predicted_label: bool
    rationale: str
    parse_status: ParseStatus


class DebateTrace(BaseModel):
    """Histórico completo de um debate."""
    rounds: List[Dict[str, DebateTurn]]
    consensus_round: Union[int, Literal["MAX"]]
    final_probability: float = Field(ge=0, le=1)
    max_rounds: int = Field(gt=0)

    @staticmethod
    def is_unanimous(turns: Dict[str, DebateTurn]) -> bool:
        labels = {t.predicted_label for t in turns.values() if t.parse_status != ParseStatus.ERROR}
        return len(labels) == 1

    @model_validator(mode="after")
    def consensus_is_minimal(self) -> "DebateTrace":
        unanimous = [self.is_unanimous(r) for r in self.rounds]
        if self.consensus_round == "MAX":
            if any(unanimous):
                raise ValueError("consensus_round=MAX mas houve rodada unânime")
            if len(self.rounds) != self.max_rounds:
                raise ValueError("debate sem consenso deve registrar todas as rodadas")
        else:
            r = self.consensus_round
            if not 1 <= r <= len(self.rounds) or not unanimous[r - 1] or any(unanimous[: r - 1]):
                raise ValueError(f"consensus_round={r} não é a primeira rodada unânime")
        return self


class PredictionRecord(BaseModel):
    """Saída por encounter de um protocolo."""
    encounter_id: str
    task_id: str
    protocol_id: str
    probability: float = Field(ge=0, le=1)
    predicted_label: bool
    parse_status: ParseStatus
    decision_threshold: float = Field(default=0.5, gt=0, lt=1)
    trace: List[ExchangeRecord] = []
    debate: Optional[DebateTrace] = None
    error: Optional[str] = None

    @model_validator(mode="after")
    def label_matches_probability(self) -> "PredictionRecord":
        if self.parse_status != ParseStatus.ERROR:
            if self.predicted_label != decide(self.probability, self.decision_threshold):
                raise ValueError("predicted_label inconsistente com probability")
        return self

    @classmethod
    def build(
        cls,
        *,
        encounter_id: str,
        task: TaskSpec,
        protocol_id: str,
        probability: float,
        parse_status: ParseStatus,
        trace: Optional[List[ExchangeRecord]] = None,
        debate: Optional[DebateTrace] = None,
        error: Optional[str] = None,
    ) -> "PredictionRecord":
        """Cria um registro derivando o rótulo pela regra de decisão da tarefa."""
        label = False if parse_status == ParseStatus.ERROR else decide(probability, task.decision_threshold)
        return cls(
            encounter_id=encounter_id,
            task_id=task.task_id,
            protocol_id=protocol_id,
            probability=probability,
            predicted_label=label,
            parse_status=parse_status,
            decision_threshold=task.decision_threshold,
            trace=trace or [],
            debate=debate,
            error=error,
        )
