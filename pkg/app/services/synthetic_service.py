"""
Gerador de coortes sintéticas com risco verdadeiro conhecido.

Cada encounter recebe um pequeno vetor de características latentes (faixa
etária, número de sinais vitais alterados, gravidade do laudo, comorbidades),
renderizado em texto nas modalidades PS, EHR e RR. O PS sempre traz o perfil
completo de admissão, de modo que o roteiro oráculo recupera o risco apenas
lendo o texto. O risco verdadeiro é uma logística dessas características e o
rótulo é sorteado a partir dele.
"""

import math
from itertools import product
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from loguru import logger

from app.models.llm import MockRule, MockScript
from app.models.schemas import (
    BUILTIN_TASKS,
    Cohort,
    CxrRef,
    EhrEvent,
    PatientEncounter,
    RrDoc,
    SyntheticOracle,
    TaskSpec,
)

PROFILE_PATTERN = (
    r"Admission profile: (age band \d; abnormal vitals \d; severe imaging (?:yes|no); comorbidities \d)"
)

MAX_COMORBIDITIES = 3

AGE_GROUPS = ["young adult", "middle-aged", "older adult", "elderly"]

COMORBIDITIES = [
    "hypertension",
    "type 2 diabetes",
    "chronic kidney disease",
    "congestive heart failure",
    "COPD",
    "atrial fibrillation",
]

# (intercepto, faixa etária, vitais alterados, laudo grave, comorbidades)
TASK_WEIGHTS: Dict[str, Tuple[float, float, float, float, float]] = {
    "mortality": (-3.4, 0.55, 0.45, 0.9, 0.2),
    "los": (-1.8, 0.2, 0.35, 0.6, 0.25),
}
DEFAULT_WEIGHTS = (-2.2, 0.4, 0.4, 0.8, 0.2)

# Vitais monitorados: (normal_média, normal_dp, alterado_média, alterado_dp)
VITALS: Dict[str, Tuple[float, float, float, float]] = {
    "heart_rate": (82.0, 8.0, 124.0, 10.0),
    "respiratory_rate": (16.0, 2.0, 29.0, 3.0),
    "systolic_blood_pressure": (121.0, 10.0, 84.0, 6.0),
    "oxygen_saturation": (97.0, 1.2, 87.0, 2.5),
    "temperature": (36.9, 0.3, 39.1, 0.4),
}

SEVERE_REPORT = (
    "Findings: extensive bilateral airspace consolidation with moderate pleural effusions. "
    "Impression: severe acute cardiopulmonary process."
)
MILD_REPORT = (
    "Findings: lungs are clear, no focal consolidation, no pleural effusion. "
    "Impression: no acute cardiopulmonary process."
)


def _age_group(age: int) -> int:
    if age < 45:
        return 0
    if age < 65:
        return 1
    if age < 80:
        return 2
    return 3


def _logistic(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def feature_risk(task_id: str, age_band: int, n_abnormal: int, severe: bool, n_comorbid: int) -> float:
    """Risco verdadeiro logistic(w·z) para as características de um encounter."""
    weights = TASK_WEIGHTS.get(task_id, DEFAULT_WEIGHTS)
    features = (1.0, age_band, n_abnormal, float(severe), n_comorbid)
    return float(_logistic(sum(w * f for w, f in zip(weights, features))))


def render_profile(age_band: int, n_abnormal: int, severe: bool, n_comorbid: int) -> str:
    """Perfil de admissão legível pelo PROFILE_PATTERN."""
    return (
        f"age band {age_band}; abnormal vitals {n_abnormal}; "
        f"severe imaging {'yes' if severe else 'no'}; comorbidities {n_comorbid}"
    )


class SyntheticCohortGenerator:
    """Gera coortes sintéticas reprodutíveis a partir de uma semente."""

    def __init__(
        self,
        seed: int = 42,
        ehr_rate: float = 0.9,
        cxr_rate: float = 0.7,
        rr_rate: float = 0.8,
    ):
        self.seed = seed
        self.ehr_rate = ehr_rate
        self.cxr_rate = cxr_rate
        self.rr_rate = rr_rate

    def generate(
        self,
        n: int,
        tasks: Optional[Iterable[TaskSpec]] = None,
    ) -> Tuple[Cohort, SyntheticOracle]:
        """
        Gera `n` encounters e o oráculo de risco verdadeiro.

        Args:
            n: Número de encounters
            tasks: Tarefas rotuladas (padrão: mortality e los)

        Returns:
            Tupla (coorte, oráculo)
        """
        task_list = list(tasks) if tasks is not None else list(BUILTIN_TASKS.values())
        rng = np.random.default_rng(self.seed)

        encounters: List[PatientEncounter] = []
        true_risk: Dict[str, Dict[str, float]] = {}

        for i in range(n):
            encounter_id = f"SYN-{i:05d}"
            age = int(rng.integers(18, 95))
            sex = str(rng.choice(["male", "female"]))
            n_abnormal = int(rng.binomial(len(VITALS), 0.25))
            severe = bool(rng.random() < 0.3)
            n_comorbid = int(rng.integers(0, MAX_COMORBIDITIES + 1))

            risks: Dict[str, float] = {}
            labels: Dict[str, bool] = {}
            for task in task_list:
                risk = feature_risk(task.task_id, _age_group(age), n_abnormal, severe, n_comorbid)
                risks[task.task_id] = risk
                labels[task.task_id] = bool(rng.random() < risk)
            true_risk[encounter_id] = risks

            history = [str(c) for c in rng.choice(COMORBIDITIES, size=n_comorbid, replace=False)]
            ps_text = self._render_ps(age, sex, history, n_abnormal, severe)

            abnormal = set(rng.choice(sorted(VITALS), size=n_abnormal, replace=False).tolist())
            events = self._ehr_events(rng, abnormal) if rng.random() < self.ehr_rate else []
            candidates = self._cxr_candidates(rng, encounter_id) if rng.random() < self.cxr_rate else []
            rr_docs = self._rr_docs(rng, severe) if rng.random() < self.rr_rate else []

            encounters.append(
                PatientEncounter(
                    encounter_id=encounter_id,
                    ps_text=ps_text,
                    ehr_events=events,
                    cxr_candidates=candidates,
                    rr_docs=rr_docs,
                    labels=labels,
                )
            )

        logger.info(f"Coorte sintética gerada: {n} encounters (seed={self.seed})")
        for task in task_list:
            prevalence = np.mean([e.labels[task.task_id] for e in encounters]) if encounters else 0.0
            logger.info(f"Prevalência de {task.task_id}: {prevalence:.3f}")

        cohort = Cohort(encounters=encounters, provenance=f"synthetic(n={n},seed={self.seed})")
        return cohort, SyntheticOracle(true_risk=true_risk)

    # ========================================================================
    # RENDERIZAÇÃO DAS MODALIDADES
    # ========================================================================

    @staticmethod
    def _render_ps(age: int, sex: str, history: List[str], n_abnormal: int, severe: bool) -> str:
        pmh = ", ".join(history) if history else "no significant past medical history"
        profile = render_profile(_age_group(age), n_abnormal, severe, len(history))
        return (
            f"{age}-year-old {sex} ({AGE_GROUPS[_age_group(age)]}) admitted to the intensive care unit. "
            f"Past medical history: {pmh}. Admission profile: {profile}."
        )

    @staticmethod
    def _ehr_events(rng: np.random.Generator, abnormal: set) -> List[EhrEvent]:
        n_steps = int(rng.integers(6, 30))
        # Algumas medições caem após a janela de 48h e são descartadas na ingestão.
        offsets = np.sort(rng.choice(np.arange(0, 52 * 60, 15), size=n_steps, replace=False))
        events: List[EhrEvent] = []
        for t in offsets.tolist():
            for variable, (mu, sd, mu_abn, sd_abn) in VITALS.items():
                if variable in abnormal:
                    value = rng.normal(mu_abn, sd_abn)
                else:
                    value = rng.normal(mu, sd)
                events.append(EhrEvent(t_offset_min=int(t), variable=variable, value=round(float(value), 1)))
            gcs = "15" if len(abnormal) < 3 else str(int(rng.integers(8, 14)))
            events.append(EhrEvent(t_offset_min=int(t), variable="glasgow_coma_scale_total", value=gcs))
            refill = "delayed" if "systolic_blood_pressure" in abnormal else "normal"
            events.append(EhrEvent(t_offset_min=int(t), variable="capillary_refill_rate", value=refill))
        return events

    @staticmethod
    def _cxr_candidates(rng: np.random.Generator, encounter_id: str) -> List[CxrRef]:
        n_scans = int(rng.integers(1, 4))
        scans = []
        for k in range(n_scans):
            view = str(rng.choice(["AP", "PA", "LATERAL"], p=[0.75, 0.15, 0.10]))
            scans.append(
                CxrRef(
                    image_locator=f"synthetic://cxr/{encounter_id}-{k}.jpg",
                    view=view,
                    t_offset_min=int(rng.integers(0, 52 * 60)),
                )
            )
        return scans

    @staticmethod
    def _rr_docs(rng: np.random.Generator, severe: bool) -> List[RrDoc]:
        n_docs = int(rng.integers(1, 3))
        docs = []
        for _ in range(n_docs):
            modality = str(rng.choice(["CXR", "CT", "US"], p=[0.6, 0.3, 0.1]))
            docs.append(
                RrDoc(
                    t_offset_min=int(rng.integers(0, 52 * 60)),
                    modality_name=modality,
                    body=SEVERE_REPORT if severe else MILD_REPORT,
                )
            )
        return sorted(docs, key=lambda d: d.t_offset_min)


def generate_synthetic_cohort(
    n: int,
    seed: int = 42,
    tasks: Optional[Iterable[TaskSpec]] = None,
) -> Tuple[Cohort, SyntheticOracle]:
    """Atalho para SyntheticCohortGenerator(seed).generate(n, tasks)."""
    return SyntheticCohortGenerator(seed=seed).generate(n, tasks)


def build_oracle_script(task_id: str, default: str = "PROBABILITY: 0.5") -> MockScript:
    """
    Roteiro mock que recupera o risco verdadeiro a partir do texto do PS.

    O perfil de admissão renderizado no PS é a chave de uma tabela com todas as
    combinações de características; a resposta é o `repr` de logistic(w·z),
    de modo que a probabilidade parseada é bit-idêntica ao risco do oráculo.
    """
    lookup = {
        render_profile(age_band, n_abnormal, severe, n_comorbid): (
            f"PROBABILITY: {feature_risk(task_id, age_band, n_abnormal, severe, n_comorbid)!r}"
        )
        for age_band, n_abnormal, severe, n_comorbid in product(
            range(len(AGE_GROUPS)),
            range(len(VITALS) + 1),
            (False, True),
            range(MAX_COMORBIDITIES + 1),
        )
    }
    return MockScript(
        rules=[MockRule(regex=PROFILE_PATTERN, lookup=lookup)],
        default=default,
    )
