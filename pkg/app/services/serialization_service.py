"""
Serialização das modalidades em texto e montagem do contexto multimodal.
"""

import mimetypes
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence

import pandas as pd
from loguru import logger

from app.core.clinical import VARIABLE_ORDER, is_categorical
from app.core.exceptions import MissingBaseModality
from app.models.llm import ImagePart, MessagePart, PromptContext, TextPart
from app.models.schemas import (
    BASE_MODALITY,
    MODALITY_ORDER,
    EhrEvent,
    ModalityKind,
    PatientEncounter,
    RrDoc,
    SerializationMode,
)

NO_EHR = "NO EHR OBSERVATIONS"
NO_RR = "NO RADIOLOGY REPORTS"

MAX_LOG_STEPS = 500
HEAD_STEPS = 100
TAIL_STEPS = 400

ImageLoader = Callable[[str], Optional[bytes]]


def format_value(value) -> str:
    """Números com até 2 casas decimais, sem zeros à direita."""
    if isinstance(value, str):
        return value
    text = f"{float(value):.2f}".rstrip("0").rstrip(".")
    return "0" if text in ("-0", "") else text


def load_image_bytes(locator: str) -> Optional[bytes]:
    """Lê a imagem do disco; devolve None se o arquivo não existir."""
    path = Path(locator[len("file://"):] if locator.startswith("file://") else locator)
    if not path.is_file():
        return None
    return path.read_bytes()


# ============================================================================
# EHR
# ============================================================================

def serialize_ehr_log(
    events: Sequence[EhrEvent],
    max_steps: int = MAX_LOG_STEPS,
    head_steps: int = HEAD_STEPS,
    tail_steps: int = TAIL_STEPS,
) -> str:
    """
    Uma linha por instante: `[T0+<t>m] var=valor var=valor`.

    Séries com mais de `max_steps` instantes distintos mantêm os primeiros
    `head_steps` e os últimos `tail_steps`, com uma linha de elisão entre eles.
    """
    if not events:
        return NO_EHR

    by_step = {}
    for event in events:
        by_step.setdefault(event.t_offset_min, []).append(event)
    steps = sorted(by_step)

    def render(t: int) -> str:
        row = sorted(by_step[t], key=lambda e: VARIABLE_ORDER[e.variable])
        return f"[T0+{t}m] " + " ".join(f"{e.variable}={format_value(e.value)}" for e in row)

    if len(steps) <= max_steps:
        return "\n".join(render(t) for t in steps)

    omitted = len(steps) - head_steps - tail_steps
    lines = [render(t) for t in steps[:head_steps]]
    lines.append(f"... [{omitted} time-steps omitted] ...")
    lines.extend(render(t) for t in steps[-tail_steps:])
    return "\n".join(lines)


def _events_frame(events: Sequence[EhrEvent]) -> pd.DataFrame:
    df = pd.DataFrame(
        [{"t": e.t_offset_min, "variable": e.variable, "value": e.value} for e in events]
    )
    df["order"] = df["variable"].map(VARIABLE_ORDER)
    return df.sort_values(["order", "t"], kind="stable")


def serialize_ehr_summary(events: Sequence[EhrEvent]) -> str:
    """Estatísticas por variável na ordem canônica."""
    if not events:
        return NO_EHR

    lines = []
    for _, group in _events_frame(events).groupby("order", sort=True):
        name = group["variable"].iloc[0]
        values = group["value"].tolist()
        if is_categorical(name):
            rendered = [format_value(v) for v in values]
            counts = pd.Series(rendered).value_counts(sort=False)
            top = counts.max()
            mode = next(v for v in rendered if counts[v] == top)
            lines.append(f"{name}: first={rendered[0]} last={rendered[-1]} mode={mode}")
        else:
            series = pd.Series(values, dtype="float64")
            lines.append(
                f"{name}: min={format_value(series.min())} max={format_value(series.max())} "
                f"mean={format_value(series.mean())} first={format_value(values[0])} "
                f"last={format_value(values[-1])}"
            )
    return "\n".join(lines)


def serialize_ehr_delta(events: Sequence[EhrEvent]) -> str:
    """Primeiro e último valor por variável; contínuas também com a variação."""
    if not events:
        return NO_EHR

    lines = []
    for _, group in _events_frame(events).groupby("order", sort=True):
        name = group["variable"].iloc[0]
        first, last = group["value"].iloc[0], group["value"].iloc[-1]
        if is_categorical(name):
            lines.append(f"{name}: {format_value(first)} -> {format_value(last)}")
        else:
            delta = float(last) - float(first)
            lines.append(
                f"{name}: {format_value(first)} -> {format_value(last)} "
                f"(Δ={format_value(delta)})"
            )
    return "\n".join(lines)


def serialize_ehr(events: Sequence[EhrEvent], mode: SerializationMode = SerializationMode.LOG) -> str:
    """Despacha para o formato pedido."""
    if mode == SerializationMode.SUMMARY:
        return serialize_ehr_summary(events)
    if mode == SerializationMode.DELTA:
        return serialize_ehr_delta(events)
    return serialize_ehr_log(events)


# ============================================================================
# LAUDOS
# ============================================================================

def concat_rr(docs: Iterable[RrDoc]) -> str:
    """Laudos em ordem cronológica, cada um com cabeçalho de modalidade e tempo."""
    ordered = sorted(docs, key=lambda d: d.t_offset_min)
    if not ordered:
        return NO_RR
    return "\n".join(
        f"--- REPORT ({d.modality_name}, T0+{d.t_offset_min}m) ---\n{d.body.strip()}" for d in ordered
    )


# ============================================================================
# CONTEXTO
# ============================================================================

def assemble_context(
    task_prompt: str,
    encounter: PatientEncounter,
    modalities: Iterable[ModalityKind],
    mode: SerializationMode = SerializationMode.LOG,
    require_base: bool = True,
    image_loader: Optional[ImageLoader] = None,
    task_prompt_id: str = "task",
) -> PromptContext:
    """
    Monta o contexto na ordem PS → EHR → CXR → RR.

    Modalidades pedidas mas ausentes no encounter são omitidas. A imagem de CXR
    entra como uma parte de imagem precedida do seu rótulo; se não puder ser
    lida, fica apenas o rótulo.

    Args:
        task_prompt: Instrução da tarefa (primeira parte)
        encounter: Encounter janelado
        modalities: Modalidades pedidas
        mode: Serialização de EHR
        require_base: Exige PS no conjunto (falso só para agentes unimodais)
        image_loader: Função locator → bytes (padrão: leitura de disco)
        task_prompt_id: Identificador do template da tarefa

    Returns:
        PromptContext

    Raises:
        MissingBaseModality: PS ausente do conjunto com require_base
    """
    requested = set(modalities)
    if require_base and BASE_MODALITY not in requested:
        raise MissingBaseModality("O conjunto de modalidades deve conter PS")

    loader = image_loader or load_image_bytes
    present = encounter.modalities_present()
    parts: List[MessagePart] = [TextPart(content=task_prompt)]

    for modality in MODALITY_ORDER:
        if modality not in requested:
            continue
        if modality not in present:
            logger.debug(f"{encounter.encounter_id}: modalidade {modality.value} ausente, omitida")
            continue

        if modality == ModalityKind.PS:
            parts.append(TextPart(content=f"Modality PS: {encounter.ps_text}"))
        elif modality == ModalityKind.EHR:
            parts.append(TextPart(content=f"Modality EHR:\n{serialize_ehr(encounter.ehr_events, mode)}"))
        elif modality == ModalityKind.CXR:
            parts.append(cxr_part(encounter, loader))
        elif modality == ModalityKind.RR:
            parts.append(TextPart(content=f"Modality RR:\n{concat_rr(encounter.rr_docs)}"))

    return PromptContext(
        encounter_id=encounter.encounter_id,
        task_prompt_id=task_prompt_id,
        parts=parts,
    )


def cxr_part(encounter: PatientEncounter, loader: ImageLoader) -> MessagePart:
    scan = encounter.cxr
    label = (
        f"Modality CXR: chest X-ray ({scan.view} view, T0+{scan.t_offset_min}m, "
        f"{scan.width_px}x{scan.height_px}px)."
    )
    data = loader(scan.image_locator)
    if data is None:
        logger.warning(f"{encounter.encounter_id}: imagem indisponível em {scan.image_locator}")
        return TextPart(content=f"{label} Image unavailable.")
    media_type = mimetypes.guess_type(scan.image_locator)[0] or "image/jpeg"
    return ImagePart(label=label, data=data, media_type=media_type)
