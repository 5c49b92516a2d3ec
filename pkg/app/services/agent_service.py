"""
Agente único: montagem de prompts, estratégias de raciocínio e extração da
probabilidade da resposta do modelo.
"""

import asyncio
import hashlib
import math
import re
from typing import Iterable, List, Optional, Sequence, Tuple

from loguru import logger
from pydantic import BaseModel, ConfigDict

from app.core.exceptions import ExemplarUnavailable
from app.models.experiment import StrategyKind
from app.models.llm import ChatMessage, CompletionRequest, MessagePart, PromptContext, TextPart
from app.models.schemas import (
    ExchangeRecord,
    ModalityKind,
    ParseStatus,
    PatientEncounter,
    PredictionRecord,
    SerializationMode,
    TaskSpec,
)
from app.services.llm_gateway import ChatGateway
from app.services.prompt_templates import TemplateSet
from app.services.serialization_service import ImageLoader, assemble_context

PROBABILITY_PATTERN = re.compile(
    r"^[ \t]*PROBABILITY[ \t]*:[ \t]*([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)",
    re.IGNORECASE | re.MULTILINE,
)

FALLBACK_PROBABILITY = 0.5


def parse_probability(text: Optional[str]) -> Tuple[float, ParseStatus]:
    """
    Extrai a probabilidade da última linha `PROBABILITY: <x>` da resposta.

    Returns:
        (x, ok) se x ∈ [0, 1]; (0.5, error) se fora do intervalo;
        (0.5, fallback) se não houver número legível
    """
    if not text:
        return FALLBACK_PROBABILITY, ParseStatus.FALLBACK
    matches = PROBABILITY_PATTERN.findall(text)
    if not matches:
        return FALLBACK_PROBABILITY, ParseStatus.FALLBACK
    try:
        value = float(matches[-1])
    except ValueError:
        return FALLBACK_PROBABILITY, ParseStatus.FALLBACK
    if math.isnan(value) or not 0.0 <= value <= 1.0:
        return FALLBACK_PROBABILITY, ParseStatus.ERROR
    return value, ParseStatus.OK


def rationale_of(text: Optional[str]) -> str:
    """Texto da resposta sem as linhas de probabilidade."""
    if not text:
        return ""
    lines = [ln for ln in text.splitlines() if not PROBABILITY_PATTERN.search(ln)]
    return "\n".join(lines).strip()


def prompt_digest(messages: Sequence[ChatMessage]) -> str:
    blob = "\n\n".join(f"[{m.role}]\n{m.plain_text()}" for m in messages)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def worst_status(statuses: Iterable[ParseStatus]) -> ParseStatus:
    statuses = list(statuses)
    if ParseStatus.ERROR in statuses:
        return ParseStatus.ERROR
    if ParseStatus.FALLBACK in statuses:
        return ParseStatus.FALLBACK
    return ParseStatus.OK


class AgentOptions(BaseModel):
    """Parâmetros de amostragem do agente."""
    model_config = ConfigDict(frozen=True)

    model_id: str = "default"
    temperature: float = 0.0
    max_tokens: int = 768
    seed: Optional[int] = 42
    cot_sc_paths: int = 3
    cot_sc_temperature: float = 0.7


class FewShotExemplar(BaseModel):
    """Exemplo resolvido do split de treino."""
    model_config = ConfigDict(frozen=True)

    encounter_id: str
    text: str
    label: bool


class AgentService:
    """Executa as estratégias de agente único sobre um contexto montado."""

    def __init__(
        self,
        gateway: ChatGateway,
        templates: TemplateSet,
        options: Optional[AgentOptions] = None,
        serialization_mode: SerializationMode = SerializationMode.LOG,
        image_loader: Optional[ImageLoader] = None,
    ):
        self.gateway = gateway
        self.templates = templates
        self.options = options or AgentOptions(model_id=gateway.spec.model_id)
        self.serialization_mode = serialization_mode
        self.image_loader = image_loader

    # ========================================================================
    # PROMPTS
    # ========================================================================

    def task_prompt(self, task: TaskSpec) -> str:
        return self.templates.render("task", task_name=task.name, task_instruction=task.instruction)

    def build_context(
        self,
        encounter: PatientEncounter,
        task: TaskSpec,
        modalities: Iterable[ModalityKind],
        require_base: bool = True,
    ) -> PromptContext:
        """Contexto do encounter com as modalidades pedidas."""
        return assemble_context(
            self.task_prompt(task),
            encounter,
            modalities,
            mode=self.serialization_mode,
            require_base=require_base,
            image_loader=self.image_loader,
            task_prompt_id=task.task_id,
        )

    def persona(self, modalities: Sequence[ModalityKind]) -> str:
        if not modalities:
            return ""
        return self.templates.render("persona", modality="+".join(m.value for m in modalities))

    def system_message(self, persona: str = "", report: bool = False) -> ChatMessage:
        name = "system_report" if report else "system"
        return ChatMessage.text("system", self.templates.render(name, persona=persona))

    def answer_part(self, task: TaskSpec) -> TextPart:
        return TextPart(content=self.templates.render("answer", positive_meaning=task.positive_meaning))

    @staticmethod
    def user(parts: List[MessagePart]) -> ChatMessage:
        return ChatMessage(role="user", parts=parts)

    # ========================================================================
    # TROCA COM O MODELO
    # ========================================================================

    async def exchange(
        self,
        messages: List[ChatMessage],
        *,
        agent_id: str,
        step: str,
        temperature: Optional[float] = None,
        seed: Optional[int] = None,
        parse: bool = True,
    ) -> Tuple[ExchangeRecord, str]:
        """
        Envia uma conversa pelo gateway e registra a troca.

        Returns:
            (registro da troca, texto da resposta)
        """
        request = CompletionRequest(
            model_id=self.options.model_id,
            messages=messages,
            temperature=self.options.temperature if temperature is None else temperature,
            max_tokens=self.options.max_tokens,
            seed=self.options.seed if seed is None else seed,
            template_hash=self.templates.digest,
        )
        response = await self.gateway.cached_complete(request)
        text = response.text or ""
        probability, status = parse_probability(text) if parse else (None, None)
        record = ExchangeRecord(
            agent_id=agent_id,
            step=step,
            prompt_digest=prompt_digest(messages),
            response_text=text,
            probability=probability,
            parse_status=status,
            retry_count=response.retry_count,
        )
        return record, text

    # ========================================================================
    # ESTRATÉGIAS
    # ========================================================================

    async def run_single(
        self,
        strategy: StrategyKind,
        context: PromptContext,
        task: TaskSpec,
        *,
        protocol_id: str = "single",
        agent_id: str = "agent",
        persona: str = "",
        exemplars: Optional[Sequence[FewShotExemplar]] = None,
    ) -> PredictionRecord:
        """
        Executa uma estratégia de agente único sobre o contexto.

        Args:
            strategy: zero_shot, few_shot, cot, cot_sc ou self_refine
            context: Contexto montado (prompt da tarefa + modalidades)
            task: Tarefa
            protocol_id: Rótulo do protocolo no registro
            agent_id: Identificador do agente no trace
            persona: Texto de persona anexado ao system prompt
            exemplars: Par positivo/negativo exigido por few_shot

        Returns:
            PredictionRecord com o trace de todas as trocas

        Raises:
            ExemplarUnavailable: few_shot sem exemplos positivo e negativo
        """
        system = self.system_message(persona)

        if strategy == StrategyKind.ZERO_SHOT:
            trace, probability, status = await self._zero_shot(system, context, task, agent_id)
        elif strategy == StrategyKind.FEW_SHOT:
            trace, probability, status = await self._few_shot(system, context, task, agent_id, exemplars)
        elif strategy == StrategyKind.COT:
            trace, probability, status = await self._cot(system, context, task, agent_id, step_prefix="")
        elif strategy == StrategyKind.COT_SC:
            trace, probability, status = await self._cot_sc(system, context, task, agent_id)
        elif strategy == StrategyKind.SELF_REFINE:
            trace, probability, status = await self._self_refine(system, context, task, agent_id)
        else:
            raise ValueError(f"Estratégia desconhecida: {strategy}")

        return PredictionRecord.build(
            encounter_id=context.encounter_id,
            task=task,
            protocol_id=protocol_id,
            probability=probability,
            parse_status=status,
            trace=trace,
        )

    async def _zero_shot(self, system, context, task, agent_id):
        messages = [system, self.user(list(context.parts) + [self.answer_part(task)])]
        record, _ = await self.exchange(messages, agent_id=agent_id, step="answer")
        return [record], record.probability, record.parse_status

    async def _few_shot(self, system, context, task, agent_id, exemplars):
        if not exemplars or {e.label for e in exemplars} != {True, False}:
            raise ExemplarUnavailable("few_shot exige um exemplo positivo e um negativo")
        blocks = "\n\n".join(
            self.templates.render(
                "few_shot_example",
                index=i + 1,
                positive_meaning=task.positive_meaning,
                outcome="yes" if e.label else "no",
                modality_blocks=e.text,
            )
            for i, e in enumerate(exemplars)
        )
        shots = TextPart(content=self.templates.render("few_shot", exemplars=blocks))
        parts = [context.parts[0], shots] + list(context.parts[1:]) + [self.answer_part(task)]
        record, _ = await self.exchange([system, self.user(parts)], agent_id=agent_id, step="answer")
        return [record], record.probability, record.parse_status

    async def _cot(self, system, context, task, agent_id, step_prefix, temperature=None, seed=None):
        first = self.user(
            list(context.parts)
            + [TextPart(content=self.templates.render("cot_reason", positive_meaning=task.positive_meaning))]
        )
        reason, reasoning = await self.exchange(
            [system, first], agent_id=agent_id, step=f"{step_prefix}reason",
            temperature=temperature, seed=seed, parse=False,
        )
        follow_up = ChatMessage.text(
            "user", self.templates.render("cot_answer", positive_meaning=task.positive_meaning)
        )
        answer, _ = await self.exchange(
            [system, first, ChatMessage.text("assistant", reasoning), follow_up],
            agent_id=agent_id, step=f"{step_prefix}answer",
            temperature=temperature, seed=seed,
        )
        return [reason, answer], answer.probability, answer.parse_status

    async def _cot_sc(self, system, context, task, agent_id):
        base_seed = self.options.seed
        paths = await asyncio.gather(
            *[
                self._cot(
                    system, context, task, agent_id,
                    step_prefix=f"path-{i + 1}:",
                    temperature=self.options.cot_sc_temperature,
                    seed=None if base_seed is None else base_seed + i,
                )
                for i in range(self.options.cot_sc_paths)
            ]
        )
        trace = [record for path_trace, _, _ in paths for record in path_trace]
        probability, status = self.aggregate_paths([(p, s) for _, p, s in paths])
        return trace, probability, status

    @staticmethod
    def aggregate_paths(results: Sequence[Tuple[float, ParseStatus]]) -> Tuple[float, ParseStatus]:
        """
        Média das probabilidades dos caminhos com parse ok.

        Caminhos com fallback ou erro ficam fora da média e rebaixam o status
        para fallback; sem nenhum caminho ok, o resultado é 0.5 com erro (se
        algum caminho errou) ou fallback.
        """
        ok = [p for p, s in results if s == ParseStatus.OK]
        if ok:
            status = ParseStatus.OK if len(ok) == len(results) else ParseStatus.FALLBACK
            return math.fsum(ok) / len(ok), status
        if any(s == ParseStatus.ERROR for _, s in results):
            return FALLBACK_PROBABILITY, ParseStatus.ERROR
        return FALLBACK_PROBABILITY, ParseStatus.FALLBACK

    async def _self_refine(self, system, context, task, agent_id):
        first = self.user(list(context.parts) + [self.answer_part(task)])
        draft, draft_text = await self.exchange([system, first], agent_id=agent_id, step="draft")

        critique_prompt = ChatMessage.text("user", self.templates.render("refine_critique"))
        conversation = [system, first, ChatMessage.text("assistant", draft_text), critique_prompt]
        critique, critique_text = await self.exchange(conversation, agent_id=agent_id, step="critique", parse=False)

        final_prompt = ChatMessage.text("user", self.templates.render("refine_final"))
        final, _ = await self.exchange(
            conversation + [ChatMessage.text("assistant", critique_text), final_prompt],
            agent_id=agent_id, step="final",
        )
        return [draft, critique, final], final.probability, final.parse_status

    # ========================================================================
    # FEW-SHOT
    # ========================================================================

    def select_exemplars(
        self,
        train: Iterable[PatientEncounter],
        task: TaskSpec,
        modalities: Iterable[ModalityKind],
    ) -> List[FewShotExemplar]:
        """
        Escolhe o positivo e o negativo de menor encounter_id no treino.

        As imagens dos exemplos entram só pelo rótulo textual.

        Raises:
            ExemplarUnavailable: Faltam positivos ou negativos no treino
        """
        labelled = sorted(
            (e for e in train if task.task_id in e.labels), key=lambda e: e.encounter_id
        )
        positive = next((e for e in labelled if e.labels[task.task_id]), None)
        negative = next((e for e in labelled if not e.labels[task.task_id]), None)
        if positive is None or negative is None:
            raise ExemplarUnavailable(
                f"Treino sem exemplo {'positivo' if positive is None else 'negativo'} para {task.task_id}"
            )

        modalities = list(modalities)
        exemplars = []
        for enc in (positive, negative):
            ctx = self.build_context(enc, task, modalities).text_only()
            text = "\n\n".join(p.content for p in ctx.parts[1:])
            exemplars.append(FewShotExemplar(encounter_id=enc.encounter_id, text=text, label=enc.labels[task.task_id]))
        logger.info(f"Exemplos few-shot: {positive.encounter_id} (+), {negative.encounter_id} (-)")
        return exemplars
