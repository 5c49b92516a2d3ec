"""
Protocolos multiagente: votação, debate, meta-prompting, Traj-CoA e o
registro de protocolos plug-in.
"""

import asyncio
import math
import re
from typing import Awaitable, Callable, Dict, List, Optional, Sequence, Tuple

from loguru import logger
from pydantic import BaseModel, ConfigDict

from app.core.clinical import decide
from app.core.exceptions import (
    AllAgentsFailed,
    ConfigError,
    DegenerateWeights,
    MalformedMetaDecision,
    UnknownProtocol,
)
from app.models.experiment import (
    AgentRoster,
    AgentSpec,
    ProtocolKind,
    StrategyKind,
    VoteAggregation,
    canonical_modalities,
)
from app.models.llm import ChatMessage, TextPart
from app.models.schemas import (
    BASE_MODALITY,
    MODALITY_ORDER,
    DebateTrace,
    DebateTurn,
    ExchangeRecord,
    ModalityKind,
    ParseStatus,
    PatientEncounter,
    PredictionRecord,
    TaskSpec,
)
from app.services.agent_service import AgentService, rationale_of, worst_status
from app.services.serialization_service import serialize_ehr_log

# ============================================================================
# REGISTRO DE PLUG-INS
# ============================================================================

ProtocolRunner = Callable[[PatientEncounter, TaskSpec, "CollaborationService"], Awaitable[PredictionRecord]]

_PLUGINS: Dict[str, ProtocolRunner] = {}


def register_protocol(name: str, runner: ProtocolRunner) -> None:
    """Registra um protocolo plug-in sob `name` (substitui registro anterior)."""
    if name in _PLUGINS:
        logger.warning(f"Protocolo plug-in {name} substituído")
    _PLUGINS[name] = runner
    logger.info(f"Protocolo plug-in registrado: {name}")


def unregister_protocol(name: str) -> None:
    _PLUGINS.pop(name, None)


def get_protocol(name: str) -> ProtocolRunner:
    try:
        return _PLUGINS[name]
    except KeyError:
        raise UnknownProtocol(name)


def registered_protocols() -> List[str]:
    return sorted(_PLUGINS)


# ============================================================================
# AGREGAÇÃO
# ============================================================================

def mean_vote(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def weighted_vote(values: Sequence[float], weights: Sequence[float]) -> float:
    """
    Média ponderada; com todos os pesos iguais cai na média simples, de modo
    que o resultado é idêntico ao da votação por maioria.
    """
    total = math.fsum(weights)
    if total <= 0:
        raise DegenerateWeights("Soma dos pesos dos agentes participantes é zero")
    if len(set(weights)) == 1:
        return mean_vote(values)
    return min(1.0, max(0.0, math.fsum(w * p for w, p in zip(weights, values)) / total))


CONSULT_PATTERN = re.compile(r"CONSULT\s*:\s*([^\n]*)", re.IGNORECASE)
PREDICT_PATTERN = re.compile(r"DECISION\s*:\s*PREDICT", re.IGNORECASE)


def parse_meta_decision(text: str) -> Tuple[str, List[str]]:
    """
    Interpreta a primeira resposta do meta-agente.

    Returns:
        ("predict", []) ou ("consult", nomes de modalidade pedidos)

    Raises:
        MalformedMetaDecision: Sem DECISION: PREDICT nem CONSULT
    """
    consult = list(CONSULT_PATTERN.finditer(text or ""))
    predict = list(PREDICT_PATTERN.finditer(text or ""))
    if not consult and not predict:
        raise MalformedMetaDecision(f"Resposta do meta-agente sem decisão: {(text or '')[:80]!r}")
    last_consult = consult[-1].start() if consult else -1
    last_predict = predict[-1].start() if predict else -1
    if last_predict > last_consult:
        return "predict", []
    names = [n for n in re.split(r"[,;/\s]+|\band\b", consult[-1].group(1)) if n and n.strip()]
    return "consult", [n.strip().strip(".") for n in names if n.strip().strip(".")]


class CollaborationOptions(BaseModel):
    """Parâmetros dos protocolos multiagente."""
    model_config = ConfigDict(frozen=True)

    vote_aggregation: VoteAggregation = VoteAggregation.PROBABILITY
    debate_max_rounds: int = 3
    peer_char_limit: int = 600
    traj_chunk_steps: int = 100


class CollaborationService:
    """Executa os protocolos multiagente sobre um AgentService."""

    def __init__(self, agents: AgentService, options: Optional[CollaborationOptions] = None):
        self.agents = agents
        self.options = options or CollaborationOptions()

    # ========================================================================
    # ROSTERS
    # ========================================================================

    @staticmethod
    def modality_roster(
        modalities: Sequence[ModalityKind],
        weights: Optional[Dict[str, float]] = None,
    ) -> AgentRoster:
        """Um agente por modalidade, identificado pelo nome da modalidade."""
        agents = [AgentSpec(agent_id=m.value, modalities=[m]) for m in canonical_modalities(list(modalities))]
        return AgentRoster(agents=agents, weights=weights)

    @staticmethod
    def multimodal_roster(n_agents: int, modalities: Sequence[ModalityKind]) -> AgentRoster:
        """`n_agents` agentes idênticos vendo todas as modalidades."""
        mods = canonical_modalities(list(modalities))
        agents = [
            AgentSpec(agent_id=f"agent-{i + 1}", modalities=mods, persona=f" You are panel member {i + 1}.")
            for i in range(n_agents)
        ]
        return AgentRoster(agents=agents)

    def _participants(self, roster: AgentRoster, encounter: PatientEncounter) -> Tuple[List[AgentSpec], List[ExchangeRecord]]:
        """Agentes cujas modalidades existem no encounter; os demais viram notas no trace."""
        present = encounter.modalities_present()
        active, notes = [], []
        for agent in roster.agents:
            missing = [m for m in agent.modalities if m not in present]
            if len(agent.modalities) == 1 and missing:
                logger.info(f"{encounter.encounter_id}: agente {agent.agent_id} sem dados, pulado")
                notes.append(
                    ExchangeRecord(agent_id=agent.agent_id, step="skipped", note=f"modalidade ausente: {missing[0].value}")
                )
                continue
            active.append(agent)
        return active, notes

    def _agent_context(self, agent: AgentSpec, encounter: PatientEncounter, task: TaskSpec):
        return self.agents.build_context(encounter, task, agent.modalities, require_base=False)

    def _agent_persona(self, agent: AgentSpec) -> str:
        if agent.persona:
            return agent.persona
        return self.agents.persona(agent.modalities)

    # ========================================================================
    # VOTAÇÃO
    # ========================================================================

    async def _poll_agents(
        self,
        roster: AgentRoster,
        encounter: PatientEncounter,
        task: TaskSpec,
        protocol_id: str,
    ) -> Tuple[Dict[str, PredictionRecord], List[ExchangeRecord]]:
        active, notes = self._participants(roster, encounter)
        records = await asyncio.gather(
            *[
                self.agents.run_single(
                    StrategyKind.ZERO_SHOT,
                    self._agent_context(agent, encounter, task),
                    task,
                    protocol_id=protocol_id,
                    agent_id=agent.agent_id,
                    persona=self._agent_persona(agent),
                )
                for agent in active
            ]
        )
        return {agent.agent_id: rec for agent, rec in zip(active, records)}, notes

    def _vote_values(self, predictions: Dict[str, PredictionRecord]) -> Dict[str, float]:
        if self.options.vote_aggregation == VoteAggregation.HARD_LABEL:
            return {a: float(rec.predicted_label) for a, rec in predictions.items()}
        return {a: rec.probability for a, rec in predictions.items()}

    async def _vote(
        self,
        roster: AgentRoster,
        encounter: PatientEncounter,
        task: TaskSpec,
        protocol: ProtocolKind,
    ) -> PredictionRecord:
        predictions, notes = await self._poll_agents(roster, encounter, task, protocol.value)
        valid = {a: rec for a, rec in predictions.items() if rec.parse_status != ParseStatus.ERROR}
        if not valid:
            raise AllAgentsFailed(f"{encounter.encounter_id}: nenhum agente produziu probabilidade válida")

        values = self._vote_values(valid)
        if protocol == ProtocolKind.WEIGHTED_VOTE:
            if roster.weights is None:
                raise ConfigError("weighted_vote exige pesos por agente")
            probability = weighted_vote(list(values.values()), [roster.weights[a] for a in values])
        else:
            probability = mean_vote(list(values.values()))

        status = worst_status(rec.parse_status for rec in valid.values())
        if len(valid) < len(predictions):
            status = ParseStatus.FALLBACK
            logger.warning(
                f"{encounter.encounter_id}: {len(predictions) - len(valid)} agente(s) com erro fora da votação"
            )

        trace = notes + [ex for rec in predictions.values() for ex in rec.trace]
        return PredictionRecord.build(
            encounter_id=encounter.encounter_id,
            task=task,
            protocol_id=protocol.value,
            probability=probability,
            parse_status=status,
            trace=trace,
        )

    async def run_majority_vote(self, roster: AgentRoster, encounter: PatientEncounter, task: TaskSpec) -> PredictionRecord:
        """Média (ou fração de positivos) das predições zero-shot dos agentes."""
        return await self._vote(roster, encounter, task, ProtocolKind.MAJORITY_VOTE)

    async def run_weighted_vote(self, roster: AgentRoster, encounter: PatientEncounter, task: TaskSpec) -> PredictionRecord:
        """Como a votação por maioria, ponderando pelos pesos do roster."""
        return await self._vote(roster, encounter, task, ProtocolKind.WEIGHTED_VOTE)

    # ========================================================================
    # DEBATE
    # ========================================================================

    def _peer_messages(self, agent_id: str, previous: Dict[str, DebateTurn]) -> str:
        limit = self.options.peer_char_limit
        lines = []
        for peer_id, turn in previous.items():
            if peer_id == agent_id or turn.parse_status == ParseStatus.ERROR:
                continue
            lines.append(
                self.agents.templates.render(
                    "debate_peer",
                    agent_id=peer_id,
                    probability=f"{turn.probability:.3f}",
                    rationale=turn.rationale[:limit],
                )
            )
        return "\n".join(lines) if lines else "(no valid peer answers)"

    async def _debate_turn(
        self,
        agent: AgentSpec,
        encounter: PatientEncounter,
        task: TaskSpec,
        round_no: int,
        max_rounds: int,
        previous: Optional[Dict[str, DebateTurn]],
    ) -> Tuple[DebateTurn, ExchangeRecord]:
        context = self._agent_context(agent, encounter, task)
        system = self.agents.system_message(self._agent_persona(agent))
        if previous is None:
            parts = list(context.parts) + [self.agents.answer_part(task)]
        else:
            own = previous.get(agent.agent_id)
            own_text = (
                f"probability {own.probability:.3f}. {own.rationale[: self.options.peer_char_limit]}"
                if own is not None and own.parse_status != ParseStatus.ERROR
                else "none"
            )
            prompt = self.agents.templates.render(
                "debate_round",
                round=round_no,
                max_rounds=max_rounds,
                own_previous=own_text,
                peer_messages=self._peer_messages(agent.agent_id, previous),
            )
            parts = list(context.parts) + [TextPart(content=prompt)]

        record, text = await self.agents.exchange(
            [system, self.agents.user(parts)], agent_id=agent.agent_id, step=f"round-{round_no}"
        )
        turn = DebateTurn(
            probability=record.probability,
            predicted_label=(
                False if record.parse_status == ParseStatus.ERROR
                else decide(record.probability, task.decision_threshold)
            ),
            rationale=rationale_of(text),
            parse_status=record.parse_status,
        )
        return turn, record

    async def run_debate(
        self,
        roster: AgentRoster,
        encounter: PatientEncounter,
        task: TaskSpec,
        max_rounds: Optional[int] = None,
        protocol: ProtocolKind = ProtocolKind.DEBATE_UNIMODAL,
    ) -> Tuple[PredictionRecord, DebateTrace]:
        """
        Debate em rodadas até unanimidade de rótulos ou `max_rounds`.

        Na rodada 1 cada agente responde de forma independente; a partir da 2,
        cada um vê as probabilidades e justificativas dos outros na rodada
        anterior. A probabilidade final é a média da rodada de consenso (ou da
        última rodada, sem consenso).

        Returns:
            (PredictionRecord, DebateTrace)

        Com um só participante presente no encounter, o debate é registrado
        como degradado para agente único no trace.

        Raises:
            ConfigError: Roster com menos de dois agentes
            AllAgentsFailed: Todos os agentes com erro numa rodada
        """
        if len(roster.agents) < 2:
            raise ConfigError(f"Debate exige ao menos dois agentes no roster (recebido: {len(roster.agents)})")
        max_rounds = max_rounds or self.options.debate_max_rounds
        active, notes = self._participants(roster, encounter)
        if not active:
            raise AllAgentsFailed(f"{encounter.encounter_id}: nenhum agente participante no debate")
        if len(active) == 1:
            logger.warning(f"{encounter.encounter_id}: debate degradado para agente único ({active[0].agent_id})")
            notes.append(
                ExchangeRecord(agent_id=active[0].agent_id, step="degraded", note="debate reduzido a um único agente")
            )

        rounds: List[Dict[str, DebateTurn]] = []
        trace: List[ExchangeRecord] = list(notes)
        consensus = "MAX"
        previous: Optional[Dict[str, DebateTurn]] = None

        for round_no in range(1, max_rounds + 1):
            results = await asyncio.gather(
                *[self._debate_turn(a, encounter, task, round_no, max_rounds, previous) for a in active]
            )
            turns = {agent.agent_id: turn for agent, (turn, _) in zip(active, results)}
            trace.extend(record for _, record in results)
            if all(t.parse_status == ParseStatus.ERROR for t in turns.values()):
                raise AllAgentsFailed(f"{encounter.encounter_id}: todos os agentes falharam na rodada {round_no}")
            rounds.append(turns)
            if DebateTrace.is_unanimous(turns):
                consensus = round_no
                break
            previous = turns

        final_turns = [t for t in rounds[-1].values() if t.parse_status != ParseStatus.ERROR]
        final_probability = mean_vote([t.probability for t in final_turns])
        debate = DebateTrace(
            rounds=rounds,
            consensus_round=consensus,
            final_probability=final_probability,
            max_rounds=max_rounds,
        )
        status = worst_status(t.parse_status for t in rounds[-1].values())
        if status == ParseStatus.ERROR:
            status = ParseStatus.FALLBACK
        logger.debug(f"{encounter.encounter_id}: debate encerrado (consenso={consensus})")

        record = PredictionRecord.build(
            encounter_id=encounter.encounter_id,
            task=task,
            protocol_id=protocol.value,
            probability=final_probability,
            parse_status=status,
            trace=trace,
            debate=debate,
        )
        return record, debate

    # ========================================================================
    # META-PROMPTING
    # ========================================================================

    async def run_meta_prompt(self, encounter: PatientEncounter, task: TaskSpec) -> PredictionRecord:
        """
        Meta-agente vê o PS e decide prever ou consultar especialistas.

        Pedidos de modalidades ausentes (ou inválidas) são registrados no trace
        e ignorados; resposta sem decisão legível vale como PREDICT com status
        fallback.
        """
        agents = self.agents
        present = encounter.modalities_present()
        menu = [m for m in MODALITY_ORDER if m != BASE_MODALITY and m in present]
        ps_context = agents.build_context(encounter, task, [BASE_MODALITY])
        system = agents.system_message()
        decide_msg = agents.user(
            list(ps_context.parts)
            + [
                TextPart(
                    content=agents.templates.render(
                        "meta_decide",
                        modality_menu=", ".join(m.value for m in menu) if menu else "none",
                    )
                )
            ]
        )
        first, reply = await agents.exchange(
            [system, decide_msg], agent_id="meta", step="decide", parse=False
        )
        trace: List[ExchangeRecord] = [first]

        malformed = False
        try:
            decision, requested = parse_meta_decision(reply)
        except MalformedMetaDecision as exc:
            logger.warning(f"{encounter.encounter_id}: {exc}; tratando como PREDICT")
            decision, requested, malformed = "predict", [], True

        if decision == "predict":
            final, _ = await agents.exchange(
                [
                    system,
                    decide_msg,
                    ChatMessage.text("assistant", reply),
                    ChatMessage.text("user", agents.templates.render("meta_predict")),
                ],
                agent_id="meta",
                step="predict",
            )
            trace.append(final)
        else:
            experts: List[ModalityKind] = []
            for name in requested:
                try:
                    modality = ModalityKind.parse(name)
                except ValueError:
                    trace.append(ExchangeRecord(agent_id="meta", step="skipped", note=f"modalidade desconhecida: {name}"))
                    continue
                if modality not in menu:
                    trace.append(
                        ExchangeRecord(agent_id="meta", step="skipped", note=f"modalidade indisponível: {modality.value}")
                    )
                    continue
                if modality not in experts:
                    experts.append(modality)

            reports = await asyncio.gather(*[self._expert_report(m, encounter, task) for m in experts])
            trace.extend(record for record, _ in reports)
            expert_text = "\n\n".join(
                f"[{m.value} expert]\n{text}" for m, (_, text) in zip(experts, reports)
            ) or "(no expert reports)"
            final_msg = agents.user(
                list(ps_context.parts)
                + [TextPart(content=agents.templates.render("meta_final", expert_reports=expert_text))]
            )
            final, _ = await agents.exchange([system, final_msg], agent_id="meta", step="final")
            trace.append(final)

        status = final.parse_status
        if malformed and status == ParseStatus.OK:
            status = ParseStatus.FALLBACK
        return PredictionRecord.build(
            encounter_id=encounter.encounter_id,
            task=task,
            protocol_id=ProtocolKind.META_PROMPT.value,
            probability=final.probability,
            parse_status=status,
            trace=trace,
        )

    async def _expert_report(
        self, modality: ModalityKind, encounter: PatientEncounter, task: TaskSpec
    ) -> Tuple[ExchangeRecord, str]:
        agents = self.agents
        context = agents.build_context(encounter, task, [modality], require_base=False)
        prompt = agents.templates.render(
            "meta_expert", modality=modality.value, positive_meaning=task.positive_meaning
        )
        return await agents.exchange(
            [
                agents.system_message(agents.persona([modality]), report=True),
                agents.user(list(context.parts) + [TextPart(content=prompt)]),
            ],
            agent_id=f"expert-{modality.value}",
            step=f"expert:{modality.value}",
            parse=False,
        )

    # ========================================================================
    # TRAJ-COA
    # ========================================================================

    async def run_traj_coa(
        self,
        encounter: PatientEncounter,
        task: TaskSpec,
        chunk_steps: Optional[int] = None,
    ) -> PredictionRecord:
        """
        Cadeia de agentes sobre a trajetória de EHR.

        A série é dividida em blocos de até `chunk_steps` instantes; um worker
        resume cada bloco e a memória concatenada substitui o EHR no prompt do
        juiz, junto das demais modalidades. Sem EHR, cai para zero-shot.
        """
        agents = self.agents
        chunk_steps = chunk_steps or self.options.traj_chunk_steps
        others = [m for m in MODALITY_ORDER if m != ModalityKind.EHR and m in encounter.modalities_present()]

        if not encounter.ehr_events:
            logger.warning(f"{encounter.encounter_id}: sem EHR, Traj-CoA reduzido a zero-shot")
            record = await agents.run_single(
                StrategyKind.ZERO_SHOT,
                agents.build_context(encounter, task, others),
                task,
                protocol_id=ProtocolKind.TRAJ_COA.value,
                agent_id="judge",
            )
            note = ExchangeRecord(agent_id="judge", step="degraded", note="sem EHR: zero-shot")
            return record.model_copy(update={"trace": [note] + record.trace})

        steps = sorted({e.t_offset_min for e in encounter.ehr_events})
        chunks = [steps[i: i + chunk_steps] for i in range(0, len(steps), chunk_steps)]
        task_prompt = TextPart(content=agents.task_prompt(task))

        async def summarise(index: int, chunk: List[int]) -> Tuple[ExchangeRecord, str]:
            lo, hi = chunk[0], chunk[-1]
            events = [e for e in encounter.ehr_events if lo <= e.t_offset_min <= hi]
            prompt = agents.templates.render(
                "traj_worker",
                chunk_index=index + 1,
                chunk_count=len(chunks),
                start=lo,
                end=hi,
                ehr_chunk=serialize_ehr_log(events),
            )
            return await agents.exchange(
                [agents.system_message(report=True), agents.user([task_prompt, TextPart(content=prompt)])],
                agent_id=f"worker-{index + 1}",
                step=f"worker-{index + 1}",
                parse=False,
            )

        memories = await asyncio.gather(*[summarise(i, c) for i, c in enumerate(chunks)])
        memory = "\n\n".join(
            f"[Memory {i + 1}/{len(chunks)} | T0+{c[0]}m to T0+{c[-1]}m]\n{text}"
            for i, (c, (_, text)) in enumerate(zip(chunks, memories))
        )

        context = agents.build_context(encounter, task, others)
        parts = list(context.parts)
        parts.insert(2, TextPart(content=agents.templates.render("traj_judge", memory=memory)))
        judge, _ = await agents.exchange(
            [agents.system_message(), agents.user(parts + [agents.answer_part(task)])],
            agent_id="judge",
            step="judge",
        )
        return PredictionRecord.build(
            encounter_id=encounter.encounter_id,
            task=task,
            protocol_id=ProtocolKind.TRAJ_COA.value,
            probability=judge.probability,
            parse_status=judge.parse_status,
            trace=[record for record, _ in memories] + [judge],
        )

    # ========================================================================
    # PLUG-INS
    # ========================================================================

    async def run_plugin(self, name: str, encounter: PatientEncounter, task: TaskSpec) -> PredictionRecord:
        """Despacha para um protocolo registrado com `register_protocol`."""
        runner = get_protocol(name)
        return await runner(encounter, task, self)
