"""
Execução de experimentos: protocolo × modalidades sobre o split de teste,
com persistência por encounter, retomada e manifesto.
"""

import asyncio
import hashlib
import os
import re
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict, ValidationError
from tqdm import tqdm

from app.core.config import settings
from app.core.exceptions import BenchmarkError, ConfigError
from app.models.experiment import (
    AgentRoster,
    ExperimentConfig,
    MetricReport,
    ProtocolKind,
    RunManifest,
    ScoredSample,
    StrategyKind,
    modality_label,
)
from app.models.llm import BackendSpec
from app.models.schemas import (
    BASE_MODALITY,
    Cohort,
    ModalityKind,
    ParseStatus,
    PatientEncounter,
    PredictionRecord,
    Split,
)
from app.services.agent_service import AgentOptions, AgentService, FewShotExemplar
from app.services.cohort_service import CohortService
from app.services.collaboration_service import CollaborationOptions, CollaborationService
from app.services.llm_gateway import ChatGateway, ChatTransport, HttpChatTransport
from app.services.metrics_service import auroc, evaluate
from app.services.mock_backend import MockChatTransport
from app.services.prompt_templates import TemplateSet
from app.services.serialization_service import ImageLoader

MOCK_BACKEND = BackendSpec(
    endpoint_url="mock://local",
    model_id="mock",
    max_concurrent=64,
    requests_per_minute=1_000_000,
    max_retries=0,
)


class RunResult(BaseModel):
    """Saída de uma execução."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    run_dir: Path
    manifest: RunManifest
    report: MetricReport
    records: List[PredictionRecord]


def restrict_modalities(encounter: PatientEncounter, modalities: Sequence[ModalityKind]) -> PatientEncounter:
    """Remove do encounter as modalidades fora do conjunto do experimento."""
    keep = set(modalities)
    update = {}
    if ModalityKind.EHR not in keep:
        update["ehr_events"] = []
    if ModalityKind.CXR not in keep:
        update["cxr"] = None
        update["cxr_candidates"] = []
    if ModalityKind.RR not in keep:
        update["rr_docs"] = []
    return encounter.model_copy(update=update) if update else encounter


def _safe_name(encounter_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", encounter_id)


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as handle:
        handle.write(text)
    os.replace(tmp, path)


class ExperimentRunner:
    """
    Executa uma ExperimentConfig sobre uma coorte.

    Cada encounter de teste vira um PredictionRecord gravado em
    `<output_dir>/<run_id>/records/`; registros já gravados sem erro são
    reaproveitados numa nova execução com o mesmo run_id.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        templates: Optional[TemplateSet] = None,
        transport: Optional[ChatTransport] = None,
        image_loader: Optional[ImageLoader] = None,
        resume: bool = True,
        progress: bool = False,
    ):
        self.config = config
        self.templates = templates or TemplateSet()
        self.resume = resume
        self.progress = progress

        spec = config.backend or MOCK_BACKEND
        if transport is None:
            transport = MockChatTransport(config.mock_script) if config.mock_script else HttpChatTransport(spec)
        self.gateway = ChatGateway(spec, transport, cache_dir=config.cache_dir, jitter_seed=config.seed)
        self.agents = AgentService(
            self.gateway,
            self.templates,
            AgentOptions(
                model_id=spec.model_id,
                temperature=config.temperature,
                max_tokens=config.max_tokens,
                seed=config.seed,
                cot_sc_paths=config.cot_sc_paths,
                cot_sc_temperature=config.cot_sc_temperature,
            ),
            serialization_mode=config.serialization_mode,
            image_loader=image_loader,
        )
        self.collaboration = CollaborationService(
            self.agents,
            CollaborationOptions(
                vote_aggregation=config.vote_aggregation,
                debate_max_rounds=config.debate_max_rounds,
                peer_char_limit=config.peer_char_limit,
                traj_chunk_steps=config.traj_chunk_steps,
            ),
        )
        self._exemplars: Optional[List[FewShotExemplar]] = None
        self._roster: Optional[AgentRoster] = None

    # ========================================================================
    # IDENTIDADE DA EXECUÇÃO
    # ========================================================================

    def run_id(self, cohort: Cohort) -> str:
        """Depende da configuração, dos templates e da proveniência da coorte."""
        blob = "|".join([self.config.config_hash(), self.templates.digest, cohort.provenance])
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    # ========================================================================
    # PREPARAÇÃO
    # ========================================================================

    def _prepare(self, cohort: Cohort) -> Tuple[List[PatientEncounter], List[PatientEncounter], List[PatientEncounter]]:
        config = self.config
        windowed = CohortService.apply_window_and_pairing(cohort, config.task)
        assigned = CohortService.ensure_splits(windowed, settings.split_ratios, config.seed)
        restricted = [restrict_modalities(e, config.modalities) for e in assigned.encounters]

        def labelled(split: Split) -> List[PatientEncounter]:
            members = [e for e in restricted if e.split == split]
            usable = [e for e in members if config.task.task_id in e.labels]
            if len(usable) < len(members):
                logger.warning(
                    f"{len(members) - len(usable)} encounters de {split.value} sem rótulo {config.task.task_id} ignorados"
                )
            return sorted(usable, key=lambda e: e.encounter_id)

        test = labelled(Split.TEST)
        if config.max_samples is not None:
            test = test[: config.max_samples]
        return labelled(Split.TRAIN), labelled(Split.VAL), test

    async def estimate_weights(self, val: Sequence[PatientEncounter]) -> Dict[str, float]:
        """
        Peso de cada agente de modalidade = AUROC zero-shot no split de validação.

        Modalidades sem AUROC definido (uma só classe ou sem dados) recebem 0.5.
        """
        task = self.config.task
        weights: Dict[str, float] = {}
        for modality in self.config.modalities:
            members = [e for e in val if modality in e.modalities_present()]
            records = await asyncio.gather(
                *[
                    self.agents.run_single(
                        StrategyKind.ZERO_SHOT,
                        self.agents.build_context(e, task, [modality], require_base=False),
                        task,
                        protocol_id="weight_estimation",
                        agent_id=modality.value,
                        persona=self.agents.persona([modality]),
                    )
                    for e in members
                ]
            )
            samples = [
                ScoredSample(probability=r.probability, label=e.labels[task.task_id])
                for e, r in zip(members, records)
                if r.parse_status != ParseStatus.ERROR
            ]
            try:
                weights[modality.value] = auroc(samples)
            except BenchmarkError as exc:
                logger.warning(f"Peso de {modality.value} indefinido ({exc}); usando 0.5")
                weights[modality.value] = 0.5
        logger.info(f"Pesos estimados na validação: {weights}")
        return weights

    # ========================================================================
    # DESPACHO POR ENCOUNTER
    # ========================================================================

    async def predict(self, encounter: PatientEncounter) -> PredictionRecord:
        """Executa o protocolo configurado sobre um encounter."""
        config = self.config
        task = config.task
        protocol = config.protocol
        collab = self.collaboration

        if protocol in (ProtocolKind.SINGLE_UNIMODAL, ProtocolKind.SINGLE_MULTIMODAL):
            context = self.agents.build_context(encounter, task, config.modalities)
            return await self.agents.run_single(
                config.strategy, context, task, protocol_id=protocol.value, exemplars=self._exemplars
            )
        if protocol == ProtocolKind.MAJORITY_VOTE:
            return await collab.run_majority_vote(self._roster, encounter, task)
        if protocol == ProtocolKind.WEIGHTED_VOTE:
            return await collab.run_weighted_vote(self._roster, encounter, task)
        if protocol in (ProtocolKind.DEBATE_UNIMODAL, ProtocolKind.DEBATE_MULTIMODAL):
            record, _ = await collab.run_debate(self._roster, encounter, task, protocol=protocol)
            return record
        if protocol == ProtocolKind.META_PROMPT:
            return await collab.run_meta_prompt(encounter, task)
        if protocol == ProtocolKind.TRAJ_COA:
            return await collab.run_traj_coa(encounter, task)
        if protocol == ProtocolKind.PLUGIN:
            record = await collab.run_plugin(config.plugin_name, encounter, task)
            return record.model_copy(update={"protocol_id": config.protocol_id})
        raise ConfigError(f"Protocolo sem despacho: {protocol}")

    async def _safe_predict(self, encounter: PatientEncounter) -> PredictionRecord:
        try:
            return await self.predict(encounter)
        except Exception as exc:
            logger.error(f"{encounter.encounter_id}: falha no protocolo: {exc}")
            return PredictionRecord.build(
                encounter_id=encounter.encounter_id,
                task=self.config.task,
                protocol_id=self.config.protocol_id,
                probability=0.5,
                parse_status=ParseStatus.ERROR,
                error=f"{type(exc).__name__}: {exc}",
            )

    def _load_record(self, path: Path) -> Optional[PredictionRecord]:
        if not path.exists():
            return None
        try:
            record = PredictionRecord.model_validate_json(path.read_text(encoding="utf-8"))
        except (ValidationError, ValueError) as exc:
            logger.warning(f"Registro ilegível {path.name}, refazendo: {exc}")
            return None
        if record.error is not None or record.task_id != self.config.task.task_id:
            return None
        return record

    # ========================================================================
    # EXECUÇÃO
    # ========================================================================

    async def run(self, cohort: Cohort) -> RunResult:
        """
        Executa o experimento.

        Args:
            cohort: Coorte carregada (splits atribuídos se ausentes)

        Returns:
            RunResult com manifesto, relatório e registros em ordem de encounter_id
        """
        config = self.config
        started = time.perf_counter()
        run_id = self.run_id(cohort)
        run_dir = Path(config.output_dir) / run_id
        records_dir = run_dir / "records"
        logger.info(
            f"Execução {run_id}: {config.protocol_id} {config.strategy.value} "
            f"{modality_label(config.modalities)} em {config.task.task_id}"
        )

        train, val, test = self._prepare(cohort)
        if config.protocol in (ProtocolKind.SINGLE_UNIMODAL, ProtocolKind.SINGLE_MULTIMODAL) and config.strategy == StrategyKind.FEW_SHOT:
            self._exemplars = self.agents.select_exemplars(train, config.task, config.modalities)

        weights = config.weights
        if config.protocol == ProtocolKind.WEIGHTED_VOTE and weights is None:
            weights = await self.estimate_weights(val)
        if config.protocol in (ProtocolKind.MAJORITY_VOTE, ProtocolKind.WEIGHTED_VOTE, ProtocolKind.DEBATE_UNIMODAL):
            try:
                self._roster = CollaborationService.modality_roster(config.modalities, weights)
            except ValidationError as exc:
                raise ConfigError(f"Roster inválido: {exc}")
        elif config.protocol == ProtocolKind.DEBATE_MULTIMODAL:
            self._roster = CollaborationService.multimodal_roster(config.debate_agents, config.modalities)

        records: Dict[str, PredictionRecord] = {}
        pending: List[PatientEncounter] = []
        for enc in test:
            existing = self._load_record(records_dir / f"{_safe_name(enc.encounter_id)}.json") if self.resume else None
            if existing is not None:
                records[enc.encounter_id] = existing
            else:
                pending.append(enc)
        resumed = len(records)
        if resumed:
            logger.info(f"Retomando execução: {resumed} registros reaproveitados, {len(pending)} pendentes")

        semaphore = asyncio.Semaphore(config.worker_count)
        with tqdm(total=len(pending), desc=f"{config.protocol_id}", disable=not self.progress) as bar:

            async def worker(enc: PatientEncounter) -> PredictionRecord:
                async with semaphore:
                    record = await self._safe_predict(enc)
                _write_atomic(
                    records_dir / f"{_safe_name(enc.encounter_id)}.json",
                    record.model_dump_json(indent=2),
                )
                bar.update(1)
                return record

            for record in await asyncio.gather(*[worker(e) for e in pending]):
                records[record.encounter_id] = record

        ordered = [records[e.encounter_id] for e in test]
        labels = {e.encounter_id: e.labels[config.task.task_id] for e in test}
        samples = [
            ScoredSample(probability=r.probability, label=labels[r.encounter_id])
            for r in ordered
            if r.parse_status != ParseStatus.ERROR
        ]
        failed = sum(1 for r in ordered if r.error is not None)
        report = evaluate(
            samples,
            n_error_records=len(ordered) - len(samples),
            n_bins=config.n_bins,
            n_resamples=config.bootstrap_n,
            seed=config.seed,
            level=config.bootstrap_level,
            task_id=config.task.task_id,
            backbone=config.backbone_label,
            protocol=config.protocol_id,
            strategy=config.strategy.value,
            modalities=modality_label(config.modalities),
            serialization=config.serialization_mode.value,
        )

        stats = self.gateway.stats
        manifest = RunManifest(
            run_id=run_id,
            config_hash=config.config_hash(),
            template_hash=self.templates.digest,
            cohort_provenance=cohort.provenance,
            record_locators={
                e.encounter_id: f"records/{_safe_name(e.encounter_id)}.json" for e in test
            },
            wall_time_s=round(time.perf_counter() - started, 3),
            gateway_calls=stats.network_calls,
            cache_hits=stats.cache_hits,
            uncacheable_calls=stats.uncacheable_calls,
            resumed_records=resumed,
            failed_records=failed,
            weights=weights,
            created_at=datetime.now(timezone.utc).isoformat(),
        )
        _write_atomic(run_dir / "config.json", config.model_dump_json(indent=2))
        _write_atomic(run_dir / "report.json", report.model_dump_json(indent=2))
        _write_atomic(run_dir / "manifest.json", manifest.model_dump_json(indent=2))

        if failed:
            logger.warning(f"{failed} encounters falharam e serão refeitos numa retomada")
        logger.info(
            f"Execução {run_id} concluída: {len(ordered)} registros, {stats.network_calls} chamadas, "
            f"{stats.cache_hits} acertos de cache"
        )
        await self.gateway.aclose()
        return RunResult(run_dir=run_dir, manifest=manifest, report=report, records=ordered)


# ============================================================================
# ATALHOS
# ============================================================================

async def run_experiment_async(config: ExperimentConfig, cohort: Cohort, **kwargs) -> RunResult:
    return await ExperimentRunner(config, **kwargs).run(cohort)


def run_experiment(config: ExperimentConfig, cohort: Cohort, **kwargs) -> RunResult:
    """Versão síncrona de `ExperimentRunner(config).run(cohort)`."""
    return asyncio.run(run_experiment_async(config, cohort, **kwargs))


def ablation_configs(
    base: ExperimentConfig,
    modality_sets: Sequence[Sequence[ModalityKind]],
) -> List[ExperimentConfig]:
    """
    Uma configuração zero-shot de agente único por conjunto e uma de votação
    por maioria para cada conjunto com duas ou mais modalidades.

    Raises:
        ConfigError: Conjunto sem PS
    """
    singles, multis = [], []
    for mods in modality_sets:
        mods = list(mods)
        if BASE_MODALITY not in mods:
            raise ConfigError(f"Conjunto de ablação sem PS: {[m.value for m in mods]}")
        protocol = ProtocolKind.SINGLE_UNIMODAL if set(mods) == {BASE_MODALITY} else ProtocolKind.SINGLE_MULTIMODAL
        singles.append(
            base.model_copy(update={"protocol": protocol, "strategy": StrategyKind.ZERO_SHOT, "modalities": mods})
        )
        if len(set(mods)) >= 2:
            multis.append(
                base.model_copy(
                    update={"protocol": ProtocolKind.MAJORITY_VOTE, "strategy": StrategyKind.ZERO_SHOT, "modalities": mods}
                )
            )
    # model_copy não revalida; reconstruir aplica ordenação canônica e validadores.
    try:
        return [ExperimentConfig.model_validate(c.model_dump()) for c in singles + multis]
    except ValidationError as exc:
        raise ConfigError(str(exc))


async def run_ablation_sweep_async(
    base: ExperimentConfig,
    cohort: Cohort,
    modality_sets: Sequence[Sequence[ModalityKind]],
    **kwargs,
) -> List[RunResult]:
    results = []
    for config in ablation_configs(base, modality_sets):
        results.append(await ExperimentRunner(config, **kwargs).run(cohort))
    return results


def run_ablation_sweep(
    base: ExperimentConfig,
    cohort: Cohort,
    modality_sets: Sequence[Sequence[ModalityKind]],
    **kwargs,
) -> List[RunResult]:
    """Executa a ablação de modalidades (agente único ZS e votação por maioria)."""
    return asyncio.run(run_ablation_sweep_async(base, cohort, modality_sets, **kwargs))


# ============================================================================
# LEITURA DE EXECUÇÕES
# ============================================================================

def load_run(run_dir: Union[str, Path]) -> Tuple[RunManifest, MetricReport, List[PredictionRecord]]:
    """Lê manifesto, relatório e registros de um diretório de execução."""
    run_dir = Path(run_dir)
    try:
        manifest = RunManifest.model_validate_json((run_dir / "manifest.json").read_text(encoding="utf-8"))
        report = MetricReport.model_validate_json((run_dir / "report.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"Diretório de execução incompleto: {run_dir} ({exc.filename})")
    records = [
        PredictionRecord.model_validate_json((run_dir / locator).read_text(encoding="utf-8"))
        for locator in manifest.record_locators.values()
    ]
    return manifest, report, records


def find_runs(paths: Sequence[Union[str, Path]]) -> List[Path]:
    """Diretórios de execução (com manifest.json) sob os caminhos dados."""
    found = []
    for raw in paths:
        path = Path(raw)
        if (path / "manifest.json").exists():
            found.append(path)
        elif path.is_dir():
            found.extend(sorted(p.parent for p in path.glob("*/manifest.json")))
    return found
