"""
Serviço de ingestão de coortes.
Lê e escreve o formato de intercâmbio (um registro JSON por linha), aplica a
janela de observação e o pareamento de CXR, e divide a coorte em partições.
"""

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import ValidationError

from app.core.exceptions import ConfigError, DuplicateEncounter, EmptyCohort, MissingPS, SchemaError
from app.models.schemas import Cohort, CxrRef, EhrEvent, PatientEncounter, Split, TaskSpec

DEFAULT_RATIOS: Tuple[float, float, float] = (0.70, 0.10, 0.20)


class CohortService:
    """Operações de carga, janela, pareamento e divisão de coortes."""

    # ========================================================================
    # LEITURA E ESCRITA
    # ========================================================================

    @staticmethod
    def load_cohort(path: Union[str, Path]) -> Cohort:
        """
        Carrega uma coorte do formato de intercâmbio.

        Args:
            path: Caminho do arquivo (UTF-8, um registro por linha)

        Returns:
            Cohort com invariantes garantidas

        Raises:
            SchemaError: Registro fora do schema (com número da linha)
            DuplicateEncounter: encounter_id repetido
            MissingPS: Registro sem ps_text
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Arquivo de coorte não encontrado: {path}")
        logger.info(f"Carregando coorte de {path}")

        encounters: List[PatientEncounter] = []
        seen: Dict[str, int] = {}

        with path.open("r", encoding="utf-8") as handle:
            for line_no, raw in enumerate(handle, start=1):
                if not raw.strip():
                    continue
                try:
                    record = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise SchemaError(line_no, f"JSON inválido: {exc.msg}")
                if not isinstance(record, dict):
                    raise SchemaError(line_no, "registro deve ser um objeto")

                encounter = CohortService._parse_record(record, line_no)
                if encounter.encounter_id in seen:
                    raise DuplicateEncounter(encounter.encounter_id, line_no)
                seen[encounter.encounter_id] = line_no
                encounters.append(encounter)

        logger.info(f"Coorte carregada: {len(encounters)} encounters")
        return Cohort(encounters=encounters, provenance=str(path))

    @staticmethod
    def _parse_record(record: Dict[str, Any], line_no: int) -> PatientEncounter:
        """Converte um registro bruto em PatientEncounter."""
        encounter_id = record.get("encounter_id")
        if not isinstance(encounter_id, str) or not encounter_id:
            raise SchemaError(line_no, "encounter_id ausente ou não textual")

        ps_text = record.get("ps_text")
        if not isinstance(ps_text, str) or not ps_text.strip():
            raise MissingPS(encounter_id, line_no)

        raw_events = record.get("ehr_events") or []
        if not isinstance(raw_events, list):
            raise SchemaError(line_no, "ehr_events deve ser uma lista")
        events = []
        for item in raw_events:
            if not isinstance(item, (list, tuple)) or len(item) != 3:
                raise SchemaError(line_no, f"evento de EHR malformado: {item!r}")
            events.append({"t_offset_min": item[0], "variable": item[1], "value": item[2]})

        cxr_raw = record.get("cxr")
        candidates_raw = record.get("cxr_candidates") or []
        if isinstance(cxr_raw, list):
            candidates_raw = list(candidates_raw) + cxr_raw
            cxr_raw = None

        try:
            encounter = PatientEncounter(
                encounter_id=encounter_id,
                ps_text=ps_text,
                ehr_events=CohortService._dedupe_events(
                    [EhrEvent(**e) for e in events], encounter_id
                ),
                cxr=CxrRef(**cxr_raw) if cxr_raw else None,
                cxr_candidates=[CxrRef(**c) for c in candidates_raw],
                rr_docs=record.get("rr_docs") or [],
                labels=record.get("labels") or {},
                split=record.get("split"),
            )
        except (ValidationError, TypeError) as exc:
            raise SchemaError(line_no, str(exc))
        return encounter

    @staticmethod
    def _dedupe_events(events: List[EhrEvent], encounter_id: str) -> List[EhrEvent]:
        """Mantém a última ocorrência de cada (t_offset_min, variável)."""
        latest: Dict[Tuple[int, str], EhrEvent] = {}
        for event in events:
            key = (event.t_offset_min, event.variable)
            if key in latest:
                logger.warning(
                    f"Evento duplicado em {encounter_id}: {event.variable} em T0+{event.t_offset_min}m; "
                    f"mantendo a última ocorrência"
                )
            latest[key] = event
        return list(latest.values())

    @staticmethod
    def encounter_to_record(encounter: PatientEncounter) -> Dict[str, Any]:
        """Serializa um encounter para o formato de intercâmbio."""
        record: Dict[str, Any] = {
            "encounter_id": encounter.encounter_id,
            "ps_text": encounter.ps_text,
            "ehr_events": [[e.t_offset_min, e.variable, e.value] for e in encounter.ehr_events],
            "cxr": encounter.cxr.model_dump() if encounter.cxr else None,
            "rr_docs": [d.model_dump() for d in encounter.rr_docs],
            "labels": {task: int(flag) for task, flag in encounter.labels.items()},
        }
        if encounter.cxr_candidates:
            record["cxr_candidates"] = [c.model_dump() for c in encounter.cxr_candidates]
        if encounter.split is not None:
            record["split"] = encounter.split.value
        return record

    @staticmethod
    def write_cohort(cohort: Cohort, path: Union[str, Path]) -> Path:
        """Escreve a coorte no formato de intercâmbio (escrita atômica)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            json.dumps(CohortService.encounter_to_record(e), ensure_ascii=False, separators=(",", ":"))
            for e in cohort.encounters
        ]
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write("\n".join(lines) + ("\n" if lines else ""))
        os.replace(tmp, path)
        logger.info(f"Coorte escrita em {path} ({len(lines)} encounters)")
        return path

    # ========================================================================
    # JANELA E PAREAMENTO
    # ========================================================================

    @staticmethod
    def apply_window_and_pairing(cohort: Cohort, task: TaskSpec) -> Cohort:
        """
        Restringe cada encounter à janela de observação e escolhe o CXR.

        EHR e laudos após a janela são descartados; entre os candidatos de CXR
        ficam só as incidências AP dentro da janela e, destas, a mais recente.

        Args:
            cohort: Coorte carregada
            task: Tarefa que define a janela

        Returns:
            Nova coorte janelada
        """
        window = task.window_minutes
        paired: List[PatientEncounter] = []
        dropped_scans = 0

        for enc in cohort.encounters:
            pool = list(enc.cxr_candidates) + ([enc.cxr] if enc.cxr else [])
            valid = [c for c in pool if c.view.strip().upper() == "AP" and c.t_offset_min <= window]
            dropped_scans += len(pool) - len(valid)
            chosen: Optional[CxrRef] = None
            for scan in valid:
                if chosen is None or scan.t_offset_min >= chosen.t_offset_min:
                    chosen = scan

            rr_docs = sorted(
                (d for d in enc.rr_docs if d.t_offset_min <= window),
                key=lambda d: d.t_offset_min,
            )
            paired.append(
                enc.model_copy(
                    update={
                        "ehr_events": [e for e in enc.ehr_events if e.t_offset_min <= window],
                        "cxr": chosen,
                        "cxr_candidates": [],
                        "rr_docs": rr_docs,
                    }
                )
            )

        logger.info(
            f"Janela de {task.observation_window_hours}h aplicada a {len(paired)} encounters "
            f"({dropped_scans} exames de CXR descartados)"
        )
        return Cohort(encounters=paired, provenance=cohort.provenance)

    # ========================================================================
    # DIVISÃO
    # ========================================================================

    @staticmethod
    def partition_sizes(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
        """Tamanhos por piso das proporções; o resto vai para treino e depois validação."""
        sizes = [int(math.floor(n * r + 1e-9)) for r in ratios]
        remainder = n - sum(sizes)
        order = [0, 1, 2]
        idx = 0
        while remainder > 0:
            sizes[order[idx % 3]] += 1
            remainder -= 1
            idx += 1
        return sizes[0], sizes[1], sizes[2]

    @staticmethod
    def split_cohort(
        cohort: Cohort,
        ratios: Sequence[float] = DEFAULT_RATIOS,
        seed: int = 42,
    ) -> Tuple[Cohort, Cohort, Cohort]:
        """
        Divide a coorte em treino, validação e teste de forma determinística.

        Args:
            cohort: Coorte a dividir
            ratios: Proporções (treino, validação, teste)
            seed: Semente do embaralhamento

        Returns:
            Tupla (treino, validação, teste)

        Raises:
            EmptyCohort: Coorte sem encounters
        """
        if len(cohort) == 0:
            raise EmptyCohort("Não é possível dividir uma coorte vazia")
        if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"Proporções de divisão devem somar 1: {list(ratios)}")

        ids = sorted(e.encounter_id for e in cohort.encounters)
        rng = np.random.default_rng(seed)
        shuffled = [ids[i] for i in rng.permutation(len(ids))]

        n_train, n_val, _ = CohortService.partition_sizes(len(ids), ratios)
        assignment: Dict[str, Split] = {}
        for pos, enc_id in enumerate(shuffled):
            if pos < n_train:
                assignment[enc_id] = Split.TRAIN
            elif pos < n_train + n_val:
                assignment[enc_id] = Split.VAL
            else:
                assignment[enc_id] = Split.TEST

        parts = []
        for split in (Split.TRAIN, Split.VAL, Split.TEST):
            members = [
                e.model_copy(update={"split": split})
                for e in cohort.encounters
                if assignment[e.encounter_id] == split
            ]
            parts.append(Cohort(encounters=members, provenance=f"{cohort.provenance}#{split.value}(seed={seed})"))

        logger.info(f"Coorte dividida: treino={len(parts[0])} validação={len(parts[1])} teste={len(parts[2])}")
        return parts[0], parts[1], parts[2]

    @staticmethod
    def ensure_splits(cohort: Cohort, ratios: Sequence[float], seed: int) -> Cohort:
        """
        Atribui partições via split_cohort apenas aos encounters sem split.

        Splits declarados no arquivo de intercâmbio são preservados; os
        encounters restantes formam uma sub-coorte dividida com a mesma semente.
        """
        unsplit = [e for e in cohort.encounters if e.split is None]
        if not unsplit:
            return cohort
        kept = len(cohort) - len(unsplit)
        if kept:
            logger.info(f"Mantendo {kept} splits declarados; atribuindo {len(unsplit)} encounters sem split")
        sub_cohort = Cohort(encounters=unsplit, provenance=cohort.provenance)
        train, val, test = CohortService.split_cohort(sub_cohort, ratios, seed)
        assigned = {e.encounter_id: e for part in (train, val, test) for e in part.encounters}
        return Cohort(
            encounters=[assigned.get(e.encounter_id, e) for e in cohort.encounters],
            provenance=cohort.provenance,
        )
