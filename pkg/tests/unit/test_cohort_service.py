"""
Testes unitários para o serviço de coortes.
"""

import json

import pytest

from app.core.exceptions import ConfigError, DuplicateEncounter, EmptyCohort, MissingPS, SchemaError
from app.models.schemas import BUILTIN_TASKS, Cohort, CxrRef, EhrEvent, PatientEncounter, RrDoc, Split
from app.services.cohort_service import CohortService
from tests.conftest import make_encounter


def write_lines(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return path


RECORD = {
    "encounter_id": "E1",
    "ps_text": "Elderly patient admitted with pneumonia.",
    "ehr_events": [[0, "Heart Rate", 90], [30, "glasgow coma scale total", "15"]],
    "cxr": {"image_locator": "img/e1.jpg", "view": "AP", "t_offset_min": 100},
    "rr_docs": [{"t_offset_min": 10, "modality_name": "CT", "body": "Normal."}],
    "labels": {"mortality": 1},
}


class TestLoadCohort:
    """Testes para leitura do formato de intercâmbio."""

    def test_load_valid_file(self, tmp_path):
        """Testa carga de registro válido."""
        path = write_lines(tmp_path / "cohort.jsonl", [RECORD])
        cohort = CohortService.load_cohort(path)

        assert len(cohort) == 1
        enc = cohort.encounters[0]
        assert enc.ehr_events[0].variable == "heart_rate"
        assert enc.labels == {"mortality": True}
        assert enc.cxr.view == "AP"
        assert cohort.provenance == str(path)

    def test_blank_lines_ignored(self, tmp_path):
        """Testa que linhas em branco são ignoradas."""
        path = tmp_path / "cohort.jsonl"
        path.write_text(json.dumps(RECORD) + "\n\n\n", encoding="utf-8")
        assert len(CohortService.load_cohort(path)) == 1

    def test_duplicate_encounter_fails(self, tmp_path):
        """Testa que encounter_id repetido falha."""
        path = write_lines(tmp_path / "cohort.jsonl", [RECORD, RECORD])
        with pytest.raises(DuplicateEncounter) as exc:
            CohortService.load_cohort(path)
        assert exc.value.encounter_id == "E1"
        assert exc.value.line == 2

    def test_missing_ps_fails(self, tmp_path):
        """Testa que registro sem PS falha."""
        record = dict(RECORD, ps_text="")
        path = write_lines(tmp_path / "cohort.jsonl", [record])
        with pytest.raises(MissingPS):
            CohortService.load_cohort(path)

    def test_invalid_json_reports_line(self, tmp_path):
        """Testa número da linha em JSON inválido."""
        path = tmp_path / "cohort.jsonl"
        path.write_text(json.dumps(RECORD) + "\n{not json\n", encoding="utf-8")
        with pytest.raises(SchemaError) as exc:
            CohortService.load_cohort(path)
        assert exc.value.line == 2

    def test_unknown_variable_is_schema_error(self, tmp_path):
        """Testa que variável fora da lista é erro de schema."""
        record = dict(RECORD, ehr_events=[[0, "lactate", 2.1]])
        path = write_lines(tmp_path / "cohort.jsonl", [record])
        with pytest.raises(SchemaError):
            CohortService.load_cohort(path)

    def test_duplicate_events_keep_last(self, tmp_path):
        """Testa que eventos duplicados mantêm a última ocorrência."""
        record = dict(RECORD, ehr_events=[[0, "heart_rate", 90], [0, "heart_rate", 95]])
        path = write_lines(tmp_path / "cohort.jsonl", [record])
        enc = CohortService.load_cohort(path).encounters[0]
        assert len(enc.ehr_events) == 1
        assert enc.ehr_events[0].value == 95.0

    def test_missing_file_fails(self, tmp_path):
        """Testa arquivo inexistente."""
        with pytest.raises(ConfigError):
            CohortService.load_cohort(tmp_path / "nope.jsonl")

    def test_write_then_load_preserves_encounters(self, tmp_path):
        """Testa que a coorte escrita é lida de volta igual."""
        cohort = Cohort(encounters=[make_encounter("A"), make_encounter("B", labels={"mortality": False})], provenance="mem")
        path = CohortService.write_cohort(cohort, tmp_path / "out.jsonl")
        loaded = CohortService.load_cohort(path)
        assert loaded.encounters == cohort.encounters


class TestWindowAndPairing:
    """Testes para janela de observação e pareamento de CXR."""

    def encounter(self):
        return PatientEncounter(
            encounter_id="E1",
            ps_text="x",
            ehr_events=[
                EhrEvent(t_offset_min=10, variable="glucose", value=100),
                EhrEvent(t_offset_min=2880, variable="glucose", value=110),
                EhrEvent(t_offset_min=2881, variable="glucose", value=120),
            ],
            cxr_candidates=[
                CxrRef(image_locator="a.jpg", view="AP", t_offset_min=100),
                CxrRef(image_locator="b.jpg", view="PA", t_offset_min=200),
                CxrRef(image_locator="c.jpg", view="AP", t_offset_min=300),
                CxrRef(image_locator="d.jpg", view="AP", t_offset_min=3000),
            ],
            rr_docs=[
                RrDoc(t_offset_min=500, modality_name="CT", body="late"),
                RrDoc(t_offset_min=5, modality_name="CXR", body="early"),
                RrDoc(t_offset_min=4000, modality_name="US", body="outside"),
            ],
        )

    def test_window_and_latest_ap(self):
        """Testa filtro pela janela e escolha do AP mais recente."""
        cohort = Cohort(encounters=[self.encounter()], provenance="mem")
        enc = CohortService.apply_window_and_pairing(cohort, BUILTIN_TASKS["mortality"]).encounters[0]

        assert [e.t_offset_min for e in enc.ehr_events] == [10, 2880]
        assert enc.cxr.image_locator == "c.jpg"
        assert enc.cxr_candidates == []
        assert [d.body for d in enc.rr_docs] == ["early", "late"]

    def test_no_ap_scan_drops_cxr(self):
        """Testa que sem AP na janela não há CXR."""
        enc = PatientEncounter(
            encounter_id="E1",
            ps_text="x",
            cxr_candidates=[CxrRef(image_locator="b.jpg", view="PA", t_offset_min=200)],
        )
        out = CohortService.apply_window_and_pairing(Cohort(encounters=[enc], provenance="mem"), BUILTIN_TASKS["los"])
        assert out.encounters[0].cxr is None


class TestSplit:
    """Testes para divisão treino/validação/teste."""

    def cohort(self, n):
        return Cohort(encounters=[make_encounter(f"E{i:03d}") for i in range(n)], provenance="mem")

    def test_split_100_is_70_10_20(self):
        """Testa tamanhos da divisão 70/10/20."""
        train, val, test = CohortService.split_cohort(self.cohort(100), seed=42)
        assert (len(train), len(val), len(test)) == (70, 10, 20)

    def test_split_is_deterministic_and_disjoint(self):
        """Testa determinismo e disjunção."""
        first = CohortService.split_cohort(self.cohort(37), seed=3)
        second = CohortService.split_cohort(self.cohort(37), seed=3)
        ids = [[e.encounter_id for e in part.encounters] for part in first]
        assert ids == [[e.encounter_id for e in part.encounters] for part in second]
        flat = [i for part in ids for i in part]
        assert len(flat) == len(set(flat)) == 37
        assert all(e.split == Split.TEST for e in first[2].encounters)

    def test_remainder_goes_to_train_first(self):
        """Testa distribuição do resto."""
        assert CohortService.partition_sizes(7, (0.7, 0.1, 0.2)) == (5, 1, 1)
        assert CohortService.partition_sizes(11, (0.7, 0.1, 0.2)) == (8, 1, 2)

    def test_empty_cohort_fails(self):
        """Testa divisão de coorte vazia."""
        with pytest.raises(EmptyCohort):
            CohortService.split_cohort(Cohort(encounters=[], provenance="mem"))

    def test_ratios_must_sum_to_one(self):
        """Testa proporções inválidas."""
        with pytest.raises(ConfigError):
            CohortService.split_cohort(self.cohort(10), ratios=(0.5, 0.1, 0.1))

    def test_ensure_splits_keeps_existing(self):
        """Testa que splits já atribuídos são mantidos."""
        cohort = Cohort(encounters=[make_encounter("A", split=Split.TEST)], provenance="mem")
        assert CohortService.ensure_splits(cohort, (0.7, 0.1, 0.2), 42) is cohort

    def test_ensure_splits_assigns_only_missing(self):
        """Testa coorte mista: splits declarados ficam, os ausentes são atribuídos."""
        encounters = [make_encounter(f"E{i:03d}", split=Split.TRAIN) for i in range(5)]
        encounters += [make_encounter(f"E{i:03d}") for i in range(5, 20)]
        cohort = Cohort(encounters=encounters, provenance="mem")

        out = CohortService.ensure_splits(cohort, (0.7, 0.1, 0.2), 42)
        by_id = {e.encounter_id: e.split for e in out.encounters}

        assert [by_id[f"E{i:03d}"] for i in range(5)] == [Split.TRAIN] * 5
        assert all(by_id[f"E{i:03d}"] is not None for i in range(5, 20))
        assigned = [by_id[f"E{i:03d}"] for i in range(5, 20)]
        sizes = CohortService.partition_sizes(15, (0.7, 0.1, 0.2))
        assert (assigned.count(Split.TRAIN), assigned.count(Split.VAL), assigned.count(Split.TEST)) == sizes
        assert [e.encounter_id for e in out.encounters] == [e.encounter_id for e in cohort.encounters]
