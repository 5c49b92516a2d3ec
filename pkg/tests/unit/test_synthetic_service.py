"""
Testes unitários para o gerador de coortes sintéticas.
"""

import re

from app.models.schemas import BUILTIN_TASKS
from app.services.agent_service import parse_probability
from app.services.mock_backend import MockChatTransport
from app.services.synthetic_service import (
    PROFILE_PATTERN,
    SyntheticCohortGenerator,
    build_oracle_script,
    feature_risk,
    generate_synthetic_cohort,
)


class TestSyntheticCohort:
    """Testes para geração de coortes."""

    def test_same_seed_same_cohort(self):
        """Testa reprodutibilidade pela semente."""
        a, oracle_a = generate_synthetic_cohort(30, seed=11)
        b, oracle_b = generate_synthetic_cohort(30, seed=11)
        assert a == b
        assert oracle_a == oracle_b

    def test_different_seed_differs(self):
        """Testa que sementes diferentes geram coortes diferentes."""
        a, _ = generate_synthetic_cohort(30, seed=1)
        b, _ = generate_synthetic_cohort(30, seed=2)
        assert a != b

    def test_ids_labels_and_oracle(self):
        """Testa ids, rótulos e cobertura do oráculo."""
        cohort, oracle = generate_synthetic_cohort(25, seed=5)

        assert [e.encounter_id for e in cohort.encounters][:2] == ["SYN-00000", "SYN-00001"]
        assert oracle.covers(cohort)
        for enc in cohort.encounters:
            assert "Admission profile: age band " in enc.ps_text
            assert enc.encounter_id not in enc.ps_text
            assert set(enc.labels) == {"mortality", "los"}
            assert 0.0 <= oracle.risk(enc.encounter_id, "mortality") <= 1.0
        assert cohort.provenance == "synthetic(n=25,seed=5)"

    def test_modality_rates(self):
        """Testa que taxas zero removem as modalidades opcionais."""
        cohort, _ = SyntheticCohortGenerator(seed=3, ehr_rate=0.0, cxr_rate=0.0, rr_rate=0.0).generate(10)
        assert all(not e.ehr_events and not e.cxr_candidates and not e.rr_docs for e in cohort.encounters)

    def test_single_task(self):
        """Testa geração com uma só tarefa."""
        cohort, oracle = generate_synthetic_cohort(5, seed=1, tasks=[BUILTIN_TASKS["los"]])
        assert all(set(e.labels) == {"los"} for e in cohort.encounters)
        assert all(set(r) == {"los"} for r in oracle.true_risk.values())


class TestOracleScript:
    """Testes para o roteiro oráculo."""

    def test_oracle_answers_true_risk_exactly(self):
        """Testa que a probabilidade parseada é o risco verdadeiro."""
        cohort, oracle = generate_synthetic_cohort(10, seed=9)
        transport = MockChatTransport(build_oracle_script("mortality"))

        for enc in cohort.encounters:
            probability, _ = parse_probability(transport.respond(f"Modality PS: {enc.ps_text}"))
            assert probability == oracle.risk(enc.encounter_id, "mortality")

    def test_risk_recovered_from_ps_alone(self):
        """Testa recuperação do risco só pelo PS, sem EHR, CXR nem RR."""
        cohort, oracle = SyntheticCohortGenerator(seed=4, ehr_rate=0.0, cxr_rate=0.0, rr_rate=0.0).generate(40)
        transport = MockChatTransport(build_oracle_script("mortality"))

        for enc in cohort.encounters:
            assert not enc.ehr_events and not enc.rr_docs
            probability, _ = parse_probability(transport.respond(f"Modality PS: {enc.ps_text}"))
            assert probability == oracle.risk(enc.encounter_id, "mortality")

    def test_profile_carries_every_feature(self):
        """Testa que o perfil renderizado reproduz o risco por feature_risk."""
        cohort, oracle = generate_synthetic_cohort(30, seed=6)
        for enc in cohort.encounters:
            match = re.search(PROFILE_PATTERN, enc.ps_text)
            assert match is not None
            band, abnormal, severe, comorbid = re.fullmatch(
                r"age band (\d); abnormal vitals (\d); severe imaging (yes|no); comorbidities (\d)", match.group(1)
            ).groups()
            risk = feature_risk("mortality", int(band), int(abnormal), severe == "yes", int(comorbid))
            assert risk == oracle.risk(enc.encounter_id, "mortality")

    def test_unknown_profile_gets_default(self):
        """Testa resposta padrão para perfil fora da tabela ou ausente."""
        transport = MockChatTransport(build_oracle_script("mortality"))
        unknown = "Admission profile: age band 9; abnormal vitals 0; severe imaging no; comorbidities 0."
        assert transport.respond(unknown) == "PROBABILITY: 0.5"
        assert transport.respond("no profile") == "PROBABILITY: 0.5"
