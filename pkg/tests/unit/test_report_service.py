"""
Testes unitários para a emissão de relatórios.
"""

import json

import pandas as pd
import pytest

from app.core.exceptions import ConfigError
from app.models.experiment import ConsensusStats, MetricReport, MetricValue
from app.services.report_service import (
    REPORT_COLUMNS,
    ReportTable,
    emit_report,
    parse_markdown,
    render_ablation_markdown,
    render_consensus_table,
)


def make_report(modalities: str, protocol: str = "single_unimodal", ece: float = 0.1, auroc: float = 0.7) -> MetricReport:
    return MetricReport(
        task_id="mortality",
        backbone="mock",
        protocol=protocol,
        strategy="zero_shot",
        modalities=modalities,
        serialization="log",
        auroc=MetricValue(point=auroc, ci_low=auroc - 0.05, ci_high=auroc + 0.05),
        auprc=MetricValue(point=0.41234, ci_low=0.35, ci_high=0.47),
        ece=MetricValue(point=ece, ci_low=ece - 0.02, ci_high=ece + 0.02),
        n_samples=200,
        n_error_records=3,
    )


@pytest.fixture
def reports():
    return [
        make_report("PS"),
        make_report("PS+EHR+CXR+RR", protocol="majority_vote", ece=0.16, auroc=0.81234),
    ]


class TestEmitReport:
    """Testes para os três formatos de saída."""

    def test_csv(self, reports, tmp_path):
        """Testa cabeçalho fixo e uma linha por relatório."""
        path = emit_report(reports, "csv", tmp_path)
        df = pd.read_csv(path)
        assert list(df.columns) == REPORT_COLUMNS
        assert len(df) == 2
        assert path.name == "report.csv"

    def test_markdown_parses_back(self, reports, tmp_path):
        """Testa leitura da tabela markdown com 3 casas decimais."""
        path = emit_report(reports, "markdown", tmp_path, stem="results")
        rows = parse_markdown(path.read_text(encoding="utf-8"))
        assert len(rows) == 2
        assert rows[1]["AUROC"] == "0.812"
        assert rows[1]["AUROC CI"] == "0.762 - 0.862"
        assert rows[0]["AUPRC"] == "0.412"
        assert rows[0]["excluded"] == "3"
        assert "CI: percentile bootstrap" in path.read_text(encoding="utf-8")

    def test_structured_schema(self, reports, tmp_path):
        """Testa que a saída estruturada valida contra o schema."""
        path = emit_report(reports, "structured", tmp_path)
        table = ReportTable.model_validate(json.loads(path.read_text(encoding="utf-8")))
        assert table.columns == REPORT_COLUMNS
        assert [r.modalities for r in table.rows] == ["PS", "PS+EHR+CXR+RR"]
        assert table.rows[0].ece_shift == 0.0
        assert table.rows[1].ece_shift == pytest.approx(0.06)

    def test_undefined_metric_rendered_na(self, tmp_path):
        """Testa métrica indefinida como n/a."""
        report = make_report("PS").model_copy(update={"auroc": MetricValue()})
        rows = parse_markdown(emit_report([report], "markdown", tmp_path).read_text(encoding="utf-8"))
        assert rows[0]["AUROC"] == "n/a"
        assert rows[0]["AUROC CI"] == "n/a"

    def test_empty_reports(self, tmp_path):
        """Testa emissão sem relatórios."""
        with pytest.raises(ConfigError):
            emit_report([], "csv", tmp_path)

    def test_unknown_format(self, reports, tmp_path):
        """Testa formato desconhecido."""
        with pytest.raises(ConfigError):
            emit_report(reports, "xlsx", tmp_path)


class TestAuxiliaryTables:
    """Testes para as tabelas de ablação e de consenso."""

    def test_ablation_delta_ece(self, reports):
        """Testa o desvio de ECE relativo à linha PS."""
        text = render_ablation_markdown(reports)
        lines = text.strip().splitlines()
        assert lines[2].startswith("| Single (ZS) | PS |")
        assert lines[2].endswith("| +0.000 |")
        assert lines[3].startswith("| Multi (MV) | PS+EHR+CXR+RR |")
        assert lines[3].endswith("| +0.060 |")

    def test_ablation_without_baseline(self):
        """Testa ΔECE ausente sem linha PS."""
        text = render_ablation_markdown([make_report("PS+CXR", protocol="majority_vote")])
        assert text.strip().splitlines()[-1].endswith("| n/a |")

    def test_consensus_table(self):
        """Testa a tabela de distribuição de consenso."""
        stats = ConsensusStats(
            max_rounds=3,
            total=4,
            counts={"1": 3, "2": 0, "3": 0, "MAX": 1},
            percentages={"1": 75.0, "2": 0.0, "3": 0.0, "MAX": 25.0},
            auroc=0.8,
        )
        text = render_consensus_table(stats, label="gpt")
        assert "| run | round 1 | round 2 | round 3 | MAX | AUROC |" in text
        assert "| gpt | 3 (75.0%) | 0 (0.0%) | 0 (0.0%) | 1 (25.0%) | 0.800 |" in text
