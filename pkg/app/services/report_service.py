"""
Emissão de relatórios: CSV, markdown e JSON estruturado com ordem de colunas fixa.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd
from loguru import logger
from pydantic import BaseModel

from app.core.exceptions import ConfigError
from app.models.experiment import ConsensusStats, MetricReport

REPORT_COLUMNS = [
    "backbone",
    "protocol",
    "strategy",
    "modalities",
    "AUROC",
    "AUROC CI",
    "AUPRC",
    "AUPRC CI",
    "ECE",
    "n",
    "excluded",
]

ARCHITECTURE_LABELS = {
    "single_unimodal": "Single (ZS)",
    "single_multimodal": "Single (ZS)",
    "majority_vote": "Multi (MV)",
}

FORMATS = ("csv", "markdown", "structured")
EXTENSIONS = {"csv": "csv", "markdown": "md", "structured": "json"}


class ReportRow(BaseModel):
    """Linha do relatório estruturado."""
    backbone: str
    protocol: str
    strategy: str
    modalities: str
    task_id: str
    auroc: Optional[float] = None
    auroc_ci_low: Optional[float] = None
    auroc_ci_high: Optional[float] = None
    auprc: Optional[float] = None
    auprc_ci_low: Optional[float] = None
    auprc_ci_high: Optional[float] = None
    ece: Optional[float] = None
    ece_ci_low: Optional[float] = None
    ece_ci_high: Optional[float] = None
    ece_shift: Optional[float] = None
    n: int
    excluded: int


class ReportTable(BaseModel):
    """Schema documentado da saída `structured`."""
    schema_version: str = "1.0"
    columns: List[str] = REPORT_COLUMNS
    ci_method: str
    rows: List[ReportRow]


def _ece_shifts(reports: Sequence[MetricReport]) -> List[Optional[float]]:
    """Variação do ECE em relação à linha {PS} de agente único da mesma tarefa."""
    baseline: Dict[str, float] = {}
    for r in reports:
        if r.modalities == "PS" and r.protocol.startswith("single") and r.ece.point is not None:
            baseline.setdefault(r.task_id, r.ece.point)
    shifts = []
    for r in reports:
        base = baseline.get(r.task_id)
        shifts.append(None if base is None or r.ece.point is None else r.ece.point - base)
    return shifts


def report_rows(reports: Sequence[MetricReport]) -> List[ReportRow]:
    rows = []
    for report, shift in zip(reports, _ece_shifts(reports)):
        rows.append(
            ReportRow(
                backbone=report.backbone,
                protocol=report.protocol,
                strategy=report.strategy,
                modalities=report.modalities,
                task_id=report.task_id,
                auroc=report.auroc.point,
                auroc_ci_low=report.auroc.ci_low,
                auroc_ci_high=report.auroc.ci_high,
                auprc=report.auprc.point,
                auprc_ci_low=report.auprc.ci_low,
                auprc_ci_high=report.auprc.ci_high,
                ece=report.ece.point,
                ece_ci_low=report.ece.ci_low,
                ece_ci_high=report.ece.ci_high,
                ece_shift=shift,
                n=report.n_samples,
                excluded=report.n_error_records,
            )
        )
    return rows


def to_dataframe(reports: Sequence[MetricReport]) -> pd.DataFrame:
    """Tabela com as colunas em REPORT_COLUMNS e valores com 3 casas."""
    records = [
        {
            "backbone": r.backbone,
            "protocol": r.protocol,
            "strategy": r.strategy,
            "modalities": r.modalities,
            "AUROC": r.auroc.formatted(),
            "AUROC CI": r.auroc.formatted_ci(),
            "AUPRC": r.auprc.formatted(),
            "AUPRC CI": r.auprc.formatted_ci(),
            "ECE": r.ece.formatted(),
            "n": r.n_samples,
            "excluded": r.n_error_records,
        }
        for r in reports
    ]
    return pd.DataFrame(records, columns=REPORT_COLUMNS)


def render_markdown(reports: Sequence[MetricReport], title: Optional[str] = None) -> str:
    """Tabela markdown no layout das tabelas de resultados (valor e IC lado a lado)."""
    df = to_dataframe(reports)
    lines = []
    if title:
        lines += [f"### {title}", ""]
    lines.append("| " + " | ".join(REPORT_COLUMNS) + " |")
    lines.append("|" + "|".join("---" for _ in REPORT_COLUMNS) + "|")
    for row in df.itertuples(index=False):
        lines.append("| " + " | ".join(str(v) for v in row) + " |")
    methods = sorted({r.ci_method for r in reports})
    lines += ["", f"CI: {'; '.join(methods)}"]
    return "\n".join(lines) + "\n"


def render_ablation_markdown(reports: Sequence[MetricReport]) -> str:
    """Tabela de ablação: arquitetura × conjunto de modalidades, com o desvio de ECE."""
    lines = [
        "| arch | modalities | AUROC | AUROC CI | AUPRC | AUPRC CI | ECE | ΔECE vs PS |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for report, shift in zip(reports, _ece_shifts(reports)):
        arch = ARCHITECTURE_LABELS.get(report.protocol, report.protocol)
        delta = "n/a" if shift is None else f"{shift:+.3f}"
        lines.append(
            f"| {arch} | {report.modalities} | {report.auroc.formatted()} | {report.auroc.formatted_ci()} "
            f"| {report.auprc.formatted()} | {report.auprc.formatted_ci()} | {report.ece.formatted()} | {delta} |"
        )
    return "\n".join(lines) + "\n"


def emit_report(
    reports: Sequence[MetricReport],
    fmt: str,
    output_dir: Union[str, Path],
    stem: str = "report",
) -> Path:
    """
    Grava o relatório no formato pedido.

    Args:
        reports: Relatórios de métricas (não vazio)
        fmt: csv, markdown ou structured
        output_dir: Diretório de saída
        stem: Nome base do arquivo

    Returns:
        Caminho do arquivo gravado
    """
    if not reports:
        raise ConfigError("Nenhum relatório para emitir")
    if fmt not in FORMATS:
        raise ConfigError(f"Formato desconhecido: {fmt} (use {', '.join(FORMATS)})")

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / f"{stem}.{EXTENSIONS[fmt]}"

    if fmt == "csv":
        to_dataframe(reports).to_csv(path, index=False)
    elif fmt == "markdown":
        path.write_text(render_markdown(reports), encoding="utf-8")
    else:
        table = ReportTable(
            ci_method="; ".join(sorted({r.ci_method for r in reports})),
            rows=report_rows(reports),
        )
        path.write_text(table.model_dump_json(indent=2), encoding="utf-8")

    logger.info(f"Relatório {fmt} com {len(reports)} linhas gravado em {path}")
    return path


def parse_markdown(text: str) -> List[Dict[str, str]]:
    """Lê de volta a tabela emitida por `render_markdown`."""
    rows = [ln for ln in text.splitlines() if ln.startswith("|")]
    if len(rows) < 2:
        return []
    header = [c.strip() for c in rows[0].strip("|").split("|")]
    return [dict(zip(header, (c.strip() for c in row.strip("|").split("|")))) for row in rows[2:]]


def render_consensus_table(stats: ConsensusStats, label: str = "") -> str:
    """Distribuição da rodada de consenso em markdown."""
    keys = list(stats.counts)
    lines = [
        "| run | " + " | ".join(f"round {k}" if k != "MAX" else "MAX" for k in keys) + " | AUROC |",
        "|" + "|".join("---" for _ in range(len(keys) + 2)) + "|",
    ]
    cells = [f"{stats.counts[k]} ({stats.percentages[k]:.1f}%)" for k in keys]
    auroc_cell = "n/a" if stats.auroc is None else f"{stats.auroc:.3f}"
    lines.append(f"| {label or '-'} | " + " | ".join(cells) + f" | {auroc_cell} |")
    return "\n".join(lines) + "\n"
