"""
Linha de comando do benchmark: run, ablate, report, synth, consensus e serve-mock.

Arquivo de configuração (`--config`): formato dotenv, uma chave por linha,
com os mesmos nomes das flags em snake_case. Exemplo:

    task=mortality
    protocol=majority_vote
    modalities=ps,ehr,cxr,rr
    serialization=log
    mock_script=runs/synth/mock_script.json
    seed=42
    workers=8
    bootstrap_n=1000

Precedência: flag > arquivo de configuração > Settings (variáveis de ambiente / .env).
"""

import argparse
import importlib
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from dotenv import dotenv_values
from loguru import logger
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import BenchmarkError, ConfigError
from app.core.logging import setup_logging
from app.models.experiment import ExperimentConfig, ProtocolKind, ScoredSample
from app.models.llm import BackendSpec
from app.models.schemas import BUILTIN_TASKS, ModalityKind, TaskSpec
from app.services.cohort_service import CohortService
from app.services.experiment_service import (
    find_runs,
    load_run,
    run_ablation_sweep,
    run_experiment,
)
from app.services.metrics_service import consensus_stats
from app.services.mock_backend import load_mock_script, save_mock_script
from app.services.report_service import emit_report, render_ablation_markdown, render_consensus_table
from app.services.synthetic_service import build_oracle_script, generate_synthetic_cohort

DEFAULT_MODALITY_SETS = "ps;ps,cxr;ps,cxr,rr;ps,ehr,cxr,rr"

# Conversores das chaves aceitas no arquivo de configuração e nas flags.
OPTION_TYPES: Dict[str, Callable[[str], Any]] = {
    "task": str,
    "task_name": str,
    "positive_meaning": str,
    "protocol": str,
    "plugin": str,
    "plugin_module": str,
    "strategy": str,
    "modalities": str,
    "serialization": str,
    "backend_url": str,
    "model_id": str,
    "auth_env": str,
    "mock_script": str,
    "backbone": str,
    "seed": int,
    "workers": int,
    "cache_dir": str,
    "out": str,
    "max_samples": int,
    "bins": int,
    "bootstrap_n": int,
    "vote_aggregation": str,
    "max_rounds": int,
    "chunk_steps": int,
    "temperature": float,
}


# ============================================================================
# CONFIGURAÇÃO
# ============================================================================

def parse_modalities(raw: str) -> List[ModalityKind]:
    """"ps,ehr,cxr" → [PS, EHR, CXR]."""
    try:
        return [ModalityKind.parse(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"Modalidade desconhecida em '{raw}' (use ps, ehr, cxr, rr)")


def parse_modality_sets(raw: str) -> List[List[ModalityKind]]:
    """Conjuntos separados por ';', modalidades por ','."""
    return [parse_modalities(chunk) for chunk in raw.split(";") if chunk.strip()]


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Lê o arquivo dotenv e converte cada valor pelo tipo da chave."""
    if not path:
        return {}
    if not Path(path).exists():
        raise ConfigError(f"Arquivo de configuração não encontrado: {path}")
    values: Dict[str, Any] = {}
    for key, raw in dotenv_values(path).items():
        key = key.strip().lower()
        if key not in OPTION_TYPES:
            raise ConfigError(f"Chave desconhecida no arquivo de configuração: {key}")
        if raw is None or raw == "":
            continue
        try:
            values[key] = OPTION_TYPES[key](raw)
        except ValueError:
            raise ConfigError(f"Valor inválido para {key}: {raw}")
    return values


def merge_options(args: argparse.Namespace) -> Dict[str, Any]:
    """Flags definidas sobrescrevem o arquivo de configuração."""
    merged = load_config_file(getattr(args, "config", None))
    for key in OPTION_TYPES:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def resolve_task(options: Dict[str, Any]) -> TaskSpec:
    """
    Tarefa embutida (mortality, los) ou personalizada.

    Uma tarefa personalizada precisa de `positive_meaning`; os rótulos vêm do
    arquivo de coorte.
    """
    task_id = options.get("task", "mortality")
    defaults = {
        "observation_window_hours": settings.OBSERVATION_WINDOW_HOURS,
        "decision_threshold": settings.DECISION_THRESHOLD,
    }
    if task_id in BUILTIN_TASKS and "positive_meaning" not in options:
        base = BUILTIN_TASKS[task_id]
        update = dict(defaults)
        if "task_name" in options:
            update["name"] = options["task_name"]
        return TaskSpec.model_validate({**base.model_dump(), **update})
    if "positive_meaning" not in options:
        raise ConfigError(
            f"Tarefa '{task_id}' não é embutida: informe --positive-meaning (e opcionalmente --task-name)"
        )
    return TaskSpec(
        task_id=task_id,
        name=options.get("task_name", task_id),
        positive_meaning=options["positive_meaning"],
        **defaults,
    )


def build_backend(options: Dict[str, Any]) -> BackendSpec:
    return BackendSpec(
        endpoint_url=options.get("backend_url", settings.BACKEND_URL),
        auth_token_env=options.get("auth_env", settings.BACKEND_AUTH_ENV),
        model_id=options.get("model_id", settings.MODEL_ID),
        max_concurrent=settings.MAX_CONCURRENT,
        requests_per_minute=settings.REQUESTS_PER_MINUTE,
        max_retries=settings.MAX_RETRIES,
        backoff_base_ms=settings.BACKOFF_BASE_MS,
        timeout_s=settings.REQUEST_TIMEOUT_S,
    )


def build_config(options: Dict[str, Any]) -> ExperimentConfig:
    """
    Monta a ExperimentConfig a partir das opções mescladas.

    Raises:
        ConfigError: Opção inválida ou precondição do protocolo violada
    """
    if "plugin_module" in options:
        try:
            importlib.import_module(options["plugin_module"])
        except ImportError as exc:
            raise ConfigError(f"Não foi possível importar {options['plugin_module']}: {exc}")

    mock_script = load_mock_script(options["mock_script"]) if "mock_script" in options else None
    backend = None if mock_script is not None else build_backend(options)
    cache_dir = options.get("cache_dir", settings.CACHE_DIR)

    fields: Dict[str, Any] = {
        "task": resolve_task(options),
        "protocol": options.get("protocol", ProtocolKind.SINGLE_MULTIMODAL.value),
        "plugin_name": options.get("plugin"),
        "strategy": options.get("strategy", "zero_shot"),
        "modalities": parse_modalities(options.get("modalities", "ps")),
        "serialization_mode": options.get("serialization", "log"),
        "backend": backend,
        "mock_script": mock_script,
        "backbone": options.get("backbone"),
        "seed": options.get("seed", settings.SEED),
        "worker_count": options.get("workers", settings.WORKERS),
        "cache_dir": cache_dir or None,
        "output_dir": options.get("out", settings.OUTPUT_DIR),
        "max_samples": options.get("max_samples"),
        "temperature": options.get("temperature", 0.0),
        "max_tokens": settings.MAX_TOKENS,
        "n_bins": options.get("bins", settings.ECE_BINS),
        "bootstrap_n": options.get("bootstrap_n", settings.BOOTSTRAP_N),
        "bootstrap_level": settings.BOOTSTRAP_LEVEL,
        "vote_aggregation": options.get("vote_aggregation", "probability"),
        "cot_sc_paths": settings.COT_SC_PATHS,
        "cot_sc_temperature": settings.COT_SC_TEMPERATURE,
        "debate_max_rounds": options.get("max_rounds", settings.DEBATE_MAX_ROUNDS),
        "debate_agents": settings.DEBATE_MULTIMODAL_AGENTS,
        "peer_char_limit": settings.DEBATE_PEER_CHAR_LIMIT,
        "traj_chunk_steps": options.get("chunk_steps", settings.TRAJ_CHUNK_STEPS),
    }
    try:
        return ExperimentConfig.model_validate(fields)
    except ValidationError as exc:
        raise ConfigError(f"Configuração inválida: {exc}")


# ============================================================================
# SUBCOMANDOS
# ============================================================================

def cmd_run(args: argparse.Namespace) -> int:
    config = build_config(merge_options(args))
    print(f"📂 Carregando coorte {args.cohort}...")
    cohort = CohortService.load_cohort(args.cohort)
    print(f"🚀 Executando {config.protocol_id} ({config.strategy.value}) em {len(cohort)} encounters...")
    result = run_experiment(config, cohort, resume=not args.no_resume, progress=True)
    report = result.report
    print(f"\n📈 {report.task_id} | {report.protocol} | {report.modalities}")
    print(f"  • AUROC: {report.auroc.formatted()} [{report.auroc.formatted_ci()}]")
    print(f"  • AUPRC: {report.auprc.formatted()} [{report.auprc.formatted_ci()}]")
    print(f"  • ECE:   {report.ece.formatted()} [{report.ece.formatted_ci()}]")
    print(f"  • Amostras: {report.n_samples} (excluídas: {report.n_error_records})")
    print(f"  • Chamadas: {result.manifest.gateway_calls} | cache: {result.manifest.cache_hits}")
    path = emit_report([report], args.format, result.run_dir, stem="report_table")
    print(f"\n✅ Resultados em: {result.run_dir} ({path.name})")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    options = merge_options(args)
    base = build_config(options)
    sets = parse_modality_sets(args.modality_sets)
    print(f"📂 Carregando coorte {args.cohort}...")
    cohort = CohortService.load_cohort(args.cohort)
    print(f"🧪 Ablação sobre {len(sets)} conjuntos de modalidades...")
    results = run_ablation_sweep(base, cohort, sets, resume=not args.no_resume, progress=True)
    reports = [r.report for r in results]

    out_dir = Path(base.output_dir)
    emit_report(reports, args.format, out_dir, stem="ablation")
    table = render_ablation_markdown(reports)
    (out_dir / "ablation_table.md").write_text(table, encoding="utf-8")
    print()
    print(table)
    print(f"✅ {len(results)} execuções; tabelas em: {out_dir}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    run_dirs = find_runs(args.runs)
    if not run_dirs:
        raise ConfigError(f"Nenhuma execução encontrada em: {', '.join(args.runs)}")
    reports = [load_run(d)[1] for d in run_dirs]
    print(f"📊 {len(reports)} execuções encontradas")
    path = emit_report(reports, args.format, args.out or settings.OUTPUT_DIR)
    print(f"✅ Relatório salvo em: {path}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    task_ids = [t.strip() for t in args.tasks.split(",") if t.strip()]
    unknown = [t for t in task_ids if t not in BUILTIN_TASKS]
    if unknown:
        raise ConfigError(f"Tarefas sintéticas desconhecidas: {unknown}")
    seed = settings.SEED if args.seed is None else args.seed
    out_dir = Path(args.out or "data/synthetic")
    out_dir.mkdir(parents=True, exist_ok=True)

    print(f"🧬 Gerando {args.n} encounters sintéticos (seed={seed})...")
    cohort, oracle = generate_synthetic_cohort(args.n, seed=seed, tasks=[BUILTIN_TASKS[t] for t in task_ids])

    print("💾 Salvando dados...")
    cohort_path = CohortService.write_cohort(cohort, out_dir / "cohort.jsonl")
    (out_dir / "oracle.json").write_text(oracle.model_dump_json(indent=2), encoding="utf-8")
    oracle_task = args.oracle_task or task_ids[0]
    if oracle_task not in task_ids:
        raise ConfigError(f"--oracle-task {oracle_task} não está entre as tarefas geradas")
    script_path = save_mock_script(build_oracle_script(oracle_task), out_dir / "mock_script.json")

    print("\n📈 Estatísticas dos Dados Gerados:")
    print(f"  • Encounters: {len(cohort)}")
    for task_id in task_ids:
        positives = sum(1 for e in cohort.encounters if e.labels.get(task_id))
        print(f"  • {task_id}: {positives} positivos ({positives / max(len(cohort), 1) * 100:.1f}%)")
    print(f"\n✅ Coorte: {cohort_path}")
    print(f"✅ Roteiro oráculo ({oracle_task}): {script_path}")
    return 0


def cmd_consensus(args: argparse.Namespace) -> int:
    labels: Dict[str, Dict[str, bool]] = {}
    if args.cohort:
        labels = {e.encounter_id: e.labels for e in CohortService.load_cohort(args.cohort).encounters}

    out_dir = Path(args.out or settings.OUTPUT_DIR)
    out_dir.mkdir(parents=True, exist_ok=True)
    sections = []
    payload = {}
    for run_dir in find_runs(args.runs):
        manifest, report, records = load_run(run_dir)
        debated = [r for r in records if r.debate is not None]
        if not debated:
            logger.info(f"{run_dir.name}: sem traces de debate")
            continue
        samples = [
            ScoredSample(probability=r.debate.final_probability, label=labels[r.encounter_id][r.task_id])
            for r in debated
            if r.task_id in labels.get(r.encounter_id, {})
        ]
        stats = consensus_stats([r.debate for r in debated], samples or None)
        label = f"{report.protocol} {report.modalities} ({manifest.run_id})"
        sections.append(render_consensus_table(stats, label))
        payload[manifest.run_id] = stats.model_dump()

    if not sections:
        raise ConfigError("Nenhuma execução com traces de debate encontrada")
    text = "\n".join(sections)
    (out_dir / "consensus.md").write_text(text, encoding="utf-8")
    (out_dir / "consensus.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    print(text)
    print(f"✅ Estatísticas de consenso em: {out_dir}")
    return 0


def cmd_serve_mock(args: argparse.Namespace) -> int:
    import uvicorn

    from app.main import create_app

    script_path = args.mock_script or settings.MOCK_SCRIPT_PATH
    script = load_mock_script(script_path) if script_path else None
    print(f"🚀 Servindo backend mock em http://{args.host}:{args.port}/v1/chat/completions")
    uvicorn.run(create_app(script), host=args.host, port=args.port)
    return 0


# ============================================================================
# PARSER
# ============================================================================

def _add_experiment_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Arquivo de configuração (formato dotenv)")
    parser.add_argument("--cohort", required=True, help="Coorte em JSONL")
    parser.add_argument("--task", help="mortality, los ou id de tarefa personalizada")
    parser.add_argument("--task-name", help="Nome legível da tarefa")
    parser.add_argument("--positive-meaning", help="Significado do rótulo positivo (tarefas personalizadas)")
    parser.add_argument("--protocol", choices=[p.value for p in ProtocolKind])
    parser.add_argument("--plugin", help="Nome do protocolo registrado (com --protocol plugin)")
    parser.add_argument("--plugin-module", help="Módulo importado antes da execução para registrar plugins")
    parser.add_argument("--strategy", choices=["zero_shot", "few_shot", "cot", "cot_sc", "self_refine"])
    parser.add_argument("--modalities", help="Ex.: ps,ehr,cxr,rr")
    parser.add_argument("--serialization", choices=["log", "summary", "delta"])
    parser.add_argument("--backend-url", help="Endpoint chat-completions")
    parser.add_argument("--model-id")
    parser.add_argument("--auth-env", help="Variável de ambiente com o token do backend")
    parser.add_argument("--mock-script", help="Roteiro do backend mock (JSON); dispensa backend HTTP")
    parser.add_argument("--backbone", help="Rótulo do backbone no relatório")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--cache-dir", help="Cache de respostas (vazio desativa)")
    parser.add_argument("--out", help="Diretório de saída")
    parser.add_argument("--max-samples", type=int)
    parser.add_argument("--bins", type=int, help="Faixas do ECE")
    parser.add_argument("--bootstrap-n", type=int)
    parser.add_argument("--vote-aggregation", choices=["probability", "hard_label"])
    parser.add_argument("--max-rounds", type=int, help="Rodadas máximas de debate")
    parser.add_argument("--chunk-steps", type=int, help="Passos de EHR por trabalhador no Traj-CoA")
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--no-resume", action="store_true", help="Ignora registros já persistidos")
    parser.add_argument("--format", default="markdown", choices=["csv", "markdown", "structured"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icu-bench", description="Benchmark de agentes LLM sobre dados multimodais de UTI")
    parser.add_argument("--log-level", default=None, help="Nível do loguru (padrão: LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Executa um experimento")
    _add_experiment_options(run)
    run.set_defaults(handler=cmd_run)

    ablate = sub.add_parser("ablate", help="Ablação de modalidades (agente único ZS e votação)")
    _add_experiment_options(ablate)
    ablate.add_argument("--modality-sets", default=DEFAULT_MODALITY_SETS, help="Conjuntos separados por ';'")
    ablate.set_defaults(handler=cmd_ablate)

    report = sub.add_parser("report", help="Consolida relatórios de execuções")
    report.add_argument("--runs", nargs="+", required=True, help="Diretórios de execução ou pais deles")
    report.add_argument("--format", default="markdown", choices=["csv", "markdown", "structured"])
    report.add_argument("--out")
    report.set_defaults(handler=cmd_report)

    synth = sub.add_parser("synth", help="Gera coorte sintética, oráculo e roteiro mock")
    synth.add_argument("--n", type=int, default=500)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--tasks", default="mortality,los")
    synth.add_argument("--oracle-task", help="Tarefa respondida pelo roteiro oráculo")
    synth.add_argument("--out")
    synth.set_defaults(handler=cmd_synth)

    consensus = sub.add_parser("consensus", help="Distribuição da rodada de consenso dos debates")
    consensus.add_argument("--runs", nargs="+", required=True)
    consensus.add_argument("--cohort", help="Coorte para o AUROC das probabilidades finais")
    consensus.add_argument("--out")
    consensus.set_defaults(handler=cmd_consensus)

    serve = sub.add_parser("serve-mock", help="Servidor HTTP chat-completions com roteiro mock")
    serve.add_argument("--mock-script")
    serve.add_argument("--host", default=settings.API_HOST)
    serve.add_argument("--port", type=int, default=settings.API_PORT)
    serve.set_defaults(handler=cmd_serve_mock)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Ponto de entrada; retorna o código de saída."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or settings.LOG_LEVEL)
    try:
        return args.handler(args)
    except BenchmarkError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
