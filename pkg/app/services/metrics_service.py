"""
Métricas de discriminação e calibração com intervalos por bootstrap.
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from sklearn.metrics import average_precision_score, roc_auc_score

from app.core.exceptions import DegenerateClasses, EmptyInput, TooManyDegenerateResamples
from app.models.experiment import ConsensusStats, MetricReport, MetricValue, ScoredSample
from app.models.schemas import DebateTrace

MetricFn = Callable[[np.ndarray, np.ndarray], float]


def _arrays(samples: Sequence[ScoredSample]) -> Tuple[np.ndarray, np.ndarray]:
    probs = np.array([s.probability for s in samples], dtype=np.float64)
    labels = np.array([1 if s.label else 0 for s in samples], dtype=np.int64)
    return probs, labels


# ============================================================================
# MÉTRICAS PONTUAIS
# ============================================================================

def _auroc(probs: np.ndarray, labels: np.ndarray) -> float:
    if labels.size == 0:
        raise EmptyInput("AUROC sem amostras")
    if labels.min() == labels.max():
        raise DegenerateClasses("AUROC exige amostras das duas classes")
    return float(roc_auc_score(labels, probs))


def _auprc(probs: np.ndarray, labels: np.ndarray) -> float:
    if labels.size == 0:
        raise EmptyInput("AUPRC sem amostras")
    if labels.sum() == 0:
        raise DegenerateClasses("AUPRC exige ao menos uma amostra positiva")
    return float(average_precision_score(labels, probs))


def _ece(probs: np.ndarray, labels: np.ndarray, n_bins: int = 10) -> float:
    if labels.size == 0:
        raise EmptyInput("ECE sem amostras")
    bins = np.minimum(np.floor(probs * n_bins).astype(np.int64), n_bins - 1)
    total = labels.size
    ece = 0.0
    for b in range(n_bins):
        mask = bins == b
        count = int(mask.sum())
        if count == 0:
            continue
        gap = abs(float(probs[mask].mean()) - float(labels[mask].mean()))
        ece += (count / total) * gap
    return ece


def auroc(samples: Sequence[ScoredSample]) -> float:
    """
    Área sob a curva ROC (empates contam meio).

    Raises:
        DegenerateClasses: Só uma classe presente
    """
    return _auroc(*_arrays(samples))


def auprc(samples: Sequence[ScoredSample]) -> float:
    """Área sob a curva precisão-revocação pela soma em degraus (average precision)."""
    return _auprc(*_arrays(samples))


def ece(samples: Sequence[ScoredSample], n_bins: int = 10) -> float:
    """
    Erro esperado de calibração com `n_bins` faixas de largura igual.

    A amostra com p = 1.0 cai na última faixa; faixas vazias não contribuem.

    Raises:
        EmptyInput: Nenhuma amostra
    """
    probs, labels = _arrays(samples)
    return _ece(probs, labels, n_bins)


def metric_function(name: str, n_bins: int = 10) -> MetricFn:
    if name == "auroc":
        return _auroc
    if name == "auprc":
        return _auprc
    if name == "ece":
        return lambda p, y: _ece(p, y, n_bins)
    raise ValueError(f"Métrica desconhecida: {name}")


# ============================================================================
# BOOTSTRAP
# ============================================================================

def bootstrap_ci(
    metric: Union[str, MetricFn],
    samples: Sequence[ScoredSample],
    n_resamples: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    n_bins: int = 10,
    max_redraws: int = 20,
) -> Tuple[float, float]:
    """
    Intervalo percentil por bootstrap.

    Cada reamostra tem gerador próprio derivado de `seed`, então o resultado
    não depende da ordem de execução. Reamostras degeneradas (uma só classe)
    são sorteadas de novo até `max_redraws` vezes e depois descartadas. O
    intervalo sempre contém a estimativa pontual: quando o percentil a exclui
    (amostras pequenas), o limite é estendido até ela e isso é registrado no log.

    Args:
        metric: "auroc", "auprc", "ece" ou função (probs, labels) → float
        samples: Amostras pontuadas
        n_resamples: Número de reamostras
        seed: Semente raiz
        level: Nível de confiança
        n_bins: Faixas do ECE
        max_redraws: Novos sorteios por reamostra degenerada

    Returns:
        (limite inferior, limite superior)

    Raises:
        DegenerateClasses: As amostras originais já são degeneradas
        TooManyDegenerateResamples: Menos da metade das reamostras é válida
    """
    fn = metric_function(metric, n_bins) if isinstance(metric, str) else metric
    probs, labels = _arrays(samples)
    point = fn(probs, labels)

    n = labels.size
    stats: List[float] = []
    skipped = 0
    for child in np.random.SeedSequence(seed).spawn(n_resamples):
        rng = np.random.default_rng(child)
        for _ in range(max_redraws + 1):
            idx = rng.integers(0, n, size=n)
            try:
                stats.append(fn(probs[idx], labels[idx]))
                break
            except DegenerateClasses:
                continue
        else:
            skipped += 1

    if skipped:
        logger.warning(f"Bootstrap: {skipped} de {n_resamples} reamostras degeneradas descartadas")
    if len(stats) < n_resamples / 2:
        raise TooManyDegenerateResamples(
            f"Apenas {len(stats)} de {n_resamples} reamostras válidas"
        )

    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(np.array(stats), [100.0 * alpha, 100.0 * (1.0 - alpha)])
    low, high = float(low), float(high)
    if not low <= point <= high:
        logger.info(f"Bootstrap: intervalo [{low:.4f}, {high:.4f}] estendido até a estimativa pontual {point:.4f}")
        low, high = min(low, point), max(high, point)
    return low, high


# ============================================================================
# RELATÓRIO
# ============================================================================

def _metric_value(
    name: str,
    samples: Sequence[ScoredSample],
    n_resamples: int,
    seed: int,
    level: float,
    n_bins: int,
) -> MetricValue:
    fn = metric_function(name, n_bins)
    try:
        point = fn(*_arrays(samples))
    except (DegenerateClasses, EmptyInput) as exc:
        logger.warning(f"{name.upper()} indefinido: {exc}")
        return MetricValue()
    try:
        low, high = bootstrap_ci(fn, samples, n_resamples=n_resamples, seed=seed, level=level)
    except (DegenerateClasses, TooManyDegenerateResamples) as exc:
        logger.warning(f"IC de {name.upper()} indisponível: {exc}")
        return MetricValue(point=point)
    return MetricValue(point=point, ci_low=low, ci_high=high)


def evaluate(
    samples: Sequence[ScoredSample],
    n_error_records: int = 0,
    n_bins: int = 10,
    n_resamples: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    **labels: str,
) -> MetricReport:
    """
    AUROC, AUPRC e ECE com intervalos de confiança.

    Args:
        samples: Amostras válidas (registros com erro já excluídos)
        n_error_records: Registros excluídos por erro, reportados à parte
        n_bins: Faixas do ECE
        n_resamples: Reamostras do bootstrap
        seed: Semente do bootstrap
        level: Nível de confiança
        **labels: task_id, backbone, protocol, strategy, modalities, serialization

    Returns:
        MetricReport
    """
    logger.info(f"Avaliando {len(samples)} amostras ({n_error_records} excluídas por erro)")
    values: Dict[str, MetricValue] = {
        name: _metric_value(name, samples, n_resamples, seed, level, n_bins)
        for name in ("auroc", "auprc", "ece")
    }
    return MetricReport(
        n_samples=len(samples),
        n_error_records=n_error_records,
        n_bins=n_bins,
        ci_method=f"percentile bootstrap (n={n_resamples}, level={level:g}, seed={seed})",
        **values,
        **labels,
    )


def consensus_stats(
    traces: Sequence[DebateTrace],
    samples: Optional[Sequence[ScoredSample]] = None,
) -> ConsensusStats:
    """
    Distribuição da rodada de consenso e AUROC das probabilidades finais.

    Args:
        traces: Traces de debate de uma execução
        samples: Probabilidade final e rótulo de cada trace, para o AUROC

    Returns:
        ConsensusStats com contagens e percentuais por rodada (e "MAX")
    """
    max_rounds = max((t.max_rounds for t in traces), default=0)
    keys = [str(r) for r in range(1, max_rounds + 1)] + ["MAX"]
    counts = {k: 0 for k in keys}
    for trace in traces:
        counts[str(trace.consensus_round)] += 1

    total = len(traces)
    percentages = {k: (100.0 * v / total if total else 0.0) for k, v in counts.items()}

    value: Optional[float] = None
    if samples:
        try:
            value = auroc(samples)
        except (DegenerateClasses, EmptyInput) as exc:
            logger.warning(f"AUROC do debate indefinido: {exc}")
    return ConsensusStats(max_rounds=max_rounds, total=total, counts=counts, percentages=percentages, auroc=value)
