"""
Router de avaliação de métricas.
"""

from typing import List

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field

from app.core.exceptions import DegenerateClasses, EmptyInput, TooManyDegenerateResamples
from app.models.experiment import MetricReport, ScoredSample
from app.services.metrics_service import evaluate

router = APIRouter(prefix="/metrics", tags=["metrics"])


class EvaluateRequest(BaseModel):
    """Amostras pontuadas e parâmetros do bootstrap."""
    samples: List[ScoredSample] = Field(min_length=1)
    n_bins: int = Field(default=10, ge=1, le=100)
    n_resamples: int = Field(default=200, ge=10, le=5000)
    seed: int = 0
    level: float = Field(default=0.95, gt=0, lt=1)


@router.post("/evaluate", response_model=MetricReport)
async def evaluate_samples(request: EvaluateRequest):
    """
    Calcula AUROC, AUPRC e ECE com intervalos por bootstrap.

    Amostras de uma só classe não têm AUROC definido e retornam 400.
    """
    labels = {s.label for s in request.samples}
    if len(labels) < 2:
        raise HTTPException(status_code=400, detail="As amostras devem conter as duas classes")
    try:
        return evaluate(
            request.samples,
            n_bins=request.n_bins,
            n_resamples=request.n_resamples,
            seed=request.seed,
            level=request.level,
        )
    except (DegenerateClasses, EmptyInput, TooManyDegenerateResamples) as exc:
        raise HTTPException(status_code=400, detail=str(exc))
