"""
Vocabulário clínico compartilhado: as 17 variáveis de EHR e a regra de decisão.
"""

import re
from typing import Dict, List, Tuple

# Ordem documentada: 5 categóricas seguidas de 12 contínuas.
_CATEGORICAL_DISPLAY: Tuple[str, ...] = (
    "capillary refill rate",
    "Glasgow coma scale eye opening",
    "Glasgow coma scale motor response",
    "Glasgow coma scale verbal response",
    "Glasgow coma scale total",
)

_CONTINUOUS_DISPLAY: Tuple[str, ...] = (
    "diastolic blood pressure",
    "fraction inspired oxygen",
    "glucose",
    "heart rate",
    "height",
    "mean blood pressure",
    "oxygen saturation",
    "respiratory rate",
    "systolic blood pressure",
    "temperature",
    "weight",
    "pH",
)


def variable_key(name: str) -> str:
    """Normaliza um nome de variável para snake_case minúsculo."""
    return re.sub(r"[^a-z0-9]+", "_", name.strip().lower()).strip("_")


def canonical_variables() -> List[str]:
    """
    Retorna os 17 nomes canônicos na grafia de exibição.

    Returns:
        Lista com 5 variáveis categóricas seguidas de 12 contínuas
    """
    return list(_CATEGORICAL_DISPLAY + _CONTINUOUS_DISPLAY)


CATEGORICAL_KEYS: Tuple[str, ...] = tuple(variable_key(n) for n in _CATEGORICAL_DISPLAY)
CONTINUOUS_KEYS: Tuple[str, ...] = tuple(variable_key(n) for n in _CONTINUOUS_DISPLAY)
CANONICAL_KEYS: Tuple[str, ...] = CATEGORICAL_KEYS + CONTINUOUS_KEYS

# Posição canônica de cada chave, usada para ordenar saídas por variável.
VARIABLE_ORDER: Dict[str, int] = {key: idx for idx, key in enumerate(CANONICAL_KEYS)}

DISPLAY_NAMES: Dict[str, str] = {
    variable_key(name): name for name in canonical_variables()
}


def is_categorical(key: str) -> bool:
    """Indica se a variável (já normalizada) é categórica."""
    return key in CATEGORICAL_KEYS


def decide(probability: float, threshold: float) -> bool:
    """
    Converte probabilidade em rótulo binário.

    A comparação é estrita: empate no limiar prediz negativo.

    Args:
        probability: Probabilidade da classe positiva em [0, 1]
        threshold: Limiar de decisão em (0, 1)

    Returns:
        True se probability > threshold
    """
    return probability > threshold
